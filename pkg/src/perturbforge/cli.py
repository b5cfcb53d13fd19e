"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or training error.
Every subcommand writes under ``--out`` using the run layout
``checkpoints/``, ``adversarial/``, ``perturbations/`` and ``reports/``.
"""

import argparse
import csv
import json
import os
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import attacks as A
from . import evaluation as EV
from .corpus import SyntheticSpec, generate_synthetic_corpus, load_manifest
from .exceptions import (
    ContractError,
    CorpusError,
    DecodeError,
    DegenerateGradientError,
    DimensionError,
    FormatError,
    NumericalError,
    TrainingError,
)
from .imaging import CannyConcat, load_image, save_image
from .inceptionism import (
    DREAM_ITERATIONS,
    DREAM_STEP,
    cam_to_mask,
    generate_natural_perturbations,
    grad_cam,
    save_natural_perturbations,
)
from .models import TrainConfig, build_classifier, build_surrogate, load_checkpoint, save_checkpoint, train
from .pipeline import PipelineConfig, build_adversarial_corpus, stage_timings

SEED_ENV = "PERTURBFORGE_SEED"
RUN_DIRS = ("checkpoints", "adversarial", "perturbations", "reports")
ATTACK_METHODS = A.METHODS
REPORT_METHODS = A.METHODS + ("pipeline",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- helpers


def _run_dir(out, *sub):
    root = Path(out)
    for d in RUN_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    return root.joinpath(*sub) if sub else root


def resolve_seed(value):
    if value is not None:
        return int(value)
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        seed = int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from exc
    if seed < 0:
        raise UsageError(f"{SEED_ENV} must be non-negative")
    return seed


def _say(msg):
    print(msg, flush=True)


# --------------------------------------------------------------- commands


def cmd_synth(args):
    spec = SyntheticSpec(
        spam_count=args.spam,
        ham_count=args.ham,
        image_size=args.size,
        seed=args.seed,
        noise_level=args.noise,
        text_density=args.density,
        test_fraction=args.test_fraction,
    )
    manifest = generate_synthetic_corpus(spec, args.out)
    _say(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.jsonl'}")


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    trn = manifest.select(split="train")
    tst = manifest.select(split="test")
    X, y = trn.load_images(), trn.labels()
    Xt, yt = (tst.load_images(), tst.labels()) if len(tst) else (None, None)
    if args.surrogate:
        spec = build_surrogate(args.model, X.shape[1], labels_inverted=args.inverted)
    else:
        spec = build_classifier(args.model, labels_inverted=args.inverted)
        pre = CannyConcat()
        X = pre.transform(X)
        Xt = pre.transform(Xt) if Xt is not None else None
    cfg = TrainConfig(args.epochs, args.batch_size, args.learning_rate, args.momentum, args.seed)
    ckpt = train(spec, X, y, cfg, Xt, yt, corpus_id=manifest.corpus_id)
    name = args.name or "_".join([args.model] + (["surrogate"] if args.surrogate else [])
                                 + (["inverted"] if args.inverted else []))
    path = _run_dir(args.out, "checkpoints", f"{name}.pfck")
    save_checkpoint(ckpt, path)
    acc = ckpt.metadata.get("test_accuracy")
    _say(f"saved {path}" + (f" (test accuracy {acc:.4f})" if acc is not None else ""))


def _attack_config(method, args):
    if method == "fgsm":
        return A.FgsmConfig(args.perturbation_magnitude)
    if method == "cw":
        return A.CwConfig(
            confidence=args.target_confidence,
            learning_rate=args.learning_rate,
            binary_search_steps=args.binary_search_steps,
            max_iterations=args.max_iterations or 250,
            initial_const=args.initial_trade_off,
            batch_size=args.batch_size,
        )
    if method == "deepfool":
        return A.DeepFoolConfig(args.max_iterations or 500, args.overshoot_parameter, args.class_gradients,
                                args.batch_size)
    if method == "universal":
        return _universal_config(args)
    return None


def _universal_config(args):
    return A.UniversalConfig(
        target_accuracy=args.target_accuracy,
        max_iterations=args.max_iterations or 250,
        xi=args.step_size / 255.0,
        norm=args.norm,
        fgsm_epsilon=args.perturbation_magnitude,
        seed=args.seed,
    )


def _limit(manifest, limit):
    if limit is None:
        return manifest
    return type(manifest)(manifest.entries[:limit], manifest.corpus_id, manifest.root)


def _fit_universal(args, manifest, surrogate):
    fit = _limit(manifest.select(split=args.fit_split, label="spam"), args.fit_limit)
    if len(fit) == 0:
        raise CorpusError(f"no spam images in split {args.fit_split!r} to fit the universal perturbation")
    result, seconds = A.fit_universal(surrogate, fit.load_images(), _universal_config(args))
    path = _run_dir(args.out, "perturbations", "universal.uprt")
    A.save_perturbation(result.artifact, path)
    with open(_run_dir(args.out, "reports", "universal_fit.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("pass", "accuracy"))
        for i, acc in enumerate(result.accuracy_history):
            w.writerow((i, repr(acc)))
    return result, seconds, len(fit), path


def cmd_universal(args):
    manifest = load_manifest(args.manifest)
    surrogate = load_checkpoint(args.surrogate)
    result, seconds, n, path = _fit_universal(args, manifest, surrogate)
    _say(f"saved {path}: fooling rate {result.fooling_rate:.4f}, accuracy {result.accuracy:.4f} "
         f"after {result.passes} passes on {n} images")


def cmd_attack(args):
    method = args.method
    manifest = load_manifest(args.manifest)
    surrogate = load_checkpoint(args.surrogate)
    base = load_checkpoint(args.base)
    spam = _limit(manifest.select(split=args.split, label="spam"), args.limit)
    ham = manifest.select(split=args.split, label="ham")
    cfg = _attack_config(method, args)
    artifact, fit_seconds, fit_count = None, 0.0, 1
    if method == "universal":
        if args.perturbation:
            artifact = A.load_perturbation(args.perturbation)
        else:
            result, fit_seconds, fit_count, _ = _fit_universal(args, manifest, surrogate)
            artifact = result.artifact
    adv_dir = _run_dir(args.out, "adversarial", method)
    outputs = A.attack_corpus(method, surrogate, spam.paths(), adv_dir, cfg, artifact, fit_seconds, fit_count)
    report = A.run_transfer_evaluation(outputs, base, method)
    rep_dir = _run_dir(args.out, "reports", "attacks")
    rep_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(rep_dir / f"{method}.csv")
    report.write_scores_csv(rep_dir / f"{method}_scores.csv")
    ham_paths = [str(p) for p in ham.paths()]
    EV.write_scores_csv(ham_paths, EV.score_paths(base, ham_paths), rep_dir / f"{method}_ham_scores.csv")
    _say(f"{method}: {len(report.records)} images, base accuracy {report.accuracy:.4f}, "
         f"surrogate success {report.success_rate:.4f}, mean l2 {report.mean_l2:.2f}")


def cmd_dream(args):
    manifest = load_manifest(args.manifest)
    inverted = load_checkpoint(args.inverted)
    ham = _limit(manifest.select(split=args.split, label="ham"), args.limit)
    perts = generate_natural_perturbations(inverted, ham.paths(), [e.path for e in ham.entries],
                                           args.iterations, args.step)
    out = _run_dir(args.out, "perturbations", "natural")
    save_natural_perturbations(perts, out)
    _say(f"wrote {len(perts)} natural perturbations to {out}")


def cmd_gradcam(args):
    ckpt = load_checkpoint(args.checkpoint)
    network = ckpt.network()
    rep = _run_dir(args.out, "reports")
    if args.image:
        x = load_image(args.image)
        cam = grad_cam(network, EV.model_inputs(network, x[None])[0])
        stem = Path(args.image).stem
        EV.write_heatmap_csv(cam.values, rep / f"cam_{stem}.csv")
        save_image(cam_to_mask(cam, x.shape[:2]), _run_dir(args.out, "perturbations", f"mask_{stem}.png"))
        _say(f"wrote {rep / f'cam_{stem}.csv'}")
        return
    if args.manifest is None:
        raise UsageError("gradcam needs --image or --manifest")
    manifest = _limit(load_manifest(args.manifest).select(split=args.split, label=args.label), args.limit)
    if len(manifest) == 0:
        raise CorpusError(f"no {args.label} images in split {args.split!r}")
    heat = EV.average_cam_heatmap(network, EV.model_inputs(network, manifest.load_images()))
    name = args.name or Path(args.manifest).parent.name or "corpus"
    EV.write_heatmap_csv(heat, rep / f"heatmap_{name}.csv")
    _say(f"heatmap over {heat.count} images, spatial variance {heat.spatial_variance:.6f}")


def cmd_pipeline(args):
    cfg = PipelineConfig(
        manifest=args.manifest,
        cam_model=args.cam_model,
        surrogate=args.surrogate,
        out_dir=_run_dir(args.out),
        inverted_model=args.inverted,
        target_model=args.target,
        universal=_universal_config(args),
        seed=args.seed,
        alpha=args.alpha,
        refit_universal=args.perturbation is None,
        universal_artifact=args.perturbation,
        natural_dir=args.natural,
        spam_split=args.split,
        fit_split=args.fit_split,
        dream_limit=args.dream_limit,
        dream_iterations=args.iterations,
        dream_step=args.step,
    )
    result = build_adversarial_corpus(cfg)
    _say(f"pipeline: {len(result.manifest)} images, {len(result.failures)} failures, "
         f"target accuracy {result.report.accuracy:.4f}")
    if result.timings:
        _say("mean seconds: " + ", ".join(f"{k} {v:.4f}" for k, v in stage_timings(result).items()))
    for f in result.failures:
        print(f"failed [{f.stage}] {f.path}: {f.message}", file=sys.stderr)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    acc = EV.accuracy(ckpt, manifest, split=args.split, label=args.label)
    n = len(manifest.select(split=args.split, label=args.label))
    rep = _run_dir(args.out, "reports")
    name = args.name or Path(args.checkpoint).stem
    with open(rep / f"eval_{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("checkpoint", "split", "label", "count", "accuracy"))
        w.writerow((Path(args.checkpoint).name, args.split or "all", args.label or "all", n, repr(acc)))
    _say(f"accuracy {acc:.4f} on {n} images")


def _load_reports(run):
    rep_dir = Path(run) / "reports" / "attacks"
    reports = {}
    for method in REPORT_METHODS:
        path = rep_dir / f"{method}.csv"
        if path.is_file():
            reports[method] = A.read_report_csv(path, method)
    if not reports:
        expected = "\n  ".join(str(rep_dir / f"{m}.csv") for m in REPORT_METHODS)
        raise CorpusError(f"no attack reports in {run}; expected at least one of:\n  {expected}")
    return reports


def _safe_skew(values):
    try:
        return EV.skewness(values)
    except (ContractError, NumericalError):
        return float("nan")


def build_report(run, bins=10):
    """Consolidate every attack report of a run into tables, ROC and histogram CSVs."""
    reports = _load_reports(run)
    out = Path(run) / "reports" / "summary"
    out.mkdir(parents=True, exist_ok=True)
    rep_dir = Path(run) / "reports" / "attacks"
    acc_rows, l2_rows, time_rows, auc_rows = [], [], [], []
    for method, rep in reports.items():
        n = len(rep.records)
        l2s = [r.l2 for r in rep.records]
        acc_rows.append((method, n, repr(rep.accuracy), repr(rep.success_rate)))
        l2_rows.append((method, n, repr(rep.mean_l2), repr(_safe_skew(l2s))))
        time_rows.append((method, n, f"{rep.mean_seconds:.6f}"))
        if n:
            edges, counts = EV.density_histogram(l2s, bins)
            EV.write_histogram_csv(edges, counts, out / f"l2_histogram_{method}.csv")
        ham_file = rep_dir / f"{method}_ham_scores.csv"
        if n and ham_file.is_file() and all(np.isfinite(r.spam_score) for r in rep.records):
            ham = EV.read_scores_csv(ham_file)
            if ham:
                labels = np.r_[np.ones(n), np.zeros(len(ham))]
                attacked = EV.roc_auc(np.r_[[r.spam_score for r in rep.records], ham], labels)
                clean = EV.roc_auc(np.r_[[r.original_score for r in rep.records], ham], labels)
                EV.write_roc_csv(attacked, out / f"roc_{method}.csv")
                EV.write_roc_csv(clean, out / f"roc_{method}_clean.csv")
                auc_rows.append((method, repr(clean.auc), repr(attacked.auc)))
    EV.write_table(acc_rows, ("method", "count", "accuracy", "surrogate_success_rate"),
                   out / "accuracy.csv", out / "accuracy.txt")
    EV.write_table(l2_rows, ("method", "count", "mean_l2", "l2_skewness"), out / "l2.csv", out / "l2.txt")
    EV.write_table(time_rows, ("method", "count", "mean_seconds"), out / "time.csv", out / "time.txt")
    EV.write_table(auc_rows, ("method", "clean_auc", "attacked_auc"), out / "auc.csv", out / "auc.txt")
    u_rows = []
    for a, b in combinations(sorted(reports), 2):
        la = [r.l2 for r in reports[a].records]
        lb = [r.l2 for r in reports[b].records]
        if la and lb:
            res = EV.mann_whitney_u(la, lb)
            u_rows.append((a, b, len(la), len(lb), repr(res.u_statistic), repr(res.p_value), res.method))
    EV.write_table(u_rows, ("method_a", "method_b", "n_a", "n_b", "u", "p_value", "test"),
                   out / "utest_l2.csv", out / "utest_l2.txt")
    return out


def cmd_report(args):
    out = build_report(args.run, args.bins)
    _say((out / "accuracy.txt").read_text(encoding="utf-8").rstrip())
    _say(f"tables written to {out}")


# ------------------------------------------------------------------ parser


def _common(p, out_required=True):
    p.add_argument("--config", help="JSON file whose keys set default values for this command's flags")
    p.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, else 0")
    p.add_argument("--out", required=out_required, help="run (or corpus) directory")


def _universal_flags(p):
    p.add_argument("--target-accuracy", type=float, default=0.0)
    p.add_argument("--step-size", type=float, default=64.0, help="L-inf budget on the 0-255 pixel scale")
    p.add_argument("--norm", default="inf", choices=("inf",))
    p.add_argument("--perturbation-magnitude", "--epsilon", type=float, default=0.1,
                   help="FGSM step (also the universal base attack step)")
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--fit-split", default="train")
    p.add_argument("--fit-limit", type=int, default=None)


def build_parser():
    parser = _Parser(prog="perturbforge", description="Adversarial attacks on image-spam classifiers")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic spam/ham corpus")
    _common(p)
    p.add_argument("--spam", type=int, default=200)
    p.add_argument("--ham", type=int, default=200)
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--density", type=float, default=0.6)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier or surrogate checkpoint")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=("cnn", "mlp"), default="cnn")
    p.add_argument("--surrogate", action="store_true", help="train on full-size images through the surrogate front end")
    p.add_argument("--inverted", action="store_true", help="train with inverted labels")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack spam images on a surrogate and evaluate on a base model")
    _common(p)
    p.add_argument("--method", choices=ATTACK_METHODS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--target-confidence", "--confidence", type=float, default=0.0)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--binary-search-steps", type=int, default=20)
    p.add_argument("--initial-trade-off", "--initial-const", type=float, default=100.0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--overshoot-parameter", "--overshoot", type=float, default=1e-6)
    p.add_argument("--class-gradients", type=int, default=10)
    p.add_argument("--perturbation", default=None, help="reuse a saved universal perturbation")
    _universal_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("universal", help="fit and save a universal perturbation")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--surrogate", required=True)
    _universal_flags(p)
    p.set_defaults(func=cmd_universal)

    p = sub.add_parser("dream", help="dream ham images into natural perturbations")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--inverted", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--iterations", type=int, default=DREAM_ITERATIONS)
    p.add_argument("--step", type=float, default=DREAM_STEP)
    p.set_defaults(func=cmd_dream)

    p = sub.add_parser("gradcam", help="class activation map of one image or an averaged heatmap")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--label", default="spam", choices=("spam", "ham"))
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("pipeline", help="build the natural + universal adversarial spam corpus")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cam-model", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--inverted", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--natural", default=None, help="directory of saved natural perturbations")
    p.add_argument("--perturbation", default=None, help="reuse a saved universal perturbation")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--split", default=None)
    p.add_argument("--dream-limit", type=int, default=40)
    p.add_argument("--iterations", type=int, default=DREAM_ITERATIONS)
    p.add_argument("--step", type=float, default=DREAM_STEP)
    _universal_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a manifest subset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--label", default=None, choices=("spam", "ham"))
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="consolidate the attack reports of a run directory")
    _common(p, out_required=False)
    p.add_argument("--run", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_report)
    return parser


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install the JSON config's keys as defaults so explicit flags still win."""
    path = _config_path(argv)
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is None or command not in subparsers:
        return
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subparsers[command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults and action.required:
            action.required = False


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"perturbforge: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.seed = resolve_seed(args.seed)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"perturbforge: error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, DecodeError, FormatError, DimensionError, FileNotFoundError) as exc:
        print(f"perturbforge: data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericalError, DegenerateGradientError) as exc:
        print(f"perturbforge: runtime error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, ValueError) as exc:
        print(f"perturbforge: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"perturbforge: data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"perturbforge: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
