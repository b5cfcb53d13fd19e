"""End-to-end construction of the modified adversarial spam corpus.

Each spam image gets a Grad-CAM mask from the normally trained CNN, a
randomly chosen natural perturbation blended into its low-attention
regions, and finally one shared universal perturbation.
"""

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import SPAM
from .attacks import (
    AttackOutput,
    AttackReport,
    UniversalConfig,
    apply_perturbation,
    fit_universal,
    load_perturbation,
    run_transfer_evaluation,
    save_adversarial,
    save_perturbation,
)
from .corpus import CorpusManifest, Entry, load_manifest, save_manifest
from .evaluation import model_inputs, score_paths, write_scores_csv
from .exceptions import ContractError, CorpusError
from .imaging import load_image
from .inceptionism import (
    ALPHA,
    DREAM_ITERATIONS,
    DREAM_STEP,
    apply_natural,
    cam_to_mask,
    generate_natural_perturbations,
    grad_cam,
    load_natural_perturbations,
    save_natural_perturbations,
)
from .models import Checkpoint, as_network, load_checkpoint

STAGES = ("cam", "mask", "natural", "universal")


def _load_model(ref, role):
    if ref is None:
        return None
    if isinstance(ref, (str, os.PathLike)):
        return load_checkpoint(ref)
    if isinstance(ref, Checkpoint):
        return ref
    raise ContractError(f"{role}: expected a checkpoint path or Checkpoint, got {type(ref).__name__}")


@dataclass
class PipelineConfig:
    """Inputs of one pipeline run.

    ``cam_model`` is the normally trained CNN used for Grad-CAM,
    ``inverted_model`` dreams the ham images, ``surrogate`` is attacked by
    the universal perturbation and ``target_model`` (default: ``cam_model``)
    classifies the output for the report.
    """

    manifest: object
    cam_model: object
    surrogate: object
    out_dir: object
    inverted_model: object = None
    target_model: object = None
    universal: UniversalConfig = field(default_factory=UniversalConfig)
    seed: int = 0
    alpha: float = ALPHA
    refit_universal: bool = True
    universal_artifact: object = None
    natural_dir: object = None
    spam_split: str = None
    fit_split: str = "train"
    dream_limit: int = 40
    dream_iterations: int = DREAM_ITERATIONS
    dream_step: float = DREAM_STEP

    def __post_init__(self):
        if isinstance(self.manifest, (str, os.PathLike)):
            self.manifest = load_manifest(self.manifest)
        self.cam_model = _load_model(self.cam_model, "cam_model")
        self.surrogate = _load_model(self.surrogate, "surrogate")
        self.inverted_model = _load_model(self.inverted_model, "inverted_model")
        self.target_model = _load_model(self.target_model, "target_model") or self.cam_model
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be within [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.natural_dir is None and self.inverted_model is None:
            raise ContractError("either natural_dir or inverted_model is required")
        if not self.refit_universal and self.universal_artifact is None:
            raise ContractError("refit_universal=False needs a universal_artifact path")
        out = Path(self.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CorpusError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise CorpusError(f"output directory {out} is not writable")
        self.out_dir = out


@dataclass
class StageTiming:
    path: str
    cam: float = 0.0
    mask: float = 0.0
    natural: float = 0.0
    universal: float = 0.0
    total: float = 0.0


@dataclass
class PipelineFailure:
    path: str
    stage: str
    message: str


@dataclass
class PipelineResult:
    manifest: CorpusManifest
    report: AttackReport
    artifact: object
    timings: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    universal_seconds: float = 0.0
    natural_images: dict = field(default_factory=dict)


def _natural_perturbations(cfg):
    if cfg.natural_dir is not None:
        perts = load_natural_perturbations(cfg.natural_dir)
    else:
        ham = cfg.manifest.select(split="train", label="ham")
        if len(ham) == 0:
            ham = cfg.manifest.select(label="ham")
        paths = ham.paths()[: cfg.dream_limit]
        perts = generate_natural_perturbations(
            cfg.inverted_model, paths, [e.path for e in ham.entries[: cfg.dream_limit]],
            cfg.dream_iterations, cfg.dream_step,
        )
        save_natural_perturbations(perts, cfg.out_dir / "perturbations" / "natural")
    if not perts:
        raise ContractError("no natural perturbations available (need at least 4 ham images)")
    return perts


def build_adversarial_corpus(cfg):
    """Run CAM, mask, natural blend and universal perturbation over the spam subset."""
    out = cfg.out_dir
    adv_dir = out / "adversarial" / "pipeline"
    reports = out / "reports" / "attacks"
    adv_dir.mkdir(parents=True, exist_ok=True)
    reports.mkdir(parents=True, exist_ok=True)
    spam = cfg.manifest.select(split=cfg.spam_split, label="spam")
    if len(spam) == 0:
        empty = CorpusManifest([], "pipeline", adv_dir)
        save_manifest(empty, adv_dir / "manifest.jsonl")
        report = AttackReport("pipeline")
        report.write_csv(reports / "pipeline.csv")
        return PipelineResult(empty, report, None)

    perts = _natural_perturbations(cfg)
    rng = np.random.default_rng(cfg.seed)
    choices = rng.integers(len(perts), size=len(spam))
    cam_net = as_network(cfg.cam_model)
    surrogate = as_network(cfg.surrogate)

    naturals, timings, failures = {}, {}, []
    for i, entry in enumerate(spam.entries):
        path = str(spam.resolve(entry))
        timing = StageTiming(path)
        stage = "load"
        try:
            t_start = time.perf_counter()
            x = load_image(path)
            if x.shape != tuple(surrogate.spec.input_shape):
                raise ContractError(f"image shape {x.shape} != surrogate input {surrogate.spec.input_shape}")
            stage = "cam"
            t0 = time.perf_counter()
            cam = grad_cam(cam_net, model_inputs(cam_net, x[None])[0])
            t1 = time.perf_counter()
            stage = "mask"
            mask = cam_to_mask(cam, x.shape[:2])
            t2 = time.perf_counter()
            stage = "natural"
            nat = apply_natural(x, perts[int(choices[i])], mask, cfg.alpha)
            t3 = time.perf_counter()
            timing.cam, timing.mask, timing.natural = t1 - t0, t2 - t1, t3 - t2
            timing.total = t3 - t_start
            naturals[i] = nat
            timings[i] = timing
        except Exception as exc:  # noqa: BLE001 - failures are isolated per image
            failures.append(PipelineFailure(path, stage, f"{type(exc).__name__}: {exc}"))

    universal_seconds = 0.0
    if cfg.refit_universal:
        fit_idx = [i for i in naturals if spam.entries[i].split == cfg.fit_split] or list(naturals)
        if fit_idx:
            result, universal_seconds = fit_universal(surrogate, np.stack([naturals[i] for i in fit_idx]),
                                                      cfg.universal)
            artifact = result.artifact
        else:
            artifact = None
    else:
        artifact = load_perturbation(cfg.universal_artifact)
    if artifact is not None:
        save_perturbation(artifact, out / "perturbations" / "universal.uprt")

    entries, outputs, kept = [], [], []
    for i in sorted(naturals):
        entry = spam.entries[i]
        timing = timings[i]
        try:
            t0 = time.perf_counter()
            adv = apply_perturbation(naturals[i], artifact.vector)
            timing.universal = time.perf_counter() - t0
            name = Path(entry.path).stem + ".png"
            x = load_image(timing.path)
            t1 = time.perf_counter()
            save_adversarial(x, adv, adv_dir / name)
            timing.total += timing.universal + (time.perf_counter() - t1)
        except Exception as exc:  # noqa: BLE001
            failures.append(PipelineFailure(timing.path, "universal", f"{type(exc).__name__}: {exc}"))
            continue
        entries.append(Entry(name, "spam", entry.split))
        outputs.append(AttackOutput(timing.path, str(adv_dir / name), True, timing.total, artifact.sha256))
        kept.append(timing)

    manifest = CorpusManifest(entries, "pipeline", adv_dir)
    save_manifest(manifest, adv_dir / "manifest.jsonl")
    report = run_transfer_evaluation(outputs, cfg.target_model, "pipeline") if outputs else AttackReport("pipeline")
    surrogate_labels = _surrogate_labels(surrogate, outputs)
    for rec, label in zip(report.records, surrogate_labels):
        rec.success = label != SPAM
    report.write_csv(reports / "pipeline.csv")
    report.write_scores_csv(reports / "pipeline_scores.csv")
    ham = cfg.manifest.select(split=cfg.spam_split, label="ham")
    ham_paths = [str(p) for p in ham.paths()]
    write_scores_csv(ham_paths, score_paths(cfg.target_model, ham_paths), reports / "pipeline_ham_scores.csv")
    _write_records(adv_dir / "records.jsonl", spam, naturals, choices, artifact, entries)
    _write_timings(reports / "pipeline_timings.csv", kept, universal_seconds)
    _write_summary(reports / "pipeline_summary.txt", report, failures, kept, universal_seconds, artifact)
    return PipelineResult(manifest, report, artifact, kept, failures, universal_seconds, naturals)


def _surrogate_labels(surrogate, outputs):
    labels = []
    for o in outputs:
        x = load_image(o.adversarial)
        labels.append(int(surrogate.logits(x[None]).argmax(axis=1)[0]))
    return labels


def _write_records(path, spam, naturals, choices, artifact, entries):
    """Deterministic per-image provenance (no timings)."""
    by_name = {e.path: e for e in entries}
    with open(path, "w", encoding="utf-8") as fh:
        for i in sorted(naturals):
            name = Path(spam.entries[i].path).stem + ".png"
            if name not in by_name:
                continue
            fh.write(json.dumps({
                "path": name,
                "original": spam.entries[i].path,
                "split": spam.entries[i].split,
                "natural_index": int(choices[i]),
                "perturbation_sha256": artifact.sha256,
            }) + "\n")


def _write_timings(path, timings, universal_seconds):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("path,cam,mask,natural,universal,total\n")
        for t in timings:
            fh.write(f"{t.path},{t.cam:.6f},{t.mask:.6f},{t.natural:.6f},{t.universal:.6f},{t.total:.6f}\n")
        fh.write(f"# universal fit seconds: {universal_seconds:.6f}\n")


def _write_summary(path, report, failures, timings, universal_seconds, artifact):
    lines = [
        f"images: {len(report.records)}",
        f"failures: {len(failures)}",
        f"target accuracy: {report.accuracy:.4f}",
        f"surrogate success rate: {report.success_rate:.4f}",
        f"mean l2: {report.mean_l2:.2f}",
        f"universal perturbation sha256: {artifact.sha256 if artifact is not None else '-'}",
        f"universal fit seconds: {universal_seconds:.3f}",
    ]
    if timings:
        for stage, mean in stage_timings(timings).items():
            lines.append(f"mean {stage} seconds: {mean:.4f}")
    for f in failures:
        lines.append(f"failed [{f.stage}] {f.path}: {f.message}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_timings(result):
    """Mean seconds per stage and per example over a pipeline run."""
    timings = result.timings if isinstance(result, PipelineResult) else list(result)
    if not timings:
        raise ContractError("stage_timings needs at least one timed example")
    means = {s: float(np.mean([getattr(t, s) for t in timings])) for s in STAGES}
    means["total"] = float(np.mean([t.total for t in timings]))
    return means
