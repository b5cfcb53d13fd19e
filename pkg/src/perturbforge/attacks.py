"""FGSM, Carlini-Wagner L2, DeepFool and universal perturbations.

All attacks take a model (``Network``, ``Checkpoint`` or fitted
``SpamClassifier``), images as float arrays in [0, 1] and labels given as
raw output-neuron indices.
"""

import csv
import hashlib
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import engine as E
from ._validation import LABEL_NAMES, SPAM, as_float, check_image, check_images
from .exceptions import (
    ContractError,
    DegenerateGradientError,
    DimensionError,
    FormatError,
    ManifestValidationError,
)
from .imaging import load_image, preprocess_concat, save_image
from .models import as_network, gradient_wrt_input

# ------------------------------------------------------------------ configs


@dataclass
class FgsmConfig:
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class CwConfig:
    confidence: float = 0.0
    learning_rate: float = 0.001
    binary_search_steps: int = 20
    max_iterations: int = 250
    initial_const: float = 100.0
    batch_size: int = 1
    abort_early: bool = True

    def __post_init__(self):
        if self.confidence < 0 or self.learning_rate <= 0 or self.initial_const <= 0:
            raise ValueError("confidence must be >= 0; learning_rate and initial_const > 0")
        if self.binary_search_steps < 1 or self.max_iterations < 1 or self.batch_size < 1:
            raise ValueError("binary_search_steps, max_iterations and batch_size must be positive")


@dataclass
class DeepFoolConfig:
    max_iterations: int = 500
    overshoot: float = 1e-6
    # accepted for parity with multi-class DeepFool; a binary model has one boundary
    class_gradients: int = 10
    batch_size: int = 1

    def __post_init__(self):
        if self.max_iterations < 1 or self.overshoot < 0:
            raise ValueError("max_iterations must be positive and overshoot >= 0")


@dataclass
class UniversalConfig:
    target_accuracy: float = 0.0
    max_iterations: int = 250
    xi: float = 64.0 / 255.0
    norm: str = "inf"
    base_attack: str = "fgsm"
    fgsm_epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must be within [0, 1]")
        if self.xi < 0 or self.max_iterations < 1:
            raise ValueError("xi must be >= 0 and max_iterations positive")
        if self.norm != "inf" or self.base_attack != "fgsm":
            raise ValueError("only the L-inf norm with an FGSM base attack is supported")


# -------------------------------------------------------------------- FGSM


def fgsm(model, x, y, cfg=None):
    """One signed-gradient step of size epsilon on the cross-entropy, clipped to [0, 1]."""
    cfg = cfg or FgsmConfig()
    network = as_network(model)
    x = check_image(x, network.spec.input_shape)
    if cfg.epsilon == 0:
        return x.copy()
    g = gradient_wrt_input(network, x, y)
    x64 = x.astype(np.float64)
    adv = np.clip(x64 + cfg.epsilon * np.sign(g), 0.0, 1.0).astype(np.float32)
    # float32 rounding can overshoot epsilon; clamp to the ball with bounds rounded inward
    lo = (x64 - cfg.epsilon).astype(np.float32)
    lo = np.where(lo < x64 - cfg.epsilon, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = (x64 + cfg.epsilon).astype(np.float32)
    hi = np.where(hi > x64 + cfg.epsilon, np.nextafter(hi, np.float32(-np.inf)), hi)
    return np.clip(adv, lo, hi).astype(np.float32)


def float32_radius(r):
    """Largest float32 not exceeding ``r``, so float32 clipping never leaves the ball."""
    r32 = np.float32(r)
    return np.nextafter(r32, np.float32(0)) if float(r32) > float(r) else r32


def _predict_labels(network, X, batch_size=16):
    return network.logits(X, batch_size=batch_size).argmax(axis=1)


# ------------------------------------------------------------ Carlini-Wagner


@dataclass
class CwResult:
    adversarial: np.ndarray
    const: float
    success: bool
    l2: float
    const_history: list = field(default_factory=list)


def _margin_objective(label, other):
    def objective(logits, _):
        return E.sum(E.add(E.select(logits, label), E.scale(E.select(logits, other), -1.0)))

    return objective


def cw_l2(model, x, y, cfg=None):
    """Carlini-Wagner L2 attack with tanh box reparametrisation and a search over ``c``.

    Minimises ``||x' - x||^2 + c * max(z_y - max_{j != y} z_j, -confidence)``.
    """
    cfg = cfg or CwConfig()
    network = as_network(model)
    x = np.asarray(x, dtype=np.float64)
    y = int(y)
    n_classes = network.spec.class_count
    boxed = np.clip(2.0 * x - 1.0, -1.0 + 1e-6, 1.0 - 1e-6)
    w0 = np.arctanh(boxed)

    def objective(logits, captured):
        z = logits.data[0]
        other = max((j for j in range(n_classes) if j != y), key=lambda j: z[j])
        return _margin_objective(y, other)(logits, captured)

    def margin_and_grad(xa):
        g, value, logits = network.input_gradient(xa.astype(E.get_dtype()), objective)
        return value, g.astype(np.float64), logits

    lo, hi, const = 0.0, np.inf, float(cfg.initial_const)
    best_adv, best_l2, best_const = x.astype(np.float32), np.inf, const
    history = []
    for _ in range(cfg.binary_search_steps):
        history.append(const)
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        b1, b2, eps = 0.9, 0.999, 1e-8
        step_success = False
        prev = np.inf
        check_every = max(cfg.max_iterations // 10, 1)
        for it in range(1, cfg.max_iterations + 1):
            xa = (np.tanh(w) + 1.0) / 2.0
            margin, g_margin, logits = margin_and_grad(xa)
            dist = float(np.sum((xa - x) ** 2))
            if margin <= -cfg.confidence:
                # attack holds at this point: record it, hinge gradient is zero
                step_success = True
                if dist < best_l2:
                    best_l2, best_adv, best_const = dist, xa.astype(np.float32), const
                g_margin = np.zeros_like(g_margin)
                loss = dist - const * cfg.confidence
            else:
                loss = dist + const * margin
            g_x = 2.0 * (xa - x) + const * g_margin
            g_w = g_x * (1.0 - np.tanh(w) ** 2) / 2.0
            m = b1 * m + (1 - b1) * g_w
            v = b2 * v + (1 - b2) * g_w**2
            mh = m / (1 - b1**it)
            vh = v / (1 - b2**it)
            w = w - cfg.learning_rate * mh / (np.sqrt(vh) + eps)
            if cfg.abort_early and it % check_every == 0:
                if loss > prev * 0.9999:
                    break
                prev = loss
        if step_success:
            hi = min(hi, const)
            const = (lo + hi) / 2.0
        else:
            lo = max(lo, const)
            const = const * 2.0 if np.isinf(hi) else (lo + hi) / 2.0
    success = np.isfinite(best_l2)
    l2 = float(np.sqrt(best_l2)) if success else 0.0
    return CwResult(best_adv, float(best_const), bool(success), l2, history)


# ----------------------------------------------------------------- DeepFool


@dataclass
class DeepFoolResult:
    adversarial: np.ndarray
    iterations: int
    success: bool
    origin: np.ndarray

    @property
    def perturbation(self):
        return self.adversarial - self.origin


def deepfool(model, x, cfg=None, y=None):
    """Binary DeepFool on the logit difference ``f = z_spam - z_ham``.

    If ``y`` is given and the model already disagrees with it, ``x`` is
    returned unchanged after zero iterations.
    """
    cfg = cfg or DeepFoolConfig()
    network = as_network(model)
    if network.spec.class_count != 2:
        raise ContractError("deepfool is implemented for binary classifiers only")
    x = np.asarray(x, dtype=np.float64)
    objective = _margin_objective(1, 0)

    def f_and_grad(point):
        g, value, _ = network.input_gradient(point.astype(E.get_dtype()), objective)
        return value, g.astype(np.float64)

    f0, grad = f_and_grad(x)
    label0 = int(f0 > 0)
    if y is not None and label0 != int(y):
        return DeepFoolResult(x.astype(np.float32), 0, True, x.astype(np.float32))
    r_tot = np.zeros_like(x)
    f, it = f0, 0
    while (f > 0) == (label0 == 1) and it < cfg.max_iterations:
        norm2 = float(np.sum(grad**2))
        if norm2 == 0.0:
            raise DegenerateGradientError("deepfool: zero gradient of the logit difference")
        r_tot = r_tot - (f / norm2) * grad
        it += 1
        # evaluate the clipped iterate so success refers to a valid image
        f, grad = f_and_grad(np.clip(x + (1.0 + cfg.overshoot) * r_tot, 0.0, 1.0))
    adv = np.clip(x + (1.0 + cfg.overshoot) * r_tot, 0.0, 1.0).astype(np.float32)
    success = (f > 0) != (label0 == 1)
    return DeepFoolResult(adv, it, bool(success), x.astype(np.float32))


# ---------------------------------------------------------------- universal


@dataclass
class PerturbationArtifact:
    vector: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float32)

    @property
    def sha256(self):
        return hashlib.sha256(_encode_perturbation(self.vector)).hexdigest()


def apply_perturbation(x, v):
    x = np.asarray(x)
    v = np.asarray(v, dtype=np.float32)
    if x.shape[-v.ndim :] != v.shape:
        raise DimensionError("apply_perturbation", f"image shape {x.shape} does not end with {v.shape}")
    return np.clip(as_float(x) + v, 0.0, 1.0)


@dataclass
class UniversalResult:
    artifact: PerturbationArtifact
    fooling_rate: float
    accuracy: float
    passes: int
    reached_target: bool
    accuracy_history: list = field(default_factory=list)
    norm_history: list = field(default_factory=list)


def universal_perturbation(model, X, y, cfg=None):
    """Accumulate FGSM increments into one vector ``v`` with ``||v||_inf <= xi``.

    ``X`` is the fitting set (uint8 or float NHWC), ``y`` its raw neuron
    labels. Passes stop once accuracy under ``v`` drops to the target.
    """
    cfg = cfg or UniversalConfig()
    network = as_network(model)
    X = check_images(X, network.spec.input_shape)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ContractError("universal_perturbation needs a nonempty fitting set")
    xi = float32_radius(cfg.xi)
    v = np.zeros(network.spec.input_shape, dtype=np.float32)
    clean = _predict_labels(network, X)
    rng = np.random.default_rng(cfg.seed)
    inner = FgsmConfig(cfg.fgsm_epsilon)

    def accuracy_under(vec):
        pred = np.empty(len(X), dtype=np.int64)
        for i in range(0, len(X), 16):
            pred[i : i + 16] = _predict_labels(network, apply_perturbation(X[i : i + 16], vec))
        return pred

    pred = accuracy_under(v)
    history = [float(np.mean(pred == y))]
    norms = []
    passes = 0
    while history[-1] > cfg.target_accuracy and passes < cfg.max_iterations and xi > 0:
        passes += 1
        for i in rng.permutation(len(X)):
            xv = apply_perturbation(X[i], v)
            if int(_predict_labels(network, xv[None])[0]) != y[i]:
                continue
            step = fgsm(network, xv, y[i], inner) - xv
            v = np.clip(v + step, -xi, xi)
        norms.append(float(np.abs(v).max()))
        pred = accuracy_under(v)
        history.append(float(np.mean(pred == y)))
    acc = history[-1]
    meta = {"xi": float(cfg.xi), "passes": passes, "seed": cfg.seed, "fgsm_epsilon": cfg.fgsm_epsilon}
    return UniversalResult(
        PerturbationArtifact(v, meta),
        fooling_rate=float(np.mean(pred != clean)),
        accuracy=acc,
        passes=passes,
        reached_target=acc <= cfg.target_accuracy,
        accuracy_history=history,
        norm_history=norms,
    )


class UniversalPerturbation(TransformerMixin, BaseEstimator):
    """Fit a universal perturbation on a set of images; transform adds it."""

    def __init__(self, model=None, target_accuracy=0.0, max_iterations=250, xi=64.0 / 255.0,
                 fgsm_epsilon=0.1, random_state=0):
        self.model = model
        self.target_accuracy = target_accuracy
        self.max_iterations = max_iterations
        self.xi = xi
        self.fgsm_epsilon = fgsm_epsilon
        self.random_state = random_state

    def fit(self, X, y=None):
        network = as_network(self.model)
        if y is None:
            y = _predict_labels(network, check_images(X, network.spec.input_shape))
        cfg = UniversalConfig(self.target_accuracy, self.max_iterations, self.xi,
                              fgsm_epsilon=self.fgsm_epsilon, seed=self.random_state)
        result = universal_perturbation(network, X, y, cfg)
        self.result_ = result
        self.perturbation_ = result.artifact.vector
        self.fooling_rate_ = result.fooling_rate
        return self

    def transform(self, X):
        if not hasattr(self, "perturbation_"):
            raise ContractError("UniversalPerturbation is not fitted")
        X = check_images(X, self.perturbation_.shape)
        return apply_perturbation(X, self.perturbation_)


# ------------------------------------------------------------ artifact file

UPRT_MAGIC = b"UPRT"
UPRT_VERSION = 1
_DTYPE_TAGS = {0: "<f4"}


def _encode_perturbation(v):
    v = np.ascontiguousarray(v, dtype="<f4")
    head = UPRT_MAGIC + struct.pack("<HBB", UPRT_VERSION, 0, v.ndim)
    dims = struct.pack(f"<{v.ndim}I", *v.shape)
    return head + dims + v.tobytes()


def save_perturbation(artifact, path):
    vec = artifact.vector if isinstance(artifact, PerturbationArtifact) else np.asarray(artifact)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode_perturbation(vec))
    os.replace(tmp, path)


def load_perturbation(path):
    raw = Path(path).read_bytes()
    if raw[:4] != UPRT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {UPRT_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    version, tag, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != UPRT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    if len(raw) < 8 + 4 * ndim:
        raise FormatError(f"{path}: truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(dims)) if ndim else 1
    offset = 8 + 4 * ndim
    if len(raw) != offset + 4 * count:
        raise FormatError(f"{path}: payload holds {len(raw) - offset} bytes, expected {4 * count}")
    vec = np.frombuffer(raw, dtype=_DTYPE_TAGS[tag], count=count, offset=offset).reshape(dims)
    return PerturbationArtifact(vec.astype(np.float32))


# ------------------------------------------------------------------ reports


REPORT_HEADER = ("original", "adversarial", "success", "base_label", "l2", "seconds")


@dataclass
class AttackRecord:
    original: str
    adversarial: str
    success: bool
    base_label: str
    l2: float
    seconds: float
    spam_score: float = float("nan")
    original_score: float = float("nan")
    perturbation_hash: str = ""


@dataclass
class AttackReport:
    method: str
    records: list = field(default_factory=list)

    @property
    def accuracy(self):
        """Fraction of attacked spam images the base model still labels spam."""
        if not self.records:
            return float("nan")
        return float(np.mean([r.base_label == LABEL_NAMES[SPAM] for r in self.records]))

    @property
    def mean_l2(self):
        return float(np.mean([r.l2 for r in self.records])) if self.records else float("nan")

    @property
    def mean_seconds(self):
        return float(np.mean([r.seconds for r in self.records])) if self.records else float("nan")

    @property
    def success_rate(self):
        return float(np.mean([r.success for r in self.records])) if self.records else float("nan")

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.records:
                w.writerow([r.original, r.adversarial, int(r.success), r.base_label, repr(float(r.l2)),
                            f"{r.seconds:.6f}"])

    def write_scores_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("original", "adversarial", "original_spam_score", "adversarial_spam_score"))
            for r in self.records:
                w.writerow([r.original, r.adversarial, repr(float(r.original_score)), repr(float(r.spam_score))])


def read_report_csv(path, method=None):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != REPORT_HEADER:
            raise FormatError(f"{path}: header {header} != {REPORT_HEADER}")
        records = [
            AttackRecord(row[0], row[1], row[2] == "1", row[3], float(row[4]), float(row[5])) for row in reader
        ]
    scores = path.with_name(path.stem + "_scores.csv")
    if scores.is_file():
        with open(scores, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec, row in zip(records, reader):
                rec.original_score, rec.spam_score = float(row[2]), float(row[3])
    return AttackReport(method or path.stem, records)


# ----------------------------------------------------------------- transfer


def quantize_adversarial(x, adv):
    """8-bit adversarial image whose offset from ``x`` is rounded toward zero.

    Keeps ``|adv8 - x8| <= |adv - x|`` per pixel so L-inf budgets survive PNG storage.
    """
    base = np.rint(as_float(np.asarray(x)) * 255.0)
    delta = np.trunc(np.asarray(adv, dtype=np.float64) * 255.0 - base)
    return np.clip(base + delta, 0, 255).astype(np.uint8)


def save_adversarial(x, adv, path):
    save_image(quantize_adversarial(x, adv).astype(np.float32) / 255.0, path)


@dataclass
class AttackOutput:
    original: str
    adversarial: str
    success: bool
    seconds: float
    perturbation_hash: str = ""


def _base_input(network, img):
    if img.shape == tuple(network.spec.input_shape):
        return img
    return preprocess_concat(img, network.spec.input_shape[1])


def run_transfer_evaluation(outputs, base_model, method="attack"):
    """Classify stored adversarial images with the base model and build a report.

    Each image is fed exactly like clean data: downsized and Canny-concat
    preprocessed when the base model takes 64x32x3 input.
    """
    from .evaluation import l2_distance

    network = as_network(base_model)
    missing = sorted({p for o in outputs for p in (o.original, o.adversarial) if not Path(p).is_file()})
    if missing:
        raise ManifestValidationError(missing)
    report = AttackReport(method)
    for o in outputs:
        orig = load_image(o.original)
        adv = load_image(o.adversarial)
        scores = network.scores(np.stack([_base_input(network, orig), _base_input(network, adv)]))
        label = int(scores[1].argmax())
        report.records.append(
            AttackRecord(
                str(o.original),
                str(o.adversarial),
                bool(o.success),
                LABEL_NAMES[label],
                l2_distance(orig, adv),
                float(o.seconds),
                spam_score=float(scores[1][SPAM]),
                original_score=float(scores[0][SPAM]),
                perturbation_hash=o.perturbation_hash,
            )
        )
    return report


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# ------------------------------------------------------------ corpus runs

METHODS = ("fgsm", "cw", "deepfool", "universal", "clean")


def fit_universal(model, fit_images, cfg=None):
    """Fit a universal perturbation against the spam neuron; returns result and seconds."""
    network = as_network(model)
    if network.spec.labels_inverted:
        raise ContractError("universal attacks need a model trained with normal labels")
    X = check_images(fit_images, network.spec.input_shape)
    return timed(universal_perturbation, network, X, np.full(len(X), SPAM), cfg)


def attack_corpus(method, surrogate, entries, out_dir, cfg=None, artifact=None, fit_seconds=0.0, fit_count=1):
    """Attack every spam image of ``entries`` on the surrogate and save 8-bit results.

    For ``universal`` an already fitted ``artifact`` is applied; its fit time,
    spread over the ``fit_count`` images it was fitted on, is added to each
    example's time. ``clean`` writes the untouched images (identity attack).
    """
    if method not in METHODS:
        raise ContractError(f"unknown attack {method!r}; expected one of {METHODS}")
    network = as_network(surrogate)
    if network.spec.labels_inverted:
        raise ContractError("attacks need a surrogate trained with normal labels")
    if method == "universal" and artifact is None:
        raise ContractError("universal attack needs a fitted perturbation artifact")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    share = float(fit_seconds) / max(int(fit_count), 1)
    digest = artifact.sha256 if artifact is not None else ""
    outputs = []
    for entry_path in entries:
        src = Path(entry_path)
        x = check_image(load_image(src), network.spec.input_shape)
        t0 = time.perf_counter()
        if method == "fgsm":
            adv = fgsm(network, x, SPAM, cfg)
        elif method == "cw":
            adv = cw_l2(network, x, SPAM, cfg).adversarial
        elif method == "deepfool":
            adv = deepfool(network, x, cfg).adversarial
        elif method == "universal":
            adv = apply_perturbation(x, artifact.vector)
        else:
            adv = x.copy()
        seconds = time.perf_counter() - t0 + (share if method == "universal" else 0.0)
        success = method != "clean" and int(_predict_labels(network, adv[None])[0]) != SPAM
        dst = out / (src.stem + ".png")
        save_adversarial(x, adv, dst)
        outputs.append(AttackOutput(str(src), str(dst), bool(success), seconds, digest))
    return outputs
