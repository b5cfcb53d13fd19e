"""Natural perturbations: activation-maximised ham images confined by Grad-CAM masks.

Ham images are pushed toward the inverted model's ham neuron by gradient
ascent, averaged in groups of four into grayscale overlays, and blended
into the parts of a spam image the classifier does not attend to.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from ._validation import check_image
from .exceptions import ContractError, DimensionError, UnsupportedModelError
from .imaging import load_image, resize_bilinear, save_image, to_grayscale
from .models import BASE_INPUT_SHAPE, as_network

BATCH = 4
DREAM_ITERATIONS = 64
DREAM_STEP = 0.001
MASK_THRESHOLD = 0.5
ALPHA = 0.5


@dataclass
class CamMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionError("CamMap", f"values must be 2-D, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("CAM values must lie in [0, 1]")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def _normalize(m):
    m = np.maximum(m, 0.0)
    peak = float(m.max(initial=0.0))
    return (m / peak).astype(np.float32) if peak > 0 else np.zeros_like(m, dtype=np.float32)


def _has_concat_input(spec):
    return any(l.kind == "edge_concat" for l in spec.layers) or tuple(spec.input_shape) == BASE_INPUT_SHAPE


def grad_cam(model, image, layer=None, class_index=None, fold="auto"):
    """Class activation map of ``layer`` (default: last conv) for the top class.

    For models whose input is an image stacked above its edge map, the
    map is resized to that stacked layout and the two halves are merged by
    elementwise max, giving a map over the image itself.
    """
    network = as_network(model)
    spec = network.spec
    layer = spec.last_conv() if layer is None else layer
    if layer is None or spec.layers[layer].kind != "conv":
        raise UnsupportedModelError("grad_cam needs a convolutional layer")
    x = check_image(image, spec.input_shape)
    xt = E.Tensor(x[None], requires_grad=True)
    with E.Tape() as tape:
        logits, captured = network.forward(xt, capture=(layer,))
        target = int(logits.data[0].argmax()) if class_index is None else int(class_index)
        score = E.sum(E.select(logits, target))
    acts = captured[layer]
    grads = E.backpropagate(tape, score, wrt=[acts])[acts].data[0]
    weights = grads.mean(axis=(0, 1))
    cam = _normalize(np.tensordot(acts.data[0], weights, axes=([2], [0])))
    if fold == "auto":
        fold = _has_concat_input(spec)
    if fold:
        cam = _fold_concat(cam, spec)
    return CamMap(cam)


def _fold_concat(cam, spec):
    """Map a CAM over the stacked image+edges layout back onto the image."""
    layers = spec.layers
    if layers and layers[0].kind == "downscale":
        side = layers[0].size
    else:
        side = spec.input_shape[1]
    stacked = resize_bilinear(cam[..., None], 2 * side, side)[..., 0]
    return _normalize(np.maximum(stacked[:side], stacked[side:]))


def cam_to_mask(cam, size=400, threshold=MASK_THRESHOLD):
    """Upscale, binarise and invert: 1 where the CAM is below ``threshold``."""
    values = cam.values if isinstance(cam, CamMap) else np.asarray(cam, dtype=np.float32)
    h, w = (size, size) if np.isscalar(size) else size
    up = resize_bilinear(values[..., None], h, w)
    return (up < threshold).astype(np.float32)


# ------------------------------------------------------------------ dream


@dataclass
class DreamResult:
    image: np.ndarray
    warning: bool = False
    loss_history: list = field(default_factory=list)


def dream_objective(spec, layer=None, neuron=1):
    """Mean activation of the largest conv layer plus the chosen output logit."""
    layer = spec.largest_conv() if layer is None else layer
    if layer is None:
        raise UnsupportedModelError("deep_dream needs a convolutional layer")

    def objective(logits, captured):
        return E.add(E.mean(captured[layer]), E.sum(E.select(logits, neuron)))

    objective.capture = (layer,)
    return objective


def deep_dream(inverted_model, ham_image, iterations=DREAM_ITERATIONS, step=DREAM_STEP, layer=None, neuron=1):
    """Gradient ascent on the dream objective with L-inf normalised steps.

    For a model trained with inverted labels neuron 1 is the ham neuron.
    """
    network = as_network(inverted_model)
    if not network.spec.labels_inverted:
        warnings.warn("deep_dream expects a model trained with inverted labels", stacklevel=2)
    x = check_image(ham_image, network.spec.input_shape).copy()
    if iterations < 0 or step < 0:
        raise ValueError("iterations and step must be non-negative")
    objective = dream_objective(network.spec, layer, neuron)
    history = []
    for it in range(iterations):
        g, value, _ = network.input_gradient(x, objective)
        history.append(value)
        peak = float(np.abs(g).max())
        if peak == 0.0:
            if it == 0:
                return DreamResult(x, warning=True, loss_history=history)
            break
        x = np.clip(x + np.float32(step) * (g / peak).astype(np.float32), 0.0, 1.0)
    if iterations:
        history.append(network.input_gradient(x, objective)[1])
    return DreamResult(x, False, history)


# --------------------------------------------------------------- blending


@dataclass
class NaturalPerturbation:
    image: np.ndarray
    sources: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 1:
            raise DimensionError("NaturalPerturbation", f"expected HxWx1, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("natural perturbation pixels must be within [0, 1]")


def blend_batch(images, weights=None, sources=None):
    """Weighted average of exactly four images, converted to grayscale."""
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if len(images) != BATCH:
        raise ContractError(f"blend_batch needs exactly {BATCH} images, got {len(images)}")
    if any(im.shape != images[0].shape for im in images):
        raise DimensionError("blend_batch", "all images must share one shape")
    weights = [1.0 / BATCH] * BATCH if weights is None else [float(w) for w in weights]
    if len(weights) != BATCH or min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-6:
        raise ValueError("weights must be four non-negative numbers summing to 1")
    blended = np.zeros_like(images[0], dtype=np.float64)
    for im, w in zip(images, weights):
        blended += w * im
    gray = to_grayscale(np.clip(blended, 0.0, 1.0).astype(np.float32)) if blended.shape[-1] == 3 else blended
    return NaturalPerturbation(np.clip(gray, 0.0, 1.0), list(sources or []), weights)


def apply_natural(spam_image, pert, mask, alpha=ALPHA):
    """Alpha-blend the masked perturbation into the spam image where ``mask`` is 1."""
    spam = np.asarray(spam_image, dtype=np.float32)
    p = pert.image if isinstance(pert, NaturalPerturbation) else np.asarray(pert, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if p.ndim == 2:
        p = p[..., None]
    if mask.ndim == 2:
        mask = mask[..., None]
    if spam.shape[:2] != p.shape[:2] or spam.shape[:2] != mask.shape[:2]:
        raise DimensionError("apply_natural", f"shapes {spam.shape}, {p.shape}, {mask.shape} do not align")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    masked = np.broadcast_to(mask * p, spam.shape)
    blended = np.clip((1.0 - alpha) * spam + alpha * masked, 0.0, 1.0)
    return np.where(np.broadcast_to(mask, spam.shape) == 1.0, blended, spam).astype(np.float32)


def generate_natural_perturbations(inverted_model, ham_images, sources=None, iterations=DREAM_ITERATIONS,
                                   step=DREAM_STEP):
    """Dream every ham image and blend consecutive groups of four.

    Returns ``floor(n / 4)`` perturbations; leftover images are unused.
    """
    sources = list(sources) if sources is not None else [f"ham[{i}]" for i in range(len(ham_images))]
    perts, batch, names = [], [], []
    for img, name in zip(ham_images, sources):
        if isinstance(img, (str, Path)):
            img = load_image(img)
        batch.append(deep_dream(inverted_model, img, iterations, step).image)
        names.append(str(name))
        if len(batch) == BATCH:
            perts.append(blend_batch(batch, sources=names))
            batch, names = [], []
    return perts


def save_natural_perturbations(perts, out_dir):
    """Write grayscale PNGs plus a ``provenance.jsonl`` line per file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(perts):
        name = f"natural_{i:04d}.png"
        save_image(p.image, out / name)
        lines.append(json.dumps({"path": name, "sources": p.sources, "weights": p.weights}))
    (out / "provenance.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return [out / f"natural_{i:04d}.png" for i in range(len(perts))]


def load_natural_perturbations(out_dir):
    out = Path(out_dir)
    perts = []
    with open(out / "provenance.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                perts.append(NaturalPerturbation(load_image(out / rec["path"]), rec["sources"], rec["weights"]))
    return perts
