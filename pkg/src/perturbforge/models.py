"""Classifier architectures, training, checkpoints and the estimator wrapper.

Two architectures are provided for 64x32x3 Canny-concat inputs (an MLP and
a small CNN). A *surrogate* wraps either one behind a fixed front end that
takes raw 400x400x3 images: a parameter-free bilinear downscale to 32x32
followed by a differentiable edge stage standing in for Canny, so that
gradient-based attacks can run end to end on full-size images.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import engine as E
from ._validation import HAM, SPAM, as_float, check_images, check_labels
from .exceptions import (
    ContractError,
    CorpusError,
    DimensionError,
    FormatError,
    NumericalError,
    TrainingError,
)

BASE_INPUT_SHAPE = (64, 32, 3)
SURROGATE_SIZE = 400

# luma weights for grayscale conversion
LUMA = (0.299, 0.587, 0.114)

# smooth edge stage used inside surrogates
EDGE_STEEPNESS = 10.0
EDGE_THRESHOLD = 0.25
EDGE_EPS = 1e-6

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Layer:
    """One layer descriptor.

    ``kind`` is one of ``conv``, ``pool``, ``flatten``, ``dense``,
    ``downscale`` or ``edge_concat``. ``units`` holds dense width or conv
    filter count, ``size`` the conv kernel / pool window / downscale target.
    """

    kind: str
    units: int = 0
    size: int = 0
    activation: str = ""

    @property
    def has_params(self):
        return self.kind in ("conv", "dense")


def _infer_shape(layer, shape):
    k = layer.kind
    if k == "conv":
        if len(shape) != 3:
            raise DimensionError("conv", f"expects HWC input, got {shape}")
        h, w, _ = shape
        if h < layer.size or w < layer.size:
            raise DimensionError("conv", f"input {shape} smaller than kernel {layer.size}")
        return (h - layer.size + 1, w - layer.size + 1, layer.units)
    if k == "pool":
        if len(shape) != 3 or shape[0] < layer.size or shape[1] < layer.size:
            raise DimensionError("pool", f"cannot pool {shape} with window {layer.size}")
        return (shape[0] // layer.size, shape[1] // layer.size, shape[2])
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if len(shape) != 1:
            raise DimensionError("dense", f"expects flat input, got {shape}")
        return (layer.units,)
    if k == "downscale":
        if len(shape) != 3:
            raise DimensionError("downscale", f"expects HWC input, got {shape}")
        return (layer.size, layer.size, shape[2])
    if k == "edge_concat":
        if len(shape) != 3 or shape[2] != 3:
            raise DimensionError("edge_concat", f"expects HxWx3 input, got {shape}")
        return (2 * shape[0], shape[1], 3)
    raise ContractError(f"unknown layer kind {k!r}")


@dataclass
class ModelSpec:
    layers: tuple
    input_shape: tuple
    class_count: int = 2
    labels_inverted: bool = False
    kind: str = "custom"

    def __post_init__(self):
        self.layers = tuple(Layer(**l) if isinstance(l, dict) else l for l in self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = _infer_shape(layer, shape)
            shapes.append(shape)
        if not self.layers or self.layers[-1].kind != "dense" or shapes[-1] != (self.class_count,):
            raise ContractError(f"last layer must be dense with {self.class_count} logits")
        if self.layers[-1].activation:
            raise ContractError("output layer must emit raw logits (no activation)")
        if self.kind == "cnn" and not self.conv_indices():
            raise ContractError("a CNN spec needs at least one conv layer")
        self._shapes = shapes
        self._in_shapes = [self.input_shape] + shapes[:-1]

    @property
    def output_shapes(self):
        return list(self._shapes)

    def param_shapes(self):
        out = []
        for layer, in_shape in zip(self.layers, self._in_shapes):
            if layer.kind == "conv":
                out += [(layer.size, layer.size, in_shape[2], layer.units), (layer.units,)]
            elif layer.kind == "dense":
                out += [(in_shape[0], layer.units), (layer.units,)]
        return out

    @property
    def parameter_count(self):
        return int(sum(int(np.prod(s)) for s in self.param_shapes()))

    def layer_parameter_count(self, index):
        layer, in_shape = self.layers[index], self._in_shapes[index]
        if layer.kind == "conv":
            return layer.size * layer.size * in_shape[2] * layer.units + layer.units
        if layer.kind == "dense":
            return in_shape[0] * layer.units + layer.units
        return 0

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def largest_conv(self):
        convs = self.conv_indices()
        if not convs:
            return None
        return max(convs, key=self.layer_parameter_count)

    def last_conv(self):
        convs = self.conv_indices()
        return convs[-1] if convs else None

    def front_end_length(self):
        """Number of leading layers that carry no parameters."""
        n = 0
        for layer in self.layers:
            if layer.has_params:
                break
            n += 1
        return n

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "labels_inverted": self.labels_inverted,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(Layer(**l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            class_count=int(d.get("class_count", 2)),
            labels_inverted=bool(d.get("labels_inverted", False)),
            kind=d.get("kind", "custom"),
        )


def _classifier_layers(kind):
    if kind == "mlp":
        return [
            Layer("flatten"),
            Layer("dense", units=512, activation="relu"),
            Layer("dense", units=128, activation="relu"),
            Layer("dense", units=2),
        ]
    if kind == "cnn":
        return [
            Layer("conv", units=32, size=3, activation="relu"),
            Layer("pool", size=2),
            Layer("conv", units=64, size=3, activation="relu"),
            Layer("pool", size=2),
            Layer("flatten"),
            Layer("dense", units=128, activation="relu"),
            Layer("dense", units=2),
        ]
    raise ValueError(f"kind must be 'mlp' or 'cnn', got {kind!r}")


def build_classifier(kind, input_shape=BASE_INPUT_SHAPE, labels_inverted=False):
    kind = kind.lower()
    return ModelSpec(tuple(_classifier_layers(kind)), input_shape, labels_inverted=labels_inverted, kind=kind)


def build_surrogate(kind, input_size=SURROGATE_SIZE, labels_inverted=False):
    """Classifier stack behind a fixed downscale + smooth-edge front end."""
    kind = kind.lower()
    side = BASE_INPUT_SHAPE[1]
    layers = [Layer("downscale", size=side), Layer("edge_concat")] + _classifier_layers(kind)
    return ModelSpec(tuple(layers), (input_size, input_size, 3), labels_inverted=labels_inverted, kind=kind)


# ------------------------------------------------------------------ network


def _const(arr):
    return E.Tensor(np.asarray(arr, dtype=E.get_dtype()))


def edge_concat(x):
    """Differentiable stand-in for the Canny-concat transform.

    Sobel magnitude of the luma channel passed through a sigmoid threshold,
    shifted so that flat regions map to exactly zero, replicated to three
    channels and stacked beneath the input along the height axis.
    """
    gray = E.conv2d(x, _const(np.array(LUMA).reshape(1, 1, 3, 1)))
    padded = E.pad_edge(gray, 1, 1)
    gx = E.conv2d(padded, _const(_SOBEL_X.reshape(3, 3, 1, 1)))
    gy = E.conv2d(padded, _const(_SOBEL_X.T.reshape(3, 3, 1, 1)))
    sq = E.add(E.add(E.mul(gx, gx), E.mul(gy, gy)), _const([EDGE_EPS]))
    mag = E.add(E.sqrt(sq), _const([-np.sqrt(EDGE_EPS)]))
    # sobel response of a unit step is 4
    z = E.add(E.scale(mag, EDGE_STEEPNESS / 4.0), _const([-EDGE_STEEPNESS * EDGE_THRESHOLD]))
    s0 = 1.0 / (1.0 + np.exp(EDGE_STEEPNESS * EDGE_THRESHOLD))
    edge = E.scale(E.add(E.sigmoid(z), _const([-s0])), 1.0 / (1.0 - s0))
    edge3 = E.concat([edge, edge, edge], axis=3)
    return E.concat([x, edge3], axis=1)


class Network:
    """A :class:`ModelSpec` bound to concrete weights."""

    def __init__(self, spec, weights):
        self.spec = spec
        shapes = spec.param_shapes()
        if len(weights) != len(shapes):
            raise ContractError(f"expected {len(shapes)} weight arrays, got {len(weights)}")
        self.weights = []
        for w, s in zip(weights, shapes):
            w = np.asarray(w, dtype=np.float32)
            if w.shape != tuple(s):
                raise DimensionError("Network", f"weight shape {w.shape} does not match {tuple(s)}")
            self.weights.append(w)

    @classmethod
    def from_flat(cls, spec, flat):
        flat = np.asarray(flat, dtype=np.float32)
        if flat.size != spec.parameter_count:
            raise ContractError(f"weight count {flat.size} != spec parameter count {spec.parameter_count}")
        arrays, pos = [], 0
        for s in spec.param_shapes():
            n = int(np.prod(s))
            arrays.append(flat[pos : pos + n].reshape(s))
            pos += n
        return cls(spec, arrays)

    def flat_weights(self):
        return np.concatenate([w.reshape(-1) for w in self.weights]).astype(np.float32)

    def param_tensors(self, requires_grad=False):
        return [E.Tensor(w, requires_grad=requires_grad) for w in self.weights]

    def forward(self, x, params=None, start=0, stop=None, capture=()):
        """Run layers ``start`` up to (excluding) ``stop`` on tensor ``x``.

        Returns ``(output, captured)`` where ``captured`` maps each requested
        layer index to that layer's output tensor.
        """
        if params is None:
            params = self.param_tensors()
        captured = {}
        p = sum(2 for l in self.spec.layers[:start] if l.has_params)
        h = x
        stop = len(self.spec.layers) if stop is None else stop
        for i in range(start, stop):
            layer = self.spec.layers[i]
            if layer.kind == "conv":
                h = E.conv2d(h, params[p], params[p + 1])
                p += 2
            elif layer.kind == "dense":
                h = E.dense(h, params[p], params[p + 1])
                p += 2
            elif layer.kind == "pool":
                h = E.max_pool(h, layer.size)
            elif layer.kind == "flatten":
                h = E.flatten(h)
            elif layer.kind == "downscale":
                h = E.bilinear_downscale(h, layer.size, layer.size)
            elif layer.kind == "edge_concat":
                h = edge_concat(h)
            if layer.activation == "relu":
                h = E.relu(h)
            if i in capture:
                captured[i] = h
        return h, captured

    def logits(self, X, batch_size=64, start=0):
        """Logits for a batch (no tape); uint8 or float input."""
        out = []
        for i in range(0, len(X), batch_size):
            xb = E.Tensor(as_float(np.asarray(X[i : i + batch_size]), E.get_dtype()))
            out.append(self.forward(xb, start=start)[0].data)
        if not out:
            return np.zeros((0, self.spec.class_count), dtype=np.float32)
        return np.concatenate(out)

    def scores(self, X, batch_size=64):
        return E.softmax(self.logits(X, batch_size))

    def input_gradient(self, x, objective):
        """Gradient of ``objective(logits, captured)`` with respect to a single image ``x``.

        Returns ``(gradient, objective_value, logits)``. Weights are constants
        on the tape, so they are never modified.
        """
        xt = E.Tensor(np.asarray(x, dtype=E.get_dtype())[None], requires_grad=True)
        with E.Tape() as tape:
            logits, captured = self.forward(xt, capture=getattr(objective, "capture", ()))
            value = objective(logits, captured)
        grads = E.backpropagate(tape, value, wrt=[xt])
        return grads[xt].data[0], value.item(), logits.data[0]


def gradient_wrt_input(network, x, y):
    """Gradient of the training cross-entropy with respect to the input image."""
    label = int(y)
    if not 0 <= label < network.spec.class_count:
        raise ContractError(f"label {y} outside [0, {network.spec.class_count})")
    x = np.asarray(x, dtype=E.get_dtype())
    if x.shape != network.spec.input_shape:
        raise DimensionError("gradient_wrt_input", f"input shape {x.shape} != model input {network.spec.input_shape}")
    g, _, _ = network.input_gradient(x, lambda z, _: E.softmax_cross_entropy(z, [label]))
    return g


def init_weights(spec, rng):
    """He-style uniform initialisation scaled by fan-in; zero biases."""
    arrays = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            arrays.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            arrays.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return arrays


# ----------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "momentum"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32).reshape(-1)
        if self.weights.size != self.spec.parameter_count:
            raise ContractError(
                f"checkpoint holds {self.weights.size} weights, spec needs {self.spec.parameter_count}"
            )

    def network(self):
        return Network.from_flat(self.spec, self.weights)


def _front_features(network, X, batch_size=64):
    """Apply the parameter-free leading layers once, ahead of training."""
    n_front = network.spec.front_end_length()
    if n_front == 0:
        return as_float(X), 0
    out = []
    for i in range(0, len(X), batch_size):
        xb = E.Tensor(as_float(X[i : i + batch_size]))
        out.append(network.forward(xb, stop=n_front)[0].data)
    return np.concatenate(out), n_front


def _accuracy(network, X, y, start=0):
    if len(X) == 0:
        return float("nan")
    pred = network.logits(X, start=start).argmax(axis=1)
    return float(np.mean(pred == y))


def train(spec, X, y, cfg=None, X_test=None, y_test=None, corpus_id=""):
    """Fit ``spec`` on images ``X`` with labels ``y`` (0 = ham, 1 = spam) by SGD with momentum."""
    cfg = cfg or TrainConfig()
    X = check_images(X, spec.input_shape)
    y = check_labels(y, len(X))
    if not (np.any(y == HAM) and np.any(y == SPAM)):
        raise CorpusError("training split must contain both spam and ham images")
    targets = 1 - y if spec.labels_inverted else y

    rng = np.random.default_rng(cfg.seed)
    network = Network(spec, init_weights(spec, rng))
    feats, start = _front_features(network, X)
    n = len(feats)
    params = network.param_tensors(requires_grad=True)
    velocity = [np.zeros_like(p.data) for p in params]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            xb = E.Tensor(feats[idx])
            try:
                with E.Tape() as tape:
                    logits, _ = network.forward(xb, params=params, start=start)
                    loss = E.softmax_cross_entropy(logits, targets[idx])
                grads = E.backpropagate(tape, loss, wrt=params)
            except NumericalError as exc:
                raise TrainingError(epoch, f"numerical failure: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingError(epoch, "loss diverged")
            for p, v in zip(params, velocity):
                v *= cfg.momentum
                v -= cfg.learning_rate * grads[p].data
                p.data += v
            total += loss.item() * len(idx)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise TrainingError(epoch, "loss diverged")

    network.weights = [p.data.astype(np.float32) for p in params]
    meta = {
        "corpus_id": corpus_id,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "loss_history": [float(v) for v in history],
        "train_accuracy": _accuracy(network, feats, targets, start=start),
    }
    if X_test is not None and len(X_test):
        Xt = check_images(X_test, spec.input_shape)
        yt = check_labels(y_test, len(Xt))
        meta["test_accuracy"] = _accuracy(network, Xt, 1 - yt if spec.labels_inverted else yt)
    return Checkpoint(spec, network.flat_weights(), meta)


def predict(model, x):
    """Return ``(label, scores)`` for one HWC image, or arrays for an NHWC batch.

    Labels are raw output-neuron indices (argmax of the softmax scores).
    """
    network = as_network(model)
    arr = np.asarray(x)
    single = arr.ndim == len(network.spec.input_shape)
    batch = arr[None] if single else arr
    batch = check_images(batch, network.spec.input_shape)
    scores = network.scores(batch)
    labels = scores.argmax(axis=1)
    if single:
        return int(labels[0]), scores[0]
    return labels, scores


def as_network(model):
    if isinstance(model, Network):
        return model
    if isinstance(model, Checkpoint):
        return model.network()
    if isinstance(model, SpamClassifier):
        return model.network_
    raise TypeError(f"cannot interpret {type(model).__name__} as a network")


def surrogate_from_classifier(ckpt, input_size=SURROGATE_SIZE):
    """Wrap a trained 64x32x3 classifier in the surrogate front end, sharing its weights."""
    spec = ckpt.spec
    if tuple(spec.input_shape) != BASE_INPUT_SHAPE or spec.kind not in ("mlp", "cnn"):
        raise ContractError(f"expected a base {BASE_INPUT_SHAPE} mlp/cnn checkpoint, got {spec.kind} {spec.input_shape}")
    sur = build_surrogate(spec.kind, input_size, spec.labels_inverted)
    meta = dict(ckpt.metadata, derived_from="classifier")
    return Checkpoint(sur, ckpt.weights.copy(), meta)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(ckpt, path):
    descriptor = json.dumps(
        {"spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata}, sort_keys=True
    ).encode("utf-8")
    payload = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<H", CHECKPOINT_VERSION),
            struct.pack("<I", len(descriptor)),
            descriptor,
            struct.pack("<Q", ckpt.weights.size),
            ckpt.weights.astype("<f4").tobytes(),
        ]
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4
    if len(raw) < pos + 6:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {CHECKPOINT_VERSION}")
    (dlen,) = struct.unpack_from("<I", raw, pos + 2)
    pos += 6
    if len(raw) < pos + dlen + 8:
        raise FormatError(f"{path}: truncated descriptor")
    try:
        desc = json.loads(raw[pos : pos + dlen].decode("utf-8"))
        spec = ModelSpec.from_dict(desc["spec"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt model descriptor ({exc})") from exc
    pos += dlen
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) != pos + 4 * count:
        raise FormatError(f"{path}: expected {count} weights, file holds {(len(raw) - pos) // 4}")
    if count != spec.parameter_count:
        raise FormatError(f"{path}: weight count {count} != spec parameter count {spec.parameter_count}")
    weights = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return Checkpoint(spec, weights, desc.get("metadata", {}))


# ----------------------------------------------------------------- estimator


class SpamClassifier(ClassifierMixin, BaseEstimator):
    """Image-spam classifier with the scikit-learn estimator interface.

    ``X`` holds NHWC images (uint8 or float in [0, 1]); 64x32x3
    Canny-concat images for base models, ``input_size``-square RGB images
    when ``surrogate=True``. ``y`` uses 0 for ham and 1 for spam. With
    ``labels_inverted=True`` the network is trained on flipped targets, but
    ``predict``/``predict_proba`` still report true classes; use
    ``network_`` for raw neuron outputs.
    """

    def __init__(
        self,
        kind="cnn",
        surrogate=False,
        input_size=SURROGATE_SIZE,
        labels_inverted=False,
        epochs=50,
        batch_size=32,
        learning_rate=0.01,
        momentum=0.9,
        random_state=0,
    ):
        self.kind = kind
        self.surrogate = surrogate
        self.input_size = input_size
        self.labels_inverted = labels_inverted
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state

    def _spec(self):
        if self.surrogate:
            return build_surrogate(self.kind, self.input_size, self.labels_inverted)
        return build_classifier(self.kind, labels_inverted=self.labels_inverted)

    def fit(self, X, y, X_test=None, y_test=None, corpus_id=""):
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, int(self.random_state))
        self.checkpoint_ = train(self._spec(), X, y, cfg, X_test, y_test, corpus_id)
        self._set_fitted()
        return self

    def _set_fitted(self):
        self.network_ = self.checkpoint_.network()
        self.classes_ = np.array([HAM, SPAM])
        self.n_features_in_ = int(np.prod(self.checkpoint_.spec.input_shape))

    @classmethod
    def from_checkpoint(cls, ckpt):
        spec = ckpt.spec
        surrogate = spec.layers[0].kind == "downscale"
        cfg = ckpt.metadata.get("config", {})
        est = cls(
            kind=spec.kind,
            surrogate=surrogate,
            input_size=spec.input_shape[0] if surrogate else SURROGATE_SIZE,
            labels_inverted=spec.labels_inverted,
            **{k: cfg[k] for k in ("epochs", "batch_size", "learning_rate", "momentum") if k in cfg},
            random_state=cfg.get("seed", 0),
        )
        est.checkpoint_ = ckpt
        est._set_fitted()
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.checkpoint_.spec.input_shape)
        scores = self.network_.scores(X)
        return scores[:, ::-1].copy() if self.checkpoint_.spec.labels_inverted else scores

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        save_checkpoint(self.checkpoint_, path)
