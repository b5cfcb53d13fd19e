"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is open, each
primitive application is appended to it together with a closure that maps
the output cotangent to input cotangents; :func:`backpropagate` replays the
tape in reverse. Outside a tape nothing is recorded, which keeps inference
cheap.

Images use the NHWC layout throughout.
"""

import contextlib
import threading

import numpy as np

from ._resample import resample_matrix
from .exceptions import ContractError, DimensionError, LineageError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "backpropagate",
    "forward_primitive",
    "precision",
    "get_dtype",
    "PRIMITIVES",
]

_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating dtype new tensors are created with.

    float32 is the default; gradient verification runs under float64 so
    that central differences are not swamped by rounding.
    """
    previous = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def _active_tapes():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=get_dtype())
        if arr.size and not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, _as_tensor(other, like=self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, like=self), -1.0))


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=get_dtype())
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=get_dtype())
    return Tensor(arr)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records primitive applications for later differentiation.

    Use as a context manager. Tapes nest: every open tape records.
    """

    def __init__(self):
        self.nodes = []
        self._produced = {}

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _record(self, node):
        self._produced[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, tensor):
        return id(tensor) in self._produced

    def leaves(self):
        """Tensors with ``requires_grad`` consumed on this tape but not produced by it."""
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def _emit(op, inputs, out_data, backward):
    if out_data.size and not np.all(np.isfinite(out_data)):
        raise NumericalError(f"{op}: produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tapes = _active_tapes()
    if tapes and out.requires_grad:
        node = _Node(op, tuple(inputs), out, backward)
        for tape in tapes:
            tape._record(node)
    return out


def backpropagate(tape, loss, wrt=None):
    """Differentiate a scalar ``loss`` recorded on ``tape``.

    Returns a dict mapping each leaf tensor to its gradient tensor. With
    ``wrt`` given, exactly those tensors are returned (zeros for any that do
    not influence the loss); otherwise every ``requires_grad`` leaf on the
    tape. Leaf ``.grad`` attributes are overwritten with the result.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if len(tape) == 0:
        raise ContractError("cannot backpropagate through an empty tape")
    if not tape.produced(loss):
        raise LineageError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    stop = tape._produced[id(loss)]
    for node in reversed(tape.nodes[: stop + 1]):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    targets = tape.leaves() if wrt is None else list(wrt)
    result = {}
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        gt = Tensor.__new__(Tensor)
        gt.data, gt.requires_grad, gt.grad = g, False, None
        t.grad = gt
        result[t] = gt
    return result


# ---------------------------------------------------------------- primitives


def _check_rank(op, x, rank, what="input"):
    if x.data.ndim != rank:
        raise DimensionError(op, f"{what} must have rank {rank}, got shape {x.shape}")


def dense(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape (N, D) and weight (D, K)."""
    _check_rank("dense", x, 2)
    _check_rank("dense", weight, 2, "weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError("dense", f"input axis 1 has {x.shape[1]} features, weight axis 0 expects {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError("dense", f"bias shape {bias.shape} does not match weight axis 1 ({weight.shape[1]})")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("dense", inputs, out, backward)


def _pad_amounts(padding, kh, kw):
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        return (kh // 2, (kh - 1) // 2), (kw // 2, (kw - 1) // 2)
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, kernel, bias=None, stride=1, padding="valid"):
    """2-D cross-correlation, NHWC input, kernel shaped (kh, kw, C_in, C_out)."""
    _check_rank("conv2d", x, 4)
    _check_rank("conv2d", kernel, 4, "kernel")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise DimensionError("conv2d", f"input channel axis 3 has {c}, kernel axis 2 expects {kc}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError("conv2d", f"bias shape {bias.shape} does not match {f} filters")
    (pt, pb), (pl, pr) = _pad_amounts(padding, kh, kw)
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < kh or wp < kw:
        raise DimensionError("conv2d", f"spatial axes 1,2 ({h}x{w}) smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> (n*ho*wo, kh*kw*c), matching kernel's (kh, kw, c) order
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    k2 = kernel.data.reshape(kh * kw * c, f)
    out = cols @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f)

    def backward(g):
        g2 = g.reshape(n * ho * wo, f)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, backward)


def pad_edge(x, ph, pw):
    """Replicate-pad the spatial axes of an NHWC tensor."""
    _check_rank("pad_edge", x, 4)
    out = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")
    n, h, w, c = x.shape

    def backward(g):
        g = g.copy()
        # fold replicated borders back onto the edge rows/cols
        g[:, ph, :, :] += g[:, :ph, :, :].sum(axis=1)
        g[:, ph + h - 1, :, :] += g[:, ph + h :, :, :].sum(axis=1)
        g[:, :, pw, :] += g[:, :, :pw, :].sum(axis=2)
        g[:, :, pw + w - 1, :] += g[:, :, pw + w :, :].sum(axis=2)
        return (g[:, ph : ph + h, pw : pw + w, :],)

    return _emit("pad_edge", (x,), out, backward)


def relu(x):
    xd = x.data
    mask = xd > 0
    return _emit("relu", (x,), np.where(mask, xd, 0).astype(xd.dtype), lambda g: (g * mask,))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def sqrt(x):
    if np.any(x.data < 0):
        raise NumericalError("sqrt: negative operand")
    out = np.sqrt(x.data)

    def backward(g):
        if np.any(out == 0):
            raise NumericalError("sqrt: gradient undefined at zero")
        return (g * 0.5 / out,)

    return _emit("sqrt", (x,), out, backward)


def max_pool(x, size=2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    _check_rank("max_pool", x, 4)
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError("max_pool", f"spatial axes 1,2 ({h}x{w}) smaller than pool {size}")
    xc = x.data[:, : ho * size, : wo * size, :]
    win = xc.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * size, wo * size, c)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, : ho * size, : wo * size, :] = gw
        return (gx,)

    return _emit("max_pool", (x,), out, backward)


def flatten(x):
    shape = x.shape
    return _emit("flatten", (x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def bilinear_downscale(x, out_h, out_w):
    """Resize NHWC spatial axes with fixed triangle-filter weights (no parameters)."""
    _check_rank("bilinear_downscale", x, 4)
    n, h, w, c = x.shape
    if out_h <= 0 or out_w <= 0:
        raise DimensionError("bilinear_downscale", f"output size must be positive, got {out_h}x{out_w}")
    mh = resample_matrix(h, out_h, x.data.dtype)
    mw = resample_matrix(w, out_w, x.data.dtype)
    tmp = np.matmul(mh, x.data.reshape(n, h, w * c)).reshape(n, out_h, w, c)
    out = np.einsum("jw,niwc->nijc", mw, tmp, optimize=True)

    def backward(g):
        gt = np.einsum("jw,nijc->niwc", mw, g, optimize=True)
        gx = np.matmul(mh.T, gt.reshape(n, out_h, w * c)).reshape(n, h, w, c)
        return (gx,)

    return _emit("bilinear_downscale", (x,), out, backward)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of (N, K) logits against integer labels (N,)."""
    _check_rank("softmax_cross_entropy", logits, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError("softmax_cross_entropy", f"{labels.shape[0]} labels for {n} rows on axis 0")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError("softmax_cross_entropy", f"labels must lie in [0, {k}) on axis 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.data.dtype)
    p = np.exp(z - logsum[:, None])

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)


def sum(x):  # noqa: A001 - primitive name
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean(x):
    return scale(sum(x), 1.0 / max(x.size, 1))


def scale(x, factor):
    factor = float(factor)
    return _emit("scale", (x,), x.data * x.data.dtype.type(factor), lambda g: (g * g.dtype.type(factor),))


def add(a, b):
    """Elementwise sum; ``b`` may be a bias matching the trailing axes of ``a``."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.data.ndim <= a.data.ndim and a.shape[a.data.ndim - b.data.ndim :] == b.shape:
        lead = tuple(range(a.data.ndim - b.data.ndim))
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=lead)))
    raise DimensionError("add", f"shapes {a.shape} and {b.shape} differ and are not a bias-add")


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError("mul", f"shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError("concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, backward)


def select(x, index, axis=-1):
    """Pick one position along ``axis`` (the axis is removed)."""
    ax = axis % x.data.ndim
    if not 0 <= index < x.shape[ax]:
        raise DimensionError("select", f"index {index} out of range for axis {ax} of size {x.shape[ax]}")
    out = np.take(x.data, index, axis=ax)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _emit("select", (x,), out, backward)


PRIMITIVES = {
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "max_pool": max_pool,
    "flatten": flatten,
    "bilinear_downscale": bilinear_downscale,
    "softmax_cross_entropy": softmax_cross_entropy,
    "sum": sum,
    "scale": scale,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "pad_edge": pad_edge,
    "concat": concat,
    "select": select,
}


def forward_primitive(op, *inputs, **params):
    """Apply a primitive by name; recorded on every open tape."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **params)
