"""Input validation shared by estimators, attacks and the pipeline."""

import numpy as np

from .exceptions import DimensionError

HAM = 0
SPAM = 1
LABEL_NAMES = {HAM: "ham", SPAM: "spam"}


def check_images(X, shape=None, name="X"):
    """Validate a batch of NHWC images.

    Accepts uint8 arrays (0-255) or floating arrays already in [0, 1]. The
    array is returned without a full float copy so that large 400x400
    batches stay compact; use :func:`as_float` on slices.
    """
    X = np.asarray(X)
    rank = 4 if shape is None else len(shape) + 1
    if X.ndim != rank:
        raise DimensionError("check_images", f"{name} must be a {rank}-D batch, got shape {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise DimensionError("check_images", f"{name} images have shape {X.shape[1:]}, expected {tuple(shape)}")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.floating):
        raise TypeError(f"{name} must be uint8 or floating point, got {X.dtype}")
    if X.size and (not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name} pixel values must be finite and within [0, 1]")
    return X


def check_image(x, shape=None, name="x"):
    """Validate one HWC image and return it as float32 in [0, 1]."""
    x = np.asarray(x)
    rank = 3 if shape is None else len(shape)
    if x.ndim != rank:
        raise DimensionError("check_image", f"{name} must have rank {rank}, got shape {x.shape}")
    return as_float(check_images(x[None], shape, name))[0]


def as_float(X, dtype=np.float32):
    if X.dtype == np.uint8:
        return X.astype(dtype) / dtype(255.0)
    return X.astype(dtype, copy=False)


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError("check_labels", f"expected {n} labels, got shape {y.shape}")
    if y.size and not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 (ham) or 1 (spam)")
    return y.astype(np.int64)
