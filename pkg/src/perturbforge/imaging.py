"""Image I/O, resizing, grayscale conversion, Canny edges and concat preprocessing.

Images are float32 numpy arrays of shape (H, W, C), C in {1, 3}, with
pixel values in [0, 1].
"""

import io
import os
import struct
import zlib

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._resample import resample
from ._validation import as_float, check_images
from .exceptions import DecodeError

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
CANNY_SIGMA = 0.33
BLUR_SIGMA = 1.4
BLUR_SIZE = 5
BASE_SIDE = 32

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_MAG_FLOOR = 1e-6


def _normalize(arr):
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / np.float32(65535.0)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def _to_uint8(img):
    img = np.asarray(img, dtype=np.float32)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------- PPM


def _ppm_tokens(raw, count, pos, path):
    tokens = []
    n = len(raw)
    while len(tokens) < count:
        while pos < n and (raw[pos : pos + 1].isspace() or raw[pos : pos + 1] == b"#"):
            if raw[pos : pos + 1] == b"#":
                while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError(path, pos, "unexpected end of PPM header")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise DecodeError(path, start, f"expected integer, found {tok[:16]!r}")
        tokens.append(int(tok))
    return tokens, pos


def _read_ppm(raw, path):
    magic = raw[:2]
    (width, height, maxval), pos = _ppm_tokens(raw, 3, 2, path)
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DecodeError(path, 2, f"invalid PPM dimensions {width}x{height} maxval {maxval}")
    count = width * height * 3
    if magic == b"P3":
        values, _ = _ppm_tokens(raw, count, pos, path)
        arr = np.array(values, dtype=np.float64)
    else:
        pos += 1  # single whitespace before raster
        width_bytes = 1 if maxval < 256 else 2
        need = count * width_bytes
        if len(raw) < pos + need:
            raise DecodeError(path, len(raw), f"raster truncated: need {need} bytes after offset {pos}")
        dtype = np.uint8 if width_bytes == 1 else ">u2"
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    if arr.max(initial=0) > maxval:
        raise DecodeError(path, pos, f"sample exceeds maxval {maxval}")
    return (arr / maxval).astype(np.float32).reshape(height, width, 3)


def _write_ppm(img, path, ascii_=False):
    u8 = _to_uint8(img)
    if u8.shape[2] == 1:
        u8 = np.repeat(u8, 3, axis=2)
    h, w, _ = u8.shape
    with open(path, "wb") as fh:
        if ascii_:
            fh.write(f"P3\n{w} {h}\n255\n".encode())
            for row in u8.reshape(h, -1):
                fh.write((" ".join(str(v) for v in row) + "\n").encode())
        else:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(u8.tobytes())


# ------------------------------------------------------------------- PNG


def _check_png_structure(raw, path):
    """Walk PNG chunks so truncation/corruption is reported with its offset."""
    pos = len(_PNG_SIGNATURE)
    while True:
        if pos + 8 > len(raw):
            raise DecodeError(path, pos, "PNG truncated inside chunk header")
        length, ctype = struct.unpack_from(">I4s", raw, pos)
        end = pos + 12 + length
        if end > len(raw):
            raise DecodeError(path, pos, f"PNG chunk {ctype!r} truncated ({length} data bytes declared)")
        (crc,) = struct.unpack_from(">I", raw, pos + 8 + length)
        if zlib.crc32(raw[pos + 4 : pos + 8 + length]) & 0xFFFFFFFF != crc:
            raise DecodeError(path, pos, f"PNG chunk {ctype!r} CRC mismatch")
        if ctype == b"IEND":
            return
        pos = end


def load_image(path):
    """Read PNG, PPM (P3/P6) or JPEG into a float32 HWC array in [0, 1]."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] in (b"P3", b"P6"):
        return _read_ppm(raw, path)
    if raw[:8] == _PNG_SIGNATURE:
        _check_png_structure(raw, path)
    elif raw[:3] != b"\xff\xd8\xff":
        raise DecodeError(path, 0, "unsupported image format (expected PNG, PPM or JPEG)")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode not in ("L", "RGB", "I;16"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, len(raw), f"decoder failed: {exc}") from exc
    return _normalize(arr)


def save_image(img, path):
    """Write an HWC image losslessly (PNG, or PPM for ``.ppm``/``.pnm``)."""
    path = os.fspath(path)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    ext = os.path.splitext(path)[1].lower()
    if ext in (".ppm", ".pnm"):
        _write_ppm(img, path)
        return
    if ext in (".jpg", ".jpeg"):
        raise ValueError("JPEG is read-only; save generated artifacts as PNG or PPM")
    u8 = _to_uint8(img)
    mode = "L" if u8.shape[2] == 1 else "RGB"
    Image.fromarray(u8[:, :, 0] if mode == "L" else u8, mode=mode).save(path, format="PNG")


# ------------------------------------------------------------ transforms


def resize_bilinear(img, out_h, out_w):
    """Triangle-filter resize; antialiased when shrinking."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float32)
    out = resample(img, out_h, out_w)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_grayscale(img):
    img = np.asarray(img, dtype=np.float32)
    if img.shape[-1] == 1:
        return img.copy()
    if img.shape[-1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[-1]}")
    gray = img @ LUMA
    return np.clip(gray, 0.0, 1.0)[..., None].astype(np.float32)


def _gaussian_kernel(size=BLUR_SIZE, sigma=BLUR_SIGMA):
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def canny_thresholds(gray, sigma=CANNY_SIGMA):
    m = float(np.median(gray))
    return max(0.0, (1.0 - sigma) * m), min(1.0, (1.0 + sigma) * m)


def _non_max_suppression(mag, gx, gy):
    h, w = mag.shape
    padded = np.pad(mag, 1)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # neighbour offsets for 0, 45, 90, 135 degree gradient directions
    bins = np.zeros(mag.shape, dtype=np.int64)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    rows, cols = np.mgrid[0:h, 0:w]
    # treat rounding-level differences as ties so symmetric ridges stay symmetric
    tol = 1e-7 * max(float(mag.max(initial=0.0)), 1.0)
    for b, (dr, dc) in offsets.items():
        sel = bins == b
        r, c = rows[sel] + 1, cols[sel] + 1
        fwd = padded[r + dr, c + dc]
        bwd = padded[r - dr, c - dc]
        keep[sel] = (mag[sel] + tol >= fwd) & (mag[sel] + tol >= bwd)
    return keep


def canny_zero_param(img, sigma=CANNY_SIGMA):
    """Canny edges with hysteresis thresholds derived from the median intensity.

    Returns a single-channel float32 map with values exactly 0 or 1.
    """
    img = np.asarray(img, dtype=np.float32)
    gray = to_grayscale(img)[..., 0].astype(np.float64) if img.ndim == 3 else img.astype(np.float64)
    lower, upper = canny_thresholds(gray, sigma)
    blurred = ndimage.correlate(gray, _gaussian_kernel(), mode="mirror")
    gx = ndimage.correlate(blurred, _SOBEL_X, mode="mirror")
    gy = ndimage.correlate(blurred, _SOBEL_X.T, mode="mirror")
    mag = np.hypot(gx, gy)
    thin = _non_max_suppression(mag, gx, gy) & (mag > _MAG_FLOOR)
    strong = thin & (mag > upper)
    weak = thin & (mag > lower)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count:
        hit = np.zeros(count + 1, dtype=bool)
        hit[np.unique(labels[strong])] = True
        hit[0] = False
        edges = hit[labels]
    else:
        edges = np.zeros_like(weak)
    return edges.astype(np.float32)[..., None]


def preprocess_concat(img, side=BASE_SIDE):
    """Downsize to ``side`` x ``side`` and stack its Canny edge map beneath it."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {img.shape}")
    small = resize_bilinear(img, side, side)
    edges = np.repeat(canny_zero_param(small), 3, axis=2)
    return np.concatenate([small, edges], axis=0)


class CannyConcat(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping RGB image batches to 64x32x3 model inputs."""

    def __init__(self, side=BASE_SIDE):
        self.side = side

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        out = np.empty((len(X), 2 * self.side, self.side, 3), dtype=np.float32)
        for i in range(len(X)):
            out[i] = preprocess_concat(as_float(X[i]), self.side)
        return out
