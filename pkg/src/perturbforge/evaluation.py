"""Accuracy, L2 distance, ROC/AUC, Mann-Whitney U, histograms and CAM heatmaps."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_images
from .exceptions import ContractError, DimensionError, NumericalError
from .imaging import CannyConcat
from .models import as_network

EXACT_LIMIT = 12


# --------------------------------------------------------------- accuracy


def model_inputs(network, X):
    """Bring raw images to the model's input shape (Canny-concat for base models)."""
    X = check_images(X)
    if tuple(X.shape[1:]) == tuple(network.spec.input_shape):
        return X
    return CannyConcat(side=network.spec.input_shape[1]).transform(X)


def accuracy(model, manifest, split=None, label=None):
    """Fraction of manifest images (optionally one split/label) classified correctly."""
    subset = manifest.select(split=split, label=label)
    if len(subset) == 0:
        raise ContractError(f"no images for split={split!r} label={label!r}")
    network = as_network(model)
    return accuracy_on(network, subset.load_images(), subset.labels())


def accuracy_on(model, X, y):
    network = as_network(model)
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("accuracy of an empty set is undefined")
    pred = network.logits(model_inputs(network, X)).argmax(axis=1)
    if network.spec.labels_inverted:
        pred = 1 - pred
    return float(np.mean(pred == y))


def spam_scores(model, X):
    """Softmax probability of the spam class for each image."""
    network = as_network(model)
    s = network.scores(model_inputs(network, X))
    return s[:, 0] if network.spec.labels_inverted else s[:, 1]


def l2_distance(a, b):
    """Euclidean distance on the 0-255 pixel scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("l2_distance", f"shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.sum(((a - b) * 255.0) ** 2)))


# -------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, labels):
    """Threshold sweep over the distinct scores (ties grouped), AUC by trapezoids."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("roc_auc", f"scores {scores.shape} and labels {labels.shape} must be equal 1-D")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_auc needs both positive and negative labels")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]], auc)


def write_roc_csv(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for f, t in zip(curve.fpr, curve.tpr):
            w.writerow((repr(float(f)), repr(float(t))))


# ---------------------------------------------------------- Mann-Whitney


@dataclass
class UTestResult:
    u_statistic: float
    p_value: float
    method: str


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_u_distribution(ranks, n1):
    """Counts of each doubled rank-sum over all size-``n1`` subsets of the pooled ranks."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    # dp[k][s]: number of k-subsets with doubled rank-sum s
    dp = np.zeros((n1 + 1, total + 1), dtype=object)
    dp[0][0] = 1
    for r in doubled:
        for k in range(n1, 0, -1):
            dp[k][r:] = dp[k][r:] + dp[k - 1][: total + 1 - r]
    return dp[n1]


def mann_whitney_u(sample_a, sample_b, exact_limit=EXACT_LIMIT):
    """Two-sided Mann-Whitney U test; U counts pairs where ``a`` exceeds ``b`` (ties 1/2)."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ContractError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mu = n1 * n2 / 2.0
    if n1 + n2 <= exact_limit:
        counts = _exact_u_distribution(ranks, n1)
        offset = n1 * (n1 + 1)  # doubled minimum rank-sum
        sums = np.nonzero(counts)[0]
        u_vals = (sums - offset) / 2.0
        extreme = np.abs(u_vals - mu) >= abs(u - mu) - 1e-9
        hits = sum(counts[s] for s in sums[extreme])
        total = sum(counts[s] for s in sums)
        return UTestResult(u, float(min(1.0, hits / total)), "exact")
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return UTestResult(u, 1.0, "normal-approximation")
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return UTestResult(u, float(min(1.0, math.erfc(z / math.sqrt(2.0)))), "normal-approximation")


# -------------------------------------------------------------- summaries


def density_histogram(values, bins=10):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ContractError("histogram of an empty sample")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = float(values.min()), float(values.max())
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi) if hi > lo else None)
    return edges, counts


def write_histogram_csv(edges, counts, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("edge_lo", "edge_hi", "count"))
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))


def skewness(values):
    """Adjusted Fisher-Pearson sample skewness."""
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n < 3:
        raise ContractError("skewness needs at least 3 values")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 <= 1e-300:
        raise NumericalError("skewness undefined for zero variance")
    g1 = np.mean(d**3) / m2**1.5
    return float(np.sqrt(n * (n - 1)) / (n - 2) * g1)


# --------------------------------------------------------------- heatmaps


@dataclass
class Heatmap:
    values: np.ndarray
    count: int

    @property
    def spatial_variance(self):
        return float(np.var(self.values))


def average_cam_heatmap(model, X):
    """Pixelwise mean of per-image Grad-CAM maps (before binarisation)."""
    from .inceptionism import grad_cam

    network = as_network(model)
    X = check_images(X, network.spec.input_shape)
    if len(X) == 0:
        raise ContractError("average_cam_heatmap needs at least one image")
    total = None
    for x in X:
        cam = grad_cam(network, x).values.astype(np.float64)
        total = cam if total is None else total + cam
    return Heatmap((total / len(X)).astype(np.float32), len(X))


def write_heatmap_csv(heatmap, path):
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def write_table(rows, header, csv_path, text_path=None):
    """Write ``rows`` as CSV and, optionally, as an aligned text table."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if text_path is not None:
        cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in cells]
        Path(text_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def score_paths(model, paths, batch_size=16):
    """Spam scores for image files, fed through the model's usual preprocessing."""
    from .imaging import load_image

    network = as_network(model)
    scores = []
    for i in range(0, len(paths), batch_size):
        X = np.stack([load_image(p) for p in paths[i : i + batch_size]])
        scores.extend(float(s) for s in spam_scores(network, X))
    return scores


def write_scores_csv(paths, scores, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "spam_score"))
        for p, s in zip(paths, scores):
            w.writerow((str(p), repr(float(s))))


def read_scores_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [float(row[1]) for row in reader]
