import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from perturbforge.evaluation import (
    Heatmap,
    accuracy_on,
    density_histogram,
    l2_distance,
    mann_whitney_u,
    read_scores_csv,
    roc_auc,
    skewness,
    write_histogram_csv,
    write_roc_csv,
    write_scores_csv,
    write_table,
)
from perturbforge.exceptions import ContractError, DimensionError, NumericalError
from perturbforge.models import Layer, ModelSpec, Network


def pair_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -------------------------------------------------------------------- AUC


def test_auc_small_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == pytest.approx(0.75)
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]).auc == pytest.approx(0.5)
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_equals_pair_counting(pairs):
    scores = [s / 6 for s, _ in pairs]
    labels = [int(l) for _, l in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(ContractError):
            roc_auc(scores, labels)
        return
    curve = roc_auc(scores, labels)
    assert curve.auc == pytest.approx(pair_auc(scores, labels), abs=1e-12)
    assert curve.fpr[0] == 0 and curve.tpr[0] == 0 and curve.fpr[-1] == 1 and curve.tpr[-1] == 1
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


def test_auc_shape_mismatch():
    with pytest.raises(DimensionError):
        roc_auc([0.1, 0.2], [1])


def test_roc_csv(tmp_path):
    write_roc_csv(roc_auc([0.1, 0.9], [0, 1]), tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr" and len(lines) == 4


# ----------------------------------------------------------- Mann-Whitney


def test_u_counts_pairs():
    res = mann_whitney_u([3, 4], [1, 2])
    assert res.u_statistic == 4.0
    assert res.method == "exact"
    assert res.p_value == pytest.approx(1 / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_u_symmetry(a, b):
    ab, ba = mann_whitney_u(a, b), mann_whitney_u(b, a)
    assert ab.u_statistic + ba.u_statistic == pytest.approx(len(a) * len(b))
    assert ab.p_value == pytest.approx(ba.p_value)
    assert 0.0 < ab.p_value <= 1.0


def test_identical_samples_are_not_significant():
    x = np.arange(30.0)
    assert mann_whitney_u(x, x).p_value >= 0.99
    assert mann_whitney_u(x[:5], x[:5]).p_value >= 0.99


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(7, 30), st.integers(7, 30))
def test_normal_approximation_matches_scipy(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 10, size=n1).astype(float)
    b = rng.integers(0, 10, size=n2).astype(float) + rng.integers(0, 3)
    if np.unique(np.r_[a, b]).size == 1:
        return
    ours = mann_whitney_u(a, b, exact_limit=0)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert ours.method == "normal-approximation"
    assert ours.u_statistic == pytest.approx(ref.statistic)
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-12)


def test_exact_matches_scipy_without_ties():
    a, b = [1.5, 3.2, 7.7, 8.1], [0.2, 2.4, 4.4, 5.0, 6.3]
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="exact")
    assert mann_whitney_u(a, b).p_value == pytest.approx(ref.pvalue)


def test_u_needs_data():
    with pytest.raises(ContractError):
        mann_whitney_u([], [1.0])


# ------------------------------------------------------------- summaries


def test_histogram_counts_everything(tmp_path):
    values = np.random.default_rng(0).normal(size=500)
    edges, counts = density_histogram(values, bins=12)
    assert counts.sum() == 500 and len(edges) == 13
    assert edges[0] == values.min() and edges[-1] == values.max()
    write_histogram_csv(edges, counts, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "edge_lo,edge_hi,count"
    with pytest.raises(ContractError):
        density_histogram([])


def test_histogram_of_constant_sample():
    _, counts = density_histogram([2.0, 2.0, 2.0], bins=4)
    assert counts.sum() == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=50))
def test_skewness_matches_scipy(values):
    x = np.asarray(values)
    if np.var(x) < 1e-6 * max(1.0, np.abs(x).max()) ** 2:
        return
    assert skewness(x) == pytest.approx(stats.skew(x, bias=False), rel=1e-7, abs=1e-9)


def test_skewness_direct_formula():
    x = np.array([1.0, 2.0, 3.0, 10.0])
    n, m = len(x), x.mean()
    g1 = np.mean((x - m) ** 3) / np.mean((x - m) ** 2) ** 1.5
    assert skewness(x) == pytest.approx(math.sqrt(n * (n - 1)) / (n - 2) * g1)
    assert skewness([1.0, 2.0, 3.0]) == pytest.approx(0.0)
    with pytest.raises(ContractError):
        skewness([1.0, 2.0])
    with pytest.raises(NumericalError):
        skewness([4.0, 4.0, 4.0])


def test_l2_on_byte_scale():
    a = np.zeros((1, 1, 4))
    b = np.ones((1, 1, 4))
    assert l2_distance(a, b) == pytest.approx(510.0)
    assert l2_distance(a, a) == 0.0
    with pytest.raises(DimensionError):
        l2_distance(a, np.zeros((1, 1, 3)))


# --------------------------------------------------------------- accuracy


@pytest.fixture
def sign_model():
    """Predicts spam exactly when the first pixel exceeds 0.5."""
    spec = ModelSpec((Layer("flatten"), Layer("dense", units=2)), (1, 2, 1))
    W = np.array([[-1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
    return Network(spec, [W, np.array([0.5, -0.5], dtype=np.float32)])


def test_accuracy_hand_set(sign_model):
    X = np.array([0.9, 0.1, 0.8, 0.2, 0.7], dtype=np.float32).reshape(5, 1, 1, 1).repeat(2, axis=2)
    y = np.array([1, 0, 0, 0, 1])
    assert accuracy_on(sign_model, X, y) == pytest.approx(0.8)
    assert accuracy_on(sign_model, X, 1 - y) == pytest.approx(0.2)
    with pytest.raises(ContractError):
        accuracy_on(sign_model, X[:0], y[:0])


def test_accuracy_of_inverted_model(sign_model):
    inv = Network(ModelSpec(sign_model.spec.layers, (1, 2, 1), labels_inverted=True),
                  [-sign_model.weights[0], -sign_model.weights[1]])
    X = np.array([0.9, 0.1], dtype=np.float32).reshape(2, 1, 1, 1).repeat(2, axis=2)
    assert accuracy_on(inv, X, [1, 0]) == 1.0


# ------------------------------------------------------------------- files


def test_scores_csv_round_trip(tmp_path):
    write_scores_csv(["a.png", "b.png"], [0.25, 0.75], tmp_path / "s.csv")
    assert read_scores_csv(tmp_path / "s.csv") == [0.25, 0.75]


def test_write_table(tmp_path):
    write_table([("fgsm", 0.5), ("cw", 0.25)], ("method", "accuracy"), tmp_path / "t.csv", tmp_path / "t.txt")
    assert (tmp_path / "t.csv").read_text().splitlines() == ["method,accuracy", "fgsm,0.5", "cw,0.25"]
    text = (tmp_path / "t.txt").read_text().splitlines()
    assert text[0].split() == ["method", "accuracy"] and len(text) == 3


def test_heatmap_variance():
    assert Heatmap(np.ones((3, 3)), 1).spatial_variance == 0.0
    assert Heatmap(np.array([[0.0, 1.0]]), 1).spatial_variance == pytest.approx(0.25)
