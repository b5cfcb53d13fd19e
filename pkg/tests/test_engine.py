import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perturbforge import engine as E
from perturbforge.exceptions import ContractError, DimensionError, LineageError, NumericalError

from gradcheck import numerical_grad, relative_error

TOL = 1e-4


def T(a, grad=False):
    return E.Tensor(np.asarray(a, dtype=E.get_dtype()), requires_grad=grad)


def check_grads(build, arrays, rng=None):
    """Compare engine gradients of scalar ``build(*tensors)`` against central differences."""
    with E.precision(np.float64):
        tensors = [T(a, grad=True) for a in arrays]
        with E.Tape() as tape:
            loss = build(*tensors)
        grads = E.backpropagate(tape, loss, wrt=tensors)

        def f(arrs):
            return build(*[T(a) for a in arrs]).item()

        worst = 0.0
        for i, t in enumerate(tensors):
            num = numerical_grad(f, [np.asarray(a, dtype=np.float64) for a in arrays], i)
            worst = max(worst, relative_error(grads[t].data, num))
    return worst


def weighted_sum(t, rng):
    """Random linear functional so every output coordinate matters."""
    w = T(rng.normal(size=t.shape))
    return E.sum(E.mul(t, w))


# ----------------------------------------------------------- forward cases


def test_relu_values():
    out = E.forward_primitive("relu", T([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_dense_identity():
    out = E.forward_primitive("dense", T([[1.0, 2.0]]), T(np.eye(2)), T(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_conv_identity_kernel(n, h, w, seed):
    x = np.random.default_rng(seed).random((n, h, w, 1)).astype(np.float32)
    out = E.forward_primitive("conv2d", T(x), T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_output_shapes():
    x = T(np.zeros((2, 7, 9, 3)))
    k = T(np.zeros((3, 3, 3, 4)))
    assert E.conv2d(x, k).shape == (2, 5, 7, 4)
    assert E.conv2d(x, k, padding="same").shape == (2, 7, 9, 4)
    assert E.conv2d(x, k, stride=2).shape == (2, 3, 4, 4)


def test_max_pool_floor_division():
    x = T(np.arange(2 * 5 * 7 * 1, dtype=float).reshape(2, 5, 7, 1))
    out = E.max_pool(x, 2)
    assert out.shape == (2, 2, 3, 1)
    assert out.data[0, 0, 0, 0] == x.data[0, 1, 1, 0]


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 6, 2))
    k = rng.normal(size=(3, 2, 2, 3))
    expected = np.zeros((1, 3, 5, 3))
    for i in range(3):
        for j in range(5):
            patch = x[0, i : i + 3, j : j + 2, :]
            expected[0, i, j] = np.tensordot(patch, k, axes=3)
    with E.precision(np.float64):
        out = E.conv2d(T(x), T(k))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_dimension_error_names_primitive():
    with pytest.raises(DimensionError, match="dense"):
        E.dense(T(np.zeros((1, 3))), T(np.zeros((4, 2))))
    with pytest.raises(DimensionError, match="add"):
        E.add(T(np.zeros((2, 3))), T(np.zeros((3, 2))))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        E.forward_primitive("tanh", T([1.0]))


def test_nonfinite_input_rejected():
    with pytest.raises(NumericalError):
        T([np.nan, 1.0])


# -------------------------------------------------------- backpropagation


def test_square_sum_gradient():
    x = T([3.0, -2.0], grad=True)
    with E.Tape() as tape:
        loss = E.sum(E.mul(x, x))
    grads = E.backpropagate(tape, loss)
    np.testing.assert_array_equal(grads[x].data, [6.0, -4.0])
    np.testing.assert_array_equal(x.grad.data, [6.0, -4.0])


def test_unused_leaf_gets_zero_gradient():
    x = T([1.0, 2.0], grad=True)
    w = T([[5.0, 6.0]], grad=True)
    with E.Tape() as tape:
        loss = E.sum(x)
    grads = E.backpropagate(tape, loss, wrt=[x, w])
    np.testing.assert_array_equal(grads[w].data, np.zeros((1, 2)))


def test_nonscalar_loss_is_contract_error():
    x = T([1.0, 2.0], grad=True)
    with E.Tape() as tape:
        y = E.relu(x)
    with pytest.raises(ContractError):
        E.backpropagate(tape, y)


def test_loss_from_other_tape_is_lineage_error():
    x = T([1.0, 2.0], grad=True)
    with E.Tape() as t1:
        E.relu(x)
    with E.Tape():
        loss = E.sum(x)
    with pytest.raises(LineageError):
        E.backpropagate(t1, loss)


def test_empty_tape_is_contract_error():
    with E.Tape() as tape:
        pass
    with pytest.raises(ContractError):
        E.backpropagate(tape, T(1.0))


def test_nothing_recorded_without_tape_or_grad():
    x = T([1.0])
    with E.Tape() as tape:
        E.relu(x)
    assert len(tape) == 0


def test_tape_topological_order():
    rng = np.random.default_rng(0)
    x = T(rng.normal(size=(2, 3)), grad=True)
    w = T(rng.normal(size=(3, 2)), grad=True)
    with E.Tape() as tape:
        loss = E.sum(E.relu(E.dense(x, w)))
    seen = {id(x), id(w)}
    for node in tape.nodes:
        for t in node.inputs:
            assert id(t) in seen or not t.requires_grad
        seen.add(id(node.output))
    assert tape.produced(loss)


def test_two_layer_network_gradients():
    rng = np.random.default_rng(11)
    arrays = [rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=6),
              rng.normal(size=(6, 2)), rng.normal(size=2)]
    labels = [0, 1, 1, 0]

    def build(x, w1, b1, w2, b2):
        return E.softmax_cross_entropy(E.dense(E.relu(E.dense(x, w1, b1)), w2, b2), labels)

    assert check_grads(build, arrays) < TOL


def test_backprop_is_linear():
    rng = np.random.default_rng(5)
    xa = rng.normal(size=(3, 4)).astype(np.float32)
    wa = rng.normal(size=(4, 2)).astype(np.float32)
    a, b = 0.7, -1.3

    def grads(fn):
        x, w = T(xa, True), T(wa, True)
        with E.Tape() as tape:
            loss = fn(x, w)
        g = E.backpropagate(tape, loss, wrt=[x, w])
        return g[x].data.astype(np.float64), g[w].data.astype(np.float64)

    l1 = lambda x, w: E.sum(E.relu(E.dense(x, w)))
    l2 = lambda x, w: E.softmax_cross_entropy(E.dense(x, w), [0, 1, 1])
    combo = lambda x, w: E.add(E.scale(l1(x, w), a), E.scale(l2(x, w), b))
    g1, g2, gc = grads(l1), grads(l2), grads(combo)
    for i in range(2):
        np.testing.assert_allclose(gc[i], a * g1[i] + b * g2[i], rtol=1e-5, atol=1e-6)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = T(rng.normal(size=(2, 6, 6, 3)), True)
        k = T(rng.normal(size=(3, 3, 3, 4)), True)
        with E.Tape() as tape:
            h = E.max_pool(E.relu(E.conv2d(x, k)), 2)
            loss = E.sum(E.mul(h, h))
        g = E.backpropagate(tape, loss, wrt=[x, k])
        return loss.data.tobytes(), g[x].data.tobytes(), g[k].data.tobytes()

    assert run() == run()


def test_intermediate_wrt():
    x = T([1.0, -2.0, 3.0], True)
    with E.Tape() as tape:
        h = E.scale(x, 2.0)
        loss = E.sum(E.relu(h))
    g = E.backpropagate(tape, loss, wrt=[h, x])
    np.testing.assert_array_equal(g[h].data, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(g[x].data, [2.0, 0.0, 2.0])


# ------------------------------------------- per-primitive FD properties

seeds = st.integers(0, 2**31 - 1)
FD = settings(max_examples=100, deadline=None)


@given(seeds)
@FD
def test_fd_dense(seed):
    rng = np.random.default_rng(seed)
    n, i, o = rng.integers(1, 4, size=3)
    arrays = [rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)]
    assert check_grads(lambda x, w, b: weighted_sum(E.dense(x, w, b), np.random.default_rng(seed)), arrays) < TOL


@given(seeds, st.sampled_from(["valid", "same"]), st.sampled_from([1, 2]))
@FD
def test_fd_conv2d(seed, padding, stride):
    rng = np.random.default_rng(seed)
    kh, kw = rng.integers(1, 4, size=2)
    h, w = kh + rng.integers(0, 3), kw + rng.integers(0, 3)
    cin, cout = rng.integers(1, 3, size=2)
    arrays = [rng.normal(size=(1, h, w, cin)), rng.normal(size=(kh, kw, cin, cout)), rng.normal(size=cout)]

    def build(x, k, b):
        return weighted_sum(E.conv2d(x, k, b, stride=stride, padding=padding), np.random.default_rng(seed))

    assert check_grads(build, arrays) < TOL


@given(seeds)
@FD
def test_fd_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.01] = 0.5  # stay away from the kink
    assert check_grads(lambda t: weighted_sum(E.relu(t), np.random.default_rng(seed)), [x]) < TOL


@given(seeds)
@FD
def test_fd_max_pool(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced wider than the FD step keep the argmax stable
    x = rng.permutation(32).reshape(1, 4, 4, 2) * 0.01 + rng.normal(size=(1, 4, 4, 2)) * 1e-4
    assert check_grads(lambda t: weighted_sum(E.max_pool(t, 2), np.random.default_rng(seed)), [x]) < TOL


@given(seeds)
@FD
def test_fd_flatten_and_scale(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 3, 1))
    f = float(rng.normal())
    assert check_grads(lambda t: weighted_sum(E.scale(E.flatten(t), f), np.random.default_rng(seed)), [x]) < TOL


@given(seeds)
@FD
def test_fd_bilinear_downscale(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 9, size=2)
    oh, ow = rng.integers(1, h + 1), rng.integers(1, w + 1)
    x = rng.random((1, h, w, 2))
    build = lambda t: weighted_sum(E.bilinear_downscale(t, oh, ow), np.random.default_rng(seed))
    assert check_grads(build, [x]) < TOL


@given(seeds)
@FD
def test_fd_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 5), rng.integers(2, 4)
    labels = rng.integers(0, c, size=n)
    z = rng.normal(size=(n, c)) * 3
    assert check_grads(lambda t: E.softmax_cross_entropy(t, labels), [z]) < TOL


@given(seeds)
@FD
def test_fd_add_mul_sum_mean(seed):
    rng = np.random.default_rng(seed)
    a, b, bias = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=4)

    def build(x, y, c):
        return E.add(E.sum(E.mul(E.add(x, c), y)), E.mean(E.mul(x, x)))

    assert check_grads(build, [a, b, bias]) < TOL


@given(seeds)
@FD
def test_fd_sigmoid_sqrt(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    p = rng.random((2, 3)) + 0.5
    build = lambda s, q: E.add(weighted_sum(E.sigmoid(s), np.random.default_rng(seed)), E.sum(E.sqrt(q)))
    assert check_grads(build, [x, p]) < TOL


@given(seeds)
@FD
def test_fd_pad_concat_select(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 2, 2))
    y = rng.normal(size=(1, 2, 2, 2))

    def build(a, b):
        padded = E.pad_edge(a, 1, 1)
        stacked = E.concat([E.select(padded, 0, axis=3), E.select(E.pad_edge(b, 1, 1), 1, axis=3)], axis=1)
        return weighted_sum(stacked, np.random.default_rng(seed))

    assert check_grads(build, [x, y]) < TOL
