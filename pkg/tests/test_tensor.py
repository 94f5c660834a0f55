import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jlml import tensor as T
from jlml.tensor import ConfigError, DimensionError, Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_matmul_examples():
    out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[5.0], [7]]))
    np.testing.assert_array_equal(out.data, [[5], [7]])
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data, [[11]])
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
    assert T.gradcheck(T.matmul, [a, b], seed=seed) < 1e-5


def test_matmul_backward_formula(rng):
    a, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_conv2d_examples():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    expected = [[x[0, 0, i:i + 3, j:j + 3].sum() for j in range(2)] for i in range(2)]
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv2d_output_size_and_errors():
    x = Tensor(np.zeros((2, 3, 224, 224), dtype=np.float32))
    w = Tensor(np.zeros((4, 3, 3, 3), dtype=np.float32))
    assert T.conv2d(x, w, stride=2, pad=1).shape == (2, 4, 112, 112)
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


def _conv_reference(x, w, b, stride, pad):
    sh, sw = stride
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    N, C, H, W = xp.shape
    F, _, kh, kw = w.shape
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, f, i, j] = (xp[n, :, i * sh:i * sh + kh, j * sw:j * sw + kw] * w[f]).sum() + b[f]
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, (1, 1), 1), (3, (2, 2), 1), (1, (2, 2), 0), (2, (1, 2), 0)])
def test_conv2d_matches_loop_reference(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, _conv_reference(x, w, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 2, 0)])
def test_conv2d_gradcheck(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((2, 3, 5, 5)))
    w = t64(rng.standard_normal((2, 3, k, k)))
    b = t64(rng.standard_normal(2))
    err = T.gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad), [x, w, b], seed=seed)
    assert err < 1e-4


def test_relu_and_pool_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0, 2])).data, [0, 0, 2])
    mp = T.maxpool2d(Tensor(np.array([[[[1.0, 2], [3, 4]]]])), 2, 2)
    np.testing.assert_array_equal(mp.data, [[[[4]]]])
    ap = T.avgpool2d(Tensor(np.full((1, 2, 7, 7), 3.5)), 7)
    np.testing.assert_array_equal(ap.data, np.full((1, 2, 1, 1), 3.5))


def test_relu_subgradient_zero_at_kink():
    x = t64([-1.0, 0.0, 2.0])
    T.relu(x).backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_relu_gradcheck_away_from_zero(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((4, 5))
    v = np.where(np.abs(v) < 0.05, 0.5, v)
    assert T.gradcheck(T.relu, [t64(v)], seed=seed) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_pool_gradcheck(seed):
    rng = np.random.default_rng(seed)
    # distinct values so max-pool ties cannot flip under perturbation
    x = t64(rng.permutation(2 * 2 * 8 * 8).reshape(2, 2, 8, 8) * 0.1)
    assert T.gradcheck(lambda x: T.maxpool2d(x, 3, 2, 1), [x], seed=seed) < 1e-4
    assert T.gradcheck(lambda x: T.maxpool2d(x, 2, (1, 2), (0, 1, 0, 0)), [x], seed=seed) < 1e-4
    x2 = t64(rng.standard_normal((2, 2, 8, 8)))
    assert T.gradcheck(lambda x: T.avgpool2d(x, (4, 8)), [x2], seed=seed) < 1e-4
    assert T.gradcheck(lambda x: T.avgpool2d(x, 2, 2), [x2], seed=seed) < 1e-4


def test_pool_backward_distribution(rng):
    x = t64(rng.standard_normal((2, 3, 6, 6)))
    g = rng.standard_normal((2, 3, 3, 3))
    T.avgpool2d(x, 2, 2).backward(g)
    assert np.isclose(x.grad.sum(), g.sum())

    x = t64(rng.standard_normal((2, 3, 6, 6)))
    out = T.maxpool2d(x, 2, 2)
    out.backward(np.ones(out.shape))
    # non-zero only where the input equals its window max
    wins = x.data.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5))
    is_max = x.data == np.repeat(np.repeat(wins, 2, axis=2), 2, axis=3)
    assert np.all(x.grad[~is_max] == 0)
    assert np.all(x.grad[is_max] == 1)


def test_local_pool_keeps_height_halves_width():
    x = Tensor(np.zeros((1, 1, 28, 112)))
    assert T.maxpool2d(x, 2, (1, 2), (0, 1, 0, 0)).shape == (1, 1, 28, 56)


def test_slice_h_examples():
    x = Tensor(np.arange(2 * 3 * 8 * 2, dtype=np.float32).reshape(2, 3, 8, 2))
    parts = T.slice_h(x, 4)
    assert [p.shape for p in parts] == [(2, 3, 2, 2)] * 4
    np.testing.assert_array_equal(parts[0].data, x.data[:, :, :2])
    assert T.slice_h(x, 1)[0] is x
    with pytest.raises(ConfigError):
        T.slice_h(x, 3)


@given(st.sampled_from([1, 2, 3, 4, 6, 12]), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_slice_concat_roundtrip(m, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, 12, 5)).astype(np.float32))
    back = T.concat(T.slice_h(x, m), axis=2)
    assert back.data.tobytes() == x.data.tobytes()


def test_concat_examples_and_errors():
    a, b = Tensor(np.ones((2, 512))), Tensor(np.zeros((2, 512)))
    assert T.concat([a, b], axis=1).shape == (2, 1024)
    assert T.concat([Tensor(np.ones((1, 256)))] * 4, axis=1).shape == (1, 1024)
    assert T.concat([a], axis=1) is a
    with pytest.raises(DimensionError):
        T.concat([a, Tensor(np.ones((3, 512)))], axis=1)


@pytest.mark.parametrize("seed", range(10))
def test_concat_slice_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng.standard_normal((2, 3))), t64(rng.standard_normal((2, 4)))
    assert T.gradcheck(lambda a, b: T.concat([a, b], axis=1), [a, b], seed=seed) < 1e-9
    x = t64(rng.standard_normal((1, 2, 4, 3)))
    assert T.gradcheck(lambda x: T.slice_h(x, 2)[1], [x], seed=seed) < 1e-9


def test_batchnorm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batchnorm2d(Tensor(np.full((3, 2, 2, 2), 4.0)), g, b, rm, rv, training=True)
    np.testing.assert_array_equal(out.data, 0)

    x = Tensor(np.random.default_rng(0).standard_normal((4, 2, 3, 3)))
    out = T.batchnorm2d(x, g, Tensor(np.full(2, 5.0)), np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 5.0)


def test_batchnorm_running_stats():
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) + 3
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    before = rm.copy()
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_array_equal(rm, before)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((3, 2, 2, 3)))
    g = t64(rng.uniform(0.5, 1.5, 2))
    b = t64(rng.standard_normal(2))
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)

    def op(x, g, b):
        return T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training)

    assert T.gradcheck(op, [x, g, b], seed=seed) < 1e-4


def test_gradcheck_linear_exact(rng):
    x = t64(rng.standard_normal((3, 4)))
    w = t64(rng.standard_normal((2, 4)))
    b = t64(rng.standard_normal(2))
    assert T.gradcheck(T.linear, [x, w, b]) < 1e-9


def test_gradcheck_reports_non_finite():
    def bad(x):
        return T.record("bad", x.data * 1.0, (x,), lambda g: (g * np.nan,))

    with pytest.raises(FloatingPointError):
        T.gradcheck(bad, [t64([1.0, 2.0])])


def test_gradcheck_detects_wrong_backward():
    def wrong(x):
        return T.record("wrong", x.data * 3.0, (x,), lambda g: (-3.0 * g,))

    assert T.gradcheck(wrong, [t64([1.0, 2.0])]) > 0.5


def test_backward_twice_is_error(rng):
    x = t64(rng.standard_normal((2, 2)))
    y = T.sum_all(T.relu(x))
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_graph_reverse_order():
    x = t64([1.0, -2.0])
    y = T.sum_all(T.mul(T.relu(x), 2.0))
    graph = T.Graph(y)
    names = [n.name for n in graph.nodes]
    assert names == ["relu", "mul", "sum"]
    assert graph.backward(np.array(1.0)) == ["sum", "mul", "relu"]


def test_gradient_accumulates_over_fanout():
    x = t64([1.0, 2.0])
    y = T.sum_all(T.add(T.mul(x, 2.0), T.mul(x, 3.0)))
    y.backward()
    np.testing.assert_array_equal(x.grad, [5, 5])


def test_non_finite_forward_is_error():
    with pytest.raises(FloatingPointError):
        T.add(Tensor([1.0]), Tensor([np.inf]))


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert a.tobytes() == b.tobytes()
