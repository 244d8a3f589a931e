import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd import check_gradients, leaf
from mmnas import tensor as T
from mmnas.tensor import Tensor

TOL = 1e-4

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _proj(rng, shape):
    """Fixed random weights that turn a tensor into a scalar."""
    return Tensor(rng.standard_normal(shape))


UNARY = {
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "softplus": T.softplus,
    "mish": T.mish,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=0),
    "transpose": T.transpose,
    "swapaxes": lambda a: T.swapaxes(a, 0, 1),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "getitem": lambda a: T.getitem(a, (slice(1, None), 0)),
    "fancy_getitem": lambda a: T.getitem(a, np.array([0, 0, 2])),
    "sum_axis": lambda a: T.tsum(a, axis=1, keepdims=True),
    "mean": lambda a: T.mean(a, axis=0),
    "scale": lambda a: T.scale(a, -2.5),
    "neg": T.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    op = UNARY[name]
    w = _proj(rng, op(x.detach()).shape)
    assert check_gradients(lambda: T.tsum(T.mul(op(x), w)), [x]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_positive_domain_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4, low=0.5, high=2.0)
    w = _proj(rng, (3, 4))
    for op in (T.log, lambda a: T.power(a, 1.7), lambda a: T.power(a, -0.5), T.relu, lambda a: T.clamp_min(a, 0.1)):
        assert check_gradients(lambda: T.tsum(T.mul(op(x), w)), [x]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_binary_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 1)
    w = _proj(rng, (2, 3, 4))
    assert check_gradients(lambda: T.tsum(T.mul(T.add(a, b), w)), [a, b]) < TOL
    assert check_gradients(lambda: T.tsum(T.mul(T.mul(a, b), w)), [a, b]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = _proj(rng, (2, 3, 5))
    assert check_gradients(lambda: T.tsum(T.mul(T.matmul(a, b), w)), [a, b]) < TOL
    m, v = leaf(rng, 3, 4), leaf(rng, 2, 4, 5)
    w2 = _proj(rng, (2, 3, 5))
    assert check_gradients(lambda: T.tsum(T.mul(T.matmul(m, v), w2)), [m, v]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_concat_and_stack_weighted_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    w = _proj(rng, (2, 5))
    assert check_gradients(lambda: T.tsum(T.mul(T.concat([a, b], axis=1), w)), [a, b]) < TOL
    k = leaf(rng, 3)
    xs = [leaf(rng, 2, 2) for _ in range(3)]
    w2 = _proj(rng, (2, 2))
    assert check_gradients(lambda: T.tsum(T.mul(T.stack_weighted(k, xs), w2)), [k, *xs]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_channel_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    w, x = leaf(rng, 4, 3), leaf(rng, 2, 3, 5)
    p = _proj(rng, (2, 4, 5))
    assert check_gradients(lambda: T.tsum(T.mul(T.channel_linear(w, x), p)), [w, x]) < TOL


def test_channel_linear_matches_einsum():
    rng = np.random.default_rng(0)
    w, x = rng.standard_normal((4, 3)), rng.standard_normal((2, 3, 5))
    np.testing.assert_allclose(T.channel_linear(Tensor(w), Tensor(x)).data, np.einsum("oc,bcl->bol", w, x))
    with pytest.raises(ValueError):
        T.channel_linear(Tensor(w), Tensor(rng.standard_normal((2, 4, 5))))


@pytest.mark.parametrize("seed", range(3))
def test_conv1d_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 2, 3, 6), leaf(rng, 4, 3, 3), leaf(rng, 4)
    p = _proj(rng, (2, 4, 6))
    assert check_gradients(lambda: T.tsum(T.mul(T.conv1d(x, w, b), p)), [x, w, b]) < TOL


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    logits, teacher = leaf(rng, 5, 4), leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    assert check_gradients(lambda: T.cross_entropy(logits, labels), [logits]) < TOL
    assert check_gradients(lambda: T.kl_divergence(logits, teacher.detach()), [logits]) < TOL
    targets = rng.integers(0, 2, size=(5, 4)).astype(float)
    assert check_gradients(lambda: T.binary_cross_entropy(logits, targets), [logits]) < TOL


def test_conv1d_hand_example():
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    w = Tensor(np.ones((1, 1, 3)))
    # zero padding at both ends
    np.testing.assert_allclose(T.conv1d(x, w).data[0, 0], [3.0, 6.0, 9.0, 7.0])


def test_cross_entropy_uniform_logits_is_log_classes():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(np.log(4))


def test_kl_of_identical_distributions_is_zero():
    z = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    assert T.kl_divergence(z, z).item() == pytest.approx(0.0, abs=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(x, x).backward()


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.tsum(T.mul(x, x))
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shared_subexpression_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = T.mul(x, x)
    T.add(y, y).backward()
    assert x.grad == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert y.is_leaf and not y.requires_grad
    assert T.is_grad_enabled()


def test_nonfinite_result_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor(np.array([0.0])))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_power_zero_exponent_has_zero_gradient():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = T.power(x, 0.0)
    np.testing.assert_array_equal(y.data, 1.0)
    T.tsum(y).backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_checksum_changes_with_values():
    a = [Tensor(np.ones(3))]
    b = [Tensor(np.array([1.0, 1.0, 1.0 + 1e-12]))]
    assert T.parameters_checksum(a) == T.parameters_checksum([Tensor(np.ones(3))])
    assert T.parameters_checksum(a) != T.parameters_checksum(b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite), finite)
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_mish_matches_formula(x):
    expected = x * np.tanh(np.log1p(np.exp(x)))
    np.testing.assert_allclose(T.mish(Tensor(x)).data, expected, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.sampled_from([1, 3, 5]))
def test_conv1d_preserves_length(b, c, length, k):
    x = Tensor(np.ones((b, c, length)))
    w = Tensor(np.ones((2, c, k)))
    assert T.conv1d(x, w).shape == (b, 2, length)


def test_scalar_index_gives_zero_dim_tensor():
    k = Tensor(np.arange(3.0), requires_grad=True)
    s = T.getitem(k, 1)
    assert s.shape == ()
    T.mul(s, Tensor(np.ones((2, 2)))).sum().backward()
    np.testing.assert_array_equal(k.grad, [0.0, 4.0, 0.0])
