import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core import tensor as T
from core.tensor import GradTape, Tensor
from errors import DimensionError, TapeConsumedError

from conftest import finite_difference, relative_error


@st.composite
def conv_cases(draw):
    batch = draw(st.integers(1, 2))
    c_in = draw(st.integers(1, 3))
    c_out = draw(st.integers(1, 3))
    kh = draw(st.integers(1, 4))
    kw = draw(st.integers(1, 4))
    h = draw(st.integers(kh, 8))
    w = draw(st.integers(kw, 8))
    padding = draw(st.sampled_from(["same", "valid"]))
    seed = draw(st.integers(0, 2**31 - 1))
    return batch, c_in, c_out, (kh, kw), (h, w), padding, seed


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_correlation_and_transpose_are_adjoint(case):
    batch, c_in, c_out, kernel, grid, padding, seed = case
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, c_in, *grid)))
    f = Tensor(rng.standard_normal((c_out, c_in, *kernel)))
    y = T.conv2d_correlate(x, f, padding)
    z = Tensor(rng.standard_normal(y.shape))
    back = T.conv2d_transpose(z, f, padding, output_hw=grid)
    lhs = np.vdot(y.data, z.data)
    rhs = np.vdot(x.data, back.data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_same_padding_puts_extra_zero_after():
    assert T.same_padding(3) == (1, 1)
    assert T.same_padding(8) == (3, 4)
    assert T.same_padding(1) == (0, 0)


def test_same_correlation_keeps_extent_for_even_kernels():
    x = Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
    f = Tensor(np.ones((1, 1, 2, 2)))
    out = T.conv2d_correlate(x, f, "same")
    assert out.shape == (1, 1, 5, 5)
    # top-left output covers x[0:2, 0:2]; bottom-right sees the zero pad
    assert out.data[0, 0, 0, 0] == 0 + 1 + 5 + 6
    assert out.data[0, 0, 4, 4] == 24


def test_correlation_matches_direct_sum(rng):
    x = rng.standard_normal((2, 6, 7))
    f = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d_correlate(Tensor(x), Tensor(f), "valid").data
    expected = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                expected[o, i, j] = np.sum(f[o] * x[:, i:i + 3, j:j + 3])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_channel_mismatch_is_a_dimension_error(rng):
    with pytest.raises(DimensionError):
        T.conv2d_correlate(Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(rng.standard_normal((1, 3, 3, 3))))


def test_tensor_rejects_empty_extents():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_soft_shrink_values():
    out = T.soft_shrink(Tensor([-2.0, -0.5, 0.0, 0.5, 2.0]), 1.0)
    np.testing.assert_array_equal(out.data, [-1.0, 0.0, 0.0, 0.0, 1.0])


def test_backward_twice_raises():
    w = Tensor([1.0, 2.0])
    with GradTape() as tape:
        tape.watch(w)
        loss = T.total(T.scale(w, 3.0))
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads[w], [3.0, 3.0])
    with pytest.raises(TapeConsumedError):
        T.backward(tape, loss)


def test_unreached_leaf_gets_zero_gradient():
    a, b = Tensor([1.0, 2.0]), Tensor([[1.0, 1.0]])
    with GradTape() as tape:
        tape.watch(a, b)
        loss = T.total(a)
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads[b], np.zeros((1, 2)))


def test_operations_outside_a_tape_are_not_recorded():
    w = Tensor([1.0])
    T.scale(w, 2.0)
    with GradTape() as tape:
        tape.watch(w)
    assert len(tape) == 0


def test_matmul_and_bias_gradients_match_finite_differences(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    w = Tensor(rng.standard_normal((3, 5)))
    b = Tensor(rng.standard_normal(5))
    labels = np.array([0, 4, 2, 1])

    def loss_of(w_value, b_value):
        return T.cross_entropy(T.add_bias(T.matmul(x, Tensor(w_value)), Tensor(b_value)), labels).item()

    with GradTape() as tape:
        tape.watch(w, b)
        loss = T.cross_entropy(T.add_bias(T.matmul(x, w), b), labels)
    grads = T.backward(tape, loss)

    assert relative_error(grads[w], finite_difference(lambda v: loss_of(v, b.data), w.numpy())) < 1e-6
    assert relative_error(grads[b], finite_difference(lambda v: loss_of(w.data, v), b.numpy())) < 1e-6


def test_batch_norm_train_normalizes_each_channel(rng):
    x = Tensor(100.0 * rng.standard_normal((8, 3, 4, 4)) + 5.0)
    out, mu, var = T.batch_norm_train(x, T.ones((3,)), T.zeros((3,)), 1e-5)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-6)
    np.testing.assert_allclose(mu, x.data.mean(axis=(0, 2, 3)))


def test_batch_norm_gradient_matches_finite_differences(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    gamma = Tensor(rng.uniform(0.5, 1.5, 2))
    beta = Tensor(rng.standard_normal(2))
    weights = rng.standard_normal(x.shape)

    def loss_of(x_value, gamma_value, beta_value):
        out, _, _ = T.batch_norm_train(Tensor(x_value), Tensor(gamma_value), Tensor(beta_value), 1e-5)
        return float(np.sum(out.data * weights))

    with GradTape() as tape:
        tape.watch(x, gamma, beta)
        out, _, _ = T.batch_norm_train(x, gamma, beta, 1e-5)
        loss = T.inner(out, Tensor(weights))
    grads = T.backward(tape, loss)

    assert relative_error(grads[x], finite_difference(lambda v: loss_of(v, gamma.data, beta.data), x.numpy())) < 1e-6
    assert relative_error(grads[gamma], finite_difference(lambda v: loss_of(x.data, v, beta.data), gamma.numpy())) < 1e-6
    assert relative_error(grads[beta], finite_difference(lambda v: loss_of(x.data, gamma.data, v), beta.numpy())) < 1e-6


def test_conv_gradients_match_finite_differences(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    f = Tensor(rng.standard_normal((3, 2, 2, 2)))
    weights = rng.standard_normal((2, 2, 5, 5))

    def loss_of(x_value, f_value):
        codes = T.conv2d_correlate(Tensor(x_value), Tensor(f_value), "same")
        back = T.conv2d_transpose(codes, Tensor(f_value), "same")
        return float(np.sum(back.data * weights))

    with GradTape() as tape:
        tape.watch(x, f)
        back = T.conv2d_transpose(T.conv2d_correlate(x, f, "same"), f, "same")
        loss = T.inner(back, Tensor(weights))
    grads = T.backward(tape, loss)

    assert relative_error(grads[x], finite_difference(lambda v: loss_of(v, f.data), x.numpy())) < 1e-6
    assert relative_error(grads[f], finite_difference(lambda v: loss_of(x.data, v), f.numpy())) < 1e-6


def test_power_iteration_matches_singular_value(rng):
    A = rng.standard_normal((6, 4))
    estimate = T.power_iteration_sigma_max(lambda v: A @ v, lambda u: A.T @ u, (4,), iters=200)
    assert estimate.value == pytest.approx(np.linalg.norm(A, 2) ** 2, rel=1e-8)
    assert not estimate.degenerate


def test_power_iteration_on_zero_operator_is_degenerate():
    estimate = T.power_iteration_sigma_max(lambda v: 0 * v, lambda u: 0 * u, (3,))
    assert estimate.value == 0.0
    assert estimate.degenerate


@settings(max_examples=50, deadline=None)
@given(conv_cases(), st.floats(-3, 3), st.floats(-3, 3))
def test_convolutions_are_linear_in_signal_and_filters(case, a, b):
    batch, c_in, c_out, kernel, grid, padding, seed = case
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, batch, c_in, *grid))
    f, g = rng.standard_normal((2, c_out, c_in, *kernel))

    def corr(signal, filters):
        return T.conv2d_correlate(Tensor(signal), Tensor(filters), padding).data

    np.testing.assert_allclose(corr(a * x + b * y, f), a * corr(x, f) + b * corr(y, f), atol=1e-9)
    np.testing.assert_allclose(corr(x, a * f + b * g), a * corr(x, f) + b * corr(x, g), atol=1e-9)

    codes = corr(x, f)
    other = rng.standard_normal(codes.shape)

    def synth(z):
        return T.conv2d_transpose(Tensor(z), Tensor(f), padding, output_hw=grid).data

    np.testing.assert_allclose(synth(a * codes + b * other), a * synth(codes) + b * synth(other), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_matmul_is_linear(n, k, m, a, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, n, k))
    w = rng.standard_normal((k, m))
    lhs = T.matmul(Tensor(a * x + y), Tensor(w)).data
    np.testing.assert_allclose(lhs, a * (x @ w) + y @ w, atol=1e-9)


def test_scalar_results_stay_zero_dimensional(rng, recwarn):
    logits = Tensor(rng.standard_normal((3, 10)))
    with GradTape() as tape:
        tape.watch(logits)
        loss = T.cross_entropy(logits, np.array([1, 2, 3]))
        total = T.total(T.scale(logits, 2.0))
        both = T.add(loss, T.inner(total, Tensor(np.asarray(0.5))))
    assert loss.shape == ()
    assert total.shape == ()
    grads = T.backward(tape, both)
    assert grads[logits].shape == (3, 10)
    assert not [w for w in recwarn if issubclass(w.category, DeprecationWarning)]
