import numpy as np
import pytest
from hypothesis import given, strategies as st

from ont import autodiff as ad
from ont.autodiff import Tensor


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check(f, *leaves, tol=1e-6):
    """Analytic gradient of scalar f() against central differences, for every leaf."""
    for t in leaves:
        t.grad = None
    ad.backward(f())
    for t in leaves:
        num = ad.numeric_grad(lambda: f().item(), t)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


# -- elementwise / reductions, each against finite differences

@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_ops_with_broadcasting(rng, name):
    a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
    if name == "div":
        b.data = np.abs(b.data) + 0.5
    op = getattr(ad, name)
    w = rng.standard_normal((3, 4))
    check(lambda: ad.tsum(op(a, b) * w), a, b)


@pytest.mark.parametrize("fn", [
    lambda x: ad.square(x), lambda x: ad.tanh(x), lambda x: ad.abs_smooth(x, 1e-3),
    lambda x: ad.leaky_relu(x, 0.1), lambda x: ad.scale(x, -2.5),
    lambda x: ad.sqrt(ad.square(x), 1e-2),
])
def test_unary_ops(rng, fn):
    x = leaf(rng, 2, 5)
    x.data[np.abs(x.data) < 1e-3] = 0.3  # keep away from the leaky-relu kink
    w = rng.standard_normal((2, 5))
    check(lambda: ad.tsum(fn(x) * w), x)


def test_reductions_and_norms(rng):
    x = leaf(rng, 3, 6)
    y = leaf(rng, 3, 6)
    check(lambda: ad.tsum(ad.mean(x, axis=1) * Tensor([1.0, -2.0, 0.5])), x)
    check(lambda: ad.tsum(ad.norm(x, -1) * Tensor([1.0, 2.0, 3.0])), x)
    check(lambda: ad.tsum(ad.inner(x, y, -1)), x, y)


def test_softmax_and_layer_norm(rng):
    x = leaf(rng, 2, 3, 5)
    w = rng.standard_normal((2, 3, 5))
    check(lambda: ad.tsum(ad.softmax(x, -1) * w), x)
    check(lambda: ad.tsum(ad.layer_norm(x, (1, 2)) * w), x)
    out = ad.layer_norm(x, -1).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)


def test_shape_ops(rng):
    x = leaf(rng, 2, 3, 4)
    y = leaf(rng, 2, 2, 4)
    w = rng.standard_normal((2, 5, 4))
    check(lambda: ad.tsum(ad.concat([x, y], axis=1) * w), x, y)
    w2, w3 = rng.standard_normal((4, 6)), rng.standard_normal((2, 3, 4))
    check(lambda: ad.tsum(x.transpose(2, 0, 1).reshape(4, 6) * w2), x)
    idx = np.array([0, 2, 2, 1])
    check(lambda: ad.tsum(x[:, :, idx] * w3), x)
    check(lambda: ad.tsum(x[1, 1:]), x)


def test_batched_matmul_broadcast(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    check(lambda: ad.tsum(ad.matmul(a, b) * w), a, b)


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([(1, 1), (2, 2), (2, 1)]),
       st.sampled_from([(0, 0), (1, 1)]), st.integers(0, 10_000))
def test_conv_and_transpose_are_adjoint(c, o, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, 7, 6))
    w = rng.standard_normal((o, c, 3, 3))
    y = ad.conv2d_raw(x, w, stride, pad)
    g = rng.standard_normal(y.shape)
    back = ad.conv_transpose2d(Tensor(g), Tensor(w), stride, pad, output_size=x.shape[2:]).data
    assert np.isclose(np.sum(y * g), np.sum(x * back), rtol=1e-10)


def test_conv_gradients(rng):
    x, w = leaf(rng, 1, 2, 5, 6), leaf(rng, 3, 2, 3, 3)
    r = rng.standard_normal((1, 3, 3, 3))
    check(lambda: ad.tsum(ad.conv2d(x, w, (2, 2), (1, 1)) * r), x, w)
    xt, wt = leaf(rng, 1, 3, 3, 3), leaf(rng, 3, 2, 3, 3)
    r2 = rng.standard_normal((1, 2, 6, 5))
    check(lambda: ad.tsum(ad.conv_transpose2d(xt, wt, (2, 2), (1, 1), (6, 5)) * r2), xt, wt)


def test_conv_matches_naive_loop(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    out = ad.conv2d_raw(x, w, (2, 1), (1, 1))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(2):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- engine semantics

def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 4)
    ad.backward(ad.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_detach_blocks_gradient(rng):
    x = leaf(rng, 4)
    ad.backward(ad.tsum(x * ad.detach(x)))
    np.testing.assert_allclose(x.grad, x.data)


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with ad.no_grad():
        y = ad.tsum(ad.square(x))
    assert not y.requires_grad and y._parents == ()
    z = ad.tsum(ad.square(x))
    assert z.requires_grad


def test_non_scalar_backward_rejected(rng):
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(leaf(rng, 3) * 2.0)


def test_non_finite_names_the_op():
    x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    with pytest.raises(ad.NonFiniteError, match="div"), np.errstate(divide="ignore"):
        ad.div(Tensor([1.0, 1.0]), x)


def test_sqrt_guard_is_finite_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    ad.backward(ad.tsum(ad.sqrt(x)))
    assert np.all(np.isfinite(x.grad))


def test_relative_error_floor():
    r = ad.relative_error(np.array([1e-12, 1.0]), np.array([0.0, 1.0 + 1e-6]), floor=1e-6)
    assert r[0] == pytest.approx(1e-6)
    assert r[1] == pytest.approx(1e-6, rel=1e-3)
