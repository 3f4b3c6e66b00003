"""Reverse-mode autodiff: forward values, gradients, tape discipline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import segptq.autodiff as ad
from segptq.gradcheck import check_gradients, numeric_grad

TOL = 1e-6


def leaf(rng, *shape, scale=1.0):
    return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

class TestForward:
    def test_arithmetic_matches_numpy(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 2.0
        ta, tb = ad.Tensor(a), ad.Tensor(b)
        np.testing.assert_allclose((ta + tb).data, a + b)
        np.testing.assert_allclose((ta - tb).data, a - b)
        np.testing.assert_allclose((ta * tb).data, a * b)
        np.testing.assert_allclose((ta / tb).data, a / b)
        np.testing.assert_allclose((ta @ ad.Tensor(b.T)).data, a @ b.T)

    def test_scalar_broadcasting(self, rng):
        a = rng.normal(size=(2, 5))
        t = ad.Tensor(a)
        np.testing.assert_allclose((t * 2.0 + 1.0).data, a * 2.0 + 1.0)
        np.testing.assert_allclose((1.0 - t).data, 1.0 - a)

    def test_softmax_rows_sum_to_one(self, rng):
        x = ad.Tensor(rng.normal(size=(4, 7)) * 30.0)
        s = ad.softmax_lastdim(x)
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_softmax_survives_large_logits(self):
        x = ad.Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
        s = ad.softmax_lastdim(x)
        assert np.all(np.isfinite(s.data))
        np.testing.assert_allclose(s.data[0, :2], [0.5, 0.5])

    def test_layer_norm_standardizes(self, rng):
        x = ad.Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
        g = ad.Tensor(np.ones(16))
        b = ad.Tensor(np.zeros(16))
        y = ad.layer_norm(x, g, b).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_division_by_zero_raises(self):
        with pytest.raises(ZeroDivisionError):
            ad.Tensor(np.ones(3)) / ad.Tensor(np.array([1.0, 0.0, 2.0]))

    def test_matmul_requires_rank_two(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(3)))

    def test_nonfinite_softmax_raises(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError):
                ad.softmax_lastdim(ad.Tensor(np.array([[np.inf, 0.0]])))


# ---------------------------------------------------------------------------
# tape and backward mechanics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_backward_needs_scalar(self, rng):
        x = leaf(rng, 3)
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_grad_accumulates_over_reuse(self, rng):
        x = leaf(rng, 4)
        y = ad.sum_(x * x + x * 3.0)
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 3.0)

    def test_unreached_tensor_gets_zero_grad(self, rng):
        x, unused = leaf(rng, 3), leaf(rng, 3)
        _ = unused * 2.0  # on tape, but not part of the loss
        ad.backward(ad.sum_(x))
        np.testing.assert_allclose(unused.grad, np.zeros(3))

    def test_no_grad_suppresses_taping(self, rng):
        ad.clear_tape()
        x = leaf(rng, 3)
        with ad.no_grad():
            y = x * 5.0
        assert y.requires_grad is False
        assert len(ad.tape()) == 0

    def test_broadcast_gradients_reduce(self, rng):
        a = leaf(rng, 4, 3)
        b = leaf(rng, 3)  # broadcast across rows
        ad.backward(ad.sum_(a * b))
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0))
        assert b.grad.shape == (3,)


# ---------------------------------------------------------------------------
# finite-difference checks for every primitive
# ---------------------------------------------------------------------------

def _cases(rng):
    # fixed (non-grad) mixing weights keep numeric re-evaluation stable
    m23 = rng.normal(size=(2, 3))
    m22 = rng.normal(size=(2, 2))
    m26 = rng.normal(size=(2, 6))
    a23 = lambda: leaf(rng, 2, 3)
    cases = {
        "add": (lambda x, y: ad.sum_(x + y), (a23(), a23())),
        "sub": (lambda x, y: ad.sum_((x - y) * 2.0), (a23(), a23())),
        "mul": (lambda x, y: ad.sum_(x * y), (a23(), a23())),
        "div": (lambda x, y: ad.sum_(x / y),
                (a23(), leaf(rng, 2, 3, scale=0.2) + 2.0)),
        "matmul": (lambda x, y: ad.sum_(x @ y), (leaf(rng, 2, 4), leaf(rng, 4, 3))),
        "matmul_batched": (lambda x, y: ad.sum_(x @ y),
                           (leaf(rng, 3, 2, 4), leaf(rng, 3, 4, 2))),
        "reshape": (lambda x: ad.sum_(ad.reshape(x, (3, 2)) * 1.5), (a23(),)),
        "swapaxes": (lambda x: ad.sum_(ad.swapaxes(x, 0, 1)
                                       @ ad.Tensor(m22)), (a23(),)),
        "concat": (lambda x, y: ad.sum_(ad.pow_scalar(
            ad.concat([x, y], axis=0), 2.0)), (a23(), a23())),
        "take": (lambda x: ad.sum_(ad.take(x, np.array([0, 1, 1, 0]))), (a23(),)),
        "sum_axis": (lambda x: ad.sum_(ad.pow_scalar(ad.sum_(x, axis=1), 2.0)),
                     (a23(),)),
        "mean": (lambda x: ad.mean(x * x), (a23(),)),
        "softmax": (lambda x: ad.sum_(ad.softmax_lastdim(x) * m23), (a23(),)),
        "layer_norm": (lambda x, g, b: ad.sum_(ad.layer_norm(x, g, b) * m26),
                       (leaf(rng, 2, 6), leaf(rng, 6) + 1.5, leaf(rng, 6))),
        "gelu": (lambda x: ad.sum_(ad.gelu(x)), (a23(),)),
        "relu": (lambda x: ad.sum_(ad.relu(x)), (a23() + 0.5,)),
        "sigmoid": (lambda x: ad.sum_(ad.sigmoid(x)), (a23(),)),
        "clamp": (lambda x: ad.sum_(ad.clamp(x, -0.4, 0.4) * 3.0), (a23(),)),
        "absval": (lambda x: ad.sum_(ad.absval(x)), (a23() + 3.0,)),
        "pow_scalar": (lambda x: ad.sum_(ad.pow_scalar(x, 3.0)), (a23(),)),
    }
    return cases


@pytest.mark.parametrize("name", sorted(_cases(np.random.default_rng(0))))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng([seed, 99])
        fn, args = _cases(rng)[name]
        err = check_gradients(lambda: fn(*args), list(args))
        worst = max(worst, err)
    assert worst < 1e-4, f"{name}: worst rel err {worst:.2e}"


def test_numeric_grad_restores_input(rng):
    x = leaf(rng, 3)
    before = x.data.copy()
    numeric_grad(lambda: ad.sum_(x * x), x)
    np.testing.assert_array_equal(x.data, before)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chain_gradient_property(seed):
    """d/dx sum(sigmoid(x) * x) checked against finite differences."""
    rng = np.random.default_rng(seed)
    x = leaf(rng, 5)
    err = check_gradients(lambda: ad.sum_(ad.sigmoid(x) * x), [x])
    assert err < 1e-4
