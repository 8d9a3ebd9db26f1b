import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avdet.numerics import (
    MLP,
    SGD,
    IndexOutOfRange,
    NearZeroNorm,
    Parameter,
    ShapeMismatch,
    binary_cross_entropy_with_logits,
    finite_difference_check,
    l2_normalize,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    linear_backward,
    linear_forward,
    log_softmax,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestL2Normalize:
    def test_unit_vector_unchanged(self):
        np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    @pytest.mark.parametrize("x", [[0.0, 0.0], [1e-13, 0.0]])
    def test_near_zero_raises(self, x):
        with pytest.raises(NearZeroNorm):
            l2_normalize(x)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_unit_norm_and_idempotent(self, x):
        if np.linalg.norm(x) <= 1e-6:
            return
        u = l2_normalize(x)
        assert abs(np.linalg.norm(u) - 1.0) <= 1e-12
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)
        # parallel to the input
        np.testing.assert_allclose(u * np.linalg.norm(x), x, atol=1e-9 * max(1, np.abs(x).max()))

    def test_rows_backward_matches_finite_differences(self, rng):
        x = Parameter(rng.normal(size=(3, 5)))
        w = rng.normal(size=(3, 5))

        def f():
            u, n = l2_normalize_rows(x.value)
            x.grad += l2_normalize_rows_backward(u, n, w)
            return float(np.sum(u * w))

        assert finite_difference_check(f, [x]) <= 1e-6


class TestSoftmaxCrossEntropy:
    @pytest.mark.parametrize("K", [1, 2, 5, 10])
    def test_uniform_logits(self, K):
        loss, _ = softmax_cross_entropy(np.full(K, 0.3), 0)
        assert loss == pytest.approx(math.log(K), abs=1e-12)

    def test_saturated(self):
        loss, _ = softmax_cross_entropy([30.0, -30.0], 0)
        assert loss <= 1e-9

    def test_hand_value(self):
        # ln(1 + e^-1)
        loss, _ = softmax_cross_entropy([1.0, 0.0], 0)
        assert loss == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = np.array([0.5, -1.0, 2.0])
        _, g = softmax_cross_entropy(logits, 2)
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(g, p - np.array([0, 0, 1.0]), atol=1e-15)

    @pytest.mark.parametrize("target", [-1, 3])
    def test_bad_target(self, target):
        with pytest.raises(IndexOutOfRange):
            softmax_cross_entropy([0.0, 1.0, 2.0], target)

    @given(arrays(np.float64, 6, elements=finite), st.integers(0, 5), st.floats(-100, 100))
    def test_shift_invariance(self, logits, target, c):
        a, _ = softmax_cross_entropy(logits, target)
        b, _ = softmax_cross_entropy(logits + c, target)
        assert a >= 0
        assert abs(a - b) <= 1e-9

    def test_batch_is_mean(self, rng):
        logits = rng.normal(size=(7, 4))
        targets = rng.integers(0, 4, size=7)
        loss, grad = softmax_cross_entropy_batch(logits, targets)
        singles = [softmax_cross_entropy(l, t) for l, t in zip(logits, targets)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
        np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 7, atol=1e-15)

    def test_batch_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            softmax_cross_entropy_batch(np.zeros((3, 2)), np.zeros(2, dtype=int))

    def test_log_softmax_stable_for_large_logits(self):
        out = log_softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0, abs=1e-12)


class TestBCE:
    @pytest.mark.parametrize("z,t", [(0.0, 1.0), (3.0, 0.0), (-700.0, 1.0), (700.0, 0.0)])
    def test_matches_definition(self, z, t):
        loss, g = binary_cross_entropy_with_logits(z, t)
        p = 1 / (1 + math.exp(-z)) if z > -700 else 0.0
        assert np.isfinite(loss)
        if abs(z) < 50:
            ref = -(t * math.log(p) + (1 - t) * math.log(1 - p))
            assert float(loss) == pytest.approx(ref, rel=1e-12)
        assert float(g) == pytest.approx(p - t, abs=1e-12)


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        W, b = Parameter(np.eye(3)), Parameter(np.zeros(3))
        np.testing.assert_array_equal(linear_forward(x, W, b), x)

    def test_constant(self, rng):
        c = np.array([1.5, -2.0])
        y = linear_forward(rng.normal(size=(4, 3)), Parameter(np.zeros((2, 3))), Parameter(c.copy()))
        np.testing.assert_array_equal(y, np.broadcast_to(c, (4, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            linear_forward(np.zeros((2, 4)), Parameter(np.zeros((3, 5))), Parameter(np.zeros(3)))

    def test_backward_accumulates(self, rng):
        x = rng.normal(size=(4, 3))
        W, b = Parameter(rng.normal(size=(2, 3))), Parameter(rng.normal(size=2))
        g = rng.normal(size=(4, 2))
        linear_backward(x, W, b, g)
        linear_backward(x, W, b, g)
        np.testing.assert_allclose(W.grad, 2 * g.T @ x, atol=1e-12)
        np.testing.assert_allclose(b.grad, 2 * g.sum(0), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(4, 3)))
        W, b = Parameter(rng.normal(size=(2, 3))), Parameter(rng.normal(size=2))
        target = rng.normal(size=(4, 2))

        def f():
            y = linear_forward(x.value, W, b)
            x.grad += linear_backward(x.value, W, b, 2 * (y - target))
            return float(np.sum((y - target) ** 2))

        assert finite_difference_check(f, [x, W, b]) <= 1e-4


class TestMLP:
    @pytest.mark.parametrize("seed", range(10))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        mlp = MLP(rng, 6, 8, 3, relu_out=seed % 2 == 0)
        x = rng.normal(size=(5, 6))
        w = rng.normal(size=(5, 3))

        def f():
            y, cache = mlp.forward(x)
            mlp.backward(cache, w)
            return float(np.sum(y * w))

        assert finite_difference_check(f, mlp.parameters().values()) <= 1e-4

    def test_sgd_momentum(self):
        p = Parameter(np.array([1.0]))
        opt = SGD([p], lr=0.1, momentum=0.5)
        for _ in range(2):
            p.grad[...] = 1.0
            opt.step()
        # buf: 1 then 1.5 -> value 1 - 0.1 - 0.15
        assert p.value[0] == pytest.approx(0.75)


class TestFiniteDifferenceCheck:
    def test_square(self):
        x = Parameter(np.array([3.0]))

        def f():
            x.grad += 2 * x.value
            return float(x.value[0] ** 2)

        res = finite_difference_check(f, [x])
        assert res <= 1e-9
        assert res.finite

    def test_constant(self):
        x = Parameter(np.array([1.0, 2.0]))
        assert float(finite_difference_check(lambda: 4.0, [x])) == 0.0

    def test_wrong_gradient_detected(self):
        x = Parameter(np.array([3.0]))

        def f():
            x.grad += 5.0
            return float(x.value[0] ** 2)

        assert finite_difference_check(f, [x]) > 0.1

    def test_non_finite_reported(self):
        a = Parameter(np.array([1.0]))
        b = Parameter(np.array([0.0]))

        def f():
            return float(a.value[0] + np.log(b.value[0]))

        with np.errstate(divide="ignore", invalid="ignore"):
            res = finite_difference_check(f, [a, b])
        assert not res.finite

    def test_restores_analytic_gradient(self):
        x = Parameter(np.array([2.0]))

        def f():
            x.grad += 3 * x.value ** 2
            return float(x.value[0] ** 3)

        finite_difference_check(f, [x])
        assert x.grad[0] == pytest.approx(12.0)
        assert x.value[0] == 2.0

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda: 0.0, [], step=0.0)
