import numpy as np
import pytest

from fiberlab.losses import (
    DEFAULT_LENGTH_WEIGHT,
    DEFAULT_WIDTH_WEIGHT,
    LossBreakdown,
    LossWeights,
    length_loss,
    length_loss_gradient,
    mse,
    total_loss,
    width_loss,
    width_loss_gradient,
)


class TestMse:
    def test_identical(self):
        assert mse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_value(self):
        assert mse([1.0, 2.0], [0.0, 0.0]) == pytest.approx(2.5)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(0)
        p = rng.normal(0, 5, 30)
        t = rng.normal(0, 5, 30)
        base = mse(p, t)
        scaled = mse(t + 3.0 * (p - t), t)
        assert scaled == pytest.approx(9.0 * base)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mse([], [])


class TestWeightedLosses:
    def test_defaults(self):
        assert DEFAULT_WIDTH_WEIGHT == 1e-3
        assert DEFAULT_LENGTH_WEIGHT == 1e-6
        w = LossWeights()
        assert w.width_weight == 1e-3
        assert w.length_weight == 1e-6

    def test_width_scaling(self):
        p = np.array([40.0, 60.0])
        t = np.array([10.0, 20.0])
        assert width_loss(p, t) == pytest.approx(1e-3 * mse(p, t))
        assert width_loss(p, p) == 0.0

    def test_length_scaling(self):
        p = np.array([1500.0])
        t = np.array([500.0])
        assert length_loss(p, t) == pytest.approx(1e-6 * 1e6)

    def test_linear_in_weight(self):
        p = np.array([3.0, 4.0])
        t = np.array([1.0, 1.0])
        a = width_loss(p, t, LossWeights(width_weight=1e-3))
        b = width_loss(p, t, LossWeights(width_weight=2e-3))
        assert b == pytest.approx(2 * a)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(width_weight=0.0)


class TestGradients:
    def central_difference(self, fn, pred, h=1e-4):
        grad = np.zeros_like(pred)
        for i in range(pred.size):
            up = pred.copy()
            dn = pred.copy()
            up[i] += h
            dn[i] -= h
            grad[i] = (fn(up) - fn(dn)) / (2 * h)
        return grad

    @pytest.mark.parametrize("loss,grad", [
        (width_loss, width_loss_gradient),
        (length_loss, length_loss_gradient),
    ])
    def test_analytic_matches_finite_difference(self, loss, grad):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            pred = rng.normal(0, 10, n)
            target = rng.normal(0, 10, n)
            analytic = grad(pred, target)
            numeric = self.central_difference(lambda p: loss(p, target), pred)
            denom = np.maximum(np.abs(analytic), 1e-12)
            assert np.max(np.abs(analytic - numeric) / denom) < 1e-6


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss(LossBreakdown(0, 0, 0, 0, 0, 0)) == 0.0

    def test_sum(self):
        assert total_loss(LossBreakdown(1, 1, 1, 1, 1, 1)) == 6.0

    def test_permutation_invariance(self):
        import itertools
        values = [0.3, 0.9, 1.4, 0.2, 0.05, 2.0]
        reference = total_loss(LossBreakdown(*values))
        for perm in itertools.islice(itertools.permutations(values), 24):
            assert total_loss(LossBreakdown(*perm)) == pytest.approx(reference, abs=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossBreakdown(-0.1, 0, 0, 0, 0, 0)
