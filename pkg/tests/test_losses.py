"""Signal and TV loss terms vs straight-line references."""

import numpy as np
import pytest

from cellinr import autodiff as ad
from cellinr import losses


def node_of(values):
    t = ad.Tape()
    return t.leaf(np.asarray(values, dtype=np.float64))


def masked_reference(pred, raw, mask):
    num, den = 0.0, 0
    for p, r, m in zip(pred, raw, mask):
        if m == 1:
            num += (p - r) ** 2
            den += 1
    return num / den if den else 0.0


def mode_reference(pred, raw, target):
    return sum((p - t) ** 2 for p, t in zip(pred, target)) / len(pred)


class TestSignalLoss:
    def test_perfect_signal_prediction_is_zero(self):
        raw = np.array([0.2, 0.8, 0.5, 0.1])
        mask = np.array([1.0, 1.0, 0.0, 0.0])
        pred = node_of([0.2, 0.8, 0.99, 0.01])  # wrong only off-mask
        out = losses.signal_loss(pred, raw, mask, mode="masked")
        assert float(out.value) == 0.0

    def test_empty_mask_returns_exact_zero(self):
        pred = node_of([0.3, 0.7])
        out = losses.signal_loss(pred, np.array([0.1, 0.9]), np.zeros(2), mode="masked")
        assert float(out.value) == 0.0
        ad.backward(out)
        np.testing.assert_array_equal(ad.grad_of(pred), [0.0, 0.0])

    def test_masked_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            raw = rng.uniform(0, 1, n)
            mask = (rng.random(n) < 0.5).astype(np.float64)
            predv = rng.uniform(0, 1, n)
            out = losses.signal_loss(node_of(predv), raw, mask, mode="masked")
            assert float(out.value) == pytest.approx(
                masked_reference(predv, raw, mask), abs=1e-12
            )

    def test_masked_ignores_background_predictions(self):
        raw = np.array([0.4, 0.6, 0.1])
        mask = np.array([1.0, 0.0, 1.0])
        a = losses.signal_loss(node_of([0.5, 0.0, 0.2]), raw, mask)
        b = losses.signal_loss(node_of([0.5, 1.0, 0.2]), raw, mask)
        assert float(a.value) == float(b.value)

    def test_literal_mode_target(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0, 1, 20)
        mask = (rng.random(20) < 0.4).astype(np.float64)
        predv = rng.uniform(0, 1, 20)
        target = np.maximum(raw - mask, 0.0)  # zero inside mask, raw outside
        out = losses.signal_loss(node_of(predv), raw, mask, mode="literal")
        assert float(out.value) == pytest.approx(
            mode_reference(predv, raw, target), abs=1e-12
        )

    def test_zeroed_background_mode_target(self):
        rng = np.random.default_rng(2)
        raw = rng.uniform(0, 1, 20)
        mask = (rng.random(20) < 0.4).astype(np.float64)
        predv = rng.uniform(0, 1, 20)
        out = losses.signal_loss(node_of(predv), raw, mask, mode="zeroed_background")
        assert float(out.value) == pytest.approx(
            mode_reference(predv, raw, mask * raw), abs=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        raw = rng.uniform(0, 1, 10)
        mask = (rng.random(10) < 0.6).astype(np.float64)
        predv = rng.uniform(0.05, 0.95, 10)
        for mode in losses.SIGNAL_MODES:
            pred = node_of(predv)
            ad.backward(losses.signal_loss(pred, raw, mask, mode=mode))
            got = ad.grad_of(pred)
            h = 1e-7
            for i in range(10):
                bumped = predv.copy()
                bumped[i] += h
                fp = float(losses.signal_loss(node_of(bumped), raw, mask, mode=mode).value)
                bumped[i] -= 2 * h
                fm = float(losses.signal_loss(node_of(bumped), raw, mask, mode=mode).value)
                assert got[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)

    def test_shape_and_mode_validation(self):
        pred = node_of([0.5, 0.5])
        with pytest.raises(ValueError):
            losses.signal_loss(pred, np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            losses.signal_loss(pred, np.zeros(2), np.zeros(2), mode="bogus")


class TestTvLoss:
    def test_constant_prediction_is_zero(self):
        t = ad.Tape()
        center = t.leaf(np.full(5, 0.3))
        nbr = t.leaf(np.full((3, 5), 0.3))
        out = losses.tv_loss(center, nbr, np.ones((3, 5)))
        assert float(out.value) == 0.0

    def test_alternating_pattern_contributes_one(self):
        t = ad.Tape()
        center = t.leaf(np.array([0.0, 1.0, 0.0, 1.0]))
        nbr = t.leaf(np.array([[1.0, 0.0, 1.0, 0.0]]))
        out = losses.tv_loss(center, nbr, np.ones((1, 4)))
        assert float(out.value) == 1.0

    def test_absent_neighbors_excluded(self):
        t = ad.Tape()
        center = t.leaf(np.array([0.5, 0.5]))
        nbr = t.leaf(np.array([[0.9, 123.0], [0.1, -7.0], [0.5, 42.0]]))
        present = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        out = losses.tv_loss(center, nbr, present)
        assert float(out.value) == pytest.approx((0.4 + 0.4 + 0.0) / 3, abs=1e-12)

    def test_no_present_pairs_gives_zero(self):
        t = ad.Tape()
        center = t.leaf(np.array([0.5]))
        nbr = t.leaf(np.array([[0.9], [0.1], [0.2]]))
        out = losses.tv_loss(center, nbr, np.zeros((3, 1)))
        assert float(out.value) == 0.0

    def test_full_grid_oracle(self):
        # when the batch enumerates every voxel, the stochastic TV term
        # equals the brute-force grid total variation
        rng = np.random.default_rng(4)
        n = 8
        grid = rng.uniform(0, 1, size=(n, n, n))

        num, den = 0.0, 0
        for axis in range(3):
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[axis] = slice(0, n - 1)
            sl_hi[axis] = slice(1, n)
            num += np.abs(grid[tuple(sl_hi)] - grid[tuple(sl_lo)]).sum()
            den += n * n * (n - 1)
        want = num / den

        idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).reshape(-1, 3)
        centers = grid[idx[:, 0], idx[:, 1], idx[:, 2]]
        nbrs = np.zeros((3, idx.shape[0]))
        present = np.zeros((3, idx.shape[0]))
        for axis in range(3):
            stepped = idx.copy()
            stepped[:, axis] += 1
            ok = stepped[:, axis] < n
            present[axis] = ok
            clamped = np.minimum(stepped, n - 1)
            nbrs[axis] = grid[clamped[:, 0], clamped[:, 1], clamped[:, 2]]
        t = ad.Tape()
        out = losses.tv_loss(t.leaf(centers), t.leaf(nbrs), present)
        assert float(out.value) == pytest.approx(want, abs=1e-12)

    def test_invariant_to_global_shift(self):
        rng = np.random.default_rng(5)
        c = rng.uniform(0, 0.5, 6)
        nb = rng.uniform(0, 0.5, (3, 6))
        present = (rng.random((3, 6)) < 0.8).astype(np.float64)
        t1, t2 = ad.Tape(), ad.Tape()
        a = losses.tv_loss(t1.leaf(c), t1.leaf(nb), present)
        b = losses.tv_loss(t2.leaf(c + 0.3), t2.leaf(nb + 0.3), present)
        assert float(a.value) == pytest.approx(float(b.value), abs=1e-12)

    def test_gradient_at_nontied_points(self):
        rng = np.random.default_rng(6)
        c = rng.uniform(0, 1, 5)
        nb = rng.uniform(0, 1, (3, 5))
        assert np.abs(nb - c).min() > 1e-4  # no ties, subgradient unambiguous
        present = np.ones((3, 5))
        t = ad.Tape()
        cn = t.leaf(c)
        ad.backward(losses.tv_loss(cn, t.leaf(nb), present))
        got = ad.grad_of(cn)
        h = 1e-7
        for i in range(5):
            for sign in (1.0,):
                bump = c.copy()
                bump[i] += h
                ta = ad.Tape()
                fp = float(losses.tv_loss(ta.leaf(bump), ta.leaf(nb), present).value)
                bump[i] -= 2 * h
                tb = ad.Tape()
                fm = float(losses.tv_loss(tb.leaf(bump), tb.leaf(nb), present).value)
                assert got[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-9)


class TestTotalLoss:
    def test_lambda_zero_is_signal_only(self):
        t = ad.Tape()
        sig = t.leaf(np.asarray(0.07))
        tv = t.leaf(np.asarray(0.5))
        assert float(losses.total_loss(sig, tv, 0.0).value) == 0.07

    def test_standard_combination(self):
        t = ad.Tape()
        sig = t.leaf(np.asarray(0.01))
        tv = t.leaf(np.asarray(0.2))
        assert float(losses.total_loss(sig, tv, 0.15).value) == pytest.approx(0.04, abs=1e-12)

    def test_monotone_in_each_argument(self):
        t = ad.Tape()
        base = float(losses.total_loss(t.leaf(np.asarray(0.02)), t.leaf(np.asarray(0.1)), 0.15).value)
        up_sig = float(losses.total_loss(t.leaf(np.asarray(0.03)), t.leaf(np.asarray(0.1)), 0.15).value)
        up_tv = float(losses.total_loss(t.leaf(np.asarray(0.02)), t.leaf(np.asarray(0.2)), 0.15).value)
        assert up_sig > base and up_tv > base

    def test_negative_lambda_rejected(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            losses.total_loss(t.leaf(np.asarray(0.1)), t.leaf(np.asarray(0.1)), -0.1)


class TestLossBreakdown:
    def test_total_recomposition(self):
        b = losses.LossBreakdown(signal=0.01, tv=0.2, lambda_tv=0.15, n_signal_voxels=100)
        assert b.total == pytest.approx(0.01 + 0.15 * 0.2, abs=1e-15)

    def test_rejects_nonfinite_and_negative(self):
        with pytest.raises(ValueError):
            losses.LossBreakdown(signal=float("nan"), tv=0.0, lambda_tv=0.15, n_signal_voxels=0)
        with pytest.raises(ValueError):
            losses.LossBreakdown(signal=-0.1, tv=0.0, lambda_tv=0.15, n_signal_voxels=0)
