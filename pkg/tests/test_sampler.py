"""Blind-spot guarantees, uniformity, and importance resampling frequencies."""

import numpy as np
import pytest
from scipy import stats

from cellinr import networks, sampler, utils


DIMS = (33, 33, 33)
CENTER_IDX = np.array([16, 16, 16])


def norm_center(idx=CENTER_IDX, dims=DIMS):
    return sampler.voxel_to_norm(idx, dims)


class TestCoordinates:
    def test_voxel_to_norm_endpoints(self):
        dims = (5, 9, 2)
        lo = sampler.voxel_to_norm(np.array([0, 0, 0]), dims)
        hi = sampler.voxel_to_norm(np.array([4, 8, 1]), dims)
        np.testing.assert_array_equal(lo, [-1.0, -1.0, -1.0])
        np.testing.assert_array_equal(hi, [1.0, 1.0, 1.0])
        mid = sampler.voxel_to_norm(np.array([2, 4, 0]), dims)
        np.testing.assert_array_equal(mid[:2], [0.0, 0.0])

    def test_single_voxel_axis_maps_to_zero(self):
        out = sampler.voxel_to_norm(np.array([0, 3, 0]), (1, 7, 1))
        np.testing.assert_array_equal(out, [0.0, 0.0, 0.0])

    def test_axis_coords_matches_voxel_map(self):
        n = 17
        idx = np.stack([np.arange(n)] * 3, axis=-1)
        per_voxel = sampler.voxel_to_norm(idx, (n, n, n))[:, 0]
        np.testing.assert_array_equal(sampler.axis_coords(n), per_voxel)

    def test_voxel_linf_is_in_voxel_units(self):
        c = norm_center()
        p = c + np.array([2.0 / 32.0, 0.0, 0.0])  # exactly one voxel away in x
        assert sampler.voxel_linf(p[None, :], c, DIMS)[0] == pytest.approx(1.0)


class TestSampleCoarse:
    def test_exclusion_never_violated(self):
        rng = utils.philox_gen(0, utils.TRAIN_STEP, 1)
        pts = sampler.sample_coarse_batch(norm_center()[None, :], DIMS,
                                          h=1.0, n_pts=100_000, d_ex=0.25, rng=rng)[0]
        dist = sampler.voxel_linf(pts, norm_center(), DIMS)
        assert dist.min() >= 0.25

    def test_stays_in_cube_and_domain(self):
        rng = utils.philox_gen(1, utils.TRAIN_STEP, 2)
        centers = np.stack([
            norm_center(np.array([0, 0, 0])),       # corner
            norm_center(np.array([16, 0, 32])),     # edge
            norm_center(),                          # interior
        ])
        pts = sampler.sample_coarse_batch(centers, DIMS, 1.0, 5000, 0.25, rng)
        assert np.all(pts >= -1.0) and np.all(pts <= 1.0)
        for b in range(3):
            d = sampler.voxel_linf(pts[b], centers[b], DIMS)
            assert d.max() <= 1.0 + 1e-6
            assert d.min() >= 0.25

    def test_uniformity_chi_square(self):
        # partition the cube into 3x3x3 cells; the blind-spot cube (side
        # 2*d_ex = 0.5 voxels) fits inside the middle cell, so expected
        # probabilities are uniform except for the carved-out center
        h, d_ex, n = 1.0, 0.25, 100_000
        rng = utils.philox_gen(2, utils.TRAIN_STEP, 3)
        pts = sampler.sample_coarse_batch(norm_center()[None, :], DIMS, h, n, d_ex, rng)[0]
        delta = (pts.astype(np.float64) - norm_center()) / sampler.axis_steps(DIMS)
        cells = np.clip(np.floor((delta + h) / (2 * h / 3)), 0, 2).astype(int)
        flat = cells[:, 0] * 9 + cells[:, 1] * 3 + cells[:, 2]
        observed = np.bincount(flat, minlength=27)
        cell_vol = (2 * h / 3) ** 3
        hole = (2 * d_ex) ** 3
        total = (2 * h) ** 3 - hole
        probs = np.full(27, cell_vol / total)
        probs[13] = (cell_vol - hole) / total  # center cell
        expected = probs * n
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        assert stats.chi2.sf(chi2, df=26) > 0.001

    def test_deterministic_per_stream(self):
        a = sampler.sample_coarse(norm_center(), 1.0, 50, 0.25,
                                  utils.philox_gen(3, utils.TRAIN_STEP, 9), DIMS)
        b = sampler.sample_coarse(norm_center(), 1.0, 50, 0.25,
                                  utils.philox_gen(3, utils.TRAIN_STEP, 9), DIMS)
        c = sampler.sample_coarse(norm_center(), 1.0, 50, 0.25,
                                  utils.philox_gen(3, utils.TRAIN_STEP, 10), DIMS)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sampler.sample_coarse(norm_center(), 0.0, 5, 0.0, rng, DIMS)
        with pytest.raises(ValueError):
            sampler.sample_coarse(norm_center(), 1.0, 5, 1.0, rng, DIMS)  # d_ex == h
        with pytest.raises(ValueError):
            sampler.sample_coarse(norm_center(), 1.0, 0, 0.25, rng, DIMS)


class TestResampleIndices:
    def test_one_hot_density(self):
        rng = np.random.default_rng(1)
        dens = np.zeros(8)
        dens[5] = 3.0
        idx = sampler.resample_indices(dens, 100, rng)
        assert np.all(idx == 5)

    def test_uniform_within_multinomial_bounds(self):
        rng = utils.philox_gen(4, utils.TRAIN_STEP, 0)
        n, draws = 8, 100_000
        idx = sampler.resample_indices(np.ones(n), draws, rng)
        counts = np.bincount(idx, minlength=n)
        p = 1.0 / n
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)

    def test_linear_ramp_frequencies(self):
        rng = utils.philox_gen(5, utils.TRAIN_STEP, 0)
        dens = np.arange(1.0, 7.0)  # 1..6
        draws = 100_000
        idx = sampler.resample_indices(dens, draws, rng)
        counts = np.bincount(idx, minlength=6)
        p = dens / dens.sum()
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)

    def test_zero_density_falls_back_to_uniform(self):
        rng = utils.philox_gen(6, utils.TRAIN_STEP, 0)
        idx = sampler.resample_indices(np.zeros(4), 40_000, rng)
        counts = np.bincount(idx, minlength=4)
        assert np.all(counts > 8_000)  # roughly uniform, no index starved

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError):
            sampler.resample_indices(np.array([1.0, -0.1]), 5, np.random.default_rng(0))


class TestImportanceResample:
    def test_fine_points_keep_blind_spot(self):
        rng = utils.philox_gen(7, utils.TRAIN_STEP, 0)
        c = norm_center()
        coarse = sampler.sample_coarse(c, 1.0, 27, 0.25, rng, DIMS)
        fine = sampler.importance_resample(coarse, np.ones(27), 5000, rng,
                                           center=c, dims=DIMS, h=1.0, d_ex=0.25)
        dist = sampler.voxel_linf(fine, c, DIMS)
        assert dist.min() >= 0.25
        assert dist.max() <= 1.0 + 1e-6

    def test_jitter_stays_near_anchor(self):
        rng = utils.philox_gen(8, utils.TRAIN_STEP, 0)
        c = norm_center()
        coarse = sampler.sample_coarse(c, 1.0, 27, 0.25, rng, DIMS)
        dens = np.zeros(27)
        dens[11] = 1.0
        fine = sampler.importance_resample(coarse, dens, 1000, rng,
                                           center=c, dims=DIMS, h=1.0, d_ex=0.25)
        # all fine points jitter around coarse point 11; sub-cube half-width
        # is h/ceil(27^(1/3)) = 1/3 voxel
        d_anchor = sampler.voxel_linf(fine, coarse[11].astype(np.float64), DIMS)
        assert d_anchor.max() <= 1.0 / 3.0 + 1e-5

    def test_deterministic(self):
        c = norm_center()
        coarse = sampler.sample_coarse(c, 1.0, 27, 0.25,
                                       utils.philox_gen(9, utils.TRAIN_STEP, 0), DIMS)
        kw = dict(center=c, dims=DIMS, h=1.0, d_ex=0.25)
        f1 = sampler.importance_resample(coarse, np.ones(27), 27,
                                         utils.philox_gen(10, utils.TRAIN_STEP, 0), **kw)
        f2 = sampler.importance_resample(coarse, np.ones(27), 27,
                                         utils.philox_gen(10, utils.TRAIN_STEP, 0), **kw)
        np.testing.assert_array_equal(f1, f2)


class TestBuildSampleSet:
    def _coarse_params(self, epsilon=4):
        rng = np.random.default_rng(12)
        return networks.init_mlp(6 * epsilon, 2, 16, "softplus", rng)

    def test_set_structure(self):
        params = self._coarse_params()
        rng = utils.philox_gen(11, utils.TRAIN_STEP, 0)
        sset = sampler.build_sample_set(norm_center(), DIMS, 1.0, 27, 0.25, rng,
                                        params, epsilon=4)
        assert sset.coarse_pts.shape == (27, 3)
        assert sset.fine_pts.shape == (27, 3)
        assert sset.all_points().shape == (54, 3)
        assert sset.h == 1.0
        dist = sampler.voxel_linf(sset.all_points(), sset.center.astype(np.float64), DIMS)
        assert dist.min() >= 0.25

    def test_constant_density_net_gives_uniform_fine(self):
        # zero-weight softplus net outputs log(2) everywhere, so importance
        # collapses to uniform anchor choice; fine occupancy then matches
        # coarse occupancy statistically (coarse halves vs fine halves)
        epsilon = 3
        params = networks.init_mlp(6 * epsilon, 1, 8, "softplus", np.random.default_rng(0))
        for w, b in params.layers:
            w[...] = 0.0
        rng = utils.philox_gen(12, utils.TRAIN_STEP, 0)
        batch = sampler.build_sample_batch(
            np.tile(norm_center(), (400, 1)), DIMS, 1.0, 27, 0.25, rng, params, epsilon
        )
        coarse = batch[:, :27].reshape(-1, 3)
        fine = batch[:, 27:].reshape(-1, 3)
        steps = sampler.axis_steps(DIMS)
        cm = ((coarse.astype(np.float64) - norm_center()) / steps > 0)
        fm = ((fine.astype(np.float64) - norm_center()) / steps > 0)
        # octant occupancy of fine points tracks coarse within 3 sigma
        co = np.bincount(cm[:, 0] * 4 + cm[:, 1] * 2 + cm[:, 2], minlength=8)
        fo = np.bincount(fm[:, 0] * 4 + fm[:, 1] * 2 + fm[:, 2], minlength=8)
        n = cm.shape[0]
        p = co / n
        sigma = np.sqrt(n * p * (1 - p)) + 1e-9
        assert np.all(np.abs(fo - n * p) <= 4 * sigma)

    def test_batched_matches_repeated_singles(self):
        params = self._coarse_params()
        centers = np.stack([norm_center(), norm_center(np.array([3, 5, 7]))])
        b = sampler.build_sample_batch(centers, DIMS, 1.0, 8, 0.25,
                                       utils.philox_gen(13, utils.TRAIN_STEP, 0),
                                       params, epsilon=4)
        assert b.shape == (2, 16, 3)
        for row in range(2):
            d = sampler.voxel_linf(b[row], centers[row], DIMS)
            assert d.min() >= 0.25
