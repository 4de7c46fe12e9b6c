import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iqt.errors import ConfigError, EmptyTissueError, NumericError, ShapeError
from iqt.phantom import PhantomConfig, generate_phantom
from iqt.simulator import (
    FIXED_SNR,
    PAPER_SNR_COV,
    PAPER_SNR_MEAN,
    SimConfig,
    SnrPrior,
    SnrSample,
    add_noise,
    compute_snr,
    contrast_transfer,
    downsample_masks,
    downsample_z,
    gaussian_kernel_1d,
    sample_snr,
    sample_snr_batch,
    simulate,
    simulate_low_field,
    simulation_kernel,
)
from iqt.volume import TissueMasks, Volume3D


def _binary_masks(shape, wm_region):
    wm = np.zeros(shape)
    wm[wm_region] = 1.0
    return TissueMasks.from_channels(wm, 1.0 - wm)


def _naive_decimate(col, k, kernel):
    """Direct sum: output slice v' is centred on input index k*v' + (k-1)/2."""
    n = len(col)
    L = len(kernel)
    out = []
    for v in range(n // k):
        centre = k * v + (k - 1) / 2
        acc = 0.0
        for t in range(L):
            idx = centre + (t - (L - 1) / 2)
            i = int(round(idx))
            assert abs(i - idx) < 1e-9
            if 0 <= i < n:
                acc += kernel[t] * col[i]
        out.append(acc)
    return np.array(out)


class TestKernel:
    @given(st.floats(0.05, 5.0), st.floats(0.2, 2.0), st.floats(1.0, 4.0), st.booleans())
    def test_normalised_and_symmetric(self, sigma, spacing, trunc, half):
        w = gaussian_kernel_1d(sigma, spacing, trunc, half_offset=half)
        assert abs(math.fsum(w) - 1.0) <= 1e-12
        assert np.array_equal(w, w[::-1])
        assert (len(w) % 2 == 0) == half

    def test_paper_sigma(self):
        sigma = SimConfig(k=4).kernel_sigma_mm(0.7)
        # 2.8 / sqrt(8 ln 2), evaluated directly
        assert sigma == pytest.approx(1.1890505, abs=1e-6)
        assert 2 * math.sqrt(2 * math.log(2)) * sigma == pytest.approx(2.8)

    def test_thickness_mode(self):
        sigma = SimConfig(k=4, fwhm_mode="thickness", fwhm_ratio=0.75).kernel_sigma_mm(0.7)
        assert 2 * math.sqrt(2 * math.log(2)) * sigma == pytest.approx(2.1)

    def test_narrow_kernel_is_delta(self):
        w = gaussian_kernel_1d(0.01, 1.0)
        assert w[len(w) // 2] > 0.999

    def test_radius(self):
        assert len(gaussian_kernel_1d(1.0, 1.0, 3.0)) == 7

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ConfigError):
            gaussian_kernel_1d(0.0, 1.0)


class TestDownsample:
    def test_constant_interior(self):
        v = Volume3D(np.full((3, 3, 32), 2.5))
        w = gaussian_kernel_1d(1.189, 0.7, half_offset=True)
        out = downsample_z(v, 4, w)
        assert out.shape == (3, 3, 8)
        assert np.allclose(out.data[:, :, 2:-2], 2.5, atol=1e-6)

    def test_delta_kernel_selects_slices(self):
        d = np.arange(4, dtype=np.float64).reshape(1, 1, 4) + 10
        out = downsample_z(Volume3D(d), 2, [1.0])
        # odd-length delta at centre 2v'+0.5 is not on a slice; use the half-offset pair instead
        pair = downsample_z(Volume3D(d), 2, [0.5, 0.5])
        assert np.allclose(pair.data.ravel(), [10.5, 12.5])
        with pytest.raises(AssertionError):
            _naive_decimate(d.ravel(), 2, [1.0])
        assert out.shape == (1, 1, 2)

    def test_delta_kernel_odd_k(self):
        d = np.arange(6, dtype=np.float64).reshape(1, 1, 6)
        # k=3 centres on integer slices 1 and 4
        assert np.array_equal(downsample_z(Volume3D(d), 3, [1.0]).data.ravel(), [1.0, 4.0])

    def test_ramp_reproduced_at_slab_centres(self):
        nz, k = 64, 4
        d = np.broadcast_to(np.arange(nz, dtype=np.float64), (2, 2, nz))
        w = simulation_kernel(SimConfig(k=k), 0.7)
        out = downsample_z(Volume3D(d), k, w).data[0, 0]
        r = len(w)
        centres = k * np.arange(nz // k) + (k - 1) / 2
        interior = slice(r, nz // k - r)
        assert np.allclose(out[interior], centres[interior], atol=1e-4)

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_matches_naive_direct_sum(self, k):
        col = np.random.default_rng(k).random(8 * k)
        w = simulation_kernel(SimConfig(k=k), 0.7)
        out = downsample_z(Volume3D(col.reshape(1, 1, -1)), k, w).data.ravel()
        assert np.allclose(out, _naive_decimate(col, k, w), atol=1e-6)

    def test_spacing_and_shape(self):
        v = Volume3D(np.zeros((4, 4, 32)), (0.7, 0.7, 0.7))
        out = downsample_z(v, 4, [0.25, 0.25, 0.25, 0.25])
        assert out.shape == (4, 4, 8)
        assert out.sz == pytest.approx(2.8)

    def test_rejects_indivisible(self):
        with pytest.raises(ShapeError):
            downsample_z(Volume3D(np.zeros((2, 2, 10))), 4, [1.0])


class TestDownsampleMasks:
    def test_constant_masks_unchanged(self):
        shape = (2, 2, 16)
        m = TissueMasks.from_channels(np.full(shape, 0.5), np.full(shape, 0.3))
        out = downsample_masks(m, 4, gaussian_kernel_1d(1.2, 0.7, half_offset=True))
        assert np.allclose(out.wm, 0.5, atol=1e-6)
        assert np.allclose(out.gm, 0.3, atol=1e-6)

    def test_partition(self):
        _, m = generate_phantom(PhantomConfig(dims=(32, 32, 32)))
        out = downsample_masks(m, 4, simulation_kernel(SimConfig(k=4), 0.7))
        assert np.max(np.abs(out.data.astype(np.float64).sum(axis=0) - 1)) <= 1e-6

    def test_hard_boundary_fraction_equals_kernel_mass(self):
        nz, k = 32, 4
        wm = np.zeros((1, 1, nz))
        wm[..., :14] = 1.0  # boundary between slices 13 and 14, inside slab 3 (slices 12..15)
        m = TissueMasks.from_channels(wm, 1.0 - wm)
        w = simulation_kernel(SimConfig(k=k), 0.7)
        out = downsample_masks(m, k, w)
        # slab 3 is centred at 13.5; taps at offsets -r+0.5 .. r-0.5, so slices 13.5+o
        offs = np.arange(len(w)) - (len(w) - 1) / 2
        mass_wm = w[(13.5 + offs) < 14].sum()
        assert out.wm[0, 0, 3] == pytest.approx(mass_wm, abs=1e-6)
        assert out.gm[0, 0, 3] == pytest.approx(1 - mass_wm, abs=1e-6)


class TestComputeSnr:
    def test_uniform(self):
        m = _binary_masks((4, 4, 4), np.s_[:2])
        v = Volume3D(np.full((4, 4, 4), 0.3))
        wm, gm = compute_snr(v, m, 0.02)
        assert wm == pytest.approx(15.0, rel=1e-6)
        assert gm == pytest.approx(15.0, rel=1e-6)

    def test_paper_like_value(self):
        m = _binary_masks((4, 4, 4), np.s_[:2])
        d = np.where(m.wm > 0, 0.82, 0.64)
        wm, gm = compute_snr(Volume3D(d), m, 0.01)
        assert wm == pytest.approx(82.0, rel=1e-6)
        assert gm == pytest.approx(64.0, rel=1e-6)

    def test_homogeneous(self):
        v, m = generate_phantom(PhantomConfig(dims=(24, 24, 24)))
        a = compute_snr(v, m, 0.01)
        b = compute_snr(v.with_data(2 * v.data), m, 0.01)
        assert b[0] == pytest.approx(2 * a[0], rel=1e-6)
        assert b[1] == pytest.approx(2 * a[1], rel=1e-6)

    def test_empty_tissue(self):
        m = TissueMasks.from_channels(np.zeros((2, 2, 2)), np.ones((2, 2, 2)))
        with pytest.raises(EmptyTissueError) as exc:
            compute_snr(Volume3D(np.ones((2, 2, 2))), m, 0.01)
        assert exc.value.tissue == "wm"

    def test_zero_sigma(self):
        m = _binary_masks((2, 2, 2), np.s_[:1])
        with pytest.raises(NumericError):
            compute_snr(Volume3D(np.ones((2, 2, 2))), m, 0.0)


class TestSampling:
    def test_degenerate_prior(self):
        prior = SnrPrior(PAPER_SNR_MEAN, ((0.0, 0.0), (0.0, 0.0)))
        s = sample_snr(prior, np.random.default_rng(0))
        assert s == SnrSample(64.50, 54.14)

    def test_deterministic(self):
        a = sample_snr(SnrPrior(), np.random.default_rng(3))
        b = sample_snr(SnrPrior(), np.random.default_rng(3))
        assert a == b

    def test_moments(self):
        draws = sample_snr_batch(SnrPrior(), 100_000, np.random.default_rng(1))
        assert np.all(np.abs(draws.mean(axis=0) - PAPER_SNR_MEAN) < 0.5)
        cov = np.cov(draws.T)
        assert np.all(np.abs(cov - np.array(PAPER_SNR_COV)) <= 0.05 * np.abs(PAPER_SNR_COV))

    def test_rejects_low_draws(self):
        prior = SnrPrior((3.0, 3.0), ((4.0, 0.0), (0.0, 4.0)))
        draws = sample_snr_batch(prior, 5000, np.random.default_rng(2))
        assert draws.min() > 1.0

    def test_retry_limit(self):
        prior = SnrPrior((-50.0, -50.0), ((1.0, 0.0), (0.0, 1.0)))
        with pytest.raises(NumericError):
            sample_snr(prior, np.random.default_rng(0))

    def test_non_psd(self):
        with pytest.raises(NumericError):
            SnrPrior((1.0, 1.0), ((1.0, 2.0), (2.0, 1.0))).factor()

    def test_asymmetric(self):
        with pytest.raises(ConfigError):
            SnrPrior((1.0, 1.0), ((1.0, 0.5), (0.4, 1.0)))


class TestContrastTransfer:
    def setup_method(self):
        self.m = _binary_masks((4, 4, 4), np.s_[:2])
        self.v = Volume3D(np.random.default_rng(0).random((4, 4, 4)) + 0.5)

    def test_identity_ratios(self):
        out = contrast_transfer(self.v, self.m, SnrSample(61, 53), (61, 53))
        assert np.array_equal(out.data, self.v.data)

    def test_halving(self):
        out = contrast_transfer(self.v, self.m, SnrSample(*FIXED_SNR), (122, 106))
        assert np.allclose(out.data, 0.5 * self.v.data, rtol=1e-6)

    def test_other_unchanged(self):
        other = np.zeros((4, 4, 4))
        other[0] = 1.0
        wm = np.where(other > 0, 0.0, 1.0)
        m = TissueMasks.from_channels(wm, np.zeros_like(wm), other)
        out = contrast_transfer(self.v, m, SnrSample(10, 10), (100, 100))
        assert np.array_equal(out.data[0], self.v.data[0])

    def test_nonpositive_high_snr(self):
        with pytest.raises(NumericError):
            contrast_transfer(self.v, self.m, SnrSample(61, 53), (0.0, 1.0))


class TestNoise:
    def test_zero_sigma_identity(self):
        v = Volume3D(np.ones((2, 2, 2)))
        assert add_noise(v, 0.0, np.random.default_rng(0)) == v

    def test_std(self):
        v = Volume3D(np.zeros((100, 100, 100)))
        s = add_noise(v, 0.1, np.random.default_rng(0)).data.astype(np.float64).std()
        assert 0.0995 <= s <= 0.1005

    def test_seeds_differ(self):
        v = Volume3D(np.zeros((4, 4, 4)))
        assert not np.array_equal(add_noise(v, 0.1, np.random.default_rng(0)).data,
                                  add_noise(v, 0.1, np.random.default_rng(1)).data)


class TestSimulate:
    @pytest.fixture(scope="class")
    @staticmethod
    def phantom():
        return generate_phantom(PhantomConfig(dims=(48, 48, 48)))

    def test_shape(self, phantom):
        v, m = generate_phantom(PhantomConfig(dims=(32, 32, 32)))
        out = simulate_low_field(v, m, SimConfig(k=4), SnrSample(*FIXED_SNR), np.random.default_rng(0))
        assert out.shape == (32, 32, 8)
        assert out.sz == pytest.approx(4 * v.sz)

    def test_closed_loop_low_noise(self, phantom):
        v, m = phantom
        cfg = SimConfig(k=4, sigma_x=0.02, sigma_y=0.01)
        res = simulate(v, m, cfg, SnrSample(*FIXED_SNR), np.random.default_rng(0))
        wm, gm = compute_snr(res.noisy, res.masks, cfg.sigma_y)
        assert abs(wm - 61) / 61 < 0.05
        assert abs(gm - 53) / 53 < 0.05

    def test_sampled_realisations_differ(self, phantom):
        v, m = phantom
        rng = np.random.default_rng(0)
        a = simulate(v, m, SimConfig(k=4), SnrPrior(), rng)
        b = simulate(v, m, SimConfig(k=4), SnrPrior(), rng)
        assert a.snr_low != b.snr_low
        assert not np.array_equal(a.noisy.data, b.noisy.data)
        assert np.array_equal(a.decimated.data, b.decimated.data)

    def test_deterministic(self, phantom):
        v, m = phantom
        a = simulate_low_field(v, m, SimConfig(k=4), SnrPrior(), np.random.default_rng(9))
        b = simulate_low_field(v, m, SimConfig(k=4), SnrPrior(), np.random.default_rng(9))
        assert a.data.tobytes() == b.data.tobytes()

    def test_homogeneous_with_fixed_ratios(self, phantom):
        v, m = phantom
        w = simulation_kernel(SimConfig(k=4), v.sz)
        m_lo = downsample_masks(m, 4, w)
        a = contrast_transfer(downsample_z(v, 4, w), m_lo, SnrSample(*FIXED_SNR), (90.0, 80.0))
        b = contrast_transfer(downsample_z(v.with_data(3 * v.data), 4, w), m_lo, SnrSample(*FIXED_SNR), (90.0, 80.0))
        assert np.allclose(b.data, 3 * a.data, atol=1e-5)

    def test_recomputed_snr_cancels_scale_in_tissue(self, phantom):
        v, m = phantom
        cfg = SimConfig(k=4, sigma_x=0.05)
        a = simulate(v, m, cfg, SnrSample(*FIXED_SNR), np.random.default_rng(0))
        b = simulate(v.with_data(3 * v.data), m, cfg, SnrSample(*FIXED_SNR), np.random.default_rng(0))
        assert b.snr_high[0] == pytest.approx(3 * a.snr_high[0], rel=1e-5)
        tissue = a.masks.other < 1e-6
        assert tissue.any()
        assert np.allclose(a.clean.data[tissue], b.clean.data[tissue], atol=1e-5)

    def test_config_checks(self):
        with pytest.raises(ConfigError):
            SimConfig(k=3)
        with pytest.raises(ConfigError):
            SimConfig(sigma_x=0.01, sigma_y=0.01)

    def test_bad_mode(self, phantom):
        v, m = phantom
        with pytest.raises(ConfigError):
            simulate(v, m, SimConfig(), "fixed", np.random.default_rng(0))
