import numpy as np
import pytest
from hypothesis import given, strategies as st

from iqt.errors import ConfigError
from iqt.spline import bspline_prefilter_1d, coarse_positions, evaluate_bspline, upsample_z_bspline
from iqt.volume import Volume3D

PAD = 80


def _b3(x):
    x = np.abs(x)
    return np.where(x < 1, 2 / 3 - x**2 + x**3 / 2, np.where(x < 2, (2 - x) ** 3 / 6, 0.0))


def _dense_coefficients(s):
    """Oracle: point-reflect far past both ends and solve the tridiagonal system densely."""
    s = np.asarray(s, dtype=np.float64)
    n = len(s)
    idx = np.arange(-PAD, n + PAD)
    ext = np.empty(len(idx))
    for t, p in enumerate(idx):
        sign, off = 1.0, 0.0
        while not 0 <= p < n:
            if p < 0:
                off += sign * 2 * s[0]
                p, sign = -p, -sign
            else:
                off += sign * 2 * s[-1]
                p, sign = 2 * (n - 1) - p, -sign
        ext[t] = off + sign * s[p]
    m = len(ext)
    a = np.zeros((m, m))
    for i in range(m):
        a[i, i] = 4 / 6
        if i:
            a[i, i - 1] = 1 / 6
        if i < m - 1:
            a[i, i + 1] = 1 / 6
    c = np.linalg.solve(a, ext)
    return idx, c


def _dense_eval(s, u):
    idx, c = _dense_coefficients(s)
    return np.array([np.sum(c * _b3(x - idx)) for x in np.atleast_1d(u)])


class TestPrefilter:
    def test_constant(self):
        assert np.allclose(bspline_prefilter_1d(np.full(9, 3.5)), 3.5, atol=1e-12)

    def test_ramp(self):
        s = 2.0 * np.arange(12) - 5
        assert np.allclose(bspline_prefilter_1d(s), s, atol=1e-12)

    def test_matches_banded_solve(self):
        s = np.random.default_rng(0).random(16)
        _, c = _dense_coefficients(s)
        assert np.allclose(bspline_prefilter_1d(s), c[PAD:PAD + 16], atol=1e-9)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=30))
    def test_interpolates_knots(self, vals):
        s = np.array(vals)
        back = evaluate_bspline(bspline_prefilter_1d(s), np.arange(len(s), dtype=float))
        assert np.allclose(back, s, atol=1e-9)

    def test_batched_axes(self):
        s = np.random.default_rng(1).random((3, 4, 10))
        c = bspline_prefilter_1d(s)
        assert np.allclose(c[2, 1], bspline_prefilter_1d(s[2, 1]))

    def test_too_short(self):
        with pytest.raises(ConfigError):
            bspline_prefilter_1d([1.0])


class TestUpsample:
    def test_positions_invert_decimation_centres(self):
        u = coarse_positions(3, 4)
        assert np.allclose(u[[1, 2]].mean(), 0.0)  # coarse slice 0 sits between fine slices 1 and 2
        assert np.allclose(np.diff(u), 0.25)

    def test_constant(self):
        out = upsample_z_bspline(Volume3D(np.full((2, 3, 5), 0.7)), 4)
        assert out.shape == (2, 3, 20)
        assert np.allclose(out.data, 0.7, atol=1e-6)

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_ramp(self, k):
        nz = 6
        d = np.broadcast_to(np.arange(nz, dtype=float), (2, 2, nz))
        out = upsample_z_bspline(Volume3D(d, (1, 1, 2.0)), k)
        assert np.allclose(out.data[0, 0], coarse_positions(nz, k), atol=1e-6)
        assert out.sz == pytest.approx(2.0 / k)

    def test_sine_matches_dense_oracle(self):
        nz, k = 12, 4
        s = np.sin(0.7 * np.arange(nz))
        out = upsample_z_bspline(Volume3D(s.reshape(1, 1, nz)), k).data.ravel()
        ref = _dense_eval(s, coarse_positions(nz, k))
        assert np.max(np.abs(out - ref)) <= 1e-6

    def test_reproduces_coarse_samples(self):
        s = np.random.default_rng(3).random((1, 1, 7))
        fine = evaluate_bspline(bspline_prefilter_1d(s), np.arange(7.0))
        assert np.allclose(fine, s, atol=1e-9)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            upsample_z_bspline(Volume3D(np.zeros((1, 1, 4))), 1)
