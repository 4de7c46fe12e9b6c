"""Probabilistic decimation simulator: high-field volume + masks -> low-field volume.

Pipeline per call of :func:`simulate_low_field`:

1. Gaussian slice-profile filtering along z with stride ``k``.
2. Masks resampled onto the same low-resolution grid.
3. Mask-weighted tissue SNR of the decimated high-field volume.
4. Low-field tissue SNRs, either fixed or drawn from a bivariate Gaussian prior.
5. Per-tissue intensity ratios (``others`` keep ratio 1).
6. Contrast transfer by mask-weighted rescaling.
7. Additive Gaussian background noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, EmptyTissueError, NumericError, ShapeError
from .volume import TissueMasks, Volume3D

FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))

PAPER_SNR_MEAN = (64.50, 54.14)
PAPER_SNR_COV = ((78.47, 71.50), (71.50, 73.91))
FIXED_SNR = (61.0, 53.0)


class SnrSample(NamedTuple):
    snr_wm: float
    snr_gm: float


@dataclass(frozen=True)
class SnrPrior:
    """Bivariate Gaussian prior over (WM, GM) low-field SNR."""

    mu: Tuple[float, float] = PAPER_SNR_MEAN
    sigma: Tuple[Tuple[float, float], Tuple[float, float]] = PAPER_SNR_COV

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.shape != (2, 2) or len(self.mu) != 2:
            raise ConfigError("SNR prior needs a 2-vector mean and a 2x2 covariance")
        if abs(s[0, 1] - s[1, 0]) > 1e-9:
            raise ConfigError("SNR covariance must be symmetric")

    def factor(self) -> np.ndarray:
        """Lower-triangular ``L`` with ``L @ L.T == sigma``."""
        s = np.asarray(self.sigma, dtype=np.float64)
        try:
            return np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            pass
        # positive semi-definite but singular: factor through the eigendecomposition
        w, v = np.linalg.eigh(s)
        if w.min() < -1e-9:
            raise NumericError(f"SNR covariance is not positive semi-definite (eigenvalues {w})")
        return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True)
class SimConfig:
    """Simulator settings.

    ``fwhm_mode="spacing"`` sets the slice-profile FWHM to ``k * e_z``;
    ``"thickness"`` uses ``fwhm_ratio * k * e_z`` (0.75 gives a 2.1 mm
    slice with a 0.7 mm gap at k=4, e_z=0.7 mm).
    """

    k: int = 4
    sigma_x: float = 0.05
    sigma_y: float = 0.01
    fwhm_mode: Literal["spacing", "thickness"] = "spacing"
    fwhm_ratio: float = 0.75
    truncation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.k not in (2, 4, 8):
            raise ConfigError(f"k must be one of 2, 4, 8, got {self.k}")
        if not self.sigma_x > self.sigma_y >= 0:
            raise ConfigError("need sigma_x > sigma_y >= 0")
        if self.fwhm_mode not in ("spacing", "thickness"):
            raise ConfigError(f"unknown fwhm_mode {self.fwhm_mode!r}")
        if not 0 < self.fwhm_ratio <= 1:
            raise ConfigError("fwhm_ratio must lie in (0, 1]")

    def kernel_sigma_mm(self, e_z: float) -> float:
        fwhm = self.k * e_z
        if self.fwhm_mode == "thickness":
            fwhm *= self.fwhm_ratio
        return fwhm * FWHM_TO_SIGMA


def gaussian_kernel_1d(sigma: float, spacing: float, truncation: float = 3.0, half_offset: bool = False) -> np.ndarray:
    """Sampled, renormalised Gaussian slice profile.

    Taps sit at integer multiples of ``spacing`` (odd length, radius
    ``ceil(truncation * sigma / spacing)``), or at half-integer multiples
    when ``half_offset`` is set (even length), which is what a stride with
    an even factor needs to centre the profile between two slices.
    """
    if not sigma > 0:
        raise ConfigError(f"kernel sigma must be positive, got {sigma}")
    if not truncation > 0 or not spacing > 0:
        raise ConfigError("truncation and spacing must be positive")
    r = int(math.ceil(truncation * sigma / spacing))
    if half_offset:
        r = max(r, 1)
        offsets = np.arange(-r, r) + 0.5
    else:
        offsets = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (offsets * spacing / sigma) ** 2)
    w /= w.sum()
    # symmetrise exactly; renormalising can break mirror equality in the last ulp
    w = 0.5 * (w + w[::-1])
    return w / math.fsum(w)


def _tap_positions(nz_out: int, k: int, ntaps: int) -> np.ndarray:
    """Input slice index of every tap for every output slice, shape (nz_out, ntaps)."""
    centre = k * np.arange(nz_out) + (k - 1) / 2.0
    start = np.floor(centre - (ntaps - 1) / 2.0 + 1e-9).astype(np.int64)
    return start[:, None] + np.arange(ntaps)[None, :]


def _decimate(arr: np.ndarray, k: int, kernel: np.ndarray) -> np.ndarray:
    """Filter-and-stride along the last axis with zero padding, float64 out."""
    nz = arr.shape[-1]
    if nz % k:
        raise ShapeError(f"nz={nz} is not divisible by k={k}")
    kernel = np.asarray(kernel, dtype=np.float64)
    pos = _tap_positions(nz // k, k, kernel.size)
    out = np.zeros(arr.shape[:-1] + (nz // k,), dtype=np.float64)
    src = arr.astype(np.float64, copy=False)
    for t, w in enumerate(kernel):
        idx = pos[:, t]
        ok = (idx >= 0) & (idx < nz)
        if ok.all():
            out += w * src[..., idx]
        elif ok.any():
            out[..., ok] += w * src[..., idx[ok]]
    return out


def downsample_z(v: Volume3D, k: int, kernel: Sequence[float]) -> Volume3D:
    """Slab-centred strided filtering along z; ``sz`` grows by ``k``."""
    out = _decimate(v.data, k, np.asarray(kernel))
    return Volume3D(out, (v.sx, v.sy, v.sz * k))


def downsample_masks(m: TissueMasks, k: int, kernel: Sequence[float]) -> TissueMasks:
    out = _decimate(m.data, k, np.asarray(kernel))
    total = out.sum(axis=0, keepdims=True)
    if np.any(total <= 0):
        raise NumericError("mask mass vanished during resampling")
    out = np.clip(out / total, 0.0, 1.0)
    return TissueMasks(out, (m.spacing[0], m.spacing[1], m.spacing[2] * k))


def simulation_kernel(cfg: SimConfig, e_z: float) -> np.ndarray:
    return gaussian_kernel_1d(cfg.kernel_sigma_mm(e_z), e_z, cfg.truncation, half_offset=cfg.k % 2 == 0)


def _check_grid(v: Volume3D, m: TissueMasks) -> None:
    if v.shape != m.shape:
        raise ShapeError(f"volume {v.shape} and masks {m.shape} differ in shape")


def compute_snr(v_low_res: Volume3D, m: TissueMasks, sigma_y: float) -> Tuple[float, float]:
    """Mask-weighted mean WM and GM intensity divided by ``sigma_y``."""
    if not sigma_y > 0:
        raise NumericError(f"sigma_y must be positive, got {sigma_y}")
    _check_grid(v_low_res, m)
    y = v_low_res.data.astype(np.float64)
    out = []
    for name, mask in (("wm", m.wm), ("gm", m.gm)):
        mass = float(np.sum(mask, dtype=np.float64))
        if mass <= 0:
            raise EmptyTissueError(name)
        out.append(float(np.sum(mask.astype(np.float64) * y)) / (sigma_y * mass))
    return out[0], out[1]


def sample_snr_batch(prior: SnrPrior, n: int, rng: np.random.Generator, min_snr: float = 1.0, max_retries: int = 100) -> np.ndarray:
    """``n`` draws of (SNR_WM, SNR_GM); draws with a component <= ``min_snr`` are redrawn."""
    chol = prior.factor()
    mu = np.asarray(prior.mu, dtype=np.float64)
    out = mu + rng.standard_normal((n, 2)) @ chol.T
    bad = np.flatnonzero(np.any(out <= min_snr, axis=1))
    retries = 0
    while bad.size:
        if retries == max_retries:
            raise NumericError(f"SNR prior kept producing values <= {min_snr} after {max_retries} retries")
        out[bad] = mu + rng.standard_normal((bad.size, 2)) @ chol.T
        bad = bad[np.any(out[bad] <= min_snr, axis=1)]
        retries += 1
    return out


def sample_snr(prior: SnrPrior, rng: np.random.Generator) -> SnrSample:
    wm, gm = sample_snr_batch(prior, 1, rng)[0]
    return SnrSample(float(wm), float(gm))


def intensity_ratios(snr_low: SnrSample, snr_high: Tuple[float, float]) -> Tuple[float, float, float]:
    if min(snr_high) <= 0:
        raise NumericError(f"high-field SNR must be positive, got {tuple(snr_high)}")
    return snr_low[0] / snr_high[0], snr_low[1] / snr_high[1], 1.0


def contrast_transfer(v_low_res: Volume3D, m: TissueMasks, snr_low: SnrSample, snr_high: Tuple[float, float]) -> Volume3D:
    _check_grid(v_low_res, m)
    l_wm, l_gm, l_other = intensity_ratios(snr_low, snr_high)
    scale = l_wm * m.wm.astype(np.float64) + l_gm * m.gm + l_other * m.other
    return v_low_res.with_data(scale * v_low_res.data)


def add_noise(v: Volume3D, sigma_x: float, rng: np.random.Generator) -> Volume3D:
    if sigma_x < 0:
        raise ConfigError("sigma_x must be non-negative")
    if sigma_x == 0:
        return v
    return v.with_data(v.data + rng.normal(0.0, sigma_x, size=v.shape))


@dataclass(frozen=True)
class SimResult:
    noisy: Volume3D
    clean: Volume3D
    decimated: Volume3D
    masks: TissueMasks
    snr_high: Tuple[float, float]
    snr_low: SnrSample


def simulate(
    y: Volume3D,
    m: TissueMasks,
    cfg: SimConfig,
    mode: Union[SnrSample, SnrPrior],
    rng: np.random.Generator,
) -> SimResult:
    """Run the full simulator and keep every intermediate product.

    ``mode`` is either a fixed :class:`SnrSample` (the sampling step is
    skipped) or an :class:`SnrPrior` to draw from.
    """
    _check_grid(y, m)
    if not cfg.sigma_y > 0:
        raise NumericError("sigma_y must be positive to measure high-field SNR")
    kernel = simulation_kernel(cfg, y.sz)
    dec = downsample_z(y, cfg.k, kernel)
    m_lo = downsample_masks(m, cfg.k, kernel)
    snr_high = compute_snr(dec, m_lo, cfg.sigma_y)
    if isinstance(mode, SnrPrior):
        snr_low = sample_snr(mode, rng)
    elif isinstance(mode, tuple) and len(mode) == 2:
        snr_low = SnrSample(float(mode[0]), float(mode[1]))
        if min(snr_low) <= 0:
            raise ConfigError("fixed low-field SNR must be positive")
    else:
        raise ConfigError(f"mode must be an SnrSample or SnrPrior, got {type(mode).__name__}")
    clean = contrast_transfer(dec, m_lo, snr_low, snr_high)
    noisy = add_noise(clean, cfg.sigma_x, rng)
    return SimResult(noisy, clean, dec, m_lo, snr_high, snr_low)


def simulate_low_field(y, m, cfg, mode, rng) -> Volume3D:
    """Noisy synthetic low-field volume (see :func:`simulate`)."""
    return simulate(y, m, cfg, mode, rng).noisy
