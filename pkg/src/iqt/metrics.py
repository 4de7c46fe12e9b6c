"""Image-quality metrics and the paired Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ConfigError, NoNonzeroDifferencesError, ShapeError
from .volume import Volume3D

EXACT_MAX_N = 20


def _same_shape(a: Volume3D, b: Volume3D) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"volume shapes differ: {a.shape} vs {b.shape}")


def psnr(reference: Volume3D, test: Volume3D, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical volumes.

    ``peak=None`` uses the reference maximum.
    """
    _same_shape(reference, test)
    ref = reference.data.astype(np.float64)
    if peak is None:
        peak = float(ref.max())
    if not peak > 0:
        raise ConfigError(f"PSNR peak must be positive, got {peak}")
    mse = float(np.mean((ref - test.data.astype(np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class SsimParams:
    window_sigma: float = 1.5
    window_taps: int = 11
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None  # None: max - min of the reference

    def __post_init__(self):
        if self.window_taps < 1 or self.window_taps % 2 == 0:
            raise ConfigError("SSIM window needs an odd number of taps")
        if not (self.k1 > 0 and self.k2 > 0 and self.window_sigma > 0):
            raise ConfigError("SSIM constants must be positive")

    def window(self) -> np.ndarray:
        r = self.window_taps // 2
        x = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-0.5 * (x / self.window_sigma) ** 2)
        return w / w.sum()


def _filter_valid(arr: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation with ``w`` on all three axes, valid region only."""
    out = arr
    for axis in range(3):
        view = sliding_window_view(out, w.size, axis=axis)
        out = view @ w
    return out


def ssim_map(reference: Volume3D, test: Volume3D, params: SsimParams = SsimParams()) -> np.ndarray:
    _same_shape(reference, test)
    if min(reference.shape) < params.window_taps:
        raise ShapeError(f"volume {reference.shape} is smaller than the {params.window_taps}-tap SSIM window")
    x = reference.data.astype(np.float64)
    y = test.data.astype(np.float64)
    L = params.dynamic_range
    if L is None:
        L = float(x.max() - x.min())
    if not L > 0:
        # constant reference: fall back to unit range so the constants stay positive
        L = 1.0
    c1 = (params.k1 * L) ** 2
    c2 = (params.k2 * L) ** 2
    w = params.window()
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(y * y, w) - my * my
    cxy = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def mssim(reference: Volume3D, test: Volume3D, params: SsimParams = SsimParams()) -> float:
    """Mean of the 3D local SSIM map over fully windowed voxels."""
    return float(np.mean(ssim_map(reference, test, params)))


class WilcoxonResult(NamedTuple):
    statistic: float
    p_value: float
    n: int
    w_plus: float
    w_minus: float
    exact: bool


def _signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each doubled positive-rank sum.

    Dynamic programming over ranks; equivalent to enumerating all 2**n
    sign patterns. Ranks are doubled so tied (half-integer) ranks stay integral.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-tailed paired Wilcoxon signed-rank test.

    Zero differences are dropped, ties get average ranks, and the
    statistic is ``min(W+, W-)``. The p-value is exact for up to 20
    non-zero differences, otherwise a normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples must be 1-D and equally long, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise NoNonzeroDifferencesError()
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_null_counts(doubled)
        tail = int(sum(counts[: int(round(2 * w)) + 1]))
        p = min(1.0, 2.0 * tail / 2 ** n)
        return WilcoxonResult(w, p, n, w_plus, w_minus, True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = min(0.0, w - mean + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(ndtr(z)))
    return WilcoxonResult(w, p, n, w_plus, w_minus, False)
