"""Cubic B-spline interpolation along z (the non-learned baseline).

Signals are extended past both ends by point reflection
(``s[-j] = 2 s[0] - s[j]``). That extension maps affine signals to
themselves, so constants and ramps are reproduced exactly, and it is
equivalent to natural end conditions for the interpolating spline.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .volume import Volume3D

POLE = math.sqrt(3.0) - 2.0
# |POLE|**32 ~ 5e-19: padding this long makes the truncated causal init exact to f64
_PAD = 32


def _reflection_map(n: int, pad: int):
    """Express extended samples as ``sign * s[q] + c0 * s[0] + c1 * s[n-1]``."""
    q, sign, c0, c1 = [], [], [], []
    for p in range(-pad, n + pad):
        sg, a0, a1 = 1.0, 0.0, 0.0
        while not 0 <= p <= n - 1:
            if p < 0:
                # s[p] = 2 s[0] - s[-p]
                p, a0, sg = -p, a0 + 2 * sg, -sg
            else:
                p, a1, sg = 2 * (n - 1) - p, a1 + 2 * sg, -sg
        q.append(p)
        sign.append(sg)
        c0.append(a0)
        c1.append(a1)
    return np.array(q), np.array(sign), np.array(c0), np.array(c1)


def _extend(samples: np.ndarray, pad: int) -> np.ndarray:
    """Point-reflect the last axis ``pad`` samples past each end."""
    n = samples.shape[-1]
    if n == 1:
        return np.repeat(samples, 2 * pad + 1, axis=-1)
    q, sign, c0, c1 = _reflection_map(n, pad)
    return sign * samples[..., q] + c0 * samples[..., :1] + c1 * samples[..., -1:]


def bspline_prefilter_1d(samples) -> np.ndarray:
    """Interpolating cubic B-spline coefficients along the last axis.

    Two-pass recursive filter (causal then anti-causal, pole sqrt(3)-2,
    gain 6) run over the point-reflected extension of the signal.
    """
    s = np.asarray(samples, dtype=np.float64)
    n = s.shape[-1]
    if n < 2:
        raise ConfigError("B-spline prefilter needs at least 2 samples")
    ext = _extend(s, _PAD)
    z = POLE
    c = 6.0 * ext
    # causal pass; the start-up transient has decayed below f64 resolution by the interior
    for i in range(1, c.shape[-1]):
        c[..., i] += z * c[..., i - 1]
    # anti-causal pass
    last = c.shape[-1] - 1
    c[..., last] = (z / (z * z - 1.0)) * (c[..., last] + z * c[..., last - 1])
    for i in range(last - 1, -1, -1):
        c[..., i] = z * (c[..., i + 1] - c[..., i])
    return c[..., _PAD:_PAD + n]


def _cubic_weights(t: np.ndarray):
    """B-spline weights for coefficients i-1, i, i+1, i+2 at fractional offset t."""
    t2, t3 = t * t, t * t * t
    w0 = (1 - t) ** 3 / 6.0
    w1 = (3 * t3 - 6 * t2 + 4) / 6.0
    w2 = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0
    w3 = t3 / 6.0
    return w0, w1, w2, w3


def evaluate_bspline(coeffs: np.ndarray, positions) -> np.ndarray:
    """Evaluate the spline with coefficients along the last axis at real ``positions``."""
    c = np.asarray(coeffs, dtype=np.float64)
    u = np.asarray(positions, dtype=np.float64)
    n = c.shape[-1]
    lo = int(np.floor(u.min())) - 1
    hi = int(np.floor(u.max())) + 2
    pad = max(0, -lo, hi - (n - 1))
    ext = _extend(c, pad) if pad else c
    i = np.floor(u).astype(np.int64)
    t = u - i
    base = i - 1 + pad
    w = _cubic_weights(t)
    out = np.zeros(c.shape[:-1] + u.shape, dtype=np.float64)
    for j in range(4):
        out += w[j] * ext[..., base + j]
    return out


def coarse_positions(nz: int, k: int) -> np.ndarray:
    """Coarse-grid coordinate of every fine slice.

    Decimation centres coarse slice ``v`` on fine index ``k*v + (k-1)/2``;
    this is the inverse map.
    """
    fine = np.arange(k * nz, dtype=np.float64)
    return (fine - (k - 1) / 2.0) / k


def upsample_z_bspline(v: Volume3D, k: int) -> Volume3D:
    if k < 2:
        raise ConfigError("upsampling factor must be >= 2")
    coeffs = bspline_prefilter_1d(v.data)
    out = evaluate_bspline(coeffs, coarse_positions(v.nz, k))
    return Volume3D(out, (v.sx, v.sy, v.sz / k))
