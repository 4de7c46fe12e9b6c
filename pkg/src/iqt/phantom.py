"""Synthetic skull-stripped brain phantoms.

A phantom is a folded ellipsoidal WM core inside an ellipsoidal GM shell,
surrounded by exactly-zero background. Masks are sigmoid-smoothed so that
voxels near a boundary carry fractional tissue probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .volume import TissueMasks, Volume3D

# sigmoid arguments beyond this are snapped to 0/1 so the background is exactly zero
_SNAP = 16.0


@dataclass(frozen=True)
class PhantomConfig:
    """Phantom geometry and contrast.

    ``brain_radii`` are the outer (GM) semi-axes as fractions of each half
    extent; ``wm_ratio`` scales them down to the WM core. ``fold_amplitude``
    modulates the WM boundary radially to mimic gyri.
    """

    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 0.7
    wm_intensity: float = 0.82
    gm_intensity: float = 0.64
    boundary_softness_mm: float = 0.35
    lesion_count: int = 0
    seed: int = 0
    brain_radii: Tuple[float, float, float] = (0.80, 0.86, 0.76)
    wm_ratio: float = 0.68
    fold_amplitude: float = 0.10
    fold_order: int = 4

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ConfigError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if not self.wm_intensity > self.gm_intensity > 0:
            raise ConfigError("need wm_intensity > gm_intensity > 0")
        if self.spacing_mm <= 0 or self.boundary_softness_mm < 0:
            raise ConfigError("spacing must be positive and softness non-negative")
        if self.lesion_count < 0:
            raise ConfigError("lesion_count must be non-negative")
        if not 0 < self.wm_ratio < 1 or not all(0 < r < 1 for r in self.brain_radii):
            raise ConfigError("brain_radii and wm_ratio must lie in (0, 1)")
        if not 0 <= self.fold_amplitude < 0.5:
            raise ConfigError("fold_amplitude must lie in [0, 0.5)")
        outer = [r * n / 2 for r, n in zip(self.brain_radii, self.dims)]
        inner = [a * self.wm_ratio * (1 - self.fold_amplitude) for a in outer]
        shell = [a * (1 - self.wm_ratio * (1 + self.fold_amplitude)) for a in outer]
        if min(inner) < 2 or min(shell) < 1.5:
            raise ConfigError(
                f"dims {self.dims} too small to contain both shells "
                f"(WM semi-axis {min(inner):.2f} vox, GM shell {min(shell):.2f} vox)"
            )


def _soft_inside(signed_dist_mm: np.ndarray, softness_mm: float) -> np.ndarray:
    """Probability of being inside a surface given signed distance (negative inside)."""
    if softness_mm == 0:
        return (signed_dist_mm < 0).astype(np.float64)
    t = -signed_dist_mm / softness_mm
    p = expit(t)
    p[t < -_SNAP] = 0.0
    p[t > _SNAP] = 1.0
    return p


def _ray_distance(coords, center, semi_axes, scale=None):
    """Signed distance (mm) to an ellipsoid measured along the ray from its centre."""
    rel = [c - c0 for c, c0 in zip(coords, center)]
    r = np.sqrt(sum((d / a) ** 2 for d, a in zip(rel, semi_axes)))
    if scale is not None:
        r = r / scale
    norm = np.sqrt(sum(d * d for d in rel))
    safe_r = np.where(r > 0, r, 1.0)
    dist = norm * (1.0 - 1.0 / safe_r)
    # at the centre the ray distance is minus the smallest semi-axis
    return np.where(r > 0, dist, -min(semi_axes) * (1.0 if scale is None else float(np.min(scale))))


def _fold_field(coords, center, order: int, amplitude: float, rng: np.random.Generator):
    """Smooth radial modulation ``1 + amplitude * f(direction)`` with |f| <= 1."""
    rel = [c - c0 for c, c0 in zip(coords, center)]
    norm = np.sqrt(sum(d * d for d in rel))
    norm = np.where(norm > 0, norm, 1.0)
    ux, uy, uz = (d / norm for d in rel)
    terms = []
    for _ in range(3):
        w = rng.normal(size=3)
        w /= np.linalg.norm(w)
        phase = rng.uniform(0, 2 * np.pi)
        terms.append(np.sin(order * np.pi * (w[0] * ux + w[1] * uy + w[2] * uz) + phase))
    return 1.0 + amplitude * sum(terms) / len(terms)


def generate_phantom(cfg: PhantomConfig) -> Tuple[Volume3D, TissueMasks]:
    """Build one phantom volume and its masks; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h = cfg.spacing_mm
    nx, ny, nz = cfg.dims
    coords = np.meshgrid(
        np.arange(nx) * h, np.arange(ny) * h, np.arange(nz) * h, indexing="ij", sparse=True
    )
    center = [(n - 1) * h / 2 for n in cfg.dims]
    outer = [r * n * h / 2 for r, n in zip(cfg.brain_radii, cfg.dims)]
    inner = [a * cfg.wm_ratio for a in outer]

    brain = _soft_inside(_ray_distance(coords, center, outer), cfg.boundary_softness_mm)
    fold = _fold_field(coords, center, cfg.fold_order, cfg.fold_amplitude, rng)
    core = _soft_inside(_ray_distance(coords, center, inner, scale=fold), cfg.boundary_softness_mm)

    wm = core * brain
    gm = (1.0 - core) * brain

    for _ in range(cfg.lesion_count):
        # lesion centred on the WM/GM interface along a random direction
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        rad = 1.0 / np.sqrt(sum((di / a) ** 2 for di, a in zip(d, inner)))
        c = [c0 + rad * di for c0, di in zip(center, d)]
        axes = rng.uniform(1.5, 3.0, size=3) * h
        lesion = _soft_inside(_ray_distance(coords, c, axes), cfg.boundary_softness_mm)
        # inside a lesion tissue is an even WM/GM mix: intermediate intensity
        mix = 0.5 * (wm + gm)
        wm = (1 - lesion) * wm + lesion * mix
        gm = (1 - lesion) * gm + lesion * mix

    other = 1.0 - wm - gm
    other[other < 0] = 0.0
    spacing = (h, h, h)
    masks = TissueMasks(np.stack([wm, gm, other]), spacing)
    image = cfg.wm_intensity * wm + cfg.gm_intensity * gm
    return Volume3D(image, spacing), masks


def cohort_configs(n_subjects: int, base_cfg: PhantomConfig, seed: int) -> List[PhantomConfig]:
    """Per-subject configs: axes and intensities jittered around ``base_cfg``."""
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    cfgs = []
    for child in children:
        rng = np.random.default_rng(child)
        radii = tuple(float(np.clip(r * rng.uniform(0.92, 1.04), 0.3, 0.95)) for r in base_cfg.brain_radii)
        wm_i = base_cfg.wm_intensity * rng.uniform(0.96, 1.04)
        gm_i = base_cfg.gm_intensity * rng.uniform(0.96, 1.04)
        cfgs.append(
            replace(
                base_cfg,
                brain_radii=radii,
                wm_ratio=float(base_cfg.wm_ratio * rng.uniform(0.95, 1.05)),
                wm_intensity=float(max(wm_i, gm_i * 1.05)),
                gm_intensity=float(gm_i),
                seed=int(child.generate_state(1, dtype=np.uint64)[0]),
            )
        )
    return cfgs


def generate_cohort(n_subjects: int, base_cfg: PhantomConfig, seed: int) -> List[Tuple[Volume3D, TissueMasks]]:
    return [generate_phantom(c) for c in cohort_configs(n_subjects, base_cfg, seed)]
