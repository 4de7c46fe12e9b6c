"""Paired low/high-field patch extraction, augmentation and reassembly."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, CoverageError, DataError, ShapeError
from .simulator import SimConfig, SnrPrior, simulate
from .volume import TissueMasks, Volume3D, load_volume, save_volume

Triple = Tuple[int, int, int]


@dataclass(frozen=True)
class PatchSpec:
    """Patch geometry in low-field voxels.

    Defaults follow the published protocol: low patches 32x32x(32/k),
    high patches 32x32x32, strides (8, 16, 16/k).
    """

    k: int = 4
    low_size: Optional[Triple] = None
    strides: Optional[Triple] = None
    background_threshold: float = 0.80
    background_epsilon: float = 1e-6

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.low_size is None:
            if 32 % self.k:
                raise ConfigError(f"default patch depth 32/k needs k | 32, got k={self.k}")
            object.__setattr__(self, "low_size", (32, 32, 32 // self.k))
        if self.strides is None:
            object.__setattr__(self, "strides", (8, 16, max(1, 16 // self.k)))
        object.__setattr__(self, "low_size", tuple(int(s) for s in self.low_size))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if min(self.low_size) < 1 or min(self.strides) < 1:
            raise ConfigError("patch sizes and strides must be positive")
        if not 0 < self.background_threshold <= 1:
            raise ConfigError("background_threshold must lie in (0, 1]")

    @property
    def high_size(self) -> Triple:
        x, y, z = self.low_size
        return (x, y, self.k * z)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["low_size"] = list(self.low_size)
        d["strides"] = list(self.strides)
        return d


@dataclass(eq=False)
class PatchPair:
    low: np.ndarray
    high: np.ndarray
    origin: Triple
    subject_id: int = 0
    augmentation_id: int = 0

    def high_origin(self, k: int) -> Triple:
        ix, iy, iz = self.origin
        return (ix, iy, k * iz)


@dataclass
class PatchLibrary:
    spec: PatchSpec
    pairs: List[PatchPair] = field(default_factory=list)
    M: int = 0
    N: int = 1

    def __len__(self) -> int:
        return len(self.pairs)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked ``(n, 1, x, y, z)`` low and high tensors."""
        lo = np.stack([p.low for p in self.pairs])[:, None]
        hi = np.stack([p.high for p in self.pairs])[:, None]
        return lo, hi

    def merged(self, other: "PatchLibrary") -> "PatchLibrary":
        if other.spec != self.spec:
            raise ConfigError("cannot merge libraries with different patch specs")
        if self.pairs and other.pairs and other.N != self.N:
            raise ConfigError("cannot merge libraries with different augmentation factors")
        n = self.N if self.pairs else other.N
        return PatchLibrary(self.spec, self.pairs + other.pairs, self.M + other.M, n)


def _axis_origins(dim: int, size: int, stride: int, snap_end: bool = False) -> List[int]:
    out = list(range(0, dim - size + 1, stride))
    if snap_end and out[-1] != dim - size:
        out.append(dim - size)
    return out


def patch_grid(lo_dims: Sequence[int], spec: PatchSpec, snap_end: bool = False) -> List[Triple]:
    """Patch origins on the low-field grid, x-major order.

    With ``snap_end`` an extra end-aligned origin is appended per axis
    whenever the regular grid misses the last voxels.
    """
    if any(d < s for d, s in zip(lo_dims, spec.low_size)):
        raise ShapeError(f"volume {tuple(lo_dims)} is smaller than one patch {spec.low_size}")
    axes = [_axis_origins(d, s, st, snap_end) for d, s, st in zip(lo_dims, spec.low_size, spec.strides)]
    return [tuple(o) for o in itertools.product(*axes)]


def _crop(arr: np.ndarray, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return arr[sl]


def keep_patch(background_ref: np.ndarray, origin: Triple, spec: PatchSpec) -> bool:
    """True when strictly fewer than ``threshold`` of the patch voxels are background."""
    patch = _crop(background_ref, origin, spec.low_size)
    n_bg = np.count_nonzero(np.abs(patch) <= spec.background_epsilon)
    return n_bg < spec.background_threshold * patch.size


def kept_origins(background_ref: Volume3D, spec: PatchSpec) -> List[Triple]:
    ref = background_ref.data
    return [o for o in patch_grid(ref.shape, spec) if keep_patch(ref, o, spec)]


def extract_pairs(
    lo: Volume3D,
    hi: Volume3D,
    spec: PatchSpec,
    background: Optional[Volume3D] = None,
    subject_id: int = 0,
    augmentation_id: int = 0,
    origins: Optional[Iterable[Triple]] = None,
) -> PatchLibrary:
    """Cut aligned patch pairs at every grid origin that passes the background rule.

    ``background`` is the volume the background rule is judged on
    (defaults to ``lo``); pass the noiseless simulated volume to keep
    noise out of the decision. ``origins`` bypasses the rule entirely.
    """
    k = spec.k
    if hi.shape != (lo.nx, lo.ny, k * lo.nz):
        raise ShapeError(f"high-field dims {hi.shape} do not match low-field {lo.shape} at k={k}")
    ref = lo if background is None else background
    if ref.shape != lo.shape:
        raise ShapeError("background reference must share the low-field grid")
    if origins is None:
        origins = kept_origins(ref, spec)
    pairs = []
    for o in origins:
        pairs.append(
            PatchPair(
                low=np.array(_crop(lo.data, o, spec.low_size)),
                high=np.array(_crop(hi.data, (o[0], o[1], k * o[2]), spec.high_size)),
                origin=tuple(int(c) for c in o),
                subject_id=subject_id,
                augmentation_id=augmentation_id,
            )
        )
    return PatchLibrary(spec, pairs, M=len(pairs), N=1)


def augment_library(
    hi: Volume3D,
    m: TissueMasks,
    cfg: SimConfig,
    prior: SnrPrior,
    n_aug: int,
    spec: PatchSpec,
    rng: np.random.Generator,
    subject_id: int = 0,
    mode=None,
) -> PatchLibrary:
    """Simulate ``n_aug`` low-field realisations of one subject and pair them with ``hi``.

    Kept positions are decided once on the noiseless decimated volume,
    which does not depend on the SNR draw, so every realisation
    contributes the same set of origins.
    """
    if n_aug < 1:
        raise ConfigError("n_aug must be >= 1")
    if cfg.k != spec.k:
        raise ConfigError(f"simulator k={cfg.k} differs from patch k={spec.k}")
    mode = prior if mode is None else mode
    pairs: List[PatchPair] = []
    origins = None
    for j in range(n_aug):
        res = simulate(hi, m, cfg, mode, rng)
        if origins is None:
            origins = kept_origins(res.decimated, spec)
        lib = extract_pairs(res.noisy, hi, spec, subject_id=subject_id, augmentation_id=j, origins=origins)
        pairs.extend(lib.pairs)
    return PatchLibrary(spec, pairs, M=len(origins), N=n_aug)


def subsample(lib: PatchLibrary, fraction: float, rng: np.random.Generator) -> PatchLibrary:
    """Uniform sample without replacement of ``round(fraction * len(lib))`` pairs.

    Python's ``round`` is half-to-even. Library order is preserved.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    n = round(fraction * len(lib.pairs))
    idx = np.sort(rng.choice(len(lib.pairs), size=n, replace=False)) if n else np.array([], dtype=int)
    return PatchLibrary(lib.spec, [lib.pairs[i] for i in idx], lib.M, lib.N)


def coverage_counts(origins: Iterable[Triple], size: Triple, dims: Triple) -> np.ndarray:
    count = np.zeros(dims, dtype=np.int64)
    for o in origins:
        count[tuple(slice(a, a + s) for a, s in zip(o, size))] += 1
    return count


def assemble(patches: Sequence[Tuple[Triple, np.ndarray]], hi_dims: Triple, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Average overlapping high-field patch predictions into one volume.

    ``patches`` holds ``(origin, array)`` with origins in high-field
    voxel coordinates.
    """
    acc = np.zeros(hi_dims, dtype=np.float64)
    count = np.zeros(hi_dims, dtype=np.int64)
    for origin, arr in patches:
        arr = np.asarray(arr)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, arr.shape))
        if any(o < 0 or o + s > d for o, s, d in zip(origin, arr.shape, hi_dims)):
            raise ShapeError(f"patch at {origin} with shape {arr.shape} leaves the volume {hi_dims}")
        acc[sl] += arr
        count[sl] += 1
    missing = np.argwhere(count == 0)
    if missing.size:
        raise CoverageError(missing[0])
    return Volume3D(acc / count, spacing)


# --- persistence -------------------------------------------------------------

SHARD_SIZE = 256


def save_library(lib: PatchLibrary, directory, seeds: Optional[dict] = None) -> None:
    """Write ``manifest.json`` plus one low/high IQTV pair per shard.

    Patches inside a shard are stacked along z.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shards = []
    for s, start in enumerate(range(0, len(lib.pairs), SHARD_SIZE)):
        chunk = lib.pairs[start:start + SHARD_SIZE]
        low_name, high_name = f"shard_{s:04d}_low.iqtv", f"shard_{s:04d}_high.iqtv"
        save_volume(Volume3D(np.concatenate([p.low for p in chunk], axis=2)), d / low_name)
        save_volume(Volume3D(np.concatenate([p.high for p in chunk], axis=2)), d / high_name)
        shards.append({
            "low": low_name,
            "high": high_name,
            "pairs": [
                {"origin": list(p.origin), "subject_id": p.subject_id, "augmentation_id": p.augmentation_id}
                for p in chunk
            ],
        })
    manifest = {
        "spec": lib.spec.to_dict(),
        "counts": {"M": lib.M, "N": lib.N, "pairs": len(lib.pairs)},
        "seeds": seeds or {},
        "shards": shards,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_library(directory) -> PatchLibrary:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no patch library manifest in {d}") from None
    sd = manifest["spec"]
    spec = PatchSpec(
        k=sd["k"],
        low_size=tuple(sd["low_size"]),
        strides=tuple(sd["strides"]),
        background_threshold=sd["background_threshold"],
        background_epsilon=sd["background_epsilon"],
    )
    lz, hz = spec.low_size[2], spec.high_size[2]
    pairs = []
    for shard in manifest["shards"]:
        low = load_volume(d / shard["low"]).data
        high = load_volume(d / shard["high"]).data
        for i, rec in enumerate(shard["pairs"]):
            pairs.append(PatchPair(
                low=np.array(low[:, :, i * lz:(i + 1) * lz]),
                high=np.array(high[:, :, i * hz:(i + 1) * hz]),
                origin=tuple(rec["origin"]),
                subject_id=rec["subject_id"],
                augmentation_id=rec["augmentation_id"],
            ))
    counts = manifest["counts"]
    if counts["pairs"] != len(pairs):
        raise DataError(f"manifest lists {counts['pairs']} pairs, shards hold {len(pairs)}")
    return PatchLibrary(spec, pairs, counts["M"], counts["N"])
