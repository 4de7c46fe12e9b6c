"""Anisotropic U-Net: residual cores, bottleneck skip blocks, training and inference."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Graph, ParamStore, adam_step, learning_rate, mse_loss, no_grad
from .patches import PatchLibrary, PatchSpec, assemble, patch_grid
from .volume import Volume3D


@dataclass(frozen=True)
class NetworkSpec:
    """Network hyper-parameters.

    ``levels`` counts encoder resolutions including the bottom one; the
    first ``log2(k)`` pools are in-plane only.
    """

    k: int = 4
    base_filters: int = 16
    levels: int = 5
    bb_shrink: int = 2
    rc_depth: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.k not in (2, 4, 8):
            raise ConfigError(f"k must be 2, 4 or 8, got {self.k}")
        if self.base_filters < 2 or self.base_filters % 2:
            raise ConfigError("base_filters must be even (bottleneck blocks halve it)")
        if self.levels < self.n_aniso + 1:
            raise ConfigError(f"k={self.k} needs at least {self.n_aniso + 1} levels, got {self.levels}")
        if self.bb_shrink not in (2, 3):
            raise ConfigError(f"bb_shrink must be 2 or 3, got {self.bb_shrink}")
        if self.rc_depth < 1:
            raise ConfigError("rc_depth must be >= 1")

    @property
    def n_aniso(self) -> int:
        return int(math.log2(self.k))

    def filters(self, level: int) -> int:
        """Channel count at 1-indexed ``level``."""
        return self.base_filters * 2 ** (level - 1)

    def pool_window(self, level: int) -> Tuple[int, int, int]:
        """Pooling applied after 1-indexed encoder ``level``."""
        return (2, 2, 1) if level <= self.n_aniso else (2, 2, 2)

    def skip_upsample(self, level: int) -> int:
        """z-upsampling factor of the skip at 1-indexed ``level`` (1 = direct concat)."""
        return max(1, self.k // 2 ** (level - 1))

    def check_input(self, dims) -> None:
        w, h, d = dims
        xy = 2 ** (self.levels - 1)
        zdiv = 2 ** (self.levels - 1 - self.n_aniso)
        if w % xy or h % xy or d % zdiv:
            raise ShapeError(
                f"input {tuple(dims)} incompatible with {self.levels} levels at k={self.k}: "
                f"x, y must be divisible by {xy} and z by {zdiv}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_relu_bn(g: Graph, x: str, f: int, kernel, name: str) -> str:
    h = g.conv(x, f, kernel, name=f"{name}.conv")
    h = g.relu(h, name=f"{name}.relu")
    return g.batchnorm(h, name=f"{name}.bn")


def residual_core(g: Graph, x: str, f: int, b: int, name: str) -> str:
    """RC(b): b stacked 3x3x3 conv+ReLU+BN summed with a 1x1x1 projection, then ReLU+BN."""
    h = x
    for i in range(b):
        h = _conv_relu_bn(g, h, f, (3, 3, 3), f"{name}.c{i + 1}")
    skip = g.conv(x, f, (1, 1, 1), name=f"{name}.skip")
    s = g.add(h, skip, name=f"{name}.sum")
    s = g.relu(s, name=f"{name}.relu")
    return g.batchnorm(s, name=f"{name}.bn")


def bottleneck_block(g: Graph, x: str, f: int, b: int, u: int, name: str) -> str:
    """BB(b, u): channel-halving residual path, then a (1, 1, u) transpose conv."""
    if f % 2:
        raise ConfigError(f"bottleneck block needs an even filter count, got {f}")
    if g[x].channels != f:
        raise ConfigError(f"bottleneck block input has {g[x].channels} channels, expected {f}")
    h = _conv_relu_bn(g, x, f // 2, (1, 1, 1), f"{name}.in")
    for i in range(b):
        h = _conv_relu_bn(g, h, f // 2, (3, 3, 3), f"{name}.c{i + 1}")
    h = _conv_relu_bn(g, h, f, (1, 1, 1), f"{name}.out")
    h = g.add(h, x, name=f"{name}.sum")
    return g.deconv(h, f, (1, 1, u), name=f"{name}.up")


def build_network(spec: NetworkSpec) -> Graph:
    g = Graph()
    h = g.input(spec.in_channels)
    skips: List[str] = []
    for level in range(1, spec.levels + 1):
        h = residual_core(g, h, spec.filters(level), spec.rc_depth, f"enc{level}")
        if level < spec.levels:
            skips.append(h)
            h = g.maxpool(h, spec.pool_window(level), name=f"pool{level}")
    for level in range(spec.levels - 1, 0, -1):
        f = spec.filters(level)
        up = g.deconv(h, f, (2, 2, 2), name=f"dec{level}.up")
        skip = skips[level - 1]
        u = spec.skip_upsample(level)
        if u > 1:
            skip = bottleneck_block(g, skip, f, spec.bb_shrink, u, f"bb{level}")
        h = g.concat([skip, up], name=f"dec{level}.concat")
        h = residual_core(g, h, f, spec.rc_depth, f"dec{level}")
    h = g.conv(h, 1, (1, 1, 1), name="head")
    g.output(h)
    g.spec = spec.to_dict()
    return g


# --- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    lr0: float = 1e-3
    decay: float = 1e-6
    seed: int = 0
    dtype: str = "float32"
    bn_refresh_batches: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.bn_refresh_batches < 0:
            raise ConfigError("bn_refresh_batches must be >= 0")


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> Tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def _check_library(net: Graph, lib: PatchLibrary, what: str) -> None:
    if len(lib) == 0:
        raise ConfigError(f"{what} library is empty")
    spec = NetworkSpec(**net.spec) if net.spec else None
    if spec is not None:
        if lib.spec.k != spec.k:
            raise ShapeError(f"{what} library has k={lib.spec.k}, network k={spec.k}")
        spec.check_input(lib.spec.low_size)


def refresh_bn_stats(net: Graph, store: ParamStore, x: np.ndarray, batch_size: int) -> None:
    """Set BN running statistics to the average training-mode batch statistics over ``x``.

    With few optimizer steps a 0.99-momentum running average still sits
    near its initial value; this re-estimates it from the current weights.
    """
    sums = {k: np.zeros_like(v) for k, v in store.state.items()}
    total = 0
    with no_grad():
        for s in range(0, len(x), batch_size):
            xb = x[s:s + batch_size]
            if len(xb) < 2 and total:
                break
            net.forward(store, xb, training=True, update_stats=True, bn_momentum=0.0)
            for k, v in store.state.items():
                sums[k] += len(xb) * v
            total += len(xb)
    for k in store.state:
        store.state[k][...] = sums[k] / total


def evaluate_loss(net: Graph, store: ParamStore, lo: np.ndarray, hi: np.ndarray, batch_size: int = 32) -> float:
    """Inference-mode MSE averaged over all voxels of all pairs."""
    pred = net.predict(store, lo, batch_size)
    diff = pred.astype(np.float64) - hi
    return float(np.mean(diff * diff))


def train(
    net: Graph,
    train_lib: PatchLibrary,
    val_lib: PatchLibrary,
    cfg: TrainConfig = TrainConfig(),
    store: Optional[ParamStore] = None,
    log=None,
):
    """Mini-batch Adam on the voxel-mean squared error with early stopping.

    Returns ``(best_store, history)``; ``best_store`` is a snapshot taken at
    the epoch with the lowest validation loss.
    """
    _check_library(net, train_lib, "training")
    _check_library(net, val_lib, "validation")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    if store is None:
        store = ParamStore.initialize(net, rng, dtype)
    else:
        store = store.astype(dtype)
    store.check_against(net)
    x_tr, y_tr = (a.astype(dtype) for a in train_lib.arrays())
    x_va, y_va = val_lib.arrays()
    stopper = EarlyStopping(cfg.patience)
    best = store.copy()
    history = {"epochs": [], "first_batch_loss": None, "best_epoch": 0, "stopped_early": False}
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_tr))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            out, pt, _ = net.forward(store, x_tr[idx], training=True)
            loss = mse_loss(out, y_tr[idx])
            loss.backward()
            grads = {k: t.grad for k, t in pt.items() if t.grad is not None}
            store.step += 1
            adam_step(store.params, grads, store.step, store.adam_m, store.adam_v, lr0=cfg.lr0, decay=cfg.decay)
            if history["first_batch_loss"] is None:
                history["first_batch_loss"] = float(loss.data)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        if cfg.bn_refresh_batches:
            refresh_bn_stats(net, store, x_tr[order[:cfg.bn_refresh_batches * cfg.batch_size]], cfg.batch_size)
        val = evaluate_loss(net, store, x_va, y_va, cfg.batch_size)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best = store.copy()
        rec = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_loss": val,
            "lr": learning_rate(store.step, cfg.lr0, cfg.decay),
            "wall_time": time.perf_counter() - t0,
        }
        history["epochs"].append(rec)
        if log is not None:
            log(rec)
        if stop:
            history["stopped_early"] = True
            break
    history["best_epoch"] = stopper.best_epoch
    history["best_val_loss"] = stopper.best
    return best, history


# --- inference -------------------------------------------------------------------


def infer_volume(net: Graph, store: ParamStore, lo: Volume3D, spec: PatchSpec, batch_size: int = 32) -> Volume3D:
    """Predict overlapping patches on an end-snapped grid and average them."""
    k = spec.k
    origins = patch_grid(lo.shape, spec, snap_end=True)
    sx, sy, sz = spec.low_size
    preds = []
    data = lo.data
    for s in range(0, len(origins), batch_size):
        chunk = origins[s:s + batch_size]
        batch = np.stack([data[o[0]:o[0] + sx, o[1]:o[1] + sy, o[2]:o[2] + sz] for o in chunk])[:, None]
        out = net.predict(store, batch, batch_size)
        preds.extend(((o[0], o[1], k * o[2]), p[0]) for o, p in zip(chunk, out))
    return assemble(preds, (lo.nx, lo.ny, k * lo.nz), (lo.sx, lo.sy, lo.sz / k))
