"""Dense 5-D tensors with tape-based reverse-mode differentiation.

Layout is ``(n, c, x, y, z)`` in numpy C order. Every op computes in the
dtype of its inputs, so float64 tensors give gradient-check fidelity and
float32 tensors give training speed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError

_GRAD_ENABLED = True

# elements per im2col chunk; bounds peak memory of a convolution
COL_BUDGET = 1 << 23


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference, finite differences)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients to every tensor on the tape that requires them."""
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior activations are not needed once propagated
                node.grad = None if node is not self else node.grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# --- elementwise and reductions ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(2 * x.data * g)

    return _result(x.data * x.data, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x._accumulate(np.full_like(x.data, g / n))

    return _result(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over batch and voxels of the squared error."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size

    def backward(g):
        pred._accumulate((2.0 * g / n) * diff)

    val = np.asarray(np.mean(diff.astype(np.float64) ** 2), dtype=pred.dtype)
    return _result(val, (pred,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _result(out, tuple(xs), backward)


# --- convolution -----------------------------------------------------------------


def _check5(x: Tensor, what: str):
    if x.data.ndim != 5:
        raise ShapeError(f"{what} expects a 5-D (n, c, x, y, z) tensor, got {x.shape}")


def _flat_shifts(kshape, padded):
    """Flat-index offset of every kernel tap inside the padded volume."""
    _, yp, zp = padded
    kx, ky, kz = kshape
    return [a * yp * zp + b * zp + c for a in range(kx) for b in range(ky) for c in range(kz)]


def _im2col(xf: np.ndarray, shifts, q: int) -> np.ndarray:
    """Patch matrix ``(n, C*K, q)`` from a flattened padded input ``(n, C, P)``.

    Column ``j`` is anchored at flat position ``j`` of the padded grid, so
    every tap is one contiguous slice; anchors outside the valid output
    region are computed and later discarded.
    """
    n, C, _ = xf.shape
    col = np.empty((n, C, len(shifts), q), dtype=xf.dtype)
    for t, s in enumerate(shifts):
        col[:, :, t] = xf[:, :, s:s + q]
    return col.reshape(n, C * len(shifts), q)


def _col2im_add(dxf: np.ndarray, dcol: np.ndarray, shifts, q: int) -> None:
    n, C, _ = dxf.shape
    dcol = dcol.reshape(n, C, len(shifts), q)
    for t, s in enumerate(shifts):
        dxf[:, :, s:s + q] += dcol[:, :, t]


def _chunks(n: int, per_item: int):
    step = max(1, COL_BUDGET // max(per_item, 1))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def _gemm(w2: np.ndarray, col: np.ndarray) -> np.ndarray:
    """``w2 @ col`` for a batch of column matrices; folds the batch into one GEMM when columns are few."""
    n, ck, q = col.shape
    if q >= 64 or n == 1:
        return np.matmul(w2, col)
    flat = col.transpose(1, 0, 2).reshape(ck, n * q)
    return (w2 @ flat).reshape(w2.shape[0], n, q).transpose(1, 0, 2)


def _gemm_wgrad(g: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Sum over the batch of ``g[i] @ col[i].T``."""
    n, f, q = g.shape
    ck = col.shape[1]
    if q >= 64 or n == 1:
        return np.matmul(g, col.transpose(0, 2, 1)).sum(axis=0)
    return g.transpose(1, 0, 2).reshape(f, n * q) @ col.transpose(1, 0, 2).reshape(ck, n * q).T


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Unit-stride 3-D cross-correlation with "same" zero padding.

    ``w`` has shape ``(F, C, kx, ky, kz)`` with odd kernel extents.
    """
    _check5(x, "conv3d")
    F, C = w.shape[:2]
    kshape = tuple(w.shape[2:])
    if x.shape[1] != C:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {C}")
    if any(k % 2 == 0 for k in kshape):
        raise ShapeError(f"conv3d: 'same' padding needs odd kernel extents, got {kshape}")
    n = x.shape[0]
    X, Y, Z = x.shape[2:]
    K = int(np.prod(kshape))
    w2 = w.data.reshape(F, C * K)
    pointwise = K == 1
    if pointwise:
        padded = (X, Y, Z)
        xf = x.data.reshape(n, C, -1)
        shifts = [0]
    else:
        pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kshape]
        xp = np.pad(x.data, pads)
        padded = xp.shape[2:]
        xf = xp.reshape(n, C, -1)
        shifts = _flat_shifts(kshape, padded)
    P = xf.shape[2]
    q = P - shifts[-1]
    valid = (slice(None), slice(None), slice(0, X), slice(0, Y), slice(0, Z))

    def full_to_valid(a):
        return np.pad(a, [(0, 0), (0, 0), (0, P - q)]).reshape((a.shape[0], F) + tuple(padded))[valid]

    out = np.empty((n, F, X, Y, Z), dtype=np.result_type(x.data, w.data))
    for sl in _chunks(n, C * K * q):
        col = xf[sl] if pointwise else _im2col(xf[sl], shifts, q)
        res = _gemm(w2, col)
        out[sl] = res.reshape(out[sl].shape) if pointwise else full_to_valid(res)
    if b is not None:
        out += b.data.reshape(1, F, 1, 1, 1)

    def backward(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if pointwise:
            gf = g.reshape(n, F, -1)
        else:
            gf = np.zeros((n, F) + tuple(padded), dtype=g.dtype)
            gf[valid] = g
            gf = gf.reshape(n, F, -1)[:, :, :q]
        dw = np.zeros_like(w2) if w.requires_grad else None
        dxf = np.zeros_like(xf) if x.requires_grad else None
        for sl in _chunks(n, C * K * q):
            gs = gf[sl]
            if dw is not None:
                col = xf[sl] if pointwise else _im2col(xf[sl], shifts, q)
                dw += _gemm_wgrad(gs, col)
            if dxf is not None:
                dcol = _gemm(np.ascontiguousarray(w2.T), gs)
                if pointwise:
                    dxf[sl] += dcol
                else:
                    _col2im_add(dxf[sl], dcol, shifts, q)
        if dw is not None:
            w._accumulate(dw.reshape(w.shape))
        if dxf is not None:
            if pointwise:
                x._accumulate(dxf.reshape(x.shape))
            else:
                crop = (slice(None), slice(None)) + tuple(slice(k // 2, k // 2 + s) for k, s in zip(kshape, (X, Y, Z)))
                x._accumulate(dxf.reshape((n, C) + tuple(padded))[crop])

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def deconv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=(2, 2, 2)) -> Tensor:
    """Transpose convolution with kernel equal to stride (non-overlapping).

    ``w`` has shape ``(C_in, F_out, sx, sy, sz)``; each spatial axis grows
    by its stride.
    """
    _check5(x, "deconv3d")
    C, F = w.shape[:2]
    stride = tuple(int(s) for s in stride)
    if tuple(w.shape[2:]) != stride:
        raise ShapeError(f"deconv3d: kernel {tuple(w.shape[2:])} must equal stride {stride}")
    if x.shape[1] != C:
        raise ShapeError(f"deconv3d: input has {x.shape[1]} channels, kernel expects {C}")
    n = x.shape[0]
    X, Y, Z = x.shape[2:]
    sx, sy, sz = stride
    S = sx * sy * sz
    V = X * Y * Z
    w2 = w.data.reshape(C, F * S)
    x3 = x.data.reshape(n, C, V)
    cols = np.matmul(w2.T, x3)  # (n, F*S, V)
    out = (
        cols.reshape(n, F, sx, sy, sz, X, Y, Z)
        .transpose(0, 1, 5, 2, 6, 3, 7, 4)
        .reshape(n, F, X * sx, Y * sy, Z * sz)
    )
    if b is not None:
        out = out + b.data.reshape(1, F, 1, 1, 1)

    def backward(g):
        gc = (
            g.reshape(n, F, X, sx, Y, sy, Z, sz)
            .transpose(0, 1, 3, 5, 7, 2, 4, 6)
            .reshape(n, F * S, V)
        )
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            w._accumulate(np.matmul(x3, gc.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if x.requires_grad:
            x._accumulate(np.matmul(w2, gc).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward)


def maxpool3d(x: Tensor, window=(2, 2, 2)) -> Tensor:
    """Non-overlapping max pooling (stride = window). Ties route to the first maximum."""
    _check5(x, "maxpool3d")
    wx, wy, wz = (int(s) for s in window)
    n, C, X, Y, Z = x.shape
    if X % wx or Y % wy or Z % wz:
        raise ShapeError(f"maxpool3d: spatial dims {(X, Y, Z)} not divisible by window {(wx, wy, wz)}")
    X2, Y2, Z2 = X // wx, Y // wy, Z // wz
    blocks = (
        x.data.reshape(n, C, X2, wx, Y2, wy, Z2, wz)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, C, X2, Y2, Z2, wx * wy * wz)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = (
            gb.reshape(n, C, X2, Y2, Z2, wx, wy, wz)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.shape)
        )
        x._accumulate(gx)

    return _result(out, (x,), backward)


# --- batch normalisation ---------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalisation.

    Training mode normalises with biased batch statistics and, when
    ``update_stats`` is set, folds them into the running buffers in place
    (``running = momentum * running + (1 - momentum) * batch``).
    """
    _check5(x, "batchnorm")
    C = x.shape[1]
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    m = x.data.size // C
    if training:
        if m < 2:
            raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = ((x.data - mu.reshape(bshape).astype(x.dtype)) ** 2).mean(axis=axes, dtype=np.float64)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if training:
                s1 = gx.sum(axis=axes, keepdims=True)
                s2 = (gx * xhat).sum(axis=axes, keepdims=True)
                gx = (inv_std / m) * (m * gx - s1 - xhat * s2)
            else:
                gx = gx * inv_std
            x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward)


def parameters_of(tensors: Iterable[Tensor]) -> List[Tensor]:
    return [t for t in tensors if t.requires_grad]
