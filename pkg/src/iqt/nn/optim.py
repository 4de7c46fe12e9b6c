"""Adam with inverse-time decay, and Glorot-normal initialisation."""

from __future__ import annotations

import math
from typing import Dict, Sequence

import numpy as np

from ..errors import ConfigError


def learning_rate(t: int, lr0: float = 1e-3, decay: float = 1e-6) -> float:
    """Inverse-time schedule ``lr0 / (1 + decay * t)``."""
    return lr0 / (1.0 + decay * t)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    t: int,
    m: Dict[str, np.ndarray],
    v: Dict[str, np.ndarray],
    lr0: float = 1e-3,
    decay: float = 1e-6,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-7,
) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``.

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient (their moments still decay).
    """
    if t < 1:
        raise ConfigError(f"Adam step counter starts at 1, got {t}")
    lr = learning_rate(t, lr0, decay)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        mm, vv = m[name], v[name]
        mm *= beta1
        vv *= beta2
        if g is not None:
            mm += (1.0 - beta1) * g
            vv += (1.0 - beta2) * (g * g)
        p -= (lr * (mm / c1) / (np.sqrt(vv / c2) + eps)).astype(p.dtype, copy=False)
    return params


def glorot_fans(shape: Sequence[int]):
    """(fan_in, fan_out) for dense ``(out, in)`` or conv ``(out, in, *kernel)`` shapes."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ConfigError(f"cannot derive fans from shape {shape}")
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def glorot_normal_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """I.i.d. normal with std ``sqrt(2 / (fan_in + fan_out))``."""
    fan_in, fan_out = glorot_fans(shape)
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.standard_normal(tuple(shape))
