from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import NonFiniteError, Tensor


@dataclass
class AdamWState:
    """Step count and first/second moments keyed by parameter identity."""

    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def global_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grads(grads: list[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale grads so their global L2 norm is at most ``clip_norm``."""
    norm = global_grad_norm(grads)
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        grads = [g * g.dtype.type(factor) for g in grads]
    return grads, norm


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    clip_norm: float = 1.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> float:
    """One in-place AdamW update; returns the pre-clip global grad norm.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the Adam step.
    Refuses (raises NonFiniteError) without touching anything if a grad is
    not finite.
    """
    for p, g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adamw: non-finite gradient for {p.name or p!r}")
    grads, norm = clip_grads(grads, clip_norm)
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return norm
