"""Adam with decoupled weight decay, global-norm clipping and a linear schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams


class NonFiniteGradientError(FloatingPointError):
    pass


def lr_schedule(t: int, warmup: int, peak: float, total: int) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if not 0 <= t <= total:
        raise ValueError(f"lr_schedule: step {t} outside [0, {total}]")
    if t < warmup:
        return peak * t / warmup
    if total == warmup:
        return peak
    return peak * (total - t) / (total - warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        items = params.items() if hasattr(params, "items") else params
        m, v = {}, {}
        for name, p in items:
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        return cls(m, v, 0)


def clip_by_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def adam_step(params, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-6, weight_decay: float = 0.0,
              clip_norm: float = 0.0) -> float:
    """One in-place update of ``params``; returns the pre-clip gradient norm.

    Weight decay is decoupled and skips 1-D tensors (biases, layer-norm gains).
    """
    items = dict(params.items() if hasattr(params, "items") else params)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradients at step {state.step + 1} in: {', '.join(bad)}")
    grads, norm = clip_by_global_norm(grads, clip_norm)
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in items.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if weight_decay and data.ndim > 1:
            data = data - lr * weight_decay * data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


def collect_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
