"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autograd import Tape, Tensor, backward


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    """Per-parameter relative errors ``|a - n| / max(|a|, |n|)`` (vector norms).

    ``zero_grad`` lists parameters whose analytic gradient is identically zero
    because they never appeared on the tape.
    """

    relative_errors: dict[str, float]
    max_abs_errors: dict[str, float]
    tolerance: float
    zero_grad: list[str] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max(self.relative_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.relative_errors.items() if not v < self.tolerance}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps gradients that are zero by symmetry (where central
    differences return pure rounding noise) from reading as total mismatch.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    if denom == 0.0:
        return 0.0
    return diff / denom


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``.

    ``param.data`` is perturbed in place and restored, so ``f`` must read the
    parameter through the same object.
    """
    flat = param.data.reshape(-1)
    out = np.empty(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    constant_params: Mapping[str, Tensor] | None = None,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``constant_params`` are parameters that ``f`` reads but must not
    differentiate (stop-gradient by contract); they are reported in
    ``zero_grad`` after checking that backward left them untouched.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")

    def value() -> float:
        return float(f().data)

    first, second = value(), value()
    if first != second:
        raise NonDeterministicError(f"f is not deterministic: {first!r} != {second!r}")

    for p in params.values():
        p.grad = None
    constant_params = dict(constant_params or {})
    for p in constant_params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)

    rel, absd = {}, {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(value, p, h)
        rel[name] = relative_error(analytic, numeric, floor)
        absd[name] = float(np.max(np.abs(analytic - numeric))) if p.size else 0.0
    zero = []
    for name, p in constant_params.items():
        if p.grad is not None and np.any(p.grad != 0):
            rel[name] = float("inf")
        else:
            zero.append(name)
    return GradCheckReport(rel, absd, tolerance, zero)


def joint_loss_check(seed: int = 0, num_layers: int = 2, hidden_size: int = 16, vocab_size: int = 32,
                     queue_capacity: int = 8, batch_size: int = 1, h: float = 1e-5,
                     tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the summed MMLM + TLM + XLCO loss on a toy model.

    Every query-encoder tensor is checked; key-encoder tensors are passed as
    constants and must come back without gradient.
    """
    from .corpus import NUM_SPECIAL, make_mmlm_instance, make_tlm_instance, make_xlco_instance
    from .encoder import EncoderConfig, EncoderParams
    from .momentum import EncoderPair, NegativeQueue, prefill
    from .objectives import joint_loss

    rng = np.random.default_rng(seed)
    config = EncoderConfig(num_layers=num_layers, hidden_size=hidden_size, ffn_size=2 * hidden_size,
                           num_heads=2, vocab_size=vocab_size, max_positions=12,
                           projection_dim=hidden_size)
    # a wider init than training uses, so every nonlinearity is exercised
    query = EncoderParams.init(config, rng, init_range=0.3)
    pair = EncoderPair.create(query, momentum=0.5)
    for t in pair.key.values():
        t.data = t.data + rng.normal(0.0, 0.05, t.shape)

    def sent():
        return tuple(int(x) for x in rng.integers(NUM_SPECIAL, vocab_size, rng.integers(2, 4)))

    def para():
        return sent(), sent()

    mm = [make_mmlm_instance(sent(), rng, 0.3, vocab_size, config.max_positions) for _ in range(batch_size)]
    tl = [make_tlm_instance(para(), rng, 0.3, vocab_size, config.max_positions) for _ in range(batch_size)]
    xl = [make_xlco_instance(para(), para(), rng, config.max_positions, "a", "b") for _ in range(batch_size)]
    queue = NegativeQueue(queue_capacity, config.projection_dim)
    key_seqs = [make_xlco_instance(para(), None, rng, config.max_positions, mixup=False).key_ids
                for _ in range(queue_capacity)]
    prefill(queue, pair.key, key_seqs, config.universal_layer)

    def f():
        return joint_loss(mm, tl, xl, pair.query, pair.key, queue, config.universal_layer).total

    return finite_difference_check(f, dict(pair.query.items()), h=h, tolerance=tolerance,
                                   constant_params={"key/" + k: v for k, v in pair.key.items()})
