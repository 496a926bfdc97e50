"""Dense numerics substrate: seeded random streams and AdamW.

Everything is 64-bit: higher-order derivative chains amplify rounding
error too much for float32.  All randomness flows from explicit seeds
through a counter-based generator (Philox), so independent streams can
be drawn for any (seed, tags) pair regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DivergenceError

__all__ = [
    "stream",
    "seeded_uniform",
    "OptimizerState",
    "adamw_step",
    "check_finite",
]

_ENTROPY_MASK = (1 << 63) - 1


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic generator for (seed, tags).

    Distinct tag tuples give independent streams, so per-step or
    per-item generators may be created in any order and still
    reproduce bit-identically.
    """
    ss = np.random.SeedSequence(
        entropy=int(seed) & _ENTROPY_MASK,
        spawn_key=tuple(int(t) & _ENTROPY_MASK for t in tags),
    )
    return np.random.Generator(np.random.Philox(ss))


def seeded_uniform(seed: int, low: float, high: float, n: int) -> np.ndarray:
    """n doubles uniform in [low, high), deterministic for a fixed seed."""
    if not low < high:
        raise ContractViolation(f"uniform bounds must satisfy low < high, got [{low}, {high})")
    return stream(seed).uniform(low, high, size=int(n))


def check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite values in {name}")


@dataclass
class OptimizerState:
    """AdamW state: moment buffers shaped like the parameter set.

    lr follows the training recipe used throughout (1e-4); the decay
    coefficient is a config default, not a reported value.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update.

    Returns a fresh parameter dict; ``state`` is mutated in place
    (single-owner contract).  Gradients must be finite and shaped like
    the parameters.
    """
    if set(params) != set(grads):
        raise ContractViolation(
            f"parameter/gradient key mismatch: {sorted(set(params) ^ set(grads))}"
        )
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ContractViolation(
                f"shape mismatch for '{k}': param {params[k].shape} vs grad {grads[k].shape}"
            )
        if not np.all(np.isfinite(grads[k])):
            raise DivergenceError(f"non-finite gradient for parameter '{k}'")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    out: dict[str, np.ndarray] = {}
    for k in params:
        p, g = params[k], grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        out[k] = p - state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)
    return out
