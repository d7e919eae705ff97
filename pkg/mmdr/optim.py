"""Adam with bias correction and the stepwise linear learning-rate decay."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from mmdr.autodiff import Tensor
from mmdr.errors import DimensionError, NumericalError


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name; ``step`` counts updates taken."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> AdamState:
        return cls(
            step=0,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one Adam update in place to ``params`` and advance ``state``.

    Parameters whose gradient is ``None`` are left untouched, moments included.
    A non-finite gradient aborts before any parameter changes.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient for parameter {name!r}",
                {
                    "parameter": name,
                    "step": state.step,
                    "nan_count": int(np.isnan(g).sum()),
                    "inf_count": int(np.isinf(g).sum()),
                },
            )

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def step_params(params: Mapping[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """Adam step reading each parameter's accumulated ``.grad``."""
    return adam_step(params, {name: p.grad for name, p in params.items()}, state, lr)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant linear decay of the initial rate.

    Every ``decay_interval`` steps the rate drops by ``decay_fraction`` of
    ``base_lr``; it never goes below zero.
    """

    base_lr: float
    decay_fraction: float = 0.001
    decay_interval: int = 1000

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.decay_fraction < 0:
            raise ValueError(f"decay_fraction must be non-negative, got {self.decay_fraction}")
        if self.decay_interval < 1:
            raise ValueError(f"decay_interval must be a positive step count, got {self.decay_interval}")


def lr_at_step(sched: LrSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"step index must be non-negative, got {t}")
    factor = 1.0 - sched.decay_fraction * (t // sched.decay_interval)
    return sched.base_lr * max(0.0, factor)
