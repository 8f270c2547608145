"""Per-level optimizers: proximal momentum and Evolvable Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngState, ShapeError, fast_replace, normal_sample

BETA_MAX = 1.0 - 1e-6


def _match(a: np.ndarray, grad) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != a.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match state {a.shape}")
    return g


@dataclass(frozen=True, eq=False)
class MomentumState:
    m: np.ndarray
    eta: float = 0.05
    decay: float = 0.0

    @classmethod
    def zeros(cls, shape, eta: float = 0.05, decay: float = 0.0) -> "MomentumState":
        return cls(np.zeros(shape), eta, decay)


def proximal_momentum_step(s: MomentumState, grad) -> MomentumState:
    """Closed-form minimizer of ``-<m, grad> + ||m - m_t||^2 / (2 eta)``."""
    g = _match(s.m, grad)
    return fast_replace(s, m=s.m + s.eta * g)


def momentum_descent(s: MomentumState, grad) -> tuple[MomentumState, np.ndarray]:
    """Heavy-ball step built on the proximal update.

    The buffer is decayed, then accumulates the gradient; the parameter
    update is the negated buffer.
    """
    g = _match(s.m, grad)
    s = proximal_momentum_step(fast_replace(s, m=s.decay * s.m), g)
    return s, -s.m


@dataclass(frozen=True, eq=False)
class EAdamState:
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    sigma2: float = 0.0
    eta_beta: float = 0.0
    step_count: int = 0
    lr: float = 1e-2
    eps: float = 1e-8
    bias_correction: bool = True

    @classmethod
    def zeros(cls, shape, **kw) -> "EAdamState":
        return cls(np.zeros(shape), np.zeros(shape), **kw)


def eadam_step(s: EAdamState, grad) -> tuple[EAdamState, np.ndarray]:
    g = _match(s.m, grad)
    t = s.step_count + 1
    m = s.beta1 * s.m + (1.0 - s.beta1) * g
    v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
    if s.bias_correction:
        m_hat = m / (1.0 - s.beta1**t)
        v_hat = v / (1.0 - s.beta2**t)
    else:
        m_hat, v_hat = m, v
    update = -s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return fast_replace(s, m=m, v=v, step_count=t), update


def eadam_evolve(s: EAdamState, lss: float, beta_fd_grads: tuple[float, float],
                 gamma: float, rng: RngState) -> EAdamState:
    """Drift the moment coefficients and decay the exploration variance.

    The betas move against their estimated meta-gradients plus Gaussian
    exploration noise; the noise variance shrinks by ``exp(-gamma * lss)``.
    """
    if lss < 0:
        raise ValueError("surprise must be nonnegative")
    z1 = normal_sample(rng, 0.0, s.sigma2)
    z2 = normal_sample(rng, 0.0, s.sigma2)
    b1 = min(max(s.beta1 - s.eta_beta * beta_fd_grads[0] + z1, 0.0), BETA_MAX)
    b2 = min(max(s.beta2 - s.eta_beta * beta_fd_grads[1] + z2, 0.0), BETA_MAX)
    return replace(s, beta1=b1, beta2=b2, sigma2=s.sigma2 * math.exp(-gamma * lss))
