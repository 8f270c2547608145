"""One hierarchy level as an associative memory.

A level stores a square matrix ``theta`` mapping keys to values. The plain
readout is ``theta @ k``; the self-modifying readout adds a bounded,
data-dependent correction ``tanh(psi_w . [k, v, c] + psi_b) * v`` produced by
a small meta-network. All functions here return new objects and never write
into the arrays they receive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .numerics import (
    DNHError,
    InvalidParameterError,
    ShapeError,
    as_matrix,
    as_vector,
)


class StepSizeError(DNHError, ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class MetaNet:
    psi_w: np.ndarray
    psi_b: np.ndarray
    prev_psi: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def zeros(cls, d: int) -> "MetaNet":
        return cls(np.zeros(3 * d), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.psi_b.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.psi_w, self.psi_b])

    def with_flat(self, flat: np.ndarray, prev=None) -> "MetaNet":
        d = self.dim
        return MetaNet(flat[: 3 * d].copy(), flat[3 * d :].copy(), prev)


@dataclass(frozen=True)
class GateParams:
    w: float = 1.0
    b: float = -2.0


@dataclass(frozen=True, eq=False)
class MemoryModule:
    id: int
    level: int
    theta: np.ndarray
    freq: float
    phase: float = 0.0
    context: np.ndarray | None = None
    last_lss: float = 0.0
    opt: Any = None  # optimizer state, created lazily by the trainer
    meta_net: MetaNet | None = None

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    @property
    def momentum(self) -> np.ndarray:
        m = getattr(self.opt, "m", None)
        return np.zeros_like(self.theta) if m is None else m

    @classmethod
    def create(cls, id: int, level: int, theta, freq: float) -> "MemoryModule":
        theta = as_matrix(theta).copy()
        if theta.shape[0] != theta.shape[1]:
            raise ShapeError("level parameters must be square")
        return cls(id=id, level=level, theta=theta, freq=float(freq),
                   context=np.zeros(theta.shape[0]))


def _check_dim(m: MemoryModule, *vecs) -> list[np.ndarray]:
    return [as_vector(v, m.dim) for v in vecs]


def query(m: MemoryModule, k) -> np.ndarray:
    (k,) = _check_dim(m, k)
    return m.theta @ k


def meta_modification(net: MetaNet, k, v, c) -> np.ndarray:
    """The d-vector correction produced by the meta-network."""
    z = np.concatenate([k, v, c])
    return np.tanh(float(net.psi_w @ z) + net.psi_b)


def smm_forward(m: MemoryModule, net: MetaNet, k, v, c) -> np.ndarray:
    k, v, c = _check_dim(m, k, v, c)
    if net.dim != m.dim:
        raise ShapeError("meta-network dimension does not match the module")
    return m.theta @ k + meta_modification(net, k, v, c) * v


def meta_net_objective(net: MetaNet, k, v, c, theta, beta_reg: float,
                       prev: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    r = theta @ k + meta_modification(net, k, v, c) * v - v
    if prev is None:
        prev = (net.psi_w, net.psi_b) if net.prev_psi is None else net.prev_psi
    reg = np.sum((net.psi_w - prev[0]) ** 2) + np.sum((net.psi_b - prev[1]) ** 2)
    return float(r @ r + beta_reg * reg)


def meta_net_data_grad(net: MetaNet, k, v, c, theta) -> np.ndarray:
    """Gradient of ``||M(k) - v||^2`` with respect to ``[psi_w, psi_b]``."""
    z = np.concatenate([k, v, c])
    t = np.tanh(float(net.psi_w @ z) + net.psi_b)
    r = theta @ k + t * v - v
    da = 2.0 * r * v * (1.0 - t * t)
    return np.concatenate([da.sum() * z, da])


def meta_net_fit(net: MetaNet, k, v, c, theta, beta_reg: float = 1.0,
                 eta: float = 0.05, steps: int = 50) -> MetaNet:
    """Fit the meta-network on one (k, v, c) triple.

    Each step is a gradient step on the data term followed by the exact
    proximal map of ``beta_reg * ||psi - psi_prev||^2``, which stays stable
    for arbitrarily large ``beta_reg``.
    """
    if beta_reg < 0 or eta <= 0 or steps < 1:
        raise InvalidParameterError("need beta_reg >= 0, eta > 0, steps >= 1")
    d = net.dim
    k, v, c = (as_vector(a, d) for a in (k, v, c))
    theta = as_matrix(theta, (d, d))
    prev = (net.psi_w.copy(), net.psi_b.copy())
    anchor = np.concatenate(prev)
    psi = anchor.copy()
    cur = net.with_flat(psi, prev)
    start = meta_net_objective(cur, k, v, c, theta, beta_reg, prev)
    shrink = 1.0 + 2.0 * eta * beta_reg
    for _ in range(steps):
        g = meta_net_data_grad(cur, k, v, c, theta)
        psi = (psi - eta * g + 2.0 * eta * beta_reg * anchor) / shrink
        cur = net.with_flat(psi, prev)
        obj = meta_net_objective(cur, k, v, c, theta, beta_reg, prev)
        if not math.isfinite(obj) or obj > 10.0 * max(start, 1e-12):
            raise StepSizeError(f"meta-net fit diverged (objective {obj:.3g})")
    return cur


def delta_rule_update(m: MemoryModule, k, v, alpha: float, meta_grad) -> MemoryModule:
    k, v = _check_dim(m, k, v)
    meta_grad = as_matrix(meta_grad, m.theta.shape)
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameterError("gate alpha must lie in [0, 1]")
    return replace(m, theta=m.theta + np.outer(v, k) + alpha * meta_grad)


def gate_alpha(g: GateParams, lss: float) -> float:
    if lss < 0:
        raise InvalidParameterError("surprise must be nonnegative")
    z = g.w * lss + g.b
    # split on sign to avoid overflow in exp
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def local_surprise(m: MemoryModule, q, target) -> tuple[float, MemoryModule]:
    """Norm of the level-loss gradient at the level output.

    Returns the surprise and the module with ``last_lss`` updated.
    """
    q, target = _check_dim(m, q, target)
    lss = float(np.linalg.norm(m.theta @ q - target))
    return lss, replace(m, last_lss=lss)


def level_loss(theta: np.ndarray, inp: np.ndarray, target: np.ndarray) -> float:
    r = theta @ inp - target
    return 0.5 * float(r @ r)


def level_loss_grad(m: MemoryModule, inp, target) -> np.ndarray:
    inp, target = _check_dim(m, inp, target)
    return np.outer(m.theta @ inp - target, inp)
