"""The evolution operator: shift estimation, meta-loss, structural triggers
and frequency modulation."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import hierarchy as hz
from .hierarchy import CapacityError, Hierarchy, InvalidOperationError, StructuralEvent
from .memory import GateParams, gate_alpha
from .numerics import InvalidParameterError, RngState, diag_gaussian_kl, fast_replace
from .optim import EAdamState, eadam_evolve

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class MetaParams:
    tau: float = 0.02
    epsilon: float = 0.02
    gamma: float = 0.1
    eta_f: float = 0.01
    beta_momentum: float = 0.9
    lam: float = 0.01
    mu: float = 0.1
    delta_threshold: float = 0.05
    f_min: float = 0.05
    f_max: float = 1.0
    rollout_k: int = 20
    fd_h: float = 0.05
    fd_every: int = 100
    second_order: bool = False
    hess_floor: float = 1e-2
    cooldown: int = 1000
    window: int = 1000
    alpha_hebb: float = 0.02
    eta_prox: float = 0.1
    eta_phi: float = 1e-4
    gate_w: float = 1.0
    gate_b: float = 0.0
    min_levels: int = 2

    def validate(self) -> None:
        from .numerics import ConfigError

        checks = [
            (self.epsilon >= 0, "epsilon >= 0"),
            (self.gamma >= 0, "gamma >= 0"),
            (self.eta_f >= 0, "eta_f >= 0"),
            (0 <= self.beta_momentum < 1, "beta_momentum in [0, 1)"),
            (self.lam >= 0 and self.mu >= 0, "lam, mu >= 0"),
            (self.delta_threshold > 0, "delta_threshold > 0"),
            (0 < self.f_min <= self.f_max, "0 < f_min <= f_max"),
            (self.rollout_k >= 1, "rollout_k >= 1"),
            (self.fd_h > 0, "fd_h > 0"),
            (self.fd_every >= 1, "fd_every >= 1"),
            (self.hess_floor > 0, "hess_floor > 0"),
            (self.cooldown >= 0, "cooldown >= 0"),
            (self.window >= 2, "window >= 2"),
            (self.eta_prox > 0, "eta_prox > 0"),
            (self.eta_phi >= 0, "eta_phi >= 0"),
            (self.min_levels >= 1, "min_levels >= 1"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ConfigError("invalid meta parameters: " + ", ".join(bad))

    def disable_adaptation(self) -> "MetaParams":
        """Parameters under which the evolution operator changes nothing."""
        return replace(self, tau=math.inf, delta_threshold=math.inf, epsilon=0.0,
                       gamma=0.0, eta_f=0.0, eta_phi=0.0)

    @property
    def gate(self) -> GateParams:
        return GateParams(self.gate_w, self.gate_b)


# ---------------------------------------------------------------------------
# shift estimation


class ShiftEstimator:
    """Two adjacent FIFO windows; KL between moment-matched diagonal Gaussians.

    Each new observation enters ``window_new``; when that window overflows its
    oldest entry migrates to ``window_old``. Window moments are tracked with
    running sums that are recomputed exactly every ``W`` observations.
    """

    def __init__(self, window: int, var_floor: float = VAR_FLOOR):
        if window < 1:
            raise InvalidParameterError("window must be positive")
        self.W = window
        self.var_floor = var_floor
        self.window_new: deque = deque()
        self.window_old: deque = deque()
        self._sums = None  # [new_sum, new_sq, old_sum, old_sq]
        self._count = 0

    def copy(self) -> "ShiftEstimator":
        other = ShiftEstimator(self.W, self.var_floor)
        other.window_new = deque(self.window_new)
        other.window_old = deque(self.window_old)
        other._sums = None if self._sums is None else [a.copy() for a in self._sums]
        other._count = self._count
        return other

    @property
    def full(self) -> bool:
        return len(self.window_new) == self.W and len(self.window_old) == self.W

    def _recompute(self) -> None:
        new, old = np.array(self.window_new), np.array(self.window_old)
        self._sums = [new.sum(0), (new * new).sum(0), old.sum(0), (old * old).sum(0)]

    def observe(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if self._sums is None:
            z = np.zeros_like(x)
            self._sums = [z, z.copy(), z.copy(), z.copy()]
        s = self._sums
        self.window_new.append(x)
        s[0] = s[0] + x
        s[1] = s[1] + x * x
        if len(self.window_new) > self.W:
            y = self.window_new.popleft()
            self.window_old.append(y)
            s[0], s[1] = s[0] - y, s[1] - y * y
            s[2], s[3] = s[2] + y, s[3] + y * y
            if len(self.window_old) > self.W:
                z = self.window_old.popleft()
                s[2], s[3] = s[2] - z, s[3] - z * z
        self._count += 1
        if self._count % self.W == 0:
            self._recompute()
        if not self.full:
            return 0.0
        mu1, mu2 = s[0] / self.W, s[2] / self.W
        v1 = np.maximum(s[1] / self.W - mu1 * mu1, self.var_floor)
        v2 = np.maximum(s[3] / self.W - mu2 * mu2, self.var_floor)
        return diag_gaussian_kl(mu1, v1, mu2, v2)


def observe_shift(est: ShiftEstimator, x) -> float:
    return est.observe(x)


# ---------------------------------------------------------------------------
# meta-loss


def meta_loss(task_loss: float, struct_delta: int, shift: float, p: MetaParams) -> float:
    return task_loss + p.lam * struct_delta + p.mu * shift


def structural_delta(events: Sequence[StructuralEvent]) -> int:
    """Vertex plus edge changes implied by ``events``.

    An addition adds one vertex and one edge. Pruning an interior level
    removes one vertex and two edges and adds the bridging edge; pruning the
    innermost level removes one vertex and one edge.
    """
    n = 0
    for ev in events:
        if ev.kind == "add":
            n += 2
        elif ev.kind == "prune":
            n += 4 if ev.interior else 2
    return n


# ---------------------------------------------------------------------------
# frequency gradients

Rollout = Callable[..., float]


@dataclass(frozen=True)
class FDResult:
    grad: float
    hess: float
    one_sided: bool = False


def _with_freq(h: Hierarchy, level: int, f: float) -> Hierarchy:
    return h.with_module(level, replace(h.module(level), freq=f))


def fd_frequency_gradient(h: Hierarchy, level: int, upcoming: Sequence, p: MetaParams,
                          rollout: Rollout, center: float | None = None) -> FDResult:
    """Finite-difference derivative of the rollout meta-loss in ``f_level``.

    ``rollout(h, samples)`` trains a copy of ``h`` on ``samples`` without
    structural changes and returns the mean meta-loss. Perturbations that
    would leave ``[f_min, f_max]`` fall back to a one-sided difference.
    """
    samples = list(upcoming)[: p.rollout_k]
    if not samples:
        raise InvalidParameterError("empty rollout")
    f = h.module(level).freq
    step = p.fd_h
    up, down = f + step, f - step
    hi_ok, lo_ok = up <= h.f_max, down >= h.f_min
    if center is None:
        center = rollout(h, samples)
    if hi_ok and lo_ok:
        lp = rollout(_with_freq(h, level, up), samples)
        lm = rollout(_with_freq(h, level, down), samples)
        return FDResult((lp - lm) / (2 * step), (lp - 2 * center + lm) / step**2)
    if lo_ok:
        lm = rollout(_with_freq(h, level, down), samples)
        lmm = rollout(_with_freq(h, level, down - step), samples) if down - step >= h.f_min else None
        hess = (center - 2 * lm + lmm) / step**2 if lmm is not None else 0.0
        return FDResult((center - lm) / step, hess, one_sided=True)
    if hi_ok:
        lp = rollout(_with_freq(h, level, up), samples)
        lpp = rollout(_with_freq(h, level, up + step), samples) if up + step <= h.f_max else None
        hess = (lpp - 2 * lp + center) / step**2 if lpp is not None else 0.0
        return FDResult((lp - center) / step, hess, one_sided=True)
    return FDResult(0.0, 0.0, one_sided=True)


def modulate_frequency_first_order(f: float, lss: float, fd_grad: float, mom: float,
                                   p: MetaParams) -> tuple[float, float]:
    """Momentum step against the meta-loss gradient plus a surprise push."""
    g = -fd_grad
    m = p.beta_momentum * mom + (1.0 - p.beta_momentum) * g
    f_new = f + p.eta_f * g + m + p.gamma * lss
    return min(max(f_new, p.f_min), p.f_max), m


def modulate_frequency_second_order(f: float, fd_grad: float, fd_hess: float,
                                    p: MetaParams) -> float:
    curv = max(abs(fd_hess), p.hess_floor)
    return min(max(f - p.eta_f * fd_grad / curv, p.f_min), p.f_max)


def update_meta_params(phi: MetaParams, fd_grads: dict, eta_phi: float) -> MetaParams:
    """Gradient step on the learnable entries ``gamma``, ``gate_w``, ``gate_b``."""
    allowed = {"gamma", "gate_w", "gate_b"}
    unknown = set(fd_grads) - allowed
    if unknown:
        raise InvalidParameterError(f"not learnable: {sorted(unknown)}")
    new = {k: getattr(phi, k) - eta_phi * g for k, g in fd_grads.items()}
    if "gamma" in new:
        new["gamma"] = max(0.0, new["gamma"])
    return replace(phi, **new)


# ---------------------------------------------------------------------------
# the evolution operator


@dataclass
class MetaController:
    """Mutable state carried by the evolution operator between steps."""

    params: MetaParams
    estimator: ShiftEstimator
    rollout: Rollout | None = None
    rng: RngState | None = None
    freq_momentum: dict = field(default_factory=dict)  # module id -> momentum
    fd_cache: dict = field(default_factory=dict)  # module id -> FDResult
    last_event_step: int | None = None
    replay: deque = field(default_factory=deque)

    @classmethod
    def create(cls, params: MetaParams, rollout: Rollout | None = None,
               rng: RngState | None = None) -> "MetaController":
        return cls(params, ShiftEstimator(params.window), rollout, rng,
                   replay=deque(maxlen=params.rollout_k))

    def cooled_down(self, t: int) -> bool:
        return self.last_event_step is None or t - self.last_event_step >= self.params.cooldown


@dataclass(frozen=True)
class EvolveResult:
    hierarchy: Hierarchy
    meta_loss: float
    events: tuple[StructuralEvent, ...]
    shift: float
    fd_grad_sq: float


def evolve(h: Hierarchy, ctrl: MetaController, x, task_loss: float,
           grads_per_level: Sequence[np.ndarray], lss_per_level: Sequence[float],
           sample=None) -> EvolveResult:
    """One application of the evolution operator.

    Order: shift estimate, provisional meta-loss, growth trigger, otherwise
    at most one prune, frequency modulation, final meta-loss.
    """
    p = ctrl.params
    t = h.t
    if sample is not None:
        ctrl.replay.append(sample)
    shift = ctrl.estimator.observe(x)
    provisional = meta_loss(task_loss, 0, shift, p)
    h = fast_replace(h, events=())  # collect only this step's events
    grads = list(grads_per_level)
    lss = list(lss_per_level)
    pre_ids = [m.id for m in h.modules]

    triggered = provisional > p.tau or shift > p.delta_threshold
    if triggered and h.L < h.l_max and ctrl.cooled_down(t):
        try:
            if shift > p.delta_threshold:
                inner = h.modules[-1]
                h = hz.add_meta_level(h, -grads[-1], inner.theta, p.eta_prox)
            else:
                alpha = p.alpha_hebb * gate_alpha(p.gate, lss[-1])
                h = hz.add_level(h, alpha)
        except CapacityError:
            pass
    elif ctrl.cooled_down(t) and h.L > max(1, p.min_levels):
        cands = [(float(np.linalg.norm(grads[i])), i + 1) for i in range(1, h.L)]
        cands = [c for c in cands if c[0] < p.epsilon]
        if cands:
            norm, level = min(cands)
            try:
                h = hz.prune_level(h, level, norm)
            except InvalidOperationError:
                pass
    events = list(h.events)
    if events:
        ctrl.last_event_step = t

    # frequency modulation on the levels that existed before this step
    by_id = {mid: (g, s) for mid, g, s in zip(pre_ids, grads, lss)}
    fd_sq = 0.0
    refresh = (p.eta_f > 0 and ctrl.rollout is not None and t % p.fd_every == 0
               and len(ctrl.replay) >= p.rollout_k)
    if refresh:
        ctrl.fd_cache = {}
        samples = list(ctrl.replay)
        center = ctrl.rollout(h, samples)
        for lvl, m in enumerate(h.modules, start=1):
            if m.id in by_id:
                ctrl.fd_cache[m.id] = fd_frequency_gradient(h, lvl, samples, p, ctrl.rollout,
                                                            center)
    mods = []
    live = set()
    for m in h.modules:
        live.add(m.id)
        if m.id not in by_id:
            mods.append(m)
            continue
        fd = ctrl.fd_cache.get(m.id) if refresh else None
        g = fd.grad if fd is not None else 0.0
        fd_sq += g * g
        s = by_id[m.id][1]
        if p.second_order:
            f = modulate_frequency_second_order(m.freq, g, fd.hess if fd else 0.0, p)
            f = min(max(f + p.gamma * s, p.f_min), p.f_max)
        else:
            f, mom = modulate_frequency_first_order(
                m.freq, s, g, ctrl.freq_momentum.get(m.id, 0.0), p)
            ctrl.freq_momentum[m.id] = mom
        f = min(max(f, h.f_min), h.f_max)
        opt = m.opt
        if isinstance(opt, EAdamState) and ctrl.rng is not None and (opt.sigma2 > 0 or opt.eta_beta > 0):
            opt = eadam_evolve(opt, s, (0.0, 0.0), p.gamma, ctrl.rng)
        mods.append(fast_replace(m, freq=f, opt=opt))
    h = h.with_modules(mods)
    ctrl.freq_momentum = {k: v for k, v in ctrl.freq_momentum.items() if k in live}

    if refresh and p.eta_phi > 0 and p.gamma > 0:
        ctrl.params = update_meta_params(
            p, {"gamma": fd_gamma_gradient(h, ctrl.replay, p, ctrl.rollout)}, p.eta_phi)

    final = meta_loss(task_loss, structural_delta(events), shift, p)
    return EvolveResult(h, final, tuple(events), shift, fd_sq)


def fd_gamma_gradient(h: Hierarchy, samples, p: MetaParams, rollout: Rollout) -> float:
    """Central difference of the rollout meta-loss in the surprise scale."""
    step = min(p.fd_h * max(1.0, p.gamma), p.gamma) if p.gamma > 0 else p.fd_h
    samples = list(samples)[: p.rollout_k]
    lp = rollout(h, samples, gamma=p.gamma + step)
    lm = rollout(h, samples, gamma=max(0.0, p.gamma - step))
    return (lp - lm) / (p.gamma + step - max(0.0, p.gamma - step))
