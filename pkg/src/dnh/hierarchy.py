"""The time-varying level chain: composition, scheduling, growth and pruning.

Level 1 is outermost and produces the model output; level ``L`` is innermost
and reads the raw input. ``forward`` applies the innermost level first. Edges
always form the chain ``(l, l+1)``; they are stored explicitly so the graph
invariants can be checked independently.
"""

from __future__ import annotations

import graphlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .memory import MemoryModule
from .numerics import DNHError, as_matrix, as_vector, fast_replace

SCHEMA_VERSION = 1


class CapacityError(DNHError):
    pass


class InvalidOperationError(DNHError):
    pass


class InvalidStateError(DNHError):
    pass


@dataclass(frozen=True)
class StructuralEvent:
    step: int
    kind: str  # "add" | "prune" | "freq_change"
    level: int
    detail: float = 0.0
    interior: bool = False  # prune of a level with a neighbour on both sides
    via: str = "hebbian"  # how an added level was initialized


@dataclass(frozen=True)
class Trace:
    """Per-level inputs (contexts) and outputs of one forward pass.

    ``inputs[i]`` and ``outputs[i]`` belong to level ``i + 1``.
    """

    inputs: tuple[np.ndarray, ...]
    outputs: tuple[np.ndarray, ...]

    @property
    def output(self) -> np.ndarray:
        return self.outputs[0]


@dataclass(frozen=True, eq=False)
class Hierarchy:
    modules: tuple[MemoryModule, ...]
    edges: frozenset = frozenset()
    t: int = 0
    l_max: int = 5
    next_id: int = 0
    f_min: float = 0.05
    f_max: float = 1.0
    d_max: int = 2
    events: tuple[StructuralEvent, ...] = field(default=())  # since the last reset by evolve

    @property
    def L(self) -> int:
        return len(self.modules)

    @property
    def dim(self) -> int:
        return self.modules[0].dim

    @property
    def freqs(self) -> list[float]:
        return [m.freq for m in self.modules]

    def module(self, level: int) -> MemoryModule:
        return self.modules[level - 1]

    def with_module(self, level: int, m: MemoryModule) -> "Hierarchy":
        mods = list(self.modules)
        mods[level - 1] = m
        return fast_replace(self, modules=tuple(mods))

    def with_modules(self, modules) -> "Hierarchy":
        return fast_replace(self, modules=tuple(modules))

    def with_contexts(self, trace: Trace) -> "Hierarchy":
        return self.with_modules(
            fast_replace(m, context=c) for m, c in zip(self.modules, trace.inputs)
        )

    def clamp_freq(self, f: float) -> float:
        return min(max(f, self.f_min), self.f_max)


def chain_edges(L: int) -> frozenset:
    return frozenset((l, l + 1) for l in range(1, L))


def build(thetas, freqs, *, l_max: int = 5, f_min: float = 0.05, f_max: float = 1.0,
          d_max: int = 2, t: int = 0) -> Hierarchy:
    """Chain hierarchy from per-level parameters, outermost first."""
    thetas = [as_matrix(th) for th in thetas]
    if not thetas:
        raise InvalidStateError("a hierarchy needs at least one level")
    if len(thetas) > l_max:
        raise CapacityError(f"{len(thetas)} levels exceed l_max={l_max}")
    mods = tuple(
        MemoryModule.create(i, i + 1, th, min(max(f, f_min), f_max))
        for i, (th, f) in enumerate(zip(thetas, freqs, strict=True))
    )
    return Hierarchy(mods, chain_edges(len(mods)), t, l_max, len(mods), f_min, f_max, d_max)


def forward(h: Hierarchy, x) -> Trace:
    if h.L == 0:
        raise InvalidStateError("empty hierarchy")
    z = as_vector(x, h.dim)
    inputs: list[np.ndarray] = [None] * h.L  # type: ignore[list-item]
    outputs: list[np.ndarray] = [None] * h.L  # type: ignore[list-item]
    for i in range(h.L - 1, -1, -1):
        inputs[i] = z
        z = h.modules[i].theta @ z
        outputs[i] = z
    return Trace(tuple(inputs), tuple(outputs))


def backprop_targets(h: Hierarchy, trace: Trace, target) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Local regression targets and output-gradients for every level.

    The output error ``e = y - target`` is pulled back through the outer
    levels; level ``l`` gets ``g_l = theta_1..theta_{l-1}^T e`` and the local
    target ``outputs[l] - g_l``. With that target the squared-error level
    gradient equals the gradient of the task loss with respect to ``theta_l``.
    """
    g = trace.output - as_vector(target, h.dim)
    grads_out, targets = [], []
    for i in range(h.L):
        grads_out.append(g)
        targets.append(trace.outputs[i] - g)
        g = h.modules[i].theta.T @ g
    return targets, grads_out


def due_modules(h: Hierarchy) -> tuple[set[int], Hierarchy]:
    """Advance every level's phase accumulator by ``f / max(f)``.

    A level is due when its phase reaches 1. The fastest level is due on
    every call.
    """
    top = max(m.freq for m in h.modules)
    due: set[int] = set()
    mods = []
    for lvl, m in enumerate(h.modules, start=1):
        phase = m.phase + (1.0 if m.freq == top else m.freq / top)
        if phase >= 1.0:
            phase -= 1.0
            due.add(lvl)
        mods.append(fast_replace(m, phase=phase))
    return due, h.with_modules(mods)


def _append_level(h: Hierarchy, theta: np.ndarray, freq: float, event: StructuralEvent) -> Hierarchy:
    L = h.L
    new = MemoryModule.create(h.next_id, L + 1, theta, h.clamp_freq(freq))
    return replace(
        h,
        modules=h.modules + (new,),
        edges=h.edges | {(L, L + 1)},
        next_id=h.next_id + 1,
        events=h.events + (event,),
    )


def add_level(h: Hierarchy, alpha: float) -> Hierarchy:
    """Append a Hebbian-initialized innermost level.

    ``theta_new = theta_L + alpha * c c^T`` with ``c`` the innermost context,
    frequency the mean of the existing frequencies.
    """
    if h.L >= h.l_max:
        raise CapacityError(f"hierarchy already has l_max={h.l_max} levels")
    inner = h.modules[-1]
    c = inner.context if inner.context is not None else np.zeros(inner.dim)
    theta = inner.theta + alpha * np.outer(c, c)
    freq = sum(h.freqs) / h.L
    ev = StructuralEvent(h.t, "add", h.L + 1, h.clamp_freq(freq), via="hebbian")
    return _append_level(h, theta, freq, ev)


def add_meta_level(h: Hierarchy, meta_grad, m_prev, eta: float) -> Hierarchy:
    """Append a level solving the proximal problem around ``m_prev``.

    The minimizer of ``-<M, meta_grad> + ||M - m_prev||^2 / (2 eta)`` is
    ``m_prev + eta * meta_grad``; the new level runs at half the innermost
    frequency.
    """
    if h.L >= h.l_max:
        raise CapacityError(f"hierarchy already has l_max={h.l_max} levels")
    if not eta > 0:
        raise ValueError("eta must be positive")
    d = h.dim
    theta = as_matrix(m_prev, (d, d)) + eta * as_matrix(meta_grad, (d, d))
    freq = h.modules[-1].freq / 2.0
    ev = StructuralEvent(h.t, "add", h.L + 1, h.clamp_freq(freq), via="proximal")
    return _append_level(h, theta, freq, ev)


def prune_level(h: Hierarchy, level: int, grad_norm: float = 0.0) -> Hierarchy:
    if h.L < 2:
        raise InvalidOperationError("cannot prune the only level")
    if level == 1:
        raise InvalidOperationError("the outermost level is never pruned")
    if not 2 <= level <= h.L:
        raise InvalidOperationError(f"no level {level} in a {h.L}-level hierarchy")
    interior = level < h.L
    kept = [m for i, m in enumerate(h.modules, start=1) if i != level]
    kept = [fast_replace(m, level=i) for i, m in enumerate(kept, start=1)]
    ev = StructuralEvent(h.t, "prune", level, float(grad_norm), interior=interior)
    out = replace(h, modules=tuple(kept), edges=chain_edges(len(kept)),
                  events=h.events + (ev,))
    problems = validate(out)
    if problems:
        raise InvalidStateError("; ".join(problems))
    return out


def validate(h: Hierarchy) -> list[str]:
    """Return a list of invariant violations; empty means valid."""
    problems: list[str] = []
    L = h.L
    if not 1 <= L <= h.l_max:
        problems.append(f"level count {L} outside [1, {h.l_max}]")
    levels = [m.level for m in h.modules]
    if levels != list(range(1, L + 1)):
        problems.append(f"levels not contiguous: {levels}")
    nodes = set(range(1, L + 1))
    preds: dict[int, set[int]] = {n: set() for n in nodes}
    degree = {n: 0 for n in nodes}
    for a, b in h.edges:
        if a not in nodes or b not in nodes:
            problems.append(f"edge {(a, b)} references a missing level")
            continue
        preds[b].add(a)
        degree[a] += 1
        degree[b] += 1
    try:
        tuple(graphlib.TopologicalSorter(preds).static_order())
    except graphlib.CycleError as exc:
        problems.append(f"edges contain a cycle: {exc.args[1]}")
    for n, deg in degree.items():
        if deg > h.d_max:
            problems.append(f"level {n} has degree {deg} > d_max={h.d_max}")
    d = h.modules[0].dim if h.modules else 0
    for lvl, m in enumerate(h.modules, start=1):
        if not h.f_min <= m.freq <= h.f_max:
            problems.append(f"level {lvl} frequency {m.freq} outside [{h.f_min}, {h.f_max}]")
        if m.theta.shape != (d, d):
            problems.append(f"level {lvl} parameters have shape {m.theta.shape}")
        if not np.all(np.isfinite(m.theta)):
            problems.append(f"level {lvl} parameters are not finite")
        if not 0.0 <= m.phase < 1.0:
            problems.append(f"level {lvl} phase {m.phase} outside [0, 1)")
    return problems


# ---------------------------------------------------------------------------
# snapshots


def to_dict(h: Hierarchy) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "t": h.t,
        "dim": h.dim,
        "l_max": h.l_max,
        "f_min": h.f_min,
        "f_max": h.f_max,
        "d_max": h.d_max,
        "next_id": h.next_id,
        "edges": sorted([list(e) for e in h.edges]),
        "levels": [
            {
                "id": m.id,
                "level": m.level,
                "freq": m.freq,
                "phase": m.phase,
                "theta": m.theta.tolist(),
            }
            for m in h.modules
        ],
    }


def from_dict(data: dict) -> Hierarchy:
    if data.get("schema") != SCHEMA_VERSION:
        raise InvalidStateError(f"unsupported snapshot schema {data.get('schema')!r}")
    mods = tuple(
        replace(
            MemoryModule.create(lv["id"], lv["level"], lv["theta"], lv["freq"]),
            phase=float(lv["phase"]),
        )
        for lv in data["levels"]
    )
    return Hierarchy(
        mods,
        frozenset(tuple(e) for e in data["edges"]),
        int(data["t"]),
        int(data["l_max"]),
        int(data["next_id"]),
        float(data["f_min"]),
        float(data["f_max"]),
        int(data["d_max"]),
    )


def dumps(h: Hierarchy) -> str:
    return json.dumps(to_dict(h), indent=1)


def loads(text: str) -> Hierarchy:
    return from_dict(json.loads(text))


def frobenius(a: np.ndarray) -> float:
    return math.sqrt(float(np.sum(a * a)))
