"""Seeded piecewise-stationary data streams with ground-truth segment labels.

Three kinds are supported:

``drifting_linear``
    ``target = A_s x + noise`` where ``A_{s+1} = A_s + shift * D_s/||D_s||_F``.
``rotating_gaussian``
    ``d`` classes; each sample is a class mean rotated by ``s * shift``
    radians in a fixed plane, plus unit Gaussian noise. The target is the
    one-hot class vector.
``permuted_features``
    fixed teacher ``A``; ``target = A P_s x + noise`` where ``P_{s+1}``
    cycles ``floor(shift * d)`` coordinates of ``P_s``.

Inputs for the two regression kinds are i.i.d. ``N(0, I)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .numerics import ConfigError, RngState

KINDS = ("drifting_linear", "rotating_gaussian", "permuted_features")

# child-stream keys for RngState.spawn
_PARAMS, _SAMPLES, _HELD_OUT = 0, 1, 2


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "drifting_linear"
    dim: int = 8
    segment_len: int = 2000
    num_segments: int = 10
    shift_magnitude: float = 0.3
    noise_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown stream kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1 or self.segment_len < 1 or self.num_segments < 1:
            raise ConfigError("dim, segment_len and num_segments must be positive")
        if self.shift_magnitude < 0 or self.noise_std < 0:
            raise ConfigError("shift_magnitude and noise_std must be nonnegative")
        if self.kind == "permuted_features" and self.shift_magnitude > 1:
            raise ConfigError("permuted_features shift_magnitude is a fraction in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def total(self) -> int:
        return self.segment_len * self.num_segments


@dataclass(frozen=True, eq=False)
class Sample:
    x: np.ndarray
    target: np.ndarray
    t: int
    segment_id: int


class Stream:
    """Iterator over the samples of a ``StreamSpec``."""

    def __init__(self, spec: StreamSpec):
        spec.validate()
        self.spec = spec
        root = RngState(spec.seed)
        self._param_rng = root.spawn(_PARAMS).generator
        self._sample_rng = root.spawn(_SAMPLES).generator
        self._root = root
        self._t = 0
        self._boundary_shift: list[float] = []
        getattr(self, f"_init_{spec.kind}")()

    # -- per-kind parameters ------------------------------------------------

    def _init_drifting_linear(self) -> None:
        d, g = self.spec.dim, self._param_rng
        a = g.standard_normal((d, d)) / math.sqrt(d)
        self.teachers = [a]
        for _ in range(self.spec.num_segments - 1):
            step = g.standard_normal((d, d))
            step *= self.spec.shift_magnitude / np.linalg.norm(step)
            a = a + step
            self.teachers.append(a)
            self._boundary_shift.append(float(np.linalg.norm(step)))

    def _init_permuted_features(self) -> None:
        d, g = self.spec.dim, self._param_rng
        self.base_teacher = g.standard_normal((d, d)) / math.sqrt(d)
        k = int(self.spec.shift_magnitude * d + 1e-9)  # floor keeps the shift bounded
        perm = np.arange(d)
        self.perms = [perm]
        for _ in range(self.spec.num_segments - 1):
            # a random cycle over k chosen coordinates, so every chosen one moves
            order = g.choice(d, size=k, replace=False) if k >= 2 else np.array([], int)
            new = perm.copy()
            new[order] = perm[np.roll(order, 1)]
            self._boundary_shift.append(float(np.mean(new != perm)))
            perm = new
            self.perms.append(perm)
        self.teachers = [self.base_teacher @ _perm_matrix(p) for p in self.perms]

    def _init_rotating_gaussian(self) -> None:
        d, g = self.spec.dim, self._param_rng
        means = g.standard_normal((d, d))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        self.class_means = 2.0 * means
        if d >= 2:
            q, _ = np.linalg.qr(g.standard_normal((d, 2)))
            self._plane = q
        else:
            self._plane = None
        self.teachers = None
        angle = float(self.spec.shift_magnitude) if d >= 2 else 0.0
        self._boundary_shift = [angle] * (self.spec.num_segments - 1)

    def rotation(self, segment: int) -> np.ndarray:
        d = self.spec.dim
        if self._plane is None:
            return np.eye(d)
        ang = self.spec.shift_magnitude * segment
        u, w = self._plane[:, 0], self._plane[:, 1]
        c, s = math.cos(ang), math.sin(ang)
        return (np.eye(d) + (c - 1.0) * (np.outer(u, u) + np.outer(w, w))
                + s * (np.outer(w, u) - np.outer(u, w)))

    # -- sampling -----------------------------------------------------------

    def _draw(self, g: np.random.Generator, segment: int) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        d = spec.dim
        if spec.kind == "rotating_gaussian":
            cls = int(g.integers(d))
            x = self.rotation(segment) @ self.class_means[cls] + g.standard_normal(d)
            target = np.zeros(d)
            target[cls] = 1.0
            return x, target
        x = g.standard_normal(d)
        target = self.teachers[segment] @ x
        if spec.noise_std > 0:
            target = target + spec.noise_std * g.standard_normal(d)
        return x, target

    def __iter__(self) -> Iterator[Sample]:
        return self

    def __next__(self) -> Sample:
        if self._t >= self.spec.total:
            raise StopIteration
        t = self._t
        seg = t // self.spec.segment_len
        x, target = self._draw(self._sample_rng, seg)
        self._t += 1
        return Sample(x, target, t, seg)

    def held_out(self, segment: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` fresh samples from one segment's distribution."""
        if not 0 <= segment < self.spec.num_segments:
            raise IndexError(f"segment {segment} out of range")
        g = self._root.spawn(_HELD_OUT + 1 + segment).generator
        xs, ys = zip(*(self._draw(g, segment) for _ in range(n)))
        return np.array(xs), np.array(ys)

    def true_shift_at(self, t: int) -> float:
        """Ground-truth parameter change entering step ``t``."""
        if not 0 <= t < self.spec.total:
            raise IndexError(f"t={t} outside [0, {self.spec.total})")
        if t == 0 or t % self.spec.segment_len:
            return 0.0
        return self._boundary_shift[t // self.spec.segment_len - 1]


def make_stream(spec: StreamSpec) -> Stream:
    return Stream(spec)


def next_sample(stream: Stream) -> Sample:
    return next(stream)


def _perm_matrix(perm: np.ndarray) -> np.ndarray:
    """Matrix ``P`` with ``(P x)[i] = x[perm[i]]``."""
    d = perm.size
    p = np.zeros((d, d))
    p[np.arange(d), perm] = 1.0
    return p


def dump_csv(spec: StreamSpec, path, steps: int | None = None, comment: str = "") -> int:
    """Write the stream (or its first ``steps`` samples) to ``path``.

    The first line is a ``#`` comment carrying the schema version, the seed
    and ``comment``. Returns the number of data rows.
    """
    d = spec.dim
    header = (["t", "segment_id"] + [f"x{i}" for i in range(d)]
              + [f"target{i}" for i in range(d)])
    n = 0
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema=1 kind={spec.kind} seed={spec.seed} {comment}".rstrip() + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for s in make_stream(spec):
            if steps is not None and n >= steps:
                break
            w.writerow([s.t, s.segment_id, *map(repr, s.x.tolist()),
                        *map(repr, s.target.tolist())])
            n += 1
    return n
