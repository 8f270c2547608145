"""Dense arithmetic, seeded randomness and finite-difference oracles.

Vectors and matrices are plain float64 ``numpy`` arrays. The random number
generator is numpy's Philox4x64 counter-based bit generator, so a given seed
produces the same stream on every platform and the full state can be
serialized and restored.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

FD_STEP = 1e-5


class DNHError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(DNHError, ValueError):
    pass


class InvalidParameterError(DNHError, ValueError):
    pass


class NumericDomainError(DNHError, ArithmeticError):
    pass


class InsufficientDataError(DNHError, ValueError):
    pass


class ConfigError(DNHError, ValueError):
    pass


def as_vector(x, dim: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected dim {dim}, got {v.shape[0]}")
    return v


def as_matrix(a, shape: tuple[int, int] | None = None) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a non-empty matrix, got shape {m.shape}")
    if shape is not None and m.shape != shape:
        raise ShapeError(f"expected shape {shape}, got {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"non-finite {what}")
    return a


def fast_replace(obj, **changes):
    """``dataclasses.replace`` without re-running ``__init__``.

    Only for plain (non-slotted) dataclasses whose fields need no
    validation; used on per-step hot paths.
    """
    new = object.__new__(obj.__class__)
    d = new.__dict__
    d.update(obj.__dict__)
    d.update(changes)
    return new


def outer(u, v) -> np.ndarray:
    return np.outer(as_vector(u), as_vector(v))


def central_fd(
    scalar_fn: Callable[[np.ndarray], float], x, h: float | None = None
) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``x``.

    With ``h=None`` the step for coordinate i is ``1e-5 * max(1, |x_i|)``;
    an explicit ``h`` is used as an absolute step for every coordinate.
    """
    x = as_vector(x).copy()
    if h is not None and not h > 0:
        raise InvalidParameterError("finite-difference step must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        step = h if h is not None else FD_STEP * max(1.0, abs(x[i]))
        xi = x[i]
        x[i] = xi + step
        fp = float(scalar_fn(x))
        x[i] = xi - step
        fm = float(scalar_fn(x))
        x[i] = xi
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericDomainError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def central_fd_matrix(
    scalar_fn: Callable[[np.ndarray], float], a, h: float | None = None
) -> np.ndarray:
    """``central_fd`` over the entries of a matrix argument."""
    a = as_matrix(a)
    shape = a.shape
    g = central_fd(lambda flat: scalar_fn(flat.reshape(shape)), a.ravel(), h)
    return g.reshape(shape)


def gaussian_kl(mu1, var1, mu2, var2) -> float:
    """KL(N(mu1, diag var1) || N(mu2, diag var2))."""
    mu1, var1, mu2, var2 = (as_vector(a) for a in (mu1, var1, mu2, var2))
    if not (mu1.shape == var1.shape == mu2.shape == var2.shape):
        raise ShapeError("Gaussian parameters must share one dimension")
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise InvalidParameterError("variances must be positive")
    return diag_gaussian_kl(mu1, var1, mu2, var2)


def diag_gaussian_kl(mu1, var1, mu2, var2) -> float:
    """``gaussian_kl`` without argument checks, for validated hot paths."""
    terms = np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0
    return max(0.0, 0.5 * float(terms.sum()))


class RngState:
    """Seeded Philox4x64 stream with serializable state."""

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, stream: int) -> "RngState":
        """Independent child stream keyed by ``(seed, stream)``."""
        child = RngState.__new__(RngState)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.Philox(key=[self.seed, int(stream)]))
        return child

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def copy(self) -> "RngState":
        other = RngState(self.seed)
        other.set_state(self.get_state())
        return other

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)


def normal_sample(rng: RngState, mean: float, var: float) -> float:
    if var < 0:
        raise InvalidParameterError("variance must be nonnegative")
    z = float(rng.standard_normal())
    if var == 0:
        return float(mean)
    return float(mean) + math.sqrt(var) * z
