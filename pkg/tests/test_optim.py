import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnh.numerics import RngState, ShapeError
from dnh.optim import (
    BETA_MAX,
    EAdamState,
    MomentumState,
    eadam_evolve,
    eadam_step,
    momentum_descent,
    proximal_momentum_step,
)


def prox_objective(m, m_t, grad, eta):
    return -np.sum(m * grad) + np.sum((m - m_t) ** 2) / (2 * eta)


def reference_adam(x0, grad_fn, steps, lr=1e-2, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam, written independently of the vectorized version."""
    x = [float(a) for a in x0.ravel()]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(np.array(x).reshape(x0.shape)).ravel()
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
        out.append(np.array(x).reshape(x0.shape))
    return out


class TestProximalMomentum:
    def test_zero_gradient(self):
        s = MomentumState(np.array([[1.0, -2.0]]), eta=0.7)
        np.testing.assert_array_equal(proximal_momentum_step(s, np.zeros((1, 2))).m, s.m)

    def test_example(self):
        s = MomentumState(np.zeros((1, 2)), eta=0.5)
        new = proximal_momentum_step(s, [[2.0, -4.0]])
        np.testing.assert_array_equal(new.m, [[1.0, -2.0]])
        # grid minimization of the objective agrees
        grid = np.linspace(-3, 3, 6001)
        best = [grid[np.argmin([-a * g + (a * a) / (2 * 0.5) for a in grid])] for g in (2.0, -4.0)]
        np.testing.assert_allclose(best, [1.0, -2.0], atol=1e-6)

    def test_cancellation(self):
        s = MomentumState(np.eye(2), eta=1.0)
        np.testing.assert_array_equal(proximal_momentum_step(s, -np.eye(2)).m, 0)

    def test_beats_probe(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = int(rng.integers(1, 5))
            m_t, g = rng.standard_normal((2, d, d))
            eta = float(rng.uniform(0.01, 2.0))
            best = proximal_momentum_step(MomentumState(m_t, eta), g).m
            probe = best + rng.uniform(-3, 3, (10_000, d, d))
            vals = -np.einsum("nij,ij->n", probe, g) + np.sum((probe - m_t) ** 2, axis=(1, 2)) / (2 * eta)
            assert prox_objective(best, m_t, g, eta) <= vals.min()

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            proximal_momentum_step(MomentumState.zeros((2, 2)), np.zeros((3, 3)))

    def test_momentum_descent_decays(self):
        s = MomentumState(np.ones((1, 1)), eta=0.1, decay=0.5)
        s, upd = momentum_descent(s, np.array([[2.0]]))
        np.testing.assert_allclose(s.m, [[0.7]])
        np.testing.assert_allclose(upd, [[-0.7]])


class TestEAdamStep:
    def test_zero(self):
        s, upd = eadam_step(EAdamState.zeros((2, 2)), np.zeros((2, 2)))
        np.testing.assert_array_equal(upd, 0)
        assert s.step_count == 1

    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 3))
        q = a @ a.T + np.eye(3)
        x0 = rng.standard_normal((3, 3))
        grad = lambda x: q @ x  # noqa: E731
        ref = reference_adam(x0, grad, 1000)
        s, x = EAdamState.zeros(x0.shape), x0.copy()
        worst = 0.0
        for r in ref:
            s, upd = eadam_step(s, grad(x))
            x = x + upd
            worst = max(worst, float(np.max(np.abs(x - r))))
        assert worst < 1e-12

    def test_sign_limit(self):
        s = EAdamState.zeros((1, 2), lr=0.01)
        g = np.array([[3.0, -0.2]])
        for _ in range(5000):
            s, upd = eadam_step(s, g)
        np.testing.assert_allclose(upd, [[-0.01, 0.01]], rtol=1e-5)

    def test_without_bias_correction(self):
        s = EAdamState.zeros((1,), bias_correction=False, lr=1.0, eps=0.0)
        _, upd = eadam_step(s, np.array([1.0]))
        assert upd[0] == pytest.approx(-0.1 / math.sqrt(0.001))

    @given(st.lists(arrays(np.float64, (2, 2), elements=st.floats(-1e3, 1e3)), max_size=20))
    def test_second_moment_nonnegative(self, grads):
        s = EAdamState.zeros((2, 2))
        for g in grads:
            s, _ = eadam_step(s, g)
            assert np.all(s.v >= 0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            eadam_step(EAdamState.zeros((2, 2)), np.zeros(4))


class TestEAdamEvolve:
    def test_frozen(self):
        s = EAdamState.zeros((1,), beta1=0.8, beta2=0.95, sigma2=0.0, eta_beta=0.3)
        new = eadam_evolve(s, 2.0, (0.0, 0.0), 0.1, RngState(0))
        assert (new.beta1, new.beta2) == (0.8, 0.95)

    def test_variance_decay(self):
        s = EAdamState.zeros((1,), sigma2=1.0)
        assert eadam_evolve(s, 10.0, (0.0, 0.0), 0.1, RngState(0)).sigma2 == pytest.approx(math.exp(-1))

    def test_zero_surprise(self):
        s = EAdamState.zeros((1,), sigma2=0.3)
        assert eadam_evolve(s, 0.0, (0.0, 0.0), 0.5, RngState(0)).sigma2 == 0.3

    def test_descent_direction(self):
        s = EAdamState.zeros((1,), beta1=0.5, beta2=0.5, eta_beta=0.1)
        new = eadam_evolve(s, 0.0, (1.0, -1.0), 0.0, RngState(0))
        assert new.beta1 == pytest.approx(0.4) and new.beta2 == pytest.approx(0.6)

    def test_negative_surprise(self):
        with pytest.raises(ValueError):
            eadam_evolve(EAdamState.zeros((1,)), -1.0, (0.0, 0.0), 0.1, RngState(0))

    @given(st.floats(0, 10), st.floats(0, 5), st.lists(st.floats(0, 100), max_size=15),
           st.integers(0, 2**32))
    def test_clamped_and_monotone(self, sigma2, gamma, lsses, seed):
        s = EAdamState.zeros((1,), sigma2=sigma2, eta_beta=1.0)
        rng = RngState(seed)
        for lss in lsses:
            new = eadam_evolve(s, lss, (3.0, -3.0), gamma, rng)
            assert 0.0 <= new.beta1 <= BETA_MAX and 0.0 <= new.beta2 <= BETA_MAX
            assert new.sigma2 <= s.sigma2
            s = new
