import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dnh import hierarchy as hz
from dnh.hierarchy import StructuralEvent
from dnh.meta import (
    MetaController,
    MetaParams,
    ShiftEstimator,
    evolve,
    fd_frequency_gradient,
    meta_loss,
    modulate_frequency_first_order,
    modulate_frequency_second_order,
    observe_shift,
    structural_delta,
    update_meta_params,
)
from dnh.numerics import ConfigError, InvalidParameterError

INF = math.inf


def quiet(**kw):
    """Parameters with adaptation off, then overridden by ``kw``."""
    return replace(MetaParams().disable_adaptation(), **{"cooldown": 0, "min_levels": 1, **kw})


def hier(n=2, d=2, freqs=None):
    rng = np.random.default_rng(0)
    h = hz.build([np.eye(d) + 0.1 * rng.standard_normal((d, d)) for _ in range(n)],
                 freqs or [1.0] * n)
    return h.with_contexts(hz.forward(h, np.ones(d)))


def step(h, ctrl, loss=0.0, grads=None, lss=None, x=None):
    grads = grads if grads is not None else [np.full((h.dim, h.dim), 0.3)] * h.L
    lss = lss if lss is not None else [0.0] * h.L
    return evolve(h, ctrl, np.zeros(h.dim) if x is None else x, loss, grads, lss)


class TestShiftEstimator:
    def test_warm_up(self):
        est = ShiftEstimator(10)
        rng = np.random.default_rng(0)
        assert all(observe_shift(est, rng.standard_normal(2) + 5 * (i > 9)) == 0.0 for i in range(19))
        assert observe_shift(est, rng.standard_normal(2) + 5) > 0.0

    def test_constant_stream(self):
        est = ShiftEstimator(20)
        vals = [observe_shift(est, np.array([1.5, -2.0])) for _ in range(100)]
        assert vals[-1] == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift(self):
        rng = np.random.default_rng(1)
        est = ShiftEstimator(5000)
        for _ in range(5000):
            est.observe(rng.standard_normal(1))
        for _ in range(4999):
            est.observe(rng.standard_normal(1) + 1.0)
        kl = est.observe(rng.standard_normal(1) + 1.0)
        assert abs(kl - 0.5) < 0.05

    def test_running_sums_match_direct(self):
        rng = np.random.default_rng(2)
        est = ShiftEstimator(7)
        for _ in range(40):
            kl = est.observe(rng.standard_normal(3))
        new, old = np.array(est.window_new), np.array(est.window_old)
        v1, v2 = new.var(0), old.var(0)
        direct = 0.5 * np.sum(np.log(v2 / v1) + (v1 + (new.mean(0) - old.mean(0)) ** 2) / v2 - 1)
        assert kl == pytest.approx(direct, rel=1e-9)

    def test_fifo(self):
        est = ShiftEstimator(2)
        for i in range(5):
            est.observe([float(i)])
        assert [a[0] for a in est.window_new] == [3.0, 4.0]
        assert [a[0] for a in est.window_old] == [1.0, 2.0]

    def test_copy_is_independent(self):
        est = ShiftEstimator(3)
        est.observe([1.0])
        other = est.copy()
        other.observe([2.0])
        assert len(est.window_new) == 1

    def test_bad_window(self):
        with pytest.raises(InvalidParameterError):
            ShiftEstimator(0)


class TestMetaLoss:
    def test_plain(self):
        assert meta_loss(0.7, 3, 0.2, MetaParams(lam=0.0, mu=0.0)) == 0.7

    def test_example(self):
        assert meta_loss(1.0, 2, 0.4, MetaParams(lam=0.1, mu=0.5)) == pytest.approx(1.4)

    def test_no_structure_no_shift(self):
        assert meta_loss(0.3, 0, 0.0, MetaParams(lam=5.0, mu=9.0)) == 0.3

    @given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 10), st.integers(0, 10),
           st.floats(0, 5), st.floats(0, 5))
    def test_monotone(self, lam, mu, a, b, s1, s2):
        p = MetaParams(lam=lam, mu=mu)
        assert meta_loss(1.0, min(a, b), s1, p) <= meta_loss(1.0, max(a, b), s1, p)
        assert meta_loss(1.0, a, min(s1, s2), p) <= meta_loss(1.0, a, max(s1, s2), p)


class TestStructuralDelta:
    def test_empty(self):
        assert structural_delta([]) == 0

    def test_add(self):
        assert structural_delta([StructuralEvent(0, "add", 3)]) == 2

    def test_interior_prune(self):
        assert structural_delta([StructuralEvent(0, "prune", 2, interior=True)]) == 4

    def test_innermost_prune(self):
        assert structural_delta([StructuralEvent(0, "prune", 3)]) == 2


def planted(a, f_star, level=2):
    def rollout(h, samples, gamma=0.0):
        return a * (h.module(level).freq - f_star) ** 2
    return rollout


class TestFDFrequencyGradient:
    def test_plateau(self):
        p = MetaParams(gamma=0.0)
        res = fd_frequency_gradient(hier(freqs=[1.0, 0.5]), 2, [None], p, lambda h, s, gamma=0.0: 1.25)
        assert res.grad == 0.0 and not res.one_sided

    @given(st.floats(0.1, 5), st.floats(0.1, 1.0), st.floats(0.2, 0.8))
    def test_planted_quadratic(self, a, f_star, f):
        p = MetaParams(fd_h=0.01)
        h = hz.build([np.eye(2), np.eye(2)], [1.0, f])
        res = fd_frequency_gradient(h, 2, [None], p, planted(a, f_star))
        assert abs(res.grad - 2 * a * (f - f_star)) < 1e-4
        assert res.hess == pytest.approx(2 * a, rel=1e-6)

    def test_one_sided_at_upper_bound(self):
        h = hz.build([np.eye(2), np.eye(2)], [1.0, 1.0])
        res = fd_frequency_gradient(h, 2, [None], MetaParams(fd_h=0.01), planted(1.0, 0.5))
        assert res.one_sided
        assert res.grad == pytest.approx((0.25 - 0.49**2) / 0.01)

    def test_one_sided_at_lower_bound(self):
        h = hz.build([np.eye(2), np.eye(2)], [1.0, 0.05])
        res = fd_frequency_gradient(h, 2, [None], MetaParams(fd_h=0.01), planted(1.0, 0.5))
        assert res.one_sided and res.grad < 0

    def test_original_untouched(self):
        h = hier()
        fd_frequency_gradient(h, 2, [None], MetaParams(), planted(1.0, 0.5))
        assert h.module(2).freq == 1.0

    def test_empty_rollout(self):
        with pytest.raises(InvalidParameterError):
            fd_frequency_gradient(hier(), 2, [], MetaParams(), planted(1.0, 0.5))


class TestModulation:
    def test_first_order_idle(self):
        assert modulate_frequency_first_order(0.4, 0.0, 0.0, 0.0, MetaParams()) == (0.4, 0.0)

    def test_surprise_push(self):
        p = MetaParams(gamma=0.1, eta_f=0.0, f_max=10.0)
        f, m = modulate_frequency_first_order(0.3, 2.0, 0.0, 0.0, p)
        assert f == pytest.approx(0.5) and m == 0.0

    def test_clamp(self):
        p = MetaParams(gamma=1.0, f_max=1.0)
        assert modulate_frequency_first_order(1.0, 3.0, -2.0, 0.5, p)[0] == 1.0

    def test_descends(self):
        p = MetaParams(gamma=0.0, eta_f=0.1, beta_momentum=0.0)
        f, m = modulate_frequency_first_order(0.5, 0.0, 1.0, 0.0, p)
        assert m == -1.0 and f == pytest.approx(0.5 - 0.1 - 1.0) or f == p.f_min

    def test_second_order_idle(self):
        assert modulate_frequency_second_order(0.4, 0.0, 3.0, MetaParams()) == 0.4

    def test_newton_on_planted_quadratic(self):
        a, f_star = 2.0, 0.35
        p = MetaParams(eta_f=1.0, fd_h=0.01)
        h = hz.build([np.eye(2), np.eye(2)], [1.0, 0.7])
        res = fd_frequency_gradient(h, 2, [None], p, planted(a, f_star))
        f = modulate_frequency_second_order(0.7, res.grad, res.hess, p)
        assert abs(f - f_star) < 1e-3

    def test_flat_curvature_guard(self):
        p = MetaParams(eta_f=1e-3, hess_floor=1e-2, f_max=1.0)
        f = modulate_frequency_second_order(0.5, 1.0, 0.0, p)
        assert math.isfinite(f) and f == pytest.approx(0.4)


class TestUpdateMetaParams:
    def test_zero(self):
        p = MetaParams()
        assert update_meta_params(p, {"gamma": 0.0, "gate_w": 0.0, "gate_b": 0.0}, 1e-4) == p

    def test_gamma_step(self):
        p = update_meta_params(MetaParams(gamma=0.1), {"gamma": 1.0}, 1e-4)
        assert p.gamma == pytest.approx(0.1 - 1e-4)

    def test_gamma_clamped(self):
        assert update_meta_params(MetaParams(gamma=1e-5), {"gamma": 1.0}, 1e-4).gamma == 0.0

    def test_thresholds_not_learnable(self):
        with pytest.raises(InvalidParameterError):
            update_meta_params(MetaParams(), {"tau": 1.0}, 1e-4)


class TestEvolve:
    def test_static_degeneration(self):
        p = MetaParams().disable_adaptation()
        ctrl = MetaController.create(replace(p, window=2))
        h = hier(3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal(2)
            res = step(h, ctrl, loss=5.0, grads=[np.zeros((2, 2))] * 3, lss=[9.0] * 3, x=x)
            assert res.events == ()
            assert res.meta_loss == 5.0 + p.mu * res.shift
            assert res.hierarchy.freqs == h.freqs
            assert all(np.array_equal(a.theta, b.theta)
                       for a, b in zip(res.hierarchy.modules, h.modules))
            h = res.hierarchy

    def test_add_on_high_loss(self):
        ctrl = MetaController.create(quiet(tau=0.1))
        res = step(hier(2), ctrl, loss=1.0)
        assert [e.kind for e in res.events] == ["add"] and res.hierarchy.L == 3
        assert res.meta_loss == pytest.approx(1.0 + ctrl.params.lam * 2)

    def test_add_respects_capacity(self):
        h = replace(hier(2), l_max=2)
        res = step(h, MetaController.create(quiet(tau=0.1)), loss=1.0)
        assert res.events == () and res.hierarchy.L == 2

    def test_outermost_never_pruned(self):
        ctrl = MetaController.create(quiet(epsilon=1e-6))
        res = step(hier(2), ctrl, grads=[np.full((2, 2), 1e-9), np.full((2, 2), 0.5)])
        assert res.events == ()

    def test_prune_small_gradient(self):
        ctrl = MetaController.create(quiet(epsilon=1e-6))
        res = step(hier(2), ctrl, grads=[np.full((2, 2), 0.5), np.full((2, 2), 1e-9)])
        assert [(e.kind, e.level) for e in res.events] == [("prune", 2)]

    def test_one_prune_lowest_norm(self):
        ctrl = MetaController.create(quiet(epsilon=1.0))
        g = [np.full((2, 2), v) for v in (0.0, 0.2, 0.1, 0.1)]
        res = step(hier(4), ctrl, grads=g)
        assert [(e.kind, e.level) for e in res.events] == [("prune", 3)]

    def test_min_levels_blocks_prune(self):
        ctrl = MetaController.create(quiet(epsilon=1.0, min_levels=2))
        assert step(hier(2), ctrl, grads=[np.zeros((2, 2))] * 2).events == ()

    def test_cooldown(self):
        ctrl = MetaController.create(replace(quiet(tau=0.1), cooldown=5))
        h = hier(1)
        kinds = []
        for t in range(12):
            res = step(replace(h, t=t), ctrl, loss=1.0)
            kinds.append(bool(res.events))
            h = replace(res.hierarchy, l_max=10)
        assert [t for t, k in enumerate(kinds) if k] == [0, 5, 10]

    def test_shift_adds_proximal_level(self):
        ctrl = MetaController.create(quiet(delta_threshold=0.01, window=3))
        h = hier(2)
        rng = np.random.default_rng(0)
        res = None
        for i in range(6):
            res = step(h, ctrl, x=rng.standard_normal(2) + (4.0 if i >= 3 else 0.0))
            if res.events:
                break
        assert res.events[0].via == "proximal"
        assert res.hierarchy.module(3).freq == pytest.approx(h.module(2).freq / 2)

    @given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 0.05)), min_size=1, max_size=40),
           st.integers(0, 2**16))
    def test_never_invalid_and_single_event(self, seq, seed):
        p = replace(MetaParams(), tau=0.5, epsilon=0.03, cooldown=2, window=4, eta_f=0.0)
        ctrl = MetaController.create(p)
        rng = np.random.default_rng(seed)
        h = hier(2)
        last = None
        for t, (loss, gnorm) in enumerate(seq):
            h = replace(h, t=t)
            grads = [np.full((2, 2), gnorm * (i + 1)) for i in range(h.L)]
            res = step(h, ctrl, loss=loss, grads=grads, lss=[loss] * h.L, x=rng.standard_normal(2))
            assert len(res.events) <= 1
            if res.events:
                assert last is None or t - last >= p.cooldown
                last = t
            h = res.hierarchy
            assert hz.validate(h) == []


def test_params_validate():
    MetaParams().validate()
    with pytest.raises(ConfigError):
        MetaParams(gamma=-1.0).validate()
    with pytest.raises(ConfigError):
        MetaParams(min_levels=0).validate()
