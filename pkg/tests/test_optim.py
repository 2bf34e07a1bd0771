import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macnet.optim import (
    AdamState,
    EmaState,
    TrainingError,
    adam_step,
    clip_gradients,
    early_stop,
    ema_update,
    global_norm,
)
from macnet.tensor import parameter


class TestClip:
    def test_small_norm_unchanged(self):
        g = [np.array([0.3, 0.4])]
        out, norm = clip_gradients(g, 8.0)
        assert norm == 0.5 and out[0] is g[0]

    def test_three_four_five(self):
        out, norm = clip_gradients([np.array([3.0, 4.0])], 1.0)
        assert norm == 5.0
        np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 10.0))
    def test_norm_bound_and_direction(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        grads = [rng.normal(scale=5, size=s) for s in [(3,), (2, 4), (5,)]]
        out, _ = clip_gradients(grads, max_norm)
        assert global_norm(out) <= max_norm + 1e-12
        a = np.concatenate([g.ravel() for g in grads])
        b = np.concatenate([g.ravel() for g in out])
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(cos - 1) <= 1e-12

    def test_nonpositive_max_rejected(self):
        with pytest.raises(ValueError):
            clip_gradients([np.ones(2)], 0.0)


def scalar_adam(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = parameter(np.array([2.0]))
        adam_step(AdamState(), [p], [np.array([1.0])])
        assert abs(abs(p.data[0] - 2.0) - 1e-4) < 1e-11

    def test_zero_gradient_keeps_params(self):
        p = parameter(np.array([1.0, -2.0]))
        state = AdamState()
        for _ in range(5):
            adam_step(state, [p], [np.zeros(2)])
        assert p.data.tolist() == [1.0, -2.0]

    def test_scalar_trajectory(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=100)
        p = parameter(np.array([0.5]))
        state = AdamState(lr=1e-3)
        for g, ref in zip(grads, scalar_adam(0.5, grads, lr=1e-3)):
            adam_step(state, [p], [np.array([g])])
            assert abs(p.data[0] - ref) <= 1e-12
        assert state.t == 100

    def test_update_sign_opposes_first_moment(self):
        rng = np.random.default_rng(1)
        p = parameter(rng.normal(size=20))
        state = AdamState(lr=1e-2)
        for _ in range(5):
            before = p.data.copy()
            adam_step(state, [p], [rng.normal(size=20)])
            delta = p.data - before
            nz = state.m[0] != 0
            assert np.array_equal(np.sign(delta[nz]), -np.sign(state.m[0][nz]))

    def test_nan_gradient_raises(self):
        with pytest.raises(TrainingError):
            adam_step(AdamState(), [parameter(np.ones(2))], [np.array([1.0, np.nan])])


class TestEma:
    def test_fixed_point(self):
        p = parameter(np.array([1.5, -3.0]))
        ema = EmaState.from_params([("p", p)])
        for _ in range(50):
            ema_update(ema, [("p", p)])
        np.testing.assert_allclose(ema.shadow["p"], p.data, rtol=0, atol=1e-15)

    def test_one_update_from_zero(self):
        p = parameter(np.array([1.0]))
        ema = EmaState(0.999, {"p": np.zeros(1)})
        ema_update(ema, [("p", p)])
        assert abs(ema.shadow["p"][0] - 0.001) < 1e-15

    def test_geometric_convergence(self):
        p = parameter(np.array([2.0]))
        ema = EmaState(0.999, {"p": np.array([-1.0])})
        for k in range(1, 201):
            ema_update(ema, [("p", p)])
            assert abs(abs(ema.shadow["p"][0] - 2.0) - 0.999 ** k * 3.0) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(EmaState(0.9, {"p": np.zeros(2)}), [("p", parameter(np.zeros(3)))])


class TestEarlyStop:
    def test_improving_continues(self):
        assert not early_stop([0.5, 0.6, 0.7], 2).stop

    def test_stale_stops_at_best(self):
        d = early_stop([0.7, 0.6, 0.6], 2)
        assert d.stop and d.best_index == 0 and d.best_value == 0.7

    def test_ties_are_not_improvements(self):
        d = early_stop([0.5, 0.7, 0.7, 0.7], 2)
        assert d.stop and d.best_index == 1

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40, unique=True), st.integers(1, 10))
    def test_strictly_increasing_never_stops(self, values, patience):
        assert not early_stop(sorted(values), patience).stop

    def test_bad_patience(self):
        with pytest.raises(ValueError):
            early_stop([0.1], 0)
