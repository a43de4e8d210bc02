import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from vtmpc.model import (
    ControlInput,
    CostWeights,
    ModelError,
    SensorModel,
    StaticMotion,
    TargetSpec,
    TrefoilMotion,
    VehicleState,
    butterworth,
    butterworth_sq,
    heading_cost,
    propagate_reward,
    propagate_state,
    stage_cost,
    target_distance,
    target_phase,
    target_position,
    terminal_cost,
    trefoil_offset,
)

SENSOR = SensorModel(c_b=0.05, n_b=2)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)
small_pos = st.floats(min_value=1e-3, max_value=5.0)


def vec3(lo=-50, hi=50):
    return st.lists(st.floats(min_value=lo, max_value=hi), min_size=3, max_size=3).map(np.array)


class TestButterworth:
    def test_zero_distance(self):
        assert butterworth(0.0, SENSOR) == 1.0

    def test_cutoff_is_half(self):
        assert butterworth(SENSOR.c_b, SENSOR) == pytest.approx(0.5)

    def test_hand_value(self):
        assert butterworth(0.1, SensorModel(c_b=0.05, n_b=2)) == pytest.approx(0.2)

    def test_nonfinite_rejected(self):
        with pytest.raises(ModelError):
            butterworth(np.nan, SENSOR)

    def test_squared_form_matches(self):
        d = np.linspace(0, 2, 101)
        assert_allclose(butterworth_sq(d**2, SENSOR), butterworth(d, SENSOR), rtol=1e-14)

    @given(x1=st.floats(min_value=0, max_value=100), dx=st.floats(min_value=1e-6, max_value=10))
    def test_strictly_decreasing_and_in_range(self, x1, dx):
        f1, f2 = butterworth(x1, SENSOR), butterworth(x1 + dx, SENSOR)
        assert f1 > f2
        assert 0.0 < f2 < f1 <= 1.0

    def test_invalid_sensor(self):
        with pytest.raises(ModelError):
            SensorModel(c_b=-1.0)
        with pytest.raises(ModelError):
            SensorModel(c_b=0.1, n_b=3)


class TestDistance:
    def test_345(self):
        assert target_distance((0, 0, 0), (3, 4, 0)) == pytest.approx(5.0)

    def test_identity(self):
        assert target_distance((1, 2, 3), (1, 2, 3)) == 0.0

    def test_single_axis(self):
        assert target_distance((1, 2, 3), (1, 2, 5)) == pytest.approx(2.0)


class TestPropagateState:
    def test_jerk_from_rest(self):
        x = propagate_state(VehicleState.rest(), ControlInput(j=(6, 0, 0), t_step=1.0))
        assert_allclose(x.a, [6, 0, 0])
        assert_allclose(x.v, [3, 0, 0])
        assert_allclose(x.p, [1, 0, 0])

    def test_pure_drift(self):
        x0 = VehicleState(p=np.zeros(3), v=(2, 0, 0), a=np.zeros(3))
        x = propagate_state(x0, ControlInput(j=np.zeros(3), t_step=0.5))
        assert_allclose(x.p, [1, 0, 0])
        assert_allclose(x.v, [2, 0, 0])

    def test_heading_integration(self):
        x = propagate_state(VehicleState.rest(), ControlInput(j=np.zeros(3), psi_rate=0.4, t_step=0.5))
        assert x.psi == pytest.approx(0.2)

    @settings(max_examples=200)
    @given(p=vec3(), v=vec3(), a=vec3(), j=vec3(), psi=finite, pr=finite,
           t1=small_pos, t2=small_pos)
    def test_semigroup(self, p, v, a, j, psi, pr, t1, t2):
        x0 = VehicleState(p=p, v=v, a=a, psi=psi)
        whole = propagate_state(x0, ControlInput(j=j, psi_rate=pr, t_step=t1 + t2))
        half = propagate_state(propagate_state(x0, ControlInput(j=j, psi_rate=pr, t_step=t1)),
                               ControlInput(j=j, psi_rate=pr, t_step=t2))
        scale = max(1.0, np.max(np.abs(whole.as_array())))
        assert_allclose(half.as_array(), whole.as_array(), rtol=0, atol=1e-12 * scale)

    @settings(max_examples=50)
    @given(p=vec3(), v=vec3(), a=vec3(), j=vec3(), t=small_pos)
    def test_substep_oracle(self, p, v, a, j, t):
        # independent oracle: 1000 explicit euler-on-derivatives substeps of the
        # constant-jerk ODE via exact tiny steps (uses only the recurrences)
        x0 = VehicleState(p=p, v=v, a=a)
        u = ControlInput(j=j, t_step=t)
        n = 1000
        pp, vv, aa = x0.p.copy(), x0.v.copy(), x0.a.copy()
        h = t / n
        for _ in range(n):
            pp = pp + vv * h + 0.5 * aa * h**2 + j * h**3 / 6.0
            vv = vv + aa * h + 0.5 * j * h**2
            aa = aa + j * h
        x = propagate_state(x0, u)
        scale = max(1.0, float(np.max(np.abs(np.concatenate([pp, vv, aa])))))
        assert_allclose(x.p, pp, rtol=0, atol=1e-9 * scale)
        assert_allclose(x.v, vv, rtol=0, atol=1e-9 * scale)
        assert_allclose(x.a, aa, rtol=0, atol=1e-9 * scale)


class TestPropagateReward:
    def test_far_limit(self):
        g = propagate_reward(10.0, 1e9, 0.5, 1.0, SENSOR)
        assert g == pytest.approx(10.5, rel=1e-6)

    def test_full_collection_at_zero(self):
        assert propagate_reward(7.3, 0.0, 0.1, 0.0, SENSOR) == 0.0

    def test_half_at_cutoff(self):
        assert propagate_reward(10.0, SENSOR.c_b, 0.3, 0.0, SENSOR) == pytest.approx(5.0)

    @given(g=st.floats(min_value=0, max_value=100), d=st.floats(min_value=0, max_value=1e4),
           t=st.floats(min_value=0, max_value=10), alpha=st.floats(min_value=0, max_value=5))
    def test_bounds(self, g, d, t, alpha):
        out = propagate_reward(g, d, t, alpha, SENSOR)
        assert 0.0 <= out <= g + alpha * t
        if d == 0:
            assert out == 0.0


class TestCosts:
    def test_heading_aligned(self):
        assert heading_cost((1, 0, 9), 0.0) == pytest.approx(-1.0)
        assert heading_cost((0, 2, -1), math.pi / 2) == pytest.approx(-2.0)

    def test_heading_anti_aligned(self):
        assert heading_cost((1, 0, 0), math.pi) == pytest.approx(1.0)

    @given(vx=finite, vy=finite)
    def test_heading_minimized_at_atan2(self, vx, vy):
        if abs(vx) < 1e-6 and abs(vy) < 1e-6:
            return
        best = heading_cost((vx, vy, 0), math.atan2(vy, vx))
        for psi in np.linspace(-math.pi, math.pi, 37):
            assert best <= heading_cost((vx, vy, 0), psi) + 1e-12

    def test_stage_cost_zeros(self):
        w = CostWeights(k_psi=0.0)
        assert stage_cost([0, 0], 1.0, np.zeros(5), w) == 0.0

    def test_stage_cost_gain_sum(self):
        w = CostWeights(k_psi=0.0)
        assert stage_cost([3, 4], 5.0, np.zeros(5), w) == pytest.approx(7.0)

    def test_stage_cost_quadratic(self):
        w = CostWeights(k_psi=0.0, c_u=[2, 1, 1, 1, 0])
        assert stage_cost([], 0.0, np.array([1, 0, 0, 0, 0.0]), w) == pytest.approx(2.0)

    def test_terminal(self):
        assert terminal_cost((1, 1, 1), (1, 1, 1), 5.0) == 0.0
        assert terminal_cost((3, 0, 0), (0, 0, 0), 2.0) == pytest.approx(6.0)
        assert terminal_cost((9, 9, 9), (0, 0, 0), 0.0) == 0.0


class TestTrefoil:
    def test_phase_zero(self):
        assert_allclose(trefoil_offset(0.0, 0.0), [0, -1, 0], atol=1e-15)

    def test_phase_pi(self):
        assert_allclose(trefoil_offset(math.pi, 0.0), [0, -3, 0], atol=1e-12)

    def test_phase_half_pi(self):
        assert_allclose(trefoil_offset(0.0, math.pi / 2), [1, 2, -3], atol=1e-12)

    @given(t=finite)
    def test_periodic(self, t):
        assert_allclose(trefoil_offset(t, 0.0), trefoil_offset(t + 2 * math.pi, 0.0), atol=1e-9)

    def test_target_phase(self):
        assert target_phase(0, 4) == 0.0
        assert target_phase(1, 4) == pytest.approx(math.pi / 2)
        assert target_phase(3, 3) == pytest.approx(2 * math.pi)
        with pytest.raises(ModelError):
            target_phase(0, 0)


class TestTargetPosition:
    def test_static(self):
        tg = TargetSpec(q0=(1, 2, 3), g0=5.0)
        assert_allclose(target_position(tg, 123.4), [1, 2, 3])

    def test_trefoil_composition(self):
        tg = TargetSpec(q0=(1, 2, 3), g0=5.0, motion=TrefoilMotion(phase=0.0))
        assert_allclose(target_position(tg, 0.0), [1, 1, 3], atol=1e-15)
        tg2 = TargetSpec(q0=(1, 2, 3), g0=5.0, motion=TrefoilMotion(phase=math.pi / 2))
        assert_allclose(target_position(tg2, 0.0), [2, 4, 0], atol=1e-12)

    def test_motion_velocity_fd_consistency(self):
        m = TrefoilMotion(phase=0.3, scale=1.7)
        t = 1.234
        h = 1e-6
        fd = (m.offset(t + h) - m.offset(t - h)) / (2 * h)
        assert_allclose(m.velocity(t), fd, atol=1e-7)

    def test_invalid_specs(self):
        with pytest.raises(ModelError):
            TargetSpec(q0=(0, 0, 0), g0=-1.0)
        with pytest.raises(ModelError):
            TargetSpec(q0=(0, 0, 0), g0=1.0, alpha_g=-0.1)
        StaticMotion()  # smoke
