"""Transition relation, feasibility window and formation checks."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavplatoon.formation import (FormationError, FormationInfo, PlatoonPlan, Feasibility,
                                  cav_control, check_platoon_formed, cumulative_gap,
                                  formation_plan, max_transition_for_zone, min_feasible_transition,
                                  solve_transition_control, solve_transition_duration)
from cavplatoon.model import DriverParams, VehicleLimits, VehicleState

DRV = DriverParams(0.5, 0.5, 2.0, 0.3, 0.4, 1.6)
LIM = VehicleLimits(1.0, 20.0, -3.0, 2.0)


def test_transition_control_examples():
    assert solve_transition_control(8.0, 4.0) == -1.0
    assert solve_transition_control(10.0, 5.0) == -0.8
    assert abs(solve_transition_control(8.0, 1e6)) < 1e-10
    with pytest.raises(FormationError, match="already coupled"):
        solve_transition_control(0.0, 4.0)


def test_transition_duration_examples():
    assert solve_transition_duration(8.0, -1.0) == 4.0
    assert solve_transition_duration(2.0, -4.0) == 1.0
    with pytest.raises(FormationError, match="requires deceleration"):
        solve_transition_duration(8.0, 0.5)


def test_min_feasible_examples():
    assert min_feasible_transition(4.0, VehicleLimits(4.0, 20, -2.0, 2), 12.0) == 2.0
    assert min_feasible_transition(6.0, VehicleLimits(5.0, 20, -3.0, 2), 15.0) == 2.0
    tau = min_feasible_transition(4.0, VehicleLimits(4.0, 20, -2.0, 2), 12.0)
    assert solve_transition_control(4.0, tau) == -2.0
    with pytest.raises(FormationError, match="no feasible deceleration window"):
        min_feasible_transition(4.0, LIM, 1.0)


@given(st.floats(0.1, 50), st.floats(0.1, 20))
def test_round_trip(delta, tau):
    back = solve_transition_duration(delta, solve_transition_control(delta, tau))
    assert abs(back - tau) <= 1e-12 * tau


@given(st.floats(1, 50), st.floats(-6, -0.5), st.floats(0.5, 10), st.floats(12, 30))
@settings(max_examples=200)
def test_bound_consistency(delta, u_min, v_min, v1):
    lim = VehicleLimits(v_min, 40.0, u_min, 2.0)
    lb = min_feasible_transition(delta, lim, v1)
    for tau in (lb, 1.5 * lb, 3 * lb):
        u = solve_transition_control(delta, tau)
        assert u >= u_min * (1 + 1e-12) and v1 + u * tau >= v_min * (1 - 1e-12)
    u = solve_transition_control(delta, 0.999 * lb)
    assert u < u_min or v1 + u * 0.999 * lb < v_min


@given(st.floats(1, 30), st.floats(5, 25), st.floats(0.5, 3), st.floats(100, 1000))
def test_zone_bound_is_tight(delta, v1, tau_s, room):
    tau = max_transition_for_zone(delta, v1, tau_s, room)
    covered = v1 * (tau + tau_s) - delta - 2 * delta * tau_s / tau
    assert covered == pytest.approx(room, rel=1e-9)


def plan(u_p=-1.0, t_c=2.0, tau_t=4.0, tau_s=2.0):
    return PlatoonPlan(u_p, tau_t, tau_s, t_c, t_c + tau_t, t_c + tau_t + tau_s, Feasibility(True))


def test_cav_control_branches():
    p = plan()
    assert cav_control(2.0, p) == -1.0
    assert cav_control(6.0, p) == -1.0
    assert cav_control(6.0 + 1e-9, p) == 0.0
    with pytest.raises(ValueError):
        cav_control(1.0, p)


def test_cumulative_gap_examples():
    s = lambda p, v=20.0: VehicleState(p, v)
    drv12 = DriverParams(0.5, 0.5, 2.0, 0.3, 0.4, 1.6)  # s = 12 at 20 m/s
    assert cumulative_gap([s(100), s(84)], [drv12], 4.0) == 0.0
    assert cumulative_gap([s(100), s(80), s(60)], [drv12, drv12], 4.0) == 8.0


def info(delta2=8.0, v=20.0, room=600.0, n_hdv=1):
    states = [VehicleState(40.0, v)]
    for _ in range(n_hdv):
        states.append(VehicleState(states[-1].position - (delta2 + 0.5 * v + 2 + 4), v))
    return FormationInfo(2.0, tuple(states), (DRV,) * n_hdv, LIM, 20.0, 4.0, room)


def test_formation_plan_requested_duration():
    p = formation_plan(info(), tau_t=4.0)
    assert p.u_p == pytest.approx(-1.0, abs=1e-12)
    assert (p.t_s, p.tau_s, p.t_p) == (6.0, 2.0, 8.0)
    assert p.feasible.ok and p.v_eq == pytest.approx(16.0)


def test_formation_plan_minimize_and_target():
    p = formation_plan(info())
    assert p.tau_t == min_feasible_transition(8.0, LIM, 20.0)
    q = formation_plan(info(), target_tp=8.0)
    assert q.tau_t == pytest.approx(4.0)


def test_formation_plan_errors():
    with pytest.raises(FormationError, match="already coupled"):
        formation_plan(info(delta2=0.0))
    with pytest.raises(FormationError, match="entry condition"):
        formation_plan(info(v=15.0))
    with pytest.raises(FormationError, match="control-zone length"):
        formation_plan(info(room=10.0))


def test_formation_plan_flags_infeasible_request():
    p = formation_plan(info(), tau_t=2.0)  # u_p = -4 < u_min
    assert not p.feasible.ok and "u_min" in p.feasible.reason


def fake_log(v, delta):
    t = np.arange(v.shape[0]) * 0.1
    return SimpleNamespace(t=t, v=v, delta=delta, n_vehicles=v.shape[1], ids=["cav", "hdv"])


def test_check_formed_cases():
    n = 101
    v = np.full((n, 2), 16.0)
    ok = fake_log(v, np.column_stack([np.full(n, np.inf), np.full(n, -0.3)]))
    assert check_platoon_formed(ok, 0.0, window=10.0).formed

    free = fake_log(v, np.column_stack([np.full(n, np.inf), np.full(n, 0.5)]))
    rep = check_platoon_formed(free, 0.0, window=10.0)
    assert not rep.formed and any("hdv" in f for f in rep.failures)

    drift = fake_log(v, np.column_stack([np.full(n, np.inf), -1.0 + 0.01 * np.arange(n)]))
    assert not check_platoon_formed(drift, 0.0, window=10.0).formed

    with pytest.raises(ValueError, match="horizon"):
        check_platoon_formed(ok, 5.0, window=10.0)
