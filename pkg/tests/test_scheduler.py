"""Upper-level crossing NLP and the first-come coordinator.

The oracle for the upper level sweeps the exit time on a fine grid: with
transversality imposed the feasible cubics form a one-parameter family in
``T``, so the smallest feasible ``T`` is the optimum. It shares no code with
the SLSQP path.
"""

import math

import numpy as np
import pytest

from cavplatoon.model import DriverParams, IntersectionGeometry, PathSpec, VehicleLimits
from cavplatoon.scheduler import (Arrival, ArrivalLog, CrossingSchedule, INEQUALITY_NAMES,
                                  build_constraints, consistency_gap, estimate_platoon_exit,
                                  objective_f, schedule_arrival, solve_upper)
from cavplatoon.trajectory import CubicTrajectory

LIM = VehicleLimits(2.0, 20.0, -3.0, 2.0)
DRV = DriverParams(0.5, 0.5, 2.0, 0.3, 0.4, 1.6)
GEO = IntersectionGeometry(150.0, 30.0, 4.0, (PathSpec("n", frozenset({"e"})),
                                              PathSpec("e", frozenset({"n"})), PathSpec("w")))


def sweep_oracle(v0, pm, pf, lim, t_slot=None, grid=np.linspace(1.0, 60.0, 590001)):
    """Smallest feasible exit time over the transversality family (entry at 0, 0)."""
    T = grid
    c3 = (v0 * T - pf) / (2 * T ** 3)
    c2 = -3 * c3 * T
    vT = 1.5 * pf / T - 0.5 * v0
    u0 = 2 * c2
    ok = ((np.maximum(v0, vT) <= lim.v_max + 1e-12) & (np.minimum(v0, vT) >= lim.v_min - 1e-12)
          & (u0 <= lim.u_max + 1e-12) & (u0 >= lim.u_min - 1e-12))
    if t_slot is not None:
        # position at t_slot must not yet have reached p_m
        ts = np.minimum(t_slot, T)
        p_slot = c3 * ts ** 3 + c2 * ts ** 2 + v0 * ts
        ok &= p_slot <= pm + 1e-12
    return float(T[np.argmax(ok)])


@pytest.mark.parametrize("v0,t_slot", [(12.0, None), (12.0, 20.0), (12.0, 14.0), (18.0, None),
                                       (8.0, 25.0)])
def test_against_sweep(v0, t_slot):
    cs = build_constraints((0.0, 0.0, v0), 150.0, 180.0, LIM, t_slot=t_slot)
    sol = solve_upper(None, cs)
    ref = sweep_oracle(v0, 150.0, 180.0, LIM, t_slot)
    assert abs(sol.t_f - ref) <= 2e-4
    assert sol.kkt <= 1e-6
    assert consistency_gap(sol, cs) <= 1e-6


def test_worked_numbers():
    sol = solve_upper(None, build_constraints((0.0, 0.0, 12.0), 150.0, 180.0, LIM))
    assert sol.t_f == pytest.approx(270.0 / 26.0, abs=1e-9)  # terminal speed hits v_max
    assert "speed_upper" in sol.active and sol.multipliers["speed_upper"] > 0
    slot = solve_upper(None, build_constraints((0.0, 0.0, 12.0), 150.0, 180.0, LIM, t_slot=20.0))
    assert slot.t_m == pytest.approx(20.0, abs=1e-9)
    assert "merge_slot" in slot.active and slot.multipliers["merge_slot"] > 0


def test_entry_offset_is_translation_invariant():
    a = solve_upper(None, build_constraints((0.0, 0.0, 12.0), 150.0, 180.0, LIM, t_slot=20.0))
    b = solve_upper(None, build_constraints((7.0, -50.0, 12.0), 100.0, 130.0, LIM, t_slot=27.0))
    assert b.t_f - 7.0 == pytest.approx(a.t_f, abs=1e-8)
    assert np.allclose(b.x[:3], a.x[:3], atol=1e-9)


def test_solution_satisfies_all_constraints():
    cs = build_constraints((0.0, 0.0, 12.0), 150.0, 180.0, LIM, t_slot=14.0)
    sol = solve_upper(None, cs)
    assert np.max(np.abs(cs.h(sol.x))) <= 1e-9
    assert np.max(cs.g(sol.x)) <= 1e-9
    lo, hi = sol.traj.speed_range()
    assert LIM.v_min - 1e-9 <= lo and hi <= LIM.v_max + 1e-9


def test_objective_examples():
    assert objective_f((0.0, 0.0, 15.0, 0.0), 300.0) == pytest.approx(20.0)
    assert objective_f((0.1, -0.5, 10.0, 0.0), 18.8) == pytest.approx(2.0, abs=1e-12)
    assert objective_f(CubicTrajectory(0.0, 0.0, 10.0, 0.0, 5.0, 50.0), 100.0) == pytest.approx(10.0)


def test_vacuous_and_named():
    cs = build_constraints((0.0, 0.0, 12.0), 150.0, 180.0, LIM)
    named = {c.name: c.vacuous for c in cs.inequalities}
    assert tuple(named) == INEQUALITY_NAMES
    assert named["rear_end"] and named["merge_slot"] and named["exit_clearance"]
    assert not named["speed_upper"]
    # aggressive start over a short exit: u(0) = 2 c2 = 6 > u_max, speed stays below 20
    x = np.array([-0.1, 3.0, 12.0, 0.0, 0.5, 1.0])
    vals = cs.named(x)
    assert vals["control_upper"] == pytest.approx(4.0)
    assert vals["rear_end"] == -math.inf
    assert [k for k, v in vals.items() if v > 0 and k in INEQUALITY_NAMES] == ["control_upper"]


def test_geometry_errors():
    with pytest.raises(ValueError, match="geometry"):
        build_constraints((0.0, 0.0, 12.0), 180.0, 150.0, LIM)
    with pytest.raises(ValueError, match="positive"):
        build_constraints((0.0, 0.0, 0.0), 150.0, 180.0, LIM)


def test_platoon_exit_estimate():
    assert estimate_platoon_exit(12.0, 15.0, (), 4.0) == 12.0
    d = DriverParams(0.5, 0.0, 7.0, 0.3, 0.4, 1.6)
    assert estimate_platoon_exit(12.0, 10.0, (d,) * 2, 4.0) == pytest.approx(14.2)
    with pytest.raises(ValueError):
        estimate_platoon_exit(12.0, 0.0, (d,), 4.0)


def arrival(vid, path, t0, v0=12.0, followers=(DRV,)):
    return Arrival(vid, path, t0, -150.0, v0, LIM, followers)


def test_coordinator_first_come_and_disjoint_windows():
    log = ArrivalLog()
    s0 = CrossingSchedule(GEO)
    s1 = schedule_arrival(s0, arrival("a", "n", 0.0), log=log)
    s2 = schedule_arrival(s1, arrival("b", "e", 1.0), log=log)
    assert s0.entries == () and len(s1.entries) == 1  # commit returns a new schedule
    a, b = s2.get("a"), s2.get("b")
    assert s2.entries[0] == s1.entries[0]  # earlier commitment untouched
    assert b.window[0] >= a.window[1] - 1e-7
    assert all(r["kkt"] <= 1e-6 and r["consistency"] <= 1e-6 for r in log.solves)


def test_non_conflicting_path_unaffected():
    s1 = schedule_arrival(CrossingSchedule(GEO), arrival("a", "n", 0.0))
    alone = schedule_arrival(CrossingSchedule(GEO), arrival("w", "w", 1.0))
    both = schedule_arrival(s1, arrival("w", "w", 1.0))
    assert both.get("w").t_f == pytest.approx(alone.get("w").t_f, abs=1e-9)
    assert both.get("w").window[0] < s1.get("a").window[1]  # overlap allowed


def test_same_path_follower_keeps_distance():
    s = schedule_arrival(CrossingSchedule(GEO), arrival("a", "n", 0.0))
    s = schedule_arrival(s, arrival("b", "n", 2.0))
    a, b = s.get("a"), s.get("b")
    tail = a.tail()
    for t in np.linspace(b.t0, b.t_f, 200):
        assert tail.position(t) - b.traj.position(t) >= 2.0 + 4.0 - 1e-6
    assert b.t_f >= a.t_last_f - 1e-9


def test_duplicate_commit_rejected():
    s = schedule_arrival(CrossingSchedule(GEO), arrival("a", "n", 0.0))
    with pytest.raises(ValueError, match="already scheduled"):
        s.commit(s.entries[0])


def test_no_slot_within_horizon():
    from cavplatoon.trajectory import InfeasibleError
    s = schedule_arrival(CrossingSchedule(GEO), arrival("a", "n", 0.0))
    with pytest.raises(InfeasibleError, match="no feasible merging slot"):
        schedule_arrival(s, arrival("b", "e", 0.0), horizon=s.get("a").window[0] + 1.0)
