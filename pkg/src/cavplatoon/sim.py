"""Fixed-step simulation of mixed CAV/HDV traffic with delayed HDV perception."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .carfollowing import (INF, Mode, clamp, classify_mode, following_spacing, platoon_gap,
                           raw_ovm_acceleration)
from .formation import (FormationError, FormationInfo, FormationReport, PlatoonPlan, cav_control,
                        check_platoon_formed, formation_plan)
from .model import CAV, FORMATION, HDV, IntersectionGeometry, RoadGeometry, Scenario, VehicleState
from .scheduler import (Arrival, ArrivalLog, ConvergenceError, CrossingSchedule, build_constraints,
                        consistency_gap, schedule_arrival, solve_upper)
from .trajectory import CubicTrajectory, InfeasibleError

CROSS_EPS = 1e-9


class HistoryBuffer:
    """Recent uniformly spaced samples of one vehicle, queried with linear interpolation."""

    def __init__(self, initial: VehicleState, dt: float, span: float):
        self.initial = initial
        self.dt = dt
        n = int(math.ceil(span / dt)) + 3
        self._t: deque[float] = deque(maxlen=n)
        self._p: deque[float] = deque(maxlen=n)
        self._v: deque[float] = deque(maxlen=n)
        self._u: deque[float] = deque(maxlen=n)
        self.append(initial.time, initial.position, initial.speed, initial.accel)

    def append(self, t: float, p: float, v: float, u: float = 0.0) -> None:
        if self._t and not t > self._t[-1]:
            raise ValueError("history samples must be strictly increasing in time")
        self._t.append(t)
        self._p.append(p)
        self._v.append(v)
        self._u.append(u)

    @property
    def now(self) -> float:
        return self._t[-1]

    def lookup(self, t_query: float) -> VehicleState:
        if t_query > self._t[-1] + 1e-12:
            raise ValueError(f"query {t_query} is beyond current time {self._t[-1]}")
        if t_query <= self.initial.time:
            return self.initial
        if t_query < self._t[0] - 1e-12:
            raise ValueError(f"query {t_query} is older than the retained history")
        x = (t_query - self._t[0]) / self.dt
        j = int(math.floor(x + 1e-9))
        if j >= len(self._t) - 1:
            j = len(self._t) - 1
            return VehicleState(self._p[j], self._v[j], self._u[j], self._t[j])
        fr = x - j
        if fr < 1e-9:
            return VehicleState(self._p[j], self._v[j], self._u[j], self._t[j])
        p = self._p[j] + (self._p[j + 1] - self._p[j]) * fr
        v = self._v[j] + (self._v[j + 1] - self._v[j]) * fr
        return VehicleState(p, v, self._u[j], t_query)


def lookup_delayed(buf: HistoryBuffer, t_query: float) -> VehicleState:
    return buf.lookup(t_query)


class _View:
    def __init__(self, own: HistoryBuffer, pred: HistoryBuffer | None):
        self._own, self._pred = own, pred

    def own(self, t):
        return self._own.lookup(t)

    def predecessor(self, t):
        return None if self._pred is None else self._pred.lookup(t)


@dataclass
class TrajectoryLog:
    """Uniform-grid record of a run. Row ``k`` holds time ``k * dt``; ``u`` columns
    hold the control applied over ``[t, t + dt]``."""

    dt: float
    ids: list[str]
    roles: list[str]
    paths: list[str | None]
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    u_applied: np.ndarray
    u_raw: np.ndarray
    delta: np.ndarray
    spacing: np.ndarray
    mode: np.ndarray
    events: list[dict] = field(default_factory=list)
    plan: PlatoonPlan | None = None
    formation: FormationReport | None = None
    schedule: CrossingSchedule | None = None
    solves: list[dict] = field(default_factory=list)
    failure: dict | None = None

    @property
    def n_vehicles(self) -> int:
        return len(self.ids)

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def column(self, vehicle_id: str) -> int:
        return self.ids.index(vehicle_id)

    def event(self, kind: str, vehicle_id: str | None = None) -> float | None:
        for e in self.events:
            if e["kind"] == kind and (vehicle_id is None or e["vehicle_id"] == vehicle_id):
                return e["t"]
        return None

    def truncate(self, n: int) -> None:
        for name in ("t", "p", "v", "u_applied", "u_raw", "delta", "spacing", "mode"):
            setattr(self, name, getattr(self, name)[:n])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "vehicle_id", "role", "p", "v", "u_applied", "u_raw", "delta",
                    "spacing", "mode"])
        f = _fmt
        for k in range(self.n_samples):
            for i in range(self.n_vehicles):
                w.writerow([f(self.t[k]), self.ids[i], self.roles[i], f(self.p[k, i]),
                            f(self.v[k, i]), f(self.u_applied[k, i]), f(self.u_raw[k, i]),
                            f(self.delta[k, i]), f(self.spacing[k, i]), self.mode[k, i]])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "%.9g" % x


_MODE_NA = "n/a"


class World:
    """Mutable simulation state advanced by :func:`step`."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        n = sc.n_vehicles
        self.dt = sc.sim.dt
        self.k = 0
        self.p = np.array([v.initial.position for v in sc.vehicles], float)
        self.v = np.array([v.initial.speed for v in sc.vehicles], float)
        self.pred = sc.predecessors()
        eta_bar = max([v.driver.eta_bar for v in sc.vehicles if v.driver] + [0.0])
        span = eta_bar + 2 * self.dt
        self.buffers = [HistoryBuffer(VehicleState(v.initial.position, v.initial.speed, 0.0, 0.0),
                                      self.dt, span) for v in sc.vehicles]
        self.views = [_View(self.buffers[i], None if self.pred[i] is None else self.buffers[self.pred[i]])
                      for i in range(n)]
        # per-CAV control source: None (car-following / cruise), a plan, or a cubic
        self.plan: dict[int, PlatoonPlan] = {}
        self.cubic: dict[int, CubicTrajectory] = {}
        self.released: set[int] = set()

    @property
    def t(self) -> float:
        return self.k * self.dt

    def controls(self) -> tuple[np.ndarray, np.ndarray]:
        t = self.t
        raw = np.zeros(self.sc.n_vehicles)
        for i, spec in enumerate(self.sc.vehicles):
            if i in self.plan and i not in self.released:
                raw[i] = cav_control(t, self.plan[i])
            elif i in self.cubic and i not in self.released:
                raw[i] = self.cubic[i].accel(t)
            elif spec.driver is not None:
                raw[i] = raw_ovm_acceleration(self.views[i], t, spec.driver, spec.limits.v_max,
                                              self.sc.vehicle_length)
            else:
                raw[i] = 0.0
        applied = np.array([clamp(u, s.limits.u_min, s.limits.u_max)
                            for u, s in zip(raw, self.sc.vehicles)])
        return raw, applied

    def gaps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.sc.n_vehicles
        delta = np.full(n, INF)
        spacing = np.full(n, math.nan)
        mode = np.empty(n, dtype=object)
        l_c = self.sc.vehicle_length
        for i, spec in enumerate(self.sc.vehicles):
            j = self.pred[i]
            if spec.driver is None:
                mode[i] = _MODE_NA if j is not None else Mode.FREE_FLOW.value
                if j is not None:
                    delta[i] = math.nan
                continue
            spacing[i] = following_spacing(self.v[i], spec.driver)
            d = platoon_gap(None if j is None else self.p[j], self.p[i], self.v[i], spec.driver, l_c)
            delta[i] = d
            mode[i] = classify_mode(d).value
        return delta, spacing, mode


def step(world: World, dt: float | None = None, u: np.ndarray | None = None) -> World:
    """Advance one semi-implicit Euler step with controls ``u`` (computed if omitted)."""
    dt = world.dt if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    if u is None:
        u = world.controls()[1]
    for i, spec in enumerate(world.sc.vehicles):
        lim = spec.limits
        lo = lim.v_min if world.v[i] >= lim.v_min else 0.0
        world.v[i] = min(max(world.v[i] + u[i] * dt, lo), lim.v_max)
        world.p[i] += world.v[i] * dt
    world.k += 1
    t = world.t
    for i in range(world.sc.n_vehicles):
        world.buffers[i].append(t, world.p[i], world.v[i], u[i])
    return world


def _zones(sc: Scenario) -> list[tuple[str, str, float]]:
    """(entry event, exit event, boundary) crossings tracked per vehicle."""
    g = sc.geometry
    if isinstance(g, RoadGeometry):
        return [("buffer_entry", "", 0.0), ("control_entry", "", g.control_entry),
                ("control_exit", "", g.control_exit)]
    return [("control_entry", "", 0.0), ("merge_entry", "", g.merge_entry),
            ("merge_exit", "", g.merge_exit)]


def _snap(t: float, dt: float) -> float:
    """First grid time at or after ``t``."""
    k = math.ceil(t / dt - 1e-9)
    return k * dt


def run_scenario(sc: Scenario) -> TrajectoryLog:
    n = sc.n_vehicles
    dt, horizon = sc.sim.dt, sc.sim.horizon
    steps = int(round(horizon / dt))
    shape = (steps + 1, n)
    log = TrajectoryLog(
        dt=dt, ids=[v.id for v in sc.vehicles], roles=[v.role for v in sc.vehicles],
        paths=[v.path for v in sc.vehicles], t=np.arange(steps + 1) * dt,
        p=np.zeros(shape), v=np.zeros(shape), u_applied=np.zeros(shape), u_raw=np.zeros(shape),
        delta=np.zeros(shape), spacing=np.zeros(shape), mode=np.empty(shape, dtype=object))
    world = World(sc)
    zones = _zones(sc)
    crossed = [[p0 >= b - CROSS_EPS for (_, _, b) in zones] for p0 in world.p]
    coupled = [False] * n
    schedule = CrossingSchedule(sc.geometry, sc.sim.headway) if sc.kind != FORMATION else None
    arrivals = ArrivalLog()
    lanes = sc.lanes()

    def ev(t, vid, kind, **extra):
        log.events.append({"t": t, "vehicle_id": vid, "kind": kind, **extra})

    for k in range(steps + 1):
        t = world.t
        # zone crossings: first grid sample at or past each boundary
        entering = []
        for i, spec in enumerate(sc.vehicles):
            for z, (name, _, b) in enumerate(zones):
                if not crossed[i][z] and world.p[i] >= b - CROSS_EPS:
                    crossed[i][z] = True
                    ev(t, spec.id, name)
                    if name == "control_entry" and spec.role == CAV:
                        entering.append(i)
        delta, spacing, mode = world.gaps()
        for i in range(n):
            if sc.vehicles[i].role == HDV and not coupled[i] and delta[i] <= 0:
                coupled[i] = True
                ev(t, sc.vehicles[i].id, "coupled")

        try:
            if sc.kind == FORMATION:
                for i in entering:
                    _start_formation(sc, world, i, lanes, log, ev)
            else:
                entering.sort(key=lambda i: (sc.vehicles[i].path, sc.vehicles[i].id))
                for i in entering:
                    schedule = _schedule_cav(sc, world, i, lanes, schedule, arrivals, ev)
        except (InfeasibleError, FormationError, ConvergenceError) as exc:
            kind = "nonconvergence" if isinstance(exc, ConvergenceError) else "infeasible"
            log.failure = {"kind": kind, "message": str(exc), "t": t}
            log.truncate(k)
            break

        # CAVs leaving the control zone stop tracking their plan
        for i in list(world.cubic):
            if i not in world.released and t > world.cubic[i].tf + 1e-12:
                world.released.add(i)

        raw, applied = world.controls()
        log.p[k], log.v[k] = world.p, world.v
        log.u_raw[k], log.u_applied[k] = raw, applied
        log.delta[k], log.spacing[k], log.mode[k] = delta, spacing, mode
        if k < steps:
            step(world, dt, applied)

    log.schedule = schedule
    log.solves = arrivals.solves
    if log.plan is not None and log.failure is None:
        t_p = _snap(log.plan.t_p, dt)
        if t_p + sc.sim.window <= log.t[-1] + 1e-9:
            lane = lanes[None]
            log.formation = check_platoon_formed(log, t_p, sc.sim.tol_v, sc.sim.window,
                                                 sc.sim.tol_delta, vehicles=lane)
        else:
            log.formation = FormationReport(formed=False, failures=["not formed within horizon"])
    log.events.sort(key=lambda e: (e["t"], log.ids.index(e["vehicle_id"]), e["kind"]))
    return log


def _start_formation(sc, world, i, lanes, log, ev):
    mode = sc.sim.transition_time
    if mode is None:
        return
    lane = lanes[None]
    nxt = lane.index(i) + 1
    if nxt >= len(lane) or sc.vehicles[lane[nxt]].role != HDV:
        return
    info = formation_info(sc, world, i)
    plan = formation_plan(info) if mode == "minimize" else formation_plan(info, tau_t=float(mode))
    log.plan = plan
    if not plan.feasible.ok:
        raise FormationError(f"infeasible plan: {plan.feasible.reason}")
    world.plan[i] = plan
    cid = sc.vehicles[i].id
    ev(_snap(plan.t_s, world.dt), cid, "transition_end", planned=plan.t_s)
    ev(_snap(plan.t_p, world.dt), cid, "formation", planned=plan.t_p)


def _schedule_cav(sc, world, i, lanes, schedule, arrivals, ev):
    spec = sc.vehicles[i]
    lane = lanes[spec.path]
    followers = []
    for j in lane[lane.index(i) + 1:]:
        if sc.vehicles[j].role != HDV:
            break
        followers.append(sc.vehicles[j].driver)
    s0 = spec.driver.s0 if spec.driver is not None else (followers[0].s0 if followers else 2.0)
    arrival = Arrival(vehicle_id=spec.id, path=spec.path, t0=world.t, p0=float(world.p[i]),
                      v0=float(world.v[i]), limits=spec.limits, followers=tuple(followers), s0=s0)
    schedule = schedule_arrival(schedule, arrival, horizon=sc.sim.horizon, log=arrivals)
    entry = schedule.get(spec.id)
    world.cubic[i] = entry.traj
    ev(world.t, spec.id, "scheduled", t_m=entry.t_m, t_f=entry.t_f, t_last_f=entry.t_last_f)
    return schedule


# --- safety and metrics -----------------------------------------------------------

@dataclass
class SafetyReport:
    rear_end: list[dict] = field(default_factory=list)
    lateral: list[dict] = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return not self.rear_end and not self.lateral

    def to_dict(self, limit: int = 50) -> dict:
        return {"safe": self.safe, "rear_end_count": len(self.rear_end),
                "lateral_count": len(self.lateral), "rear_end": self.rear_end[:limit],
                "lateral": self.lateral[:limit]}


def safety_monitor(log: TrajectoryLog, geometry: RoadGeometry | IntersectionGeometry) -> SafetyReport:
    rep = SafetyReport()
    l_c = geometry.vehicle_length
    lanes: dict[Any, list[int]] = {}
    for i, path in enumerate(log.paths):
        lanes.setdefault(path, []).append(i)
    for idx in lanes.values():
        for a, b in zip(idx, idx[1:]):
            gap = log.p[:, a] - log.p[:, b] - l_c
            for k in np.flatnonzero(gap <= 0):
                rep.rear_end.append({"t": float(log.t[k]), "leader": log.ids[a],
                                     "follower": log.ids[b], "gap": float(gap[k])})
    if isinstance(geometry, IntersectionGeometry):
        lo, hi = geometry.merge_entry, geometry.merge_exit
        inside = (log.p > lo) & (log.p - l_c < hi)
        n = log.n_vehicles
        for a in range(n):
            for b in range(a + 1, n):
                if not geometry.conflicting(log.paths[a], log.paths[b]):
                    continue
                for k in np.flatnonzero(inside[:, a] & inside[:, b]):
                    rep.lateral.append({"t": float(log.t[k]), "a": log.ids[a], "b": log.ids[b]})
    rep.rear_end.sort(key=lambda r: r["t"])
    rep.lateral.sort(key=lambda r: r["t"])
    return rep


@dataclass
class Metrics:
    travel_time: dict[str, float | None]
    energy: dict[str, float]
    formation_time: float | None
    min_gap: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"travel_time": self.travel_time, "energy": self.energy,
                "formation_time": self.formation_time, "min_gap": self.min_gap}


def control_energy(t: np.ndarray, u: np.ndarray) -> float:
    """``0.5 * integral of u^2`` by the trapezoidal rule."""
    if len(t) < 2:
        return 0.0
    y = u * u
    return 0.5 * float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))


def compute_metrics(log: TrajectoryLog, geometry=None) -> Metrics:
    start, end = ("control_entry", "control_exit")
    if any(e["kind"] == "merge_exit" for e in log.events) or (
            isinstance(geometry, IntersectionGeometry)):
        end = "merge_exit"
    travel, energy, gaps = {}, {}, {}
    l_c = None if geometry is None else geometry.vehicle_length
    lanes: dict[Any, list[int]] = {}
    for i, path in enumerate(log.paths):
        lanes.setdefault(path, []).append(i)
    pred = {b: a for idx in lanes.values() for a, b in zip(idx, idx[1:])}
    for i, vid in enumerate(log.ids):
        a, b = log.event(start, vid), log.event(end, vid)
        travel[vid] = None if a is None or b is None else b - a
        energy[vid] = control_energy(log.t, log.u_applied[:, i])
        if i in pred and l_c is not None:
            gaps[vid] = float(np.min(log.p[:, pred[i]] - log.p[:, i] - l_c))
        else:
            gaps[vid] = None
    t_p = log.event("formation")
    t_c = None
    if t_p is not None:
        cav = next(e["vehicle_id"] for e in log.events if e["kind"] == "formation")
        t_c = log.event("control_entry", cav)
    form = None if t_p is None or t_c is None else t_p - t_c
    return Metrics(travel, energy, form, gaps)


# --- single solves outside a run -------------------------------------------------

def solve_single_crossing(geometry: IntersectionGeometry, t0: float, v0: float, limits,
                          t_slot: float | None = None):
    """Convenience wrapper: the upper-level crossing for one isolated CAV."""
    cs = build_constraints((t0, 0.0, v0), geometry.merge_entry, geometry.merge_exit, limits,
                           t_slot=t_slot)
    sol = solve_upper(None, cs)
    return sol, consistency_gap(sol, cs)


def advance_to_control_entry(sc: Scenario) -> World:
    """Simulate a formation scenario up to the lead CAV's control-zone entry."""
    if sc.kind != FORMATION:
        raise ValueError("wrong scenario kind")
    world = World(sc)
    lead = sc.lanes()[None][0]
    steps = int(round(sc.sim.horizon / sc.sim.dt))
    boundary = sc.geometry.control_entry - CROSS_EPS
    while world.p[lead] < boundary:
        if world.k >= steps:
            raise FormationError("CAV does not reach the control zone within the horizon")
        step(world)
    return world


def formation_info(sc: Scenario, world: World, cav: int | None = None) -> FormationInfo:
    """What the CAV knows at the current instant about the HDVs it leads."""
    lane = sc.lanes()[None]
    cav = lane[0] if cav is None else cav
    tail = []
    for j in lane[lane.index(cav) + 1:]:
        if sc.vehicles[j].role != HDV:
            break
        tail.append(j)
    if not tail:
        raise FormationError("no trailing HDVs to platoon")
    geo = sc.geometry
    t = world.t
    return FormationInfo(
        t_c=t, states=tuple(VehicleState(world.p[j], world.v[j], 0.0, t) for j in [cav] + tail),
        drivers=tuple(sc.vehicles[j].driver for j in tail), limits=sc.vehicles[cav].limits,
        v_max=sc.vehicles[cav].limits.v_max, l_c=geo.vehicle_length,
        room=geo.control_exit - world.p[cav], entry_tol=sc.sim.entry_tol)
