"""Domain types, scenario description and validation.

Positions are front-bumper positions along a lane. Formation scenarios
measure them from the buffer-zone entry, intersection scenarios from the
control-zone entry of each approach path. All quantities are SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

FORMATION = "platoon-formation"
INTERSECTION = "intersection"
CAV = "CAV"
HDV = "HDV"


class ScenarioError(ValueError):
    """Raised when a scenario document is malformed or violates an invariant."""


@dataclass(frozen=True)
class VehicleState:
    position: float
    speed: float
    accel: float = 0.0
    time: float = 0.0


@dataclass(frozen=True)
class VehicleLimits:
    v_min: float
    v_max: float
    u_min: float
    u_max: float

    def check(self) -> None:
        if not self.v_min > 0:
            raise ScenarioError(f"v_min must be positive, got {self.v_min}")
        if not self.v_min < self.v_max:
            raise ScenarioError("v_min must be below v_max")
        if not (self.u_min < 0 < self.u_max):
            raise ScenarioError("acceleration limits must satisfy u_min < 0 < u_max")


@dataclass(frozen=True)
class DriverParams:
    """Optimal-velocity driver: sensitivity ``alpha`` [1/s], desired time gap
    ``rho`` [s], standstill distance ``s0`` [m], perception delay ``eta`` and
    its bound ``eta_bar`` [s], and response time ``tau_r`` [s]."""

    alpha: float
    rho: float
    s0: float
    eta: float
    eta_bar: float
    tau_r: float

    def check(self) -> None:
        if not self.alpha > 0:
            raise ScenarioError("alpha must be positive")
        if self.rho < 0:
            raise ScenarioError("rho must be non-negative")
        if not self.s0 > 0:
            raise ScenarioError("s0 must be positive")
        if self.eta < 0:
            raise ScenarioError("eta must be non-negative")
        if self.eta > self.eta_bar:
            raise ScenarioError("eta exceeds eta_bar")
        if not self.tau_r > 0:
            raise ScenarioError("tau_r must be positive")


@dataclass(frozen=True)
class RoadGeometry:
    L_b: float
    L_c: float
    vehicle_length: float

    @property
    def total_length(self) -> float:
        return self.L_b + self.L_c

    @property
    def control_entry(self) -> float:
        return self.L_b

    @property
    def control_exit(self) -> float:
        return self.L_b + self.L_c

    def check(self) -> None:
        if not (self.L_b > 0 and self.L_c > 0 and self.vehicle_length > 0):
            raise ScenarioError("L_b, L_c and vehicle_length must be positive")


@dataclass(frozen=True)
class PathSpec:
    id: str
    conflicts: frozenset[str] = frozenset()


@dataclass(frozen=True)
class IntersectionGeometry:
    S_c: float
    S_m: float
    vehicle_length: float
    paths: tuple[PathSpec, ...]

    @property
    def merge_entry(self) -> float:
        return self.S_c

    @property
    def merge_exit(self) -> float:
        return self.S_c + self.S_m

    def path(self, path_id: str) -> PathSpec:
        for p in self.paths:
            if p.id == path_id:
                return p
        raise KeyError(path_id)

    def conflicting(self, a: str, b: str) -> bool:
        return b in self.path(a).conflicts

    def check(self) -> None:
        if not (self.S_c > 0 and self.S_m > 0 and self.vehicle_length > 0):
            raise ScenarioError("S_c, S_m and vehicle_length must be positive")
        ids = [p.id for p in self.paths]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate path ids")
        for p in self.paths:
            if p.id in p.conflicts:
                raise ScenarioError(f"path {p.id!r} conflicts with itself")
            for q in p.conflicts:
                if q not in ids:
                    raise ScenarioError(f"path {p.id!r} conflicts with unknown path {q!r}")
                if p.id not in self.path(q).conflicts:
                    raise ScenarioError(f"conflict relation not symmetric for {p.id!r}/{q!r}")


@dataclass(frozen=True)
class VehicleSpec:
    id: str
    role: str
    initial: VehicleState
    limits: VehicleLimits
    driver: DriverParams | None = None
    path: str | None = None


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``transition_time`` selects the CAV formation plan: a number requests that
    platoon transition duration, ``"minimize"`` uses the smallest feasible one
    and ``None`` leaves the CAV uncontrolled (cruising).
    """

    dt: float = 0.01
    horizon: float = 40.0
    transition_time: float | str | None = "minimize"
    tol_v: float = 0.1
    tol_delta: float = 0.05
    window: float = 5.0
    entry_tol: float = 0.1
    headway: float = 1.5


@dataclass(frozen=True)
class Scenario:
    kind: str
    geometry: RoadGeometry | IntersectionGeometry
    vehicles: tuple[VehicleSpec, ...]
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def vehicle_length(self) -> float:
        return self.geometry.vehicle_length

    def lanes(self) -> dict[str | None, list[int]]:
        """Vehicle indices grouped by lane, leader first."""
        out: dict[str | None, list[int]] = {}
        for i, v in enumerate(self.vehicles):
            out.setdefault(v.path, []).append(i)
        return out

    def predecessors(self) -> list[int | None]:
        pred: list[int | None] = [None] * self.n_vehicles
        for idx in self.lanes().values():
            for a, b in zip(idx, idx[1:]):
                pred[b] = a
        return pred


def validate_scenario(raw: Scenario) -> Scenario:
    """Check every invariant of ``raw`` and return it unchanged if valid."""
    if raw.kind not in (FORMATION, INTERSECTION):
        raise ScenarioError(f"unknown scenario kind {raw.kind!r}")
    if raw.kind == FORMATION and not isinstance(raw.geometry, RoadGeometry):
        raise ScenarioError("platoon-formation scenarios need road geometry")
    if raw.kind == INTERSECTION and not isinstance(raw.geometry, IntersectionGeometry):
        raise ScenarioError("intersection scenarios need intersection geometry")
    raw.geometry.check()

    s = raw.sim
    if not s.dt > 0:
        raise ScenarioError("dt must be positive")
    if not s.horizon > 0:
        raise ScenarioError("horizon must be positive")
    if isinstance(s.transition_time, str) and s.transition_time != "minimize":
        raise ScenarioError("transition_time must be a number, 'minimize' or null")
    if isinstance(s.transition_time, (int, float)) and not s.transition_time > 0:
        raise ScenarioError("transition_time must be positive")

    if not raw.vehicles:
        raise ScenarioError("scenario has no vehicles")
    ids = [v.id for v in raw.vehicles]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate vehicle ids")
    for v in raw.vehicles:
        if v.role not in (CAV, HDV):
            raise ScenarioError(f"vehicle {v.id!r}: unknown role {v.role!r}")
        v.limits.check()
        if v.role == HDV and v.driver is None:
            raise ScenarioError(f"HDV {v.id!r} without DriverParams")
        if v.driver is not None:
            v.driver.check()
        if v.initial.speed < 0:
            raise ScenarioError(f"vehicle {v.id!r}: negative speed")
        if raw.kind == INTERSECTION:
            if v.path is None:
                raise ScenarioError(f"vehicle {v.id!r} has no path")
            try:
                raw.geometry.path(v.path)
            except KeyError:
                raise ScenarioError(f"vehicle {v.id!r}: unknown path {v.path!r}") from None
        elif v.path is not None:
            raise ScenarioError("formation scenarios are single-lane; drop 'path'")

    l_c = raw.vehicle_length
    for lane in raw.lanes().values():
        if raw.vehicles[lane[0]].role != CAV:
            raise ScenarioError("each lane must be led by a CAV")
        for a, b in zip(lane, lane[1:]):
            pa = raw.vehicles[a].initial.position
            pb = raw.vehicles[b].initial.position
            if pa == pb:
                raise ScenarioError(
                    f"overlapping positions: {raw.vehicles[a].id!r} and {raw.vehicles[b].id!r}")
            if pb > pa:
                raise ScenarioError("vehicles must be listed leader first (decreasing positions)")
            if pa - pb - l_c <= 0:
                raise ScenarioError(
                    f"overlapping positions: {raw.vehicles[a].id!r} and {raw.vehicles[b].id!r}")
    return raw


# --- structured-text (JSON) codec -------------------------------------------

_TOP_KEYS = {"kind", "geometry", "vehicles", "sim"}


def _build(cls, data: Mapping[str, Any], where: str, **override):
    if not isinstance(data, Mapping):
        raise ScenarioError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    kwargs.update(override)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def scenario_from_dict(doc: Mapping[str, Any]) -> Scenario:
    """Parse a scenario document and validate it.

    ``sim`` may carry ``default_limits`` and ``default_driver`` objects that
    vehicles inherit when they omit ``limits``/``driver`` (drivers are only
    inherited by HDVs).
    """
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown top-level keys {sorted(unknown)}")
    missing = {"kind", "geometry", "vehicles"} - set(doc)
    if missing:
        raise ScenarioError(f"missing keys {sorted(missing)}")

    kind = doc["kind"]
    geo = dict(doc["geometry"])
    if kind == INTERSECTION:
        paths = tuple(
            _build(PathSpec, p, "geometry.paths", conflicts=frozenset(p.get("conflicts", ())))
            for p in geo.pop("paths", ())
        )
        geometry = _build(IntersectionGeometry, geo, "geometry", paths=paths)
    else:
        geometry = _build(RoadGeometry, geo, "geometry")

    sim_doc = dict(doc.get("sim", {}))
    default_limits = sim_doc.pop("default_limits", None)
    default_driver = sim_doc.pop("default_driver", None)
    sim = _build(SimConfig, sim_doc, "sim")

    vehicles = []
    for k, v in enumerate(doc["vehicles"]):
        v = dict(v)
        where = f"vehicles[{k}]"
        lim = v.pop("limits", default_limits)
        if lim is None:
            raise ScenarioError(f"{where}: no limits given")
        drv = v.pop("driver", default_driver if v.get("role") == HDV else None)
        state = v.pop("state", None)
        if state is None:
            raise ScenarioError(f"{where}: no state given")
        vehicles.append(_build(
            VehicleSpec, v, where,
            initial=_build(VehicleState, state, where + ".state"),
            limits=_build(VehicleLimits, lim, where + ".limits"),
            driver=None if drv is None else _build(DriverParams, drv, where + ".driver"),
        ))
    return validate_scenario(Scenario(kind=kind, geometry=geometry,
                                      vehicles=tuple(vehicles), sim=sim))


def _plain(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    geo = _plain(sc.geometry)
    if isinstance(sc.geometry, IntersectionGeometry):
        geo["paths"] = [{"id": p.id, "conflicts": sorted(p.conflicts)} for p in sc.geometry.paths]
    vehicles = []
    for v in sc.vehicles:
        d: dict[str, Any] = {"id": v.id, "role": v.role, "state": _plain(v.initial),
                             "limits": _plain(v.limits)}
        if v.driver is not None:
            d["driver"] = _plain(v.driver)
        if v.path is not None:
            d["path"] = v.path
        vehicles.append(d)
    return {"kind": sc.kind, "geometry": geo, "vehicles": vehicles, "sim": _plain(sc.sim)}


def with_sim(sc: Scenario, **changes) -> Scenario:
    return validate_scenario(replace(sc, sim=replace(sc.sim, **changes)))


def finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None
