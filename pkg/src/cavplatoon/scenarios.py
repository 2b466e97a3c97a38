"""Built-in scenarios (also shipped as JSON under ``scenarios/``)."""

from __future__ import annotations

from .carfollowing import equilibrium_gap, following_spacing
from .model import (CAV, FORMATION, HDV, INTERSECTION, DriverParams, IntersectionGeometry, PathSpec,
                    RoadGeometry, Scenario, SimConfig, VehicleLimits, VehicleSpec, VehicleState,
                    validate_scenario)

DEFAULT_LIMITS = VehicleLimits(v_min=1.0, v_max=20.0, u_min=-3.0, u_max=2.0)
DEFAULT_DRIVER = DriverParams(alpha=0.5, rho=0.5, s0=2.0, eta=0.3, eta_bar=0.4, tau_r=1.6)
VEHICLE_LENGTH = 4.0


def _chain(gaps, driver, v, l_c, lead_pos=0.0):
    """Front-bumper positions of a lane whose platoon gaps are ``gaps``."""
    pos = [lead_pos]
    for g in gaps:
        pos.append(pos[-1] - (g + following_spacing(v, driver) + l_c))
    return pos


def default_formation(delta2: float = 8.0, tau_t: float | str | None = 4.0,
                      driver: DriverParams = DEFAULT_DRIVER, limits: VehicleLimits = DEFAULT_LIMITS,
                      dt: float = 0.01, horizon: float = 40.0, lead_time: float = 2.0) -> Scenario:
    """One CAV and one HDV cruising at ``v_max``; the CAV reaches the control
    zone after ``lead_time`` seconds."""
    v = limits.v_max
    L_b = 40.0
    pos = _chain([delta2], driver, v, VEHICLE_LENGTH, lead_pos=L_b - lead_time * v)
    vehicles = (
        VehicleSpec("cav1", CAV, VehicleState(pos[0], v), limits),
        VehicleSpec("hdv2", HDV, VehicleState(pos[1], v), limits, driver),
    )
    return validate_scenario(Scenario(
        FORMATION, RoadGeometry(L_b=L_b, L_c=600.0, vehicle_length=VEHICLE_LENGTH), vehicles,
        SimConfig(dt=dt, horizon=horizon, transition_time=tau_t)))


def multi_hdv_formation(gaps=(12.0, 4.0, 4.0), tau_t: float | str | None = 4.0,
                        driver: DriverParams = DEFAULT_DRIVER, limits: VehicleLimits = DEFAULT_LIMITS,
                        dt: float = 0.01, horizon: float = 60.0) -> Scenario:
    """A CAV leading three free-flowing HDVs (N = 4)."""
    v = limits.v_max
    pos = _chain(gaps, driver, v, VEHICLE_LENGTH)
    vehicles = [VehicleSpec("cav1", CAV, VehicleState(pos[0], v), limits)]
    vehicles += [VehicleSpec(f"hdv{k + 2}", HDV, VehicleState(p, v), limits, driver)
                 for k, p in enumerate(pos[1:])]
    return validate_scenario(Scenario(
        FORMATION, RoadGeometry(L_b=2.0 * v, L_c=1400.0, vehicle_length=VEHICLE_LENGTH),
        tuple(vehicles), SimConfig(dt=dt, horizon=horizon, transition_time=tau_t)))


def equilibrium_platoon(v: float = 19.9, n_hdv: int = 3, driver: DriverParams = DEFAULT_DRIVER,
                        limits: VehicleLimits = DEFAULT_LIMITS, dt: float = 0.01,
                        horizon: float = 60.0) -> Scenario:
    """An uncontrolled CAV at ``v`` with HDVs placed at the car-following equilibrium gap."""
    d = equilibrium_gap(v, driver, limits.v_max)
    pos = _chain([d] * n_hdv, driver, v, VEHICLE_LENGTH, lead_pos=50.0)
    vehicles = [VehicleSpec("cav1", CAV, VehicleState(pos[0], v), limits)]
    vehicles += [VehicleSpec(f"hdv{k + 2}", HDV, VehicleState(p, v), limits, driver)
                 for k, p in enumerate(pos[1:])]
    L = v * horizon + 100.0
    return validate_scenario(Scenario(
        FORMATION, RoadGeometry(L_b=L, L_c=L, vehicle_length=VEHICLE_LENGTH), tuple(vehicles),
        SimConfig(dt=dt, horizon=horizon, transition_time=None)))


def two_path_intersection(v0: float = 12.0, dt: float = 0.01, horizon: float = 40.0,
                          driver: DriverParams = DEFAULT_DRIVER,
                          limits: VehicleLimits = VehicleLimits(2.0, 20.0, -3.0, 2.0),
                          headway: float = 1.5) -> Scenario:
    """Four CAV-led two-vehicle platoons, two on each of two conflicting approaches."""
    geo = IntersectionGeometry(S_c=150.0, S_m=30.0, vehicle_length=VEHICLE_LENGTH, paths=(
        PathSpec("north", frozenset({"east"})), PathSpec("east", frozenset({"north"}))))
    d = equilibrium_gap(v0, driver, limits.v_max)
    follow = following_spacing(v0, driver) + d + VEHICLE_LENGTH
    vehicles = []
    # lead CAV front positions relative to the control-zone entry
    for path, leads in (("north", (-6.0, -96.0)), ("east", (-18.0, -114.0))):
        for k, p in enumerate(leads):
            tag = f"{path[0]}{k + 1}"
            vehicles.append(VehicleSpec(f"cav_{tag}", CAV, VehicleState(p, v0), limits, path=path))
            vehicles.append(VehicleSpec(f"hdv_{tag}", HDV, VehicleState(p - follow, v0), limits,
                                        driver, path=path))
    return validate_scenario(Scenario(INTERSECTION, geo, tuple(vehicles),
                                      SimConfig(dt=dt, horizon=horizon, transition_time=None,
                                                headway=headway)))


BUILTIN = {
    "default_formation": default_formation,
    "multi_hdv_formation": multi_hdv_formation,
    "equilibrium_platoon": equilibrium_platoon,
    "two_path_intersection": two_path_intersection,
}
