"""Platoon formation: the CAV decelerates so that trailing HDVs couple behind it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .carfollowing import following_spacing, platoon_gap
from .model import DriverParams, VehicleLimits, VehicleState


class FormationError(ValueError):
    pass


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    reason: str = ""


@dataclass(frozen=True)
class PlatoonPlan:
    u_p: float
    tau_t: float
    tau_s: float
    t_c: float
    t_s: float
    t_p: float
    feasible: Feasibility
    delta2: float = math.nan
    window: tuple[float, float] = (math.nan, math.nan)
    v_eq: float = math.nan

    def to_dict(self) -> dict:
        return {
            "u_p": self.u_p, "tau_t": self.tau_t, "tau_s": self.tau_s,
            "t_c": self.t_c, "t_s": self.t_s, "t_p": self.t_p,
            "feasible": self.feasible.ok, "reason": self.feasible.reason,
            "delta2_tc": self.delta2, "v_eq": self.v_eq,
            "tau_t_window": list(self.window),
        }


def solve_transition_control(delta2_tc: float, tau_t: float) -> float:
    """Constant CAV control closing the gap ``delta2_tc`` in ``tau_t`` seconds."""
    if delta2_tc <= 0:
        raise FormationError("already coupled, no transition control required")
    if not tau_t > 0:
        raise FormationError("transition duration must be positive")
    return -2.0 * delta2_tc / (tau_t * tau_t)


def solve_transition_duration(delta2_tc: float, u_p: float) -> float:
    if delta2_tc <= 0:
        raise FormationError("already coupled, no transition control required")
    if u_p >= 0:
        raise FormationError("infeasible: platoon formation requires deceleration")
    return math.sqrt(-2.0 * delta2_tc / u_p)


def min_feasible_transition(delta2_tc: float, limits: VehicleLimits, v1_tc: float) -> float:
    """Smallest transition duration keeping ``u_p >= u_min`` and ``v1(t_s) >= v_min``."""
    if delta2_tc <= 0:
        raise FormationError("already coupled, no transition control required")
    if v1_tc <= limits.v_min:
        raise FormationError("no feasible deceleration window")
    return max(math.sqrt(-2.0 * delta2_tc / limits.u_min),
               2.0 * delta2_tc / (v1_tc - limits.v_min))


def max_transition_for_zone(delta2_tc: float, v1_tc: float, tau_s: float, room: float) -> float:
    """Largest transition duration with the CAV still in the control zone at ``t_p``.

    The distance covered by ``t_p`` is ``v1 (tau_t + tau_s) - delta - 2 delta tau_s / tau_t``,
    increasing in ``tau_t``; ``room`` is what is left of the control zone at ``t_c``.
    """
    a, b, c = v1_tc, v1_tc * tau_s - delta2_tc - room, -2.0 * delta2_tc * tau_s
    return (-b + math.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)


def cav_control(t: float, plan: PlatoonPlan) -> float:
    if t < plan.t_c:
        raise ValueError(f"t={t} precedes control-zone entry {plan.t_c}")
    return plan.u_p if t <= plan.t_s else 0.0


def cumulative_gap(states: Sequence[VehicleState], params: Sequence[DriverParams], l_c: float) -> float:
    """Leader-to-tail span minus desired spacings and lengths.

    ``params[k]`` belongs to ``states[k + 1]`` (the leader has none).
    """
    if len(states) < 2:
        raise ValueError("need at least two vehicles")
    total = states[0].position - states[-1].position
    for st, prm in zip(states[1:], params):
        total -= following_spacing(st.speed, prm) + l_c
    return total


@dataclass(frozen=True)
class FormationInfo:
    """What the CAV knows at control-zone entry: states leader first, HDV drivers,
    its own limits, the road's speed cap, vehicle length and control-zone room."""

    t_c: float
    states: tuple[VehicleState, ...]
    drivers: tuple[DriverParams, ...]
    limits: VehicleLimits
    v_max: float
    l_c: float
    room: float
    entry_tol: float = 0.1

    def gaps(self) -> list[float]:
        return [platoon_gap(a.position, b.position, b.speed, d, self.l_c)
                for a, b, d in zip(self.states, self.states[1:], self.drivers)]


def formation_plan(info: FormationInfo, target_tp: float | None = None, *,
                   tau_t: float | None = None) -> PlatoonPlan:
    """Synthesize the CAV's transition control.

    Give either a target formation time ``target_tp``, a transition duration
    ``tau_t``, or neither to use the smallest feasible duration. The control
    is sized on the first HDV's gap; HDVs further back couple in sequence.
    """
    if len(info.states) < 2:
        raise FormationError("no trailing HDVs to platoon")
    v1 = info.states[0].speed
    gaps = info.gaps()
    if gaps[0] <= 0:
        raise FormationError("already coupled, no transition control required")
    if gaps[-1] <= 0:
        raise FormationError("entry condition violated: last HDV already coupled")
    for k, st in enumerate(info.states):
        if abs(st.speed - info.v_max) > info.entry_tol:
            raise FormationError(
                f"entry condition violated: vehicle {k + 1} speed {st.speed:.3f} != v_max")

    delta = gaps[0]
    tau_s = max(d.eta_bar + d.tau_r for d in info.drivers)
    lo = min_feasible_transition(delta, info.limits, v1)
    hi = max_transition_for_zone(delta, v1, tau_s, info.room)
    if hi < lo:
        raise FormationError(
            f"no transition duration satisfies the bound ({lo:.3f} s) and the control-zone length")

    if target_tp is not None:
        if tau_t is not None:
            raise ValueError("give target_tp or tau_t, not both")
        tau_t = target_tp - info.t_c - tau_s
        if not tau_t > 0:
            raise FormationError("target formation time leaves no transition time")
    if tau_t is None:
        tau_t = lo

    u_p = solve_transition_control(delta, tau_t)
    v_s = v1 + u_p * tau_t
    reasons = []
    if u_p < info.limits.u_min * (1 + 1e-12):
        reasons.append(f"u_p={u_p:.4f} below u_min")
    if v_s < info.limits.v_min * (1 - 1e-12):
        reasons.append(f"v1(t_s)={v_s:.4f} below v_min")
    if tau_t > hi * (1 + 1e-12):
        reasons.append("CAV leaves the control zone before t_p")
    verdict = Feasibility(not reasons, "; ".join(reasons))
    t_s = info.t_c + tau_t
    return PlatoonPlan(u_p=u_p, tau_t=tau_t, tau_s=tau_s, t_c=info.t_c, t_s=t_s,
                       t_p=t_s + tau_s, feasible=verdict, delta2=delta,
                       window=(lo, hi), v_eq=v_s)


@dataclass
class FormationReport:
    formed: bool
    failures: list[str] = field(default_factory=list)
    max_speed_error: float = 0.0
    max_delta: float = -math.inf
    max_delta_spread: float = 0.0

    def to_dict(self) -> dict:
        return {"formed": self.formed, "failures": list(self.failures),
                "max_speed_error": self.max_speed_error, "max_delta": self.max_delta,
                "max_delta_spread": self.max_delta_spread}


def check_platoon_formed(log, t_from: float, tol_v: float = 0.1, window: float = 5.0,
                         tol_delta: float = 0.05, vehicles: Sequence[int] | None = None) -> FormationReport:
    """Check the platoon conditions on ``[t_from, t_from + window]``.

    Every follower must match the leader's speed within ``tol_v``, be in coupled
    following (gap <= 0) and keep its gap constant within ``tol_delta``.
    ``vehicles`` are log column indices, leader first (default: all).
    """
    t = log.t
    if t_from + window > t[-1] + 1e-9 or t_from < t[0] - 1e-9:
        raise ValueError("window exceeds log horizon")
    mask = (t >= t_from - 1e-9) & (t <= t_from + window + 1e-9)
    idx = list(range(log.n_vehicles)) if vehicles is None else list(vehicles)
    v_lead = log.v[mask, idx[0]]
    rep = FormationReport(formed=True)
    for i in idx[1:]:
        name = log.ids[i]
        dv = float(np.max(np.abs(log.v[mask, i] - v_lead)))
        d = log.delta[mask, i]
        spread = float(np.max(np.abs(d - d.mean())))
        rep.max_speed_error = max(rep.max_speed_error, dv)
        rep.max_delta = max(rep.max_delta, float(d.max()))
        rep.max_delta_spread = max(rep.max_delta_spread, spread)
        if dv > tol_v:
            rep.failures.append(f"{name}: speed differs from leader by {dv:.4f} m/s")
        if d.max() > 0:
            rep.failures.append(f"{name}: platoon gap {d.max():.4f} m > 0 (free flow)")
        if spread > tol_delta:
            rep.failures.append(f"{name}: platoon gap varies by {spread:.4f} m")
    rep.formed = not rep.failures
    return rep
