"""Delayed optimal-velocity car-following law and gap primitives."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Protocol

from .model import DriverParams, VehicleLimits, VehicleState

INF = math.inf


class Mode(str, enum.Enum):
    FREE_FLOW = "FreeFlow"
    COUPLED = "CoupledFollowing"


@dataclass(frozen=True)
class GapState:
    spacing: float
    delta: float
    mode: Mode


def following_spacing(v: float, params: DriverParams) -> float:
    """Dynamic following spacing ``rho * v + s0``."""
    return params.rho * v + params.s0


def platoon_gap(p_pred: float | None, p_self: float, v_self: float,
                params: DriverParams, l_c: float) -> float:
    """Bumper gap minus the desired spacing; ``inf`` without a predecessor."""
    if p_pred is None:
        return INF
    return p_pred - p_self - following_spacing(v_self, params) - l_c


def equilibrium_speed(delta: float, spacing: float, v_max: float) -> float:
    return 0.5 * v_max * (math.tanh(delta) + math.tanh(spacing))


def equilibrium_gap(v: float, params: DriverParams, v_max: float) -> float:
    """Platoon gap at which ``equilibrium_speed`` returns ``v``.

    Raises ValueError when no finite gap gives that speed (``v`` too close to
    ``v_max``, or too low for the spacing term).
    """
    x = 2.0 * v / v_max - math.tanh(following_spacing(v, params))
    if not -1.0 < x < 1.0:
        raise ValueError(f"no finite equilibrium gap for v={v}")
    return math.atanh(x)


def classify_mode(delta: float) -> Mode:
    return Mode.FREE_FLOW if delta > 0 else Mode.COUPLED


def gap_state(p_pred, p_self, v_self, params, l_c) -> GapState:
    d = platoon_gap(p_pred, p_self, v_self, params, l_c)
    return GapState(following_spacing(v_self, params), d, classify_mode(d))


class DelayedView(Protocol):
    """Answers state queries for one vehicle and its predecessor."""

    def own(self, t: float) -> VehicleState: ...

    def predecessor(self, t: float) -> VehicleState | None: ...


def raw_ovm_acceleration(view: DelayedView, t: float, params: DriverParams,
                         v_max: float, l_c: float) -> float:
    """Unclamped ``alpha * (V(delta, s) - v)`` evaluated at ``t - eta``."""
    tq = t - params.eta
    me = view.own(tq)
    pred = view.predecessor(tq)
    d = platoon_gap(None if pred is None else pred.position, me.position, me.speed, params, l_c)
    V = equilibrium_speed(d, following_spacing(me.speed, params), v_max)
    return params.alpha * (V - me.speed)


def clamp(u: float, lo: float, hi: float) -> float:
    return min(max(u, lo), hi)


def hdv_acceleration(view: DelayedView, t: float, params: DriverParams,
                     limits: VehicleLimits, l_c: float) -> float:
    u = raw_ovm_acceleration(view, t, params, limits.v_max, l_c)
    return clamp(u, limits.u_min, limits.u_max)
