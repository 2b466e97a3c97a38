"""Energy-optimal longitudinal trajectories.

Unconstrained arcs of the L2-control problem are cubic in time; when a bound
on speed or acceleration is hit, saturated arcs are pieced in and the
junction times are solved from the boundary and continuity conditions.
Cubic positions are inverted in closed form through the depressed cubic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .model import VehicleLimits

_WINDOW_EPS = 1e-9
PHI3_EPS = 1e-12
MAX_ARCS = 5


class TrajectoryError(ValueError):
    pass


class InfeasibleError(TrajectoryError):
    pass


@dataclass(frozen=True)
class CubicTrajectory:
    """``p(t) = phi3 t^3 + phi2 t^2 + phi1 t + phi0`` on ``[t0, tf]`` (absolute time)."""

    phi3: float
    phi2: float
    phi1: float
    phi0: float
    t0: float
    tf: float

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        return (self.phi3, self.phi2, self.phi1, self.phi0)

    @classmethod
    def from_local(cls, c: Sequence[float], t0: float, tf: float) -> "CubicTrajectory":
        """Build from coefficients ``(c3, c2, c1, c0)`` in local time ``t - t0``."""
        phi = shift_coefficients(c, t0)
        return cls(*phi, t0=t0, tf=tf)

    def local_coefficients(self) -> tuple[float, float, float, float]:
        return shift_coefficients(self.coefficients, -self.t0)

    def position(self, t):
        return ((self.phi3 * t + self.phi2) * t + self.phi1) * t + self.phi0

    def speed(self, t):
        return (3.0 * self.phi3 * t + 2.0 * self.phi2) * t + self.phi1

    def accel(self, t):
        return 6.0 * self.phi3 * t + 2.0 * self.phi2

    def contains(self, t: float) -> bool:
        eps = _WINDOW_EPS * max(1.0, abs(t))
        return self.t0 - eps <= t <= self.tf + eps

    def speed_range(self) -> tuple[float, float]:
        """Min and max speed on the window (speed is quadratic)."""
        ts = [self.t0, self.tf]
        if self.phi3 != 0.0:
            tv = -self.phi2 / (3.0 * self.phi3)
            if self.t0 < tv < self.tf:
                ts.append(tv)
        vs = [self.speed(t) for t in ts]
        return min(vs), max(vs)

    def accel_range(self) -> tuple[float, float]:
        a, b = self.accel(self.t0), self.accel(self.tf)
        return min(a, b), max(a, b)


def shift_coefficients(c: Sequence[float], shift: float) -> tuple[float, float, float, float]:
    """Coefficients of ``q(t) = p(t - shift)`` where ``p`` has coefficients ``c`` (high first)."""
    low = list(reversed([float(x) for x in c]))
    out = [0.0] * 4
    for k, ck in enumerate(low):
        for j in range(k + 1):
            out[j] += ck * comb(k, j) * (-shift) ** (k - j)
    return tuple(reversed(out))


def evaluate(traj: CubicTrajectory, t: float) -> tuple[float, float, float]:
    """Position, speed and acceleration at ``t`` inside the validity window."""
    if not traj.contains(t):
        raise TrajectoryError(f"t={t} outside window [{traj.t0}, {traj.tf}]")
    return traj.position(t), traj.speed(t), traj.accel(t)


# --- closed-form inversion ---------------------------------------------------

@dataclass(frozen=True)
class DepressedCubic:
    """``tau^3 + omega0 tau + (omega1 + omega2 p) = 0`` with ``t = tau - shift``."""

    omega0: float
    omega1: float
    omega2: float
    shift: float

    def constant(self, p: float) -> float:
        return self.omega1 + self.omega2 * p

    def reconstruct(self) -> tuple[float, float, float, float]:
        """Recover ``phi`` (high first) from the normal form."""
        phi3 = -1.0 / self.omega2
        r2 = 3.0 * self.shift          # phi2 / phi3
        r1 = self.omega0 + r2 * r2 / 3.0
        r0 = self.omega1 - (2.0 * r2 ** 3 - 9.0 * r2 * r1) / 27.0
        return (phi3, r2 * phi3, r1 * phi3, r0 * phi3)


def reduce_to_depressed(traj: CubicTrajectory) -> DepressedCubic:
    phi3, phi2, phi1, phi0 = traj.coefficients
    if phi3 == 0.0:
        raise TrajectoryError("phi3 = 0: position is not a cubic")
    r2 = phi2 / phi3
    r1 = phi1 / phi3
    omega0 = r1 - r2 * r2 / 3.0
    omega1 = (2.0 * r2 ** 3 - 9.0 * phi2 * phi1 / phi3 ** 2) / 27.0 + phi0 / phi3
    return DepressedCubic(omega0, omega1, -1.0 / phi3, r2 / 3.0)


def _cbrt(x: float) -> float:
    return float(np.cbrt(x))


def cardano_roots(a: float, b: float) -> list[float]:
    """Real roots of ``x^3 + a x + b = 0``."""
    disc = (0.5 * b) ** 2 + (a / 3.0) ** 3
    if disc > 0.0:
        # one real root; the sign choice avoids cancellation
        w = _cbrt(-0.5 * b - math.copysign(math.sqrt(disc), b)) if b != 0.0 else _cbrt(-math.sqrt(disc))
        if w == 0.0:
            return [0.0]
        return [w - a / (3.0 * w)]
    if a == 0.0:
        return [_cbrt(-b)]
    m = 2.0 * math.sqrt(-a / 3.0)
    arg = 3.0 * b / (a * m)
    theta = math.acos(max(-1.0, min(1.0, arg))) / 3.0
    return [m * math.cos(theta - 2.0 * math.pi * k / 3.0) for k in range(3)]


def _polish(traj: CubicTrajectory, p: float, t: float) -> float:
    lo, hi = traj.t0, traj.tf
    for _ in range(4):
        f = traj.position(t) - p
        v = traj.speed(t)
        if v <= 0.0:
            break
        t_new = min(max(t - f / v, lo), hi)
        if t_new == t:
            break
        t = t_new
    return t


def time_at_position(traj: CubicTrajectory, p: float) -> float:
    """Time in the window at which the trajectory is at position ``p``."""
    p_lo, p_hi = traj.position(traj.t0), traj.position(traj.tf)
    tol = 1e-9 * max(1.0, abs(p))
    if not (p_lo - tol <= p <= p_hi + tol):
        raise TrajectoryError(f"position {p} outside reachable range [{p_lo}, {p_hi}]")
    if p <= p_lo:
        return traj.t0
    if p >= p_hi:
        return traj.tf

    phi3, phi2, phi1, phi0 = traj.coefficients
    if abs(phi3) < PHI3_EPS:
        # quadratic / linear fallback
        if abs(phi2) < PHI3_EPS:
            roots = [(p - phi0) / phi1]
        else:
            disc = phi1 * phi1 - 4.0 * phi2 * (phi0 - p)
            s = math.sqrt(max(disc, 0.0))
            q = -0.5 * (phi1 + math.copysign(s, phi1))
            roots = [q / phi2] + ([(phi0 - p) / q] if q != 0.0 else [])
    else:
        dep = reduce_to_depressed(traj)
        roots = [tau - dep.shift for tau in cardano_roots(dep.omega0, dep.constant(p))]

    roots = [r for r in roots if math.isfinite(r)]
    inside = [r for r in roots if traj.contains(r)]
    if inside:
        mid = 0.5 * (traj.t0 + traj.tf)
        t = min(inside, key=lambda r: abs(r - mid))
    elif roots:
        t = min(roots, key=lambda r: min(abs(r - traj.t0), abs(r - traj.tf)))
    else:
        t = 0.5 * (traj.t0 + traj.tf)
    t = _polish(traj, p, min(max(t, traj.t0), traj.tf))
    if abs(traj.position(t) - p) > tol:
        # badly conditioned coefficients; the position is monotone on the window
        t = brentq(lambda s: traj.position(s) - p, traj.t0, traj.tf, xtol=1e-14, rtol=1e-15)
    return t


# --- unconstrained arc ----------------------------------------------------------

def solve_unconstrained(t0: float, v0: float, p0: float, tf: float, pf: float,
                        vf: float | None = None) -> CubicTrajectory:
    """Energy-optimal cubic through the boundary data.

    Without ``vf`` the terminal speed is free and the transversality
    condition ``u(tf) = 0`` closes the system.
    """
    T = tf - t0
    if not T > 1e-9:
        raise TrajectoryError("degenerate time window")
    # rows: p(0), v(0), p(T), u(T) or v(T); unknowns (c3, c2, c1, c0) in local time
    A = np.array([
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [T ** 3, T ** 2, T, 1.0],
        [6.0 * T, 2.0, 0.0, 0.0] if vf is None else [3.0 * T ** 2, 2.0 * T, 1.0, 0.0],
    ])
    rhs = np.array([p0, v0, pf, 0.0 if vf is None else vf])
    try:
        c = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise TrajectoryError("singular boundary-value system") from None
    traj = CubicTrajectory.from_local(c, t0, tf)
    if traj.speed_range()[0] <= 0.0:
        raise TrajectoryError("speed not positive on the window; requires constrained arcs")
    return traj


# --- piecewise (constrained) trajectories ---------------------------------------

class ArcKind(str, enum.Enum):
    UNCONSTRAINED = "Unconstrained"
    CONTROL_MIN = "ControlMin"
    CONTROL_MAX = "ControlMax"
    SPEED_MIN = "SpeedMin"
    SPEED_MAX = "SpeedMax"


@dataclass(frozen=True)
class Arc:
    kind: ArcKind
    traj: CubicTrajectory

    @property
    def t_start(self) -> float:
        return self.traj.t0

    @property
    def t_end(self) -> float:
        return self.traj.tf


@dataclass(frozen=True)
class PiecewiseTrajectory:
    arcs: tuple[Arc, ...]

    @property
    def t0(self) -> float:
        return self.arcs[0].t_start

    @property
    def tf(self) -> float:
        return self.arcs[-1].t_end

    @property
    def kinds(self) -> tuple[ArcKind, ...]:
        return tuple(a.kind for a in self.arcs)

    @property
    def switch_times(self) -> tuple[float, ...]:
        return tuple(a.t_end for a in self.arcs[:-1])

    def arc_at(self, t: float) -> Arc:
        for arc in self.arcs:
            if t <= arc.t_end:
                return arc
        return self.arcs[-1]

    def eval(self, t: float) -> tuple[float, float, float]:
        if not self.arcs[0].traj.t0 - _WINDOW_EPS <= t <= self.tf + _WINDOW_EPS * max(1.0, abs(t)):
            raise TrajectoryError(f"t={t} outside window [{self.t0}, {self.tf}]")
        tr = self.arc_at(t).traj
        return tr.position(t), tr.speed(t), tr.accel(t)

    def junction_jumps(self) -> list[tuple[float, float]]:
        """``(|dp|, |dv|)`` at each arc junction."""
        out = []
        for a, b in zip(self.arcs, self.arcs[1:]):
            t = a.t_end
            out.append((abs(a.traj.position(t) - b.traj.position(t)),
                        abs(a.traj.speed(t) - b.traj.speed(t))))
        return out


class _Builder:
    """Integrates piecewise-affine acceleration segments from an initial state."""

    def __init__(self, t0: float, p0: float, v0: float):
        self.t, self.p, self.v = t0, p0, v0
        self.arcs: list[Arc] = []

    def add(self, kind: ArcKind, duration: float, u_start: float, u_end: float) -> None:
        if duration <= 0.0:
            return
        jerk = (u_end - u_start) / duration
        c = (jerk / 6.0, u_start / 2.0, self.v, self.p)
        traj = CubicTrajectory.from_local(c, self.t, self.t + duration)
        self.arcs.append(Arc(kind, traj))
        d = duration
        self.p += self.v * d + u_start * d * d / 2.0 + jerk * d ** 3 / 6.0
        self.v += u_start * d + jerk * d * d / 2.0
        self.t += d

    def result(self) -> PiecewiseTrajectory:
        return PiecewiseTrajectory(tuple(self.arcs))


def _profile(t0, p0, v0, T, u_bound, v_bound, sat_u: bool, sat_v: bool, x: float):
    """Build one arc structure; ``x`` is the free junction parameter.

    Structures (for the acceleration side; the braking side mirrors it):
      [U]          x unused, solved in closed form elsewhere
      [CU]         control-saturated for ``x`` seconds then affine down to 0
      [US]         affine down to 0 at ``x`` reaching the speed bound, then hold
      [CUS]        saturated for ``x``, affine to 0 reaching the speed bound, hold
    """
    accel = u_bound > 0
    kc = ArcKind.CONTROL_MAX if accel else ArcKind.CONTROL_MIN
    ks = ArcKind.SPEED_MAX if accel else ArcKind.SPEED_MIN
    b = _Builder(t0, p0, v0)
    if sat_u and not sat_v:
        b.add(kc, x, u_bound, u_bound)
        b.add(ArcKind.UNCONSTRAINED, T - x, u_bound, 0.0)
    elif sat_v and not sat_u:
        a0 = 2.0 * (v_bound - v0) / x
        b.add(ArcKind.UNCONSTRAINED, x, a0, 0.0)
        b.add(ks, T - x, 0.0, 0.0)
    else:
        b.add(kc, x, u_bound, u_bound)
        v1 = v0 + u_bound * x
        d = 2.0 * (v_bound - v1) / u_bound
        b.add(ArcKind.UNCONSTRAINED, d, u_bound, 0.0)
        b.add(ks, T - x - d, 0.0, 0.0)
    return b


def _solve_structure(t0, p0, v0, T, pf, u_bound, v_bound, sat_u, sat_v) -> PiecewiseTrajectory | None:
    accel = u_bound > 0
    sign = 1.0 if accel else -1.0

    if sat_v and not sat_u:
        dv = v_bound - v0
        if sign * dv <= 0:
            return None
        # p(T) = p0 + v_bound T - x dv / 3
        x = 3.0 * (p0 + v_bound * T - pf) / dv
        if not 0.0 < x <= T:
            return None
        return _profile(t0, p0, v0, T, u_bound, v_bound, False, True, x).result()

    if sat_u and not sat_v:
        lo, hi = 0.0, T
    else:
        x_max = (v_bound - v0) / u_bound
        if x_max < 0:
            return None
        # need x + 2 (v_bound - v1)/u_bound <= T
        x_min = max(0.0, 2.0 * (v_bound - v0) / u_bound - T)
        lo, hi = x_min, min(x_max, T)
        if lo > hi:
            return None

    def miss(x):
        return _profile(t0, p0, v0, T, u_bound, v_bound, sat_u, sat_v, x).p - pf

    f_lo, f_hi = miss(lo), miss(hi)
    if sign * f_lo > 0 or sign * f_hi < 0:
        return None
    if f_lo == 0.0:
        x = lo
    elif f_hi == 0.0:
        x = hi
    else:
        x = brentq(miss, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return _profile(t0, p0, v0, T, u_bound, v_bound, sat_u, sat_v, x).result()


def _violations(traj: PiecewiseTrajectory, limits: VehicleLimits, tol=1e-9) -> set[ArcKind]:
    out = set()
    for arc in traj.arcs:
        vlo, vhi = arc.traj.speed_range()
        ulo, uhi = arc.traj.accel_range()
        if vhi > limits.v_max + tol:
            out.add(ArcKind.SPEED_MAX)
        if vlo < limits.v_min - tol:
            out.add(ArcKind.SPEED_MIN)
        if uhi > limits.u_max + tol:
            out.add(ArcKind.CONTROL_MAX)
        if ulo < limits.u_min - tol:
            out.add(ArcKind.CONTROL_MIN)
    return out


def reachable_range(t0, v0, p0, tf, limits: VehicleLimits) -> tuple[float, float]:
    """Closest and farthest terminal positions reachable within the limits."""
    T = tf - t0

    def extreme(u, v_lim):
        t_sat = (v_lim - v0) / u
        if t_sat >= T:
            return p0 + v0 * T + 0.5 * u * T * T
        return p0 + v0 * t_sat + 0.5 * u * t_sat ** 2 + v_lim * (T - t_sat)

    return extreme(limits.u_min, limits.v_min), extreme(limits.u_max, limits.v_max)


def solve_with_arcs(t0: float, v0: float, p0: float, tf: float, pf: float,
                    limits: VehicleLimits) -> PiecewiseTrajectory:
    """Energy-optimal trajectory respecting speed and control bounds.

    Starts from the unconstrained cubic and pieces in a saturated arc for each
    violated bound, re-solving the junction conditions, until nothing is
    violated.
    """
    if not tf - t0 > 1e-9:
        raise TrajectoryError("degenerate time window")
    if not limits.v_min - 1e-12 <= v0 <= limits.v_max + 1e-12:
        raise InfeasibleError("initial speed outside the speed limits")
    lo, hi = reachable_range(t0, v0, p0, tf, limits)
    if pf > hi + 1e-9 or pf < lo - 1e-9:
        raise InfeasibleError(f"terminal position {pf} unreachable; reachable [{lo}, {hi}]")

    T = tf - t0
    # unconstrained arc in local time: c3 from p(T)=pf with c2 = -3 c3 T
    c3 = (p0 + v0 * T - pf) / (2.0 * T ** 3)
    unc = CubicTrajectory.from_local((c3, -3.0 * c3 * T, v0, p0), t0, tf)
    current = PiecewiseTrajectory((Arc(ArcKind.UNCONSTRAINED, unc),))
    accel = pf > p0 + v0 * T
    u_bound = limits.u_max if accel else limits.u_min
    v_bound = limits.v_max if accel else limits.v_min

    sat_u = sat_v = False
    for _ in range(MAX_ARCS):
        bad = _violations(current, limits)
        if not bad:
            return current
        sat_u |= bool(bad & {ArcKind.CONTROL_MAX, ArcKind.CONTROL_MIN})
        sat_v |= bool(bad & {ArcKind.SPEED_MAX, ArcKind.SPEED_MIN})
        nxt = _solve_structure(t0, p0, v0, T, pf, u_bound, v_bound, sat_u, sat_v)
        if nxt is None and not (sat_u and sat_v):
            # the single-bound structure has no junction solution; add the other bound
            sat_u = sat_v = True
            nxt = _solve_structure(t0, p0, v0, T, pf, u_bound, v_bound, True, True)
        if nxt is None:
            raise InfeasibleError("no junction times satisfy the boundary conditions")
        if len(nxt.arcs) > MAX_ARCS:
            raise TrajectoryError(f"arc count exceeds cap of {MAX_ARCS}")
        current = nxt
    if _violations(current, limits):
        raise TrajectoryError(f"constraint piecing did not converge within {MAX_ARCS} arcs")
    return current


# --- cost -----------------------------------------------------------------------

def _arc_energy(tr: CubicTrajectory, a: float, b: float) -> float:
    u1, u2 = tr.accel(a), tr.accel(b)
    return 0.5 * (b - a) * (u1 * u1 + u1 * u2 + u2 * u2) / 3.0


def energy_cost(traj: PiecewiseTrajectory | CubicTrajectory) -> float:
    """Closed-form ``0.5 * integral(u^2)`` of a piecewise-affine control."""
    if isinstance(traj, CubicTrajectory):
        return _arc_energy(traj, traj.t0, traj.tf)
    return sum(_arc_energy(a.traj, a.t_start, a.t_end) for a in traj.arcs)
