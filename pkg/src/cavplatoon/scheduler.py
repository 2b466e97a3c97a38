"""Upper-level crossing-time optimization and the FIFO intersection coordinator.

Each CAV, on entering the control zone at ``t0``, picks a cubic position
profile minimizing its control-zone exit time. The decision vector is
``x = (c3, c2, c1, c0, tau_m, tau_f)``: the cubic's coefficients in local
time ``tau = t - t0`` and the local merging-zone entry and exit times. With
``tau_m`` and ``tau_f`` lifted into the vector every constraint is a
polynomial in ``x`` with closed-form gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .model import DriverParams, IntersectionGeometry, VehicleLimits
from .trajectory import CubicTrajectory, InfeasibleError, TrajectoryError, time_at_position

N_VARS = 6
REAR_GRID = 64
MAX_ITER = 500
KKT_TOL = 1e-6
FEAS_TOL = 1e-8
ACTIVE_TOL = 1e-6

EQUALITY_NAMES = ("position_initial", "speed_initial", "position_merge",
                  "position_exit", "transversality")
INEQUALITY_NAMES = ("speed_upper", "speed_lower", "control_upper", "control_lower",
                    "rear_end", "merge_slot", "exit_clearance")


class ConvergenceError(RuntimeError):
    pass


def _p(x, tau):
    return ((x[0] * tau + x[1]) * tau + x[2]) * tau + x[3]


def _v(x, tau):
    return (3.0 * x[0] * tau + 2.0 * x[1]) * tau + x[2]


def _u(x, tau):
    return 6.0 * x[0] * tau + 2.0 * x[1]


@dataclass(frozen=True)
class Constraint:
    """Residual ``fun(x)`` with gradient ``jac(x)``; ``fun is None`` marks a
    vacuous constraint (value ``-inf``). ``scale`` nondimensionalizes it."""

    name: str
    fun: Callable[[np.ndarray], float] | None
    jac: Callable[[np.ndarray], np.ndarray] | None
    scale: float = 1.0

    @property
    def vacuous(self) -> bool:
        return self.fun is None

    def value(self, x) -> float:
        return -math.inf if self.fun is None else float(self.fun(np.asarray(x, float)))


@dataclass(frozen=True)
class PredecessorTail:
    """Rigid-chain estimate of the last vehicle behind a committed CAV.

    The tail's front bumper trails the CAV by ``rho_sum * v + base``; after
    the CAV leaves the control zone the chain is extrapolated at exit speed.
    """

    traj: CubicTrajectory
    rho_sum: float
    base: float

    def _cav(self, t):
        tr = self.traj
        if t <= tr.tf:
            return tr.position(t), tr.speed(t), tr.accel(t)
        v = tr.speed(tr.tf)
        return tr.position(tr.tf) + v * (t - tr.tf), v, 0.0

    def position(self, t: float) -> float:
        p, v, _ = self._cav(t)
        return p - self.rho_sum * v - self.base

    def speed(self, t: float) -> float:
        _, v, u = self._cav(t)
        return v - self.rho_sum * u


@dataclass(frozen=True)
class ConstraintSet:
    t0: float
    p0: float
    v0: float
    p_m: float
    p_f: float
    limits: VehicleLimits
    equalities: tuple[Constraint, ...]
    inequalities: tuple[Constraint, ...]
    pos_scale: float
    time_scale: float

    def __post_init__(self):
        assert len(self.equalities) == 5 and len(self.inequalities) == 7

    @property
    def var_scale(self) -> np.ndarray:
        L, T = self.pos_scale, self.time_scale
        return np.array([L / T ** 3, L / T ** 2, L / T, L, T, T])

    def h(self, x) -> np.ndarray:
        return np.array([c.value(x) for c in self.equalities])

    def g(self, x) -> np.ndarray:
        return np.array([c.value(x) for c in self.inequalities])

    def named(self, x) -> dict[str, float]:
        return {c.name: c.value(x) for c in self.equalities + self.inequalities}

    def live(self) -> list[int]:
        return [k for k, c in enumerate(self.inequalities) if not c.vacuous]


def _speed_extreme(x, upper: bool) -> tuple[float, float, bool]:
    """Closed-form extremum of the quadratic speed on ``[0, tau_f]``.

    Returns the value, the local time it is attained at and whether that is
    the interior vertex (whose value has zero derivative in ``tau_f``).
    """
    tf = x[5]
    cands = [(_v(x, 0.0), 0.0, False), (_v(x, tf), tf, False)]
    if x[0] != 0.0:
        tv = -x[1] / (3.0 * x[0])
        if 0.0 < tv < tf:
            cands.append((_v(x, tv), tv, True))
    pick = max if upper else min
    return pick(cands, key=lambda c: c[0])


def _speed_grad(x, best) -> np.ndarray:
    _, tau, vertex = best
    g = np.array([3.0 * tau ** 2, 2.0 * tau, 1.0, 0.0, 0.0, 0.0])
    if not vertex and tau != 0.0:
        g[5] = _u(x, tau)
    return g


def build_constraints(entry: tuple[float, float, float], p_m: float, p_f: float,
                      limits: VehicleLimits, *, predecessor: PredecessorTail | None = None,
                      rear_margin: float = 0.0, t_slot: float | None = None,
                      t_clear: float | None = None) -> ConstraintSet:
    """Five equalities and seven inequalities for one CAV's crossing.

    ``entry`` is ``(t0, p0, v0)`` at control-zone entry. ``t_slot`` is the
    earliest merging-zone entry the coordinator grants, ``t_clear`` the time
    the same-path predecessor platoon clears the merging zone; ``None`` makes
    the corresponding inequality vacuous.
    """
    t0, p0, v0 = entry
    if not (p0 < p_m < p_f):
        raise ValueError("geometry inconsistency: need p0 < p_m < p_f")
    if not v0 > 0:
        raise ValueError("entry speed must be positive")
    L = p_f - p0
    T = L / v0
    V, U = L / T, L / T ** 2

    e = np.eye(N_VARS)
    eqs = (
        Constraint("position_initial", lambda x: x[3] - p0, lambda x: e[3], L),
        Constraint("speed_initial", lambda x: x[2] - v0, lambda x: e[2], V),
        Constraint("position_merge", lambda x: _p(x, x[4]) - p_m,
                   lambda x: np.array([x[4] ** 3, x[4] ** 2, x[4], 1.0, _v(x, x[4]), 0.0]), L),
        Constraint("position_exit", lambda x: _p(x, x[5]) - p_f,
                   lambda x: np.array([x[5] ** 3, x[5] ** 2, x[5], 1.0, 0.0, _v(x, x[5])]), L),
        Constraint("transversality", lambda x: _u(x, x[5]),
                   lambda x: np.array([6.0 * x[5], 2.0, 0.0, 0.0, 0.0, 6.0 * x[0]]), U),
    )

    def u_pick(x, upper):
        a, b = _u(x, 0.0), _u(x, x[5])
        return (a, 0.0) if (a >= b) == upper else (b, x[5])

    def u_grad(x, tau):
        g = np.array([6.0 * tau, 2.0, 0.0, 0.0, 0.0, 0.0])
        if tau != 0.0:
            g[5] = 6.0 * x[0]
        return g

    ineqs = [
        Constraint("speed_upper", lambda x: _speed_extreme(x, True)[0] - limits.v_max,
                   lambda x: _speed_grad(x, _speed_extreme(x, True)), V),
        Constraint("speed_lower", lambda x: limits.v_min - _speed_extreme(x, False)[0],
                   lambda x: -_speed_grad(x, _speed_extreme(x, False)), V),
        Constraint("control_upper", lambda x: u_pick(x, True)[0] - limits.u_max,
                   lambda x: u_grad(x, u_pick(x, True)[1]), U),
        Constraint("control_lower", lambda x: limits.u_min - u_pick(x, False)[0],
                   lambda x: -u_grad(x, u_pick(x, False)[1]), U),
    ]

    if predecessor is None:
        ineqs.append(Constraint("rear_end", None, None, L))
    else:
        sig = np.linspace(0.0, 1.0, REAR_GRID)

        def rear_terms(x):
            tau = sig * x[5]
            gap = np.array([predecessor.position(t0 + s) for s in tau]) - _p(x, tau)
            return int(np.argmin(gap)), gap, tau

        def rear_f(x):
            k, gap, _ = rear_terms(x)
            return rear_margin - gap[k]

        def rear_j(x):
            k, _, tau = rear_terms(x)
            tk = tau[k]
            d_tail = predecessor.speed(t0 + tk)
            return np.array([tk ** 3, tk ** 2, tk, 1.0, 0.0, sig[k] * (_v(x, tk) - d_tail)])

        ineqs.append(Constraint("rear_end", rear_f, rear_j, L))

    if t_slot is None:
        ineqs.append(Constraint("merge_slot", None, None, T))
    else:
        ineqs.append(Constraint("merge_slot", lambda x: t_slot - t0 - x[4], lambda x: -e[4], T))
    if t_clear is None:
        ineqs.append(Constraint("exit_clearance", None, None, T))
    else:
        ineqs.append(Constraint("exit_clearance", lambda x: t_clear - t0 - x[5], lambda x: -e[5], T))

    return ConstraintSet(t0=t0, p0=p0, v0=v0, p_m=p_m, p_f=p_f, limits=limits,
                         equalities=eqs, inequalities=tuple(ineqs),
                         pos_scale=L, time_scale=T)


def objective_f(phi, p_f: float, t0: float = 0.0, horizon: float | None = None) -> float:
    """Time at which the cubic ``phi`` (absolute time) reaches ``p_f``."""
    if isinstance(phi, CubicTrajectory):
        traj = phi
    else:
        tf = horizon if horizon is not None else t0 + 1e3
        traj = CubicTrajectory(*phi, t0=t0, tf=tf)
    return time_at_position(traj, p_f)


def cruise_guess(cs: ConstraintSet, perturb: float = 1e-4) -> np.ndarray:
    """Constant-speed cubic through the equalities, with ``c3`` nudged off zero."""
    L, T = cs.pos_scale, cs.time_scale
    c3 = perturb * L / T ** 3
    return np.array([c3, 0.0, cs.v0, cs.p0, (cs.p_m - cs.p0) / cs.v0, (cs.p_f - cs.p0) / cs.v0])


@dataclass(frozen=True)
class UpperSolution:
    x: np.ndarray
    traj: CubicTrajectory
    t_m: float
    t_f: float
    kkt: float
    active: tuple[str, ...]
    multipliers: dict[str, float]
    iterations: int

    @property
    def phi(self) -> tuple[float, float, float, float]:
        return self.traj.coefficients


class _Scaled:
    """The problem in nondimensional variables ``xs = x / var_scale``."""

    def __init__(self, cs: ConstraintSet):
        self.cs = cs
        self.S = cs.var_scale
        self.live = cs.live()

    def x(self, xs):
        return np.asarray(xs) * self.S

    def f(self, xs):
        return xs[5]

    def df(self, xs):
        g = np.zeros(N_VARS)
        g[5] = 1.0
        return g

    def h(self, xs):
        x = self.x(xs)
        return np.array([c.fun(x) / c.scale for c in self.cs.equalities])

    def dh(self, xs):
        x = self.x(xs)
        return np.array([c.jac(x) * self.S / c.scale for c in self.cs.equalities])

    def g(self, xs, idx=None):
        x = self.x(xs)
        idx = self.live if idx is None else idx
        return np.array([self.cs.inequalities[k].fun(x) / self.cs.inequalities[k].scale for k in idx])

    def dg(self, xs, idx=None):
        x = self.x(xs)
        idx = self.live if idx is None else idx
        if not idx:
            return np.zeros((0, N_VARS))
        return np.array([self.cs.inequalities[k].jac(x) * self.S / self.cs.inequalities[k].scale
                         for k in idx])


def _multipliers(sp: _Scaled, xs, active):
    """Least-squares Lagrange multipliers, nonnegative on the inequalities."""
    Jh, Jg = sp.dh(xs), sp.dg(xs, active)
    A = np.vstack([Jh, Jg]).T
    lb = np.r_[np.full(len(Jh), -np.inf), np.zeros(len(Jg))]
    res = lsq_linear(A, -sp.df(xs), bounds=(lb, np.full(len(lb), np.inf)), method="bvls",
                     tol=1e-15)
    return res.x[:len(Jh)], res.x[len(Jh):]


def kkt_residual(sp: _Scaled, xs, lam=None, mu=None) -> tuple[float, np.ndarray, np.ndarray]:
    if lam is None:
        lam, mu = _multipliers(sp, xs, sp.live)
    h, g = sp.h(xs), sp.g(xs)
    stat = sp.df(xs) + sp.dh(xs).T @ lam + (sp.dg(xs).T @ mu if len(mu) else 0.0)
    parts = [np.max(np.abs(stat)), np.max(np.abs(h))]
    if len(g):
        parts += [max(0.0, float(np.max(g))), float(np.max(np.abs(mu * g)))]
    return float(max(parts)), lam, mu


def _polish(sp: _Scaled, xs, active, iters=30):
    """Newton iterations on the equalities plus the active inequalities."""
    for _ in range(iters):
        r = np.r_[sp.h(xs), sp.g(xs, active)]
        if np.max(np.abs(r)) < 1e-14:
            break
        J = np.vstack([sp.dh(xs), sp.dg(xs, active)])
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        xs = xs + step
        if np.max(np.abs(step)) < 1e-15:
            break
    return xs


def solve_upper(initial_guess: Sequence[float] | None, cs: ConstraintSet) -> UpperSolution:
    """Minimize the control-zone exit time subject to ``cs``.

    ``initial_guess`` is a full decision vector, four local coefficients, or
    ``None`` for the cruise guess. Raises ``InfeasibleError`` when no feasible
    point is found and ``ConvergenceError`` when the KKT residual stays above
    tolerance.
    """
    if initial_guess is None:
        x0 = cruise_guess(cs)
    else:
        x0 = np.asarray(initial_guess, float)
        if x0.size == 4:
            traj = CubicTrajectory(*x0, t0=0.0, tf=10 * cs.time_scale)
            x0 = np.r_[x0, time_at_position(traj, cs.p_m), time_at_position(traj, cs.p_f)]
    sp = _Scaled(cs)
    xs0 = x0 / sp.S

    cons = [{"type": "eq", "fun": sp.h, "jac": sp.dh}]
    if sp.live:
        cons.append({"type": "ineq", "fun": lambda z: -sp.g(z), "jac": lambda z: -sp.dg(z)})
    # keep the merge inside the exit window
    cons.append({"type": "ineq", "fun": lambda z: np.array([z[4] - 1e-6, z[5] - z[4] - 1e-6]),
                 "jac": lambda z: np.array([[0, 0, 0, 0, 1.0, 0], [0, 0, 0, 0, -1.0, 1.0]])})
    res = minimize(sp.f, xs0, jac=sp.df, constraints=cons, method="SLSQP",
                   options={"maxiter": MAX_ITER, "ftol": 1e-14})
    xs = res.x
    g = sp.g(xs)
    viol = max(np.max(np.abs(sp.h(xs))), float(np.max(g)) if len(g) else 0.0)
    if viol > 1e-4:
        raise InfeasibleError(f"no feasible crossing trajectory ({res.message}; violation {viol:.2e})")

    active = [k for k, gk in zip(sp.live, g) if gk > -ACTIVE_TOL]
    xs = _polish(sp, xs, active)
    lam, mu_a = _multipliers(sp, xs, active)
    mu = np.zeros(len(sp.live))
    for k, m in zip(active, mu_a):
        mu[sp.live.index(k)] = m
    kkt, _, _ = kkt_residual(sp, xs, lam, mu)
    if kkt > KKT_TOL:
        raise ConvergenceError(f"upper-level solve did not converge (KKT residual {kkt:.2e}, "
                               f"{res.nit} iterations)")

    x = sp.x(xs)
    traj = CubicTrajectory.from_local(x[:4], cs.t0, cs.t0 + x[5])
    names = [cs.inequalities[k].name for k in active]
    mults = {cs.equalities[i].name: float(l) for i, l in enumerate(lam)}
    mults.update({cs.inequalities[k].name: float(m) for k, m in zip(sp.live, mu)})
    t_f = traj.tf
    return UpperSolution(x=x, traj=traj, t_m=cs.t0 + x[4], t_f=t_f, kkt=kkt,
                         active=tuple(n for n, m in zip(names, mu_a) if m > 0) or tuple(names),
                         multipliers=mults, iterations=int(res.nit))


# --- coordinator -----------------------------------------------------------------

def estimate_platoon_exit(t_f_cav: float, v_exit: float, followers: Sequence[DriverParams],
                          l_c: float) -> float:
    """Rigid-chain estimate of when the platoon's last vehicle leaves the merging zone."""
    if not v_exit > 0:
        raise ValueError("exit speed must be positive")
    chain = sum(d.rho * v_exit + d.s0 + l_c for d in followers)
    return t_f_cav + chain / v_exit


@dataclass(frozen=True)
class Arrival:
    vehicle_id: str
    path: str
    t0: float
    p0: float
    v0: float
    limits: VehicleLimits
    followers: tuple[DriverParams, ...] = ()
    s0: float = 2.0  # standstill distance kept behind a same-path predecessor


@dataclass(frozen=True)
class CrossingEntry:
    vehicle_id: str
    path: str
    t0: float
    t_slot: float
    t_m: float
    t_f: float
    t_last_f: float
    phi: tuple[float, float, float, float]
    kkt: float
    active: tuple[str, ...]
    headway: float
    rho_sum: float
    chain_base: float

    @property
    def window(self) -> tuple[float, float]:
        return (self.t_m, self.t_last_f + self.headway)

    @property
    def traj(self) -> CubicTrajectory:
        return CubicTrajectory(*self.phi, t0=self.t0, tf=self.t_f)

    def tail(self) -> PredecessorTail:
        return PredecessorTail(self.traj, self.rho_sum, self.chain_base)

    def to_dict(self) -> dict:
        return {"vehicle_id": self.vehicle_id, "path": self.path, "t0": self.t0,
                "t_slot": self.t_slot, "t_m": self.t_m, "t_f": self.t_f,
                "t_last_f": self.t_last_f, "window": list(self.window),
                "phi": list(self.phi), "active": list(self.active), "kkt": self.kkt}


@dataclass(frozen=True)
class CrossingSchedule:
    geometry: IntersectionGeometry
    headway: float = 1.5
    entries: tuple[CrossingEntry, ...] = ()

    def commit(self, entry: CrossingEntry) -> "CrossingSchedule":
        if any(e.vehicle_id == entry.vehicle_id for e in self.entries):
            raise ValueError(f"{entry.vehicle_id} already scheduled")
        return replace(self, entries=self.entries + (entry,))

    def conflicting(self, path: str) -> list[CrossingEntry]:
        return [e for e in self.entries if self.geometry.conflicting(path, e.path)]

    def last_on_path(self, path: str) -> CrossingEntry | None:
        same = [e for e in self.entries if e.path == path]
        return same[-1] if same else None

    def get(self, vehicle_id: str) -> CrossingEntry:
        for e in self.entries:
            if e.vehicle_id == vehicle_id:
                return e
        raise KeyError(vehicle_id)

    def to_dict(self) -> dict:
        return {"headway": self.headway, "entries": [e.to_dict() for e in self.entries]}


WINDOW_TOL = 1e-7


def _disjoint(a: tuple[float, float], b: tuple[float, float]) -> bool:
    # a slot equal to a window end is solved to round-off only
    return a[1] <= b[0] + WINDOW_TOL or b[1] <= a[0] + WINDOW_TOL


@dataclass
class ArrivalLog:
    """Per-arrival solver diagnostics (every solve, including rejected slots)."""

    solves: list[dict] = field(default_factory=list)


def schedule_arrival(coord: CrossingSchedule, cav: Arrival, *,
                     horizon: float = math.inf, log: ArrivalLog | None = None) -> CrossingSchedule:
    """Solve and commit the next CAV's crossing; earlier entries are untouched.

    The first candidate slot is the CAV's unconstrained optimum; later ones
    are the ends of committed conflicting windows, tried in order until the
    CAV's own occupancy window clears every conflicting one.
    """
    geo = coord.geometry
    l_c = geo.vehicle_length
    pred = coord.last_on_path(cav.path)
    rear_margin = cav.s0 + l_c
    tail = pred.tail() if pred is not None else None
    t_clear = pred.t_last_f if pred is not None else None
    rho_sum = sum(d.rho for d in cav.followers)
    base = sum(d.s0 + l_c for d in cav.followers)

    def attempt(t_slot):
        cs = build_constraints((cav.t0, cav.p0, cav.v0), geo.merge_entry, geo.merge_exit,
                               cav.limits, predecessor=tail, rear_margin=rear_margin,
                               t_slot=t_slot, t_clear=t_clear)
        sol = solve_upper(None, cs)
        gap = consistency_gap(sol, cs)
        v_exit = sol.traj.speed(sol.t_f)
        t_last = estimate_platoon_exit(sol.t_f, v_exit, cav.followers, l_c)
        if log is not None:
            log.solves.append({"vehicle_id": cav.vehicle_id, "t_slot": t_slot, "kkt": sol.kkt,
                               "active": list(sol.active), "t_m": sol.t_m, "t_f": sol.t_f,
                               "consistency": gap})
        return sol, t_last

    sol, t_last = attempt(None)
    t_opt = sol.t_m
    ends = sorted({e.window[1] for e in coord.conflicting(cav.path) if e.window[1] > t_opt})
    candidates = [None] + ends
    for c in candidates:
        if c is not None:
            if c > horizon:
                break
            try:
                sol, t_last = attempt(c)
            except InfeasibleError:
                continue
        window = (sol.t_m, t_last + coord.headway)
        if all(_disjoint(window, e.window) for e in coord.conflicting(cav.path)):
            entry = CrossingEntry(
                vehicle_id=cav.vehicle_id, path=cav.path, t0=cav.t0,
                t_slot=t_opt if c is None else c, t_m=sol.t_m, t_f=sol.t_f, t_last_f=t_last,
                phi=sol.phi, kkt=sol.kkt, active=sol.active, headway=coord.headway,
                rho_sum=rho_sum, chain_base=base)
            return coord.commit(entry)
    raise InfeasibleError(f"no feasible merging slot for {cav.vehicle_id} within horizon")


def consistency_gap(sol: UpperSolution, cs: ConstraintSet) -> float:
    """Largest coefficient mismatch between ``sol`` and the low-level cubic rebuilt
    from its exit time (relative to each coefficient's natural scale)."""
    from .trajectory import solve_unconstrained

    try:
        ref = solve_unconstrained(cs.t0, cs.v0, cs.p0, sol.t_f, cs.p_f)
    except TrajectoryError:
        return math.inf
    a = np.array(ref.local_coefficients())
    b = np.array(sol.x[:4])
    return float(np.max(np.abs(a - b) / cs.var_scale[:4]))
