"""Command-line entry point: ``cavplatoon {plan,simulate,schedule,sweep}``.

Exit codes: 0 ok, 2 usage or configuration error, 3 infeasible plan or
schedule, 4 safety violation, 5 solver non-convergence. Every command writes
``report.json`` into the output directory, also on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import model
from .formation import FormationError, formation_plan
from .model import FORMATION, INTERSECTION, Scenario, ScenarioError, scenario_from_dict, scenario_to_dict
from .sim import (advance_to_control_entry, compute_metrics, formation_info, run_scenario,
                  safety_monitor)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_UNSAFE, EXIT_NONCONVERGENCE = 0, 2, 3, 4, 5
STATUS = {0: "ok", 2: "usage", 3: "infeasible", 4: "unsafe", 5: "nonconvergence"}
OUT_ENV = "CAVPLATOON_OUT_DIR"
SWEEP_PARAMS = ("alpha", "rho", "s0", "eta", "delta", "tau_t", "dt")


class UsageError(Exception):
    pass


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read scenario: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed scenario JSON: {exc}") from None
    return scenario_from_dict(doc)


def _apply_overrides(sc: Scenario, args) -> Scenario:
    changes = {}
    for name in ("dt", "horizon", "tol_v", "window"):
        val = getattr(args, name, None)
        if val is not None:
            changes[name] = val
    return model.with_sim(sc, **changes) if changes else sc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, float):
        return x
    if hasattr(x, "tolist"):
        return x.tolist()
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    raise TypeError(f"not serializable: {type(x)}")


def _clean(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return "nan"
    if isinstance(obj, float) and obj in (float("inf"), float("-inf")):
        return "inf" if obj > 0 else "-inf"
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


# --- commands ----------------------------------------------------------------------

def cmd_plan(sc: Scenario, out: Path, report: dict) -> int:
    if sc.kind != FORMATION:
        raise UsageError("wrong scenario kind: plan needs a platoon-formation scenario")
    world = advance_to_control_entry(sc)
    info = formation_info(sc, world)
    mode = sc.sim.transition_time
    plan = formation_plan(info) if mode in (None, "minimize") else formation_plan(info, tau_t=float(mode))
    report["plan"] = plan.to_dict()
    _write_json(out / "plan.json", _clean(plan.to_dict()))
    report["outputs"].append("plan.json")
    print(json.dumps(_clean(plan.to_dict()), indent=2))
    if not plan.feasible.ok:
        report["error"] = plan.feasible.reason
        return EXIT_INFEASIBLE
    return EXIT_OK


def _simulate(sc: Scenario, out: Path, report: dict) -> int:
    log = run_scenario(sc)
    (out / "trajectories.csv").write_text(log.to_csv())
    _write_json(out / "events.json", _clean(log.events))
    metrics = compute_metrics(log, sc.geometry)
    _write_json(out / "metrics.json", _clean(metrics.to_dict()))
    safety = safety_monitor(log, sc.geometry)
    report["outputs"] += ["trajectories.csv", "events.json", "metrics.json"]
    report["metrics"] = metrics.to_dict()
    report["violations"] = safety.to_dict()
    if log.plan is not None:
        report["plan"] = log.plan.to_dict()
    if log.formation is not None:
        report["formation"] = log.formation.to_dict()
    if log.schedule is not None:
        report["schedule"] = log.schedule.to_dict()
        report["solves"] = log.solves
        _write_json(out / "schedule.json", _clean(log.schedule.to_dict()))
        report["outputs"].append("schedule.json")
    if log.failure is not None:
        report["error"] = log.failure["message"]
        report["failure"] = log.failure
        return EXIT_NONCONVERGENCE if log.failure["kind"] == "nonconvergence" else EXIT_INFEASIBLE
    if not safety.safe:
        report["error"] = "safety violations"
        return EXIT_UNSAFE
    return EXIT_OK


def cmd_simulate(sc: Scenario, out: Path, report: dict) -> int:
    return _simulate(sc, out, report)


def cmd_schedule(sc: Scenario, out: Path, report: dict) -> int:
    if sc.kind != INTERSECTION:
        raise UsageError("wrong scenario kind: schedule needs an intersection scenario")
    return _simulate(sc, out, report)


def vary(sc: Scenario, param: str, value: float) -> Scenario:
    """Scenario with one whitelisted parameter replaced."""
    if param == "tau_t":
        return model.with_sim(sc, transition_time=value)
    if param == "dt":
        return model.with_sim(sc, dt=value)
    if param in ("alpha", "rho", "s0", "eta"):
        vehicles = tuple(v if v.driver is None else replace(v, driver=replace(v.driver, **{param: value}))
                         for v in sc.vehicles)
        return model.validate_scenario(replace(sc, vehicles=vehicles))
    if param == "delta":
        # initial platoon gap of the first HDV; vehicles behind it shift along
        lane = sc.lanes()[next(iter(sc.lanes()))]
        if len(lane) < 2 or sc.vehicles[lane[1]].driver is None:
            raise UsageError("delta sweep needs an HDV behind the lead CAV")
        lead, first = sc.vehicles[lane[0]], sc.vehicles[lane[1]]
        d = first.driver
        target = lead.initial.position - (value + d.rho * first.initial.speed + d.s0 + sc.vehicle_length)
        shift = target - first.initial.position
        moved = set(lane[1:])
        vehicles = tuple(replace(v, initial=replace(v.initial, position=v.initial.position + shift))
                         if k in moved else v for k, v in enumerate(sc.vehicles))
        return model.validate_scenario(replace(sc, vehicles=vehicles))
    raise UsageError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")


def _fmt_value(v: float) -> str:
    return "%.9g" % v


def cmd_sweep(sc: Scenario, out: Path, report: dict, param: str, values: list[float]) -> int:
    if param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise UsageError("empty value list")
    rows = []
    for val in values:
        sub = out / f"{param}={_fmt_value(val)}"
        sub.mkdir(parents=True, exist_ok=True)
        sub_report = _new_report("simulate", None)
        try:
            scv = vary(sc, param, val)
            sub_report["scenario"] = scenario_to_dict(scv)
            code = _guarded(lambda: _simulate(scv, sub, sub_report), sub_report)
        except (UsageError, ScenarioError) as exc:
            sub_report["error"] = str(exc)
            code = EXIT_USAGE
        _finish(sub, sub_report, code)
        plan = sub_report.get("plan") or {}
        form = sub_report.get("formation") or {}
        met = sub_report.get("metrics") or {}
        gaps = [g for g in (met.get("min_gap") or {}).values() if g is not None]
        energy = met.get("energy") or {}
        rows.append({
            "param": param, "value": _fmt_value(val), "exit_code": code, "status": STATUS[code],
            "u_p": _num(plan.get("u_p")), "tau_t": _num(plan.get("tau_t")),
            "t_p": _num(plan.get("t_p")), "formed": form.get("formed", ""),
            "formation_time": _num(met.get("formation_time")),
            "min_gap": _num(min(gaps) if gaps else None),
            "total_energy": _num(sum(energy.values()) if energy else None),
        })
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    report["outputs"].append("summary.csv")
    report["runs"] = rows
    return EXIT_OK


def _num(x) -> str:
    return "" if x is None else "%.9g" % x


# --- plumbing ----------------------------------------------------------------------

def _new_report(command: str, scenario_path: str | None) -> dict:
    return {"command": command, "scenario_path": scenario_path, "status": None,
            "exit_code": None, "error": None, "outputs": []}


def _guarded(fn, report: dict) -> int:
    from .scheduler import ConvergenceError
    from .trajectory import InfeasibleError
    try:
        return fn()
    except (UsageError, ScenarioError) as exc:
        report["error"] = str(exc)
        return EXIT_USAGE
    except (FormationError, InfeasibleError) as exc:
        report["error"] = str(exc)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        report["error"] = str(exc)
        return EXIT_NONCONVERGENCE


def _finish(out: Path, report: dict, code: int) -> None:
    report["exit_code"] = code
    report["status"] = STATUS[code]
    report["outputs"].append("report.json")
    _write_json(out / "report.json", _clean(report))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cavplatoon", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sim_flags=True):
        p.add_argument("scenario", help="scenario JSON file")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./out)")
        if sim_flags:
            p.add_argument("--dt", type=float)
            p.add_argument("--horizon", type=float)
            p.add_argument("--tol-v", dest="tol_v", type=float)
            p.add_argument("--window", type=float)

    common(sub.add_parser("plan", help="synthesize the CAV formation plan"))
    common(sub.add_parser("simulate", help="simulate a scenario and write trajectories"))
    common(sub.add_parser("schedule", help="schedule and simulate an intersection scenario"))
    sw = sub.add_parser("sweep", help="repeat simulate over one parameter")
    common(sw)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated numbers")
    return ap


def _parse_values(text: str) -> list[float]:
    parts = [s for s in text.split(",") if s.strip()]
    try:
        return [float(s) for s in parts]
    except ValueError:
        raise UsageError(f"bad --values {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        if not exc.code:
            return EXIT_OK
        # still leave a report behind when the output directory can be determined
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--out-dir")
        known, _ = pre.parse_known_args(argv)
        out = Path(known.out_dir or os.environ.get(OUT_ENV) or "out")
        report = _new_report(None, None)
        report["error"] = "invalid command line"
        out.mkdir(parents=True, exist_ok=True)
        _finish(out, report, EXIT_USAGE)
        return EXIT_USAGE
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    report = _new_report(args.command, args.scenario)

    def run() -> int:
        sc = _apply_overrides(load_scenario(args.scenario), args)
        report["scenario"] = scenario_to_dict(sc)
        if args.command == "plan":
            return cmd_plan(sc, out, report)
        if args.command == "simulate":
            return cmd_simulate(sc, out, report)
        if args.command == "schedule":
            return cmd_schedule(sc, out, report)
        return cmd_sweep(sc, out, report, args.param, _parse_values(args.values))

    code = _guarded(run, report)
    _finish(out, report, code)
    if report["error"]:
        print(f"cavplatoon {args.command}: {STATUS[code]}: {report['error']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
