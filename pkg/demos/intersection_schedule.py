"""Four CAV-led platoons on two conflicting approaches, scheduled first come first served.

Run with ``python3 demos/intersection_schedule.py``.
"""

from cavplatoon.scenarios import two_path_intersection
from cavplatoon.sim import compute_metrics, run_scenario, safety_monitor

sc = two_path_intersection()
log = run_scenario(sc)

print("CAV     path   t0      slot     t_m      t_f      window end   active")
for e in log.schedule.entries:
    print(f"{e.vehicle_id:7s} {e.path:6s} {e.t0:6.2f}  {e.t_slot:7.2f}  {e.t_m:7.2f}  {e.t_f:7.2f}  "
          f"{e.window[1]:9.2f}    {', '.join(e.active)}")

print(f"\n{len(log.solves)} upper-level solves (rejected slots included)")
for s in log.solves:
    slot = "free" if s["t_slot"] is None else f"{s['t_slot']:.2f}"
    print(f"  {s['vehicle_id']:7s} slot {slot:>6s}  KKT {s['kkt']:.1e}  low-level mismatch "
          f"{s['consistency']:.1e}")

rep = safety_monitor(log, sc.geometry)
print(f"\nrear-end violations {len(rep.rear_end)}, merging-zone conflicts {len(rep.lateral)}")
m = compute_metrics(log, sc.geometry)
for vid in log.ids:
    tt = m.travel_time[vid]
    print(f"  {vid:7s} travel {'-' if tt is None else f'{tt:6.2f} s'}  energy {m.energy[vid]:7.3f}")
