"""Two-vehicle platoon formation: plan at control entry, then simulate it.

Run with ``python3 demos/formation_walkthrough.py``.
"""

import numpy as np

from cavplatoon.formation import formation_plan
from cavplatoon.scenarios import default_formation
from cavplatoon.sim import advance_to_control_entry, formation_info, run_scenario

sc = default_formation()  # delta2 = 8 m at control entry, tau_t = 4 s

# what the CAV sees when it enters the control zone
world = advance_to_control_entry(sc)
plan = formation_plan(formation_info(sc, world), tau_t=4.0)
print(f"t_c = {plan.t_c:.2f} s, gap {plan.delta2:.4f} m -> u_p = {plan.u_p:.4f} m/s^2")
print(f"feasible tau_t window [{plan.window[0]:.2f}, {plan.window[1]:.2f}] s, "
      f"t_s = {plan.t_s:.2f} s, t_p = {plan.t_p:.2f} s")

log = run_scenario(sc)
for e in log.events:
    print(f"  {e['t']:7.2f} s  {e['vehicle_id']:5s} {e['kind']}")

k = log.column("hdv2")
for t in (plan.t_c, plan.t_s, plan.t_p, plan.t_p + 5.0, log.t[-1]):
    j = int(round(t / log.dt))
    print(f"t = {log.t[j]:6.2f}  v_cav {log.v[j, 0]:7.3f}  v_hdv {log.v[j, k]:7.3f}  "
          f"delta2 {log.delta[j, k]:7.3f}  mode {log.mode[j, k]}")

rep = log.formation
print(f"platoon formed over [t_p, t_p + 5]: {rep.formed}")
for f in rep.failures:
    print("  ", f)
# The HDV settles where its target speed equals the CAV's: with the tanh law
# that point has a positive gap whenever the speed exceeds half of v_max.
print(f"settled gap {log.delta[-1, k]:.3f} m at {log.v[-1, k]:.3f} m/s")
