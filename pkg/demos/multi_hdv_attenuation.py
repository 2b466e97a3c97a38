"""A CAV leading three HDVs: the cumulative gap closes; the per-vehicle speed
swing shows whether the deceleration is damped or amplified along the string.

Run with ``python3 demos/multi_hdv_attenuation.py``.
"""

import numpy as np

from cavplatoon.formation import cumulative_gap
from cavplatoon.model import VehicleState
from cavplatoon.scenarios import multi_hdv_formation
from cavplatoon.sim import run_scenario

sc = multi_hdv_formation()
log = run_scenario(sc)
drivers = [v.driver for v in sc.vehicles[1:]]
gap = np.array([cumulative_gap([VehicleState(p, v) for p, v in zip(log.p[k], log.v[k])], drivers,
                               sc.vehicle_length) for k in range(log.n_samples)])

print(f"plan: u_p = {log.plan.u_p:.3f} m/s^2 over {log.plan.tau_t:.1f} s from t = {log.plan.t_c:.2f} s")
first = np.flatnonzero(gap <= 0)
print(f"cumulative gap {gap[0]:.2f} m at start, first <= 0 at "
      f"{log.t[first[0]]:.2f} s" if len(first) else "cumulative gap never closes")
print("vehicle   speed peak-to-peak   first coupled")
for i, vid in enumerate(log.ids):
    tc = log.event("coupled", vid)
    print(f"{vid:8s}  {np.ptp(log.v[:, i]):8.3f} m/s        {'-' if tc is None else f'{tc:.2f} s'}")
