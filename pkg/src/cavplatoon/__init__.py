"""Platoon formation and intersection coordination for mixed CAV/HDV traffic."""

from .carfollowing import equilibrium_gap, equilibrium_speed, hdv_acceleration, platoon_gap
from .formation import (FormationError, PlatoonPlan, check_platoon_formed, cumulative_gap,
                        formation_plan, min_feasible_transition, solve_transition_control,
                        solve_transition_duration)
from .model import (DriverParams, IntersectionGeometry, RoadGeometry, Scenario, ScenarioError,
                    VehicleLimits, VehicleState, scenario_from_dict, validate_scenario)
from .scheduler import (CrossingSchedule, build_constraints, estimate_platoon_exit, schedule_arrival,
                        solve_upper)
from .sim import compute_metrics, run_scenario, safety_monitor
from .trajectory import (CubicTrajectory, energy_cost, solve_unconstrained, solve_with_arcs,
                         time_at_position)

__version__ = "0.1.0"
