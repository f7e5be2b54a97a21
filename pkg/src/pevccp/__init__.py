"""Distributed cooperative charging of an electric-vehicle fleet under an aggregate power cap."""

from pevccp.distributed import ScheduleSet, TuningSchedule, run_distributed
from pevccp.feasibility import FeasibleSet, build_feasible_set, project_box_polytope
from pevccp.metrics import RunTrace, cap_violation, rel_obj, valley_filling_report
from pevccp.model import PevModel, Scenario, Tariff, TimeGrid, generate_scenario, validate_scenario
from pevccp.netsim import FaultPlan, Graph, make_topology
from pevccp.oracle import CentralSolution, kkt_check, objective_value, solve_central

__version__ = "0.1.0"

__all__ = [
    "CentralSolution", "FaultPlan", "FeasibleSet", "Graph", "PevModel", "RunTrace", "Scenario",
    "ScheduleSet", "Tariff", "TimeGrid", "TuningSchedule", "build_feasible_set", "cap_violation",
    "generate_scenario", "kkt_check", "make_topology", "objective_value", "project_box_polytope",
    "rel_obj", "run_distributed", "solve_central", "validate_scenario", "valley_filling_report",
]
