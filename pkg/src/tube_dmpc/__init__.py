"""Robust self-triggered distributed MPC for disturbed linear multi-agent systems."""

from .model import (AgentModel, CouplingSpec, HPolytope, Scenario, ScenarioError,
                    SolverParams, membership, validate_scenario, scenario_to_dict)
from .synthesis import (CertificateReport, TerminalIngredients, certify,
                        lqr_gain, synthesize, terminal_radii, terminal_weight)
from .tightening import (TightenedSets, ToleranceSchedule, coupling_terms,
                         tighten_local_sets, tolerance_schedule)
from .local_solver import (CondensedOcp, OcpSolution, condense, dual_value,
                           solve_centralized, solve_inner)
from .dual_admm import AdmmError, AdmmState, consensus_map, run_admm
from .trigger import TriggerDecision, cost_decrease_bound_g, deviation_bound, select_Mk
from .simulator import (DisturbanceSampler, MonteCarloReport, Pipeline, SimLog,
                        monte_carlo, prepare, run_closed_loop, step_plant)

__all__ = [
    "AgentModel", "CouplingSpec", "HPolytope", "Scenario", "ScenarioError",
    "SolverParams", "membership", "validate_scenario", "scenario_to_dict",
    "CertificateReport", "TerminalIngredients", "certify", "lqr_gain",
    "synthesize", "terminal_radii", "terminal_weight",
    "TightenedSets", "ToleranceSchedule", "coupling_terms",
    "tighten_local_sets", "tolerance_schedule",
    "CondensedOcp", "OcpSolution", "condense", "dual_value",
    "solve_centralized", "solve_inner",
    "AdmmError", "AdmmState", "consensus_map", "run_admm",
    "TriggerDecision", "cost_decrease_bound_g", "deviation_bound", "select_Mk",
    "DisturbanceSampler", "MonteCarloReport", "Pipeline", "SimLog",
    "monte_carlo", "prepare", "run_closed_loop", "step_plant",
]

__version__ = "0.1.0"
