"""Proximal Jacobi consensus ADMM on the coupling multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import SolverParams
from .local_solver import CondensedOcp, OcpSolution, solve_inner

AdmmParams = SolverParams


class AdmmError(RuntimeError):
    """Raised when an inner subproblem fails inside the dual iteration."""

    def __init__(self, message, agent_index=None):
        super().__init__(message)
        self.agent_index = agent_index


def consensus_map(M: int, p: int, N: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Chain-difference encoding lam^i - lam^{i+1} = 0, stacked over i.

    Returns per-agent matrices E^i with sum_i E^i lam^i = c and c = 0. For
    M = 1 the map is empty and the iteration degenerates to projected dual
    ascent on a single multiplier.
    """
    d = p * N
    rows = (M - 1) * d
    E = [np.zeros((rows, d)) for _ in range(M)]
    for r in range(M - 1):
        E[r][r * d:(r + 1) * d] = np.eye(d)
        E[r + 1][r * d:(r + 1) * d] = -np.eye(d)
    return E, np.zeros(rows)


def consensus_gain(M: int) -> float:
    """Largest eigenvalue of E'E per coordinate (path-graph Laplacian)."""
    if M <= 1:
        return 0.0
    lap = 2.0 * np.eye(M)
    lap[0, 0] = lap[-1, -1] = 1.0
    for i in range(M - 1):
        lap[i, i + 1] = lap[i + 1, i] = -1.0
    return float(np.linalg.eigvalsh(lap).max())


@dataclass
class AdmmState:
    """Iterate state: per-agent multiplier copies, aggregate multiplier, stats."""

    lambdas: list
    omega: np.ndarray
    iteration: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    coupling_violation: float = np.inf
    solutions: list = field(default_factory=list)
    total_inner_iterations: int = 0


def lambda_update(lambdas, f_values, b_shares, E, omega, rho: float, tau: float):
    """Simultaneous clipped proximal step for every agent copy."""
    v = sum(Ei @ li for Ei, li in zip(E, lambdas))
    new = []
    for li, fi, bi, Ei in zip(lambdas, f_values, b_shares, E):
        step = (fi - bi) - Ei.T @ omega - rho * (Ei.T @ v)
        new.append(np.maximum(0.0, li + step / tau))
    return new


def omega_update(omega, lambdas, E, c, rho: float, gamma: float) -> np.ndarray:
    """Aggregate-multiplier step along the consensus residual.

    Sign note: the ascent direction consistent with the lambda step above is
    +rho*gamma*(sum E^i lam^i - c); the opposite sign makes the saddle
    iteration divergent.
    """
    v = sum(Ei @ li for Ei, li in zip(E, lambdas)) - c
    return omega + rho * gamma * v


def default_tau(ocps, rho: float, M: int) -> float:
    """Stepsize weight: consensus-penalty curvature plus worst dual curvature."""
    curv = 0.0
    for ocp in ocps:
        FHF = ocp.F @ np.linalg.solve(ocp.H, ocp.F.T)
        curv = max(curv, float(np.linalg.norm(FHF, 2)))
    return rho * consensus_gain(M) + max(curv, 1e-8)


def run_admm(ocps: list[CondensedOcp], params: SolverParams,
             b_shares=None, trace_path=None) -> tuple[list[OcpSolution], AdmmState, bool]:
    """Algorithm loop: lambda step, inner solves, omega step, until residuals pass.

    Convergence requires the consensus residual, the per-agent multiplier
    change and the aggregate coupling violation to fall below tolerance.
    When trace_path is given, one CSV row (iter, primal_res, dual_res,
    total_cost) is appended per iteration.
    """
    M = len(ocps)
    d = ocps[0].F.shape[0]
    if b_shares is None:
        b_shares = [ocp.b_share for ocp in ocps]
    E, c = consensus_map(M, 1, d)
    tau = params.tau if params.tau is not None else default_tau(ocps, params.rho, M)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if M > 1 and tau < params.rho * consensus_gain(M):
        raise ValueError("tau below rho * sigma_max(E'E); proximal step would not majorize")

    state = AdmmState(lambdas=[np.zeros(d) for _ in range(M)], omega=c.copy())
    warm = [None] * M

    def inner(i, lam):
        sol = solve_inner(ocps[i], lam, warm_start=warm[i],
                          tol=params.inner_tol, max_iter=params.inner_max_iter)
        if sol.status == "infeasible":
            raise AdmmError(f"inner problem infeasible for agent {i}", agent_index=i)
        warm[i] = sol.warm
        state.total_inner_iterations += sol.iterations
        return sol

    state.solutions = [inner(i, state.lambdas[i]) for i in range(M)]
    f_values = [ocp.coupling_values(sol.u_star)
                for ocp, sol in zip(ocps, state.solutions)]
    b_total = sum(np.asarray(b, dtype=float) for b in b_shares)

    trace = open(trace_path, "w") if trace_path is not None else None
    if trace is not None:
        trace.write("iter,primal_res,dual_res,total_cost\n")

    converged = False
    try:
        for k in range(1, params.max_iter + 1):
            new_lambdas = lambda_update(state.lambdas, f_values, b_shares, E,
                                        state.omega, params.rho, tau)
            state.solutions = [inner(i, new_lambdas[i]) for i in range(M)]
            f_values = [ocp.coupling_values(sol.u_star)
                        for ocp, sol in zip(ocps, state.solutions)]
            state.omega = omega_update(state.omega, new_lambdas, E, c,
                                       params.rho, params.gamma)

            state.primal_residual = float(np.linalg.norm(
                sum(Ei @ li for Ei, li in zip(E, new_lambdas)) - c)) if M > 1 else 0.0
            state.dual_residual = max(
                float(np.linalg.norm(nl - ol)) for nl, ol in zip(new_lambdas, state.lambdas))
            total_f = sum(f_values)
            state.coupling_violation = float(np.max(np.maximum(0.0, total_f - b_total)))
            state.lambdas = new_lambdas
            state.iteration = k
            if trace is not None:
                total_cost = sum(sol.J_star for sol in state.solutions)
                trace.write(f"{k},{state.primal_residual:.17g},"
                            f"{state.dual_residual:.17g},{total_cost:.17g}\n")

            if (state.primal_residual <= params.tol_primal
                    and state.dual_residual <= params.tol_dual
                    and state.coupling_violation <= params.tol_primal):
                converged = True
                break
    finally:
        if trace is not None:
            trace.close()

    return state.solutions, state, converged
