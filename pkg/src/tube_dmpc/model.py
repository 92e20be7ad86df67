"""Problem data types and scenario ingestion/validation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

MEMBERSHIP_TOL = 1e-9
PD_TOL = 1e-9
RANK_TOL = 1e-8


class ScenarioError(ValueError):
    """Raised when a scenario document fails validation."""


def _as_matrix(value, rows, cols, what):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and rows == 1:
        arr = arr.reshape(1, -1)
    if arr.shape != (rows, cols):
        raise ScenarioError(f"{what}: expected shape {(rows, cols)}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class HPolytope:
    """Polyhedron {y : G y <= h} in H-representation."""

    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.asarray(self.h, dtype=float).ravel()
        if G.shape[0] != h.shape[0]:
            raise ScenarioError(f"polytope: {G.shape[0]} rows in G but {h.shape[0]} offsets")
        if np.any(np.linalg.norm(G, axis=1) == 0.0):
            raise ScenarioError("polytope: zero row in G")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def num_faces(self) -> int:
        return self.G.shape[0]

    @classmethod
    def box(cls, half_widths) -> "HPolytope":
        """Axis-aligned box |y_j| <= half_widths[j]."""
        hw = np.asarray(half_widths, dtype=float).ravel()
        eye = np.eye(hw.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([hw, hw]))

    def contains_origin_strictly(self, tol: float = MEMBERSHIP_TOL) -> bool:
        return bool(np.all(self.h > tol))

    def is_bounded(self) -> bool:
        """Check boundedness by maximizing +/- each coordinate over the set."""
        for j in range(self.dim):
            for sign in (1.0, -1.0):
                c = np.zeros(self.dim)
                c[j] = -sign  # linprog minimizes
                res = linprog(c, A_ub=self.G, b_ub=self.h,
                              bounds=[(None, None)] * self.dim, method="highs")
                if res.status == 3:  # unbounded
                    return False
                if not res.success:
                    raise ScenarioError(f"polytope boundedness LP failed: {res.message}")
        return True


def membership(poly: HPolytope, y, tol: float = MEMBERSHIP_TOL) -> bool:
    """True iff G y <= h + tol component-wise."""
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != poly.dim:
        raise ScenarioError(f"membership: point has dim {y.shape[0]}, polytope dim {poly.dim}")
    return bool(np.all(poly.G @ y <= poly.h + tol))


@dataclass(frozen=True)
class AgentModel:
    """One subsystem: dynamics x+ = A x + B u + w, sets, weights.

    w_bar is the 2-norm radius of the disturbance ball used by every bound;
    box_half_widths, when set, is the box the simulator actually samples from
    (w_bar then covers its corners).
    """

    A: np.ndarray
    B: np.ndarray
    w_bar: float
    X: HPolytope
    U: HPolytope
    Q: np.ndarray
    R: np.ndarray
    box_half_widths: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def controllability_matrix(self) -> np.ndarray:
        blocks = [self.B]
        for _ in range(self.n - 1):
            blocks.append(self.A @ blocks[-1])
        return np.hstack(blocks)


@dataclass(frozen=True)
class CouplingSpec:
    """Coupled-constraint data sum_i (Psi_x[i] x^i + Psi_u[i] u^i) <= 1_p.

    Stored normalized: the right-hand side is the all-ones vector.
    """

    Psi_x: tuple
    Psi_u: tuple
    p: int

    def norms_x(self) -> np.ndarray:
        """Per-agent max-over-rows 2-norm of Psi_x (tight row-wise bound)."""
        return np.array([row_norm(Px) for Px in self.Psi_x])

    def norms_N(self, gains) -> np.ndarray:
        """Per-agent row norm of Psi_N = Psi_x + Psi_u K."""
        return np.array([row_norm(Px + Pu @ K)
                         for Px, Pu, K in zip(self.Psi_x, self.Psi_u, gains)])


def row_norm(mat: np.ndarray) -> float:
    """Max over rows of the 2-norm; equals the spectral norm for one row."""
    return float(np.max(np.linalg.norm(np.atleast_2d(mat), axis=1)))


@dataclass(frozen=True)
class SolverParams:
    """Dual-ADMM and inner-splitting solver settings."""

    rho: float = 1.0
    gamma: float = 1.0
    tau: float | None = None  # None -> auto from consensus map + dual curvature
    tol_primal: float = 1e-5
    tol_dual: float = 1e-5
    max_iter: int = 500
    inner_tol: float = 1e-8
    inner_max_iter: int = 20000

    def __post_init__(self):
        if self.rho <= 0:
            raise ScenarioError(f"admm rho must be > 0, got {self.rho}")
        if not (0 < self.gamma <= 1):
            raise ScenarioError(f"admm gamma must be in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class Scenario:
    """A validated problem instance: agents, coupling, horizon, run settings."""

    agents: tuple
    coupling: CouplingSpec
    N: int
    T_run: int
    x0: tuple
    seed: int = 0
    trigger_mode: str = "self-triggered"
    solver: SolverParams = field(default_factory=SolverParams)
    name: str = "scenario"

    @property
    def M(self) -> int:
        return len(self.agents)

    def with_w_bar_scaled(self, factor: float) -> "Scenario":
        agents = tuple(replace(a, w_bar=a.w_bar * factor,
                               box_half_widths=None if a.box_half_widths is None
                               else a.box_half_widths * factor)
                       for a in self.agents)
        return replace(self, agents=agents)


def _parse_polytope(node, dim, what) -> HPolytope:
    if "box" in node:
        hw = np.asarray(node["box"], dtype=float).ravel()
        if hw.size != dim:
            raise ScenarioError(f"{what}: box has {hw.size} entries, expected {dim}")
        if np.any(hw <= 0):
            raise ScenarioError(f"{what}: box half-widths must be positive")
        return HPolytope.box(hw)
    if "G" in node and "h" in node:
        G = np.atleast_2d(np.asarray(node["G"], dtype=float))
        if G.shape[1] != dim:
            raise ScenarioError(f"{what}: G has {G.shape[1]} columns, expected {dim}")
        return HPolytope(G, np.asarray(node["h"], dtype=float))
    raise ScenarioError(f"{what}: give either 'box' or 'G'/'h'")


def _symmetrize_pd(mat, what) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    eigs = np.linalg.eigvalsh(sym)
    if eigs.min() <= PD_TOL:
        raise ScenarioError(f"{what}: non-PD weight (min eigenvalue {eigs.min():.3e})")
    return sym


def _parse_agent(node, index) -> AgentModel:
    tag = f"agent {index}"
    A = np.atleast_2d(np.asarray(node["A"], dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ScenarioError(f"{tag}: A must be square, got {A.shape}")
    B = np.asarray(node["B"], dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if B.shape[0] != n:
        raise ScenarioError(f"{tag}: B has {B.shape[0]} rows, expected {n}")
    m = B.shape[1]

    Q = _symmetrize_pd(_as_matrix(node["Q"], n, n, f"{tag}: Q"), f"{tag}: Q")
    R = _symmetrize_pd(_as_matrix(node["R"], m, m, f"{tag}: R"), f"{tag}: R")

    X = _parse_polytope(node["state_set"], n, f"{tag}: state_set")
    U = _parse_polytope(node["input_set"], m, f"{tag}: input_set")
    for what, poly in (("state_set", X), ("input_set", U)):
        if not poly.contains_origin_strictly():
            raise ScenarioError(f"{tag}: origin not interior to {what}")
        if not poly.is_bounded():
            raise ScenarioError(f"{tag}: unbounded {what}")

    dist = node.get("disturbance", {})
    box_hw = None
    if "box" in dist:
        box_hw = np.asarray(dist["box"], dtype=float).ravel()
        if box_hw.size != n:
            raise ScenarioError(f"{tag}: disturbance box has {box_hw.size} entries, expected {n}")
        if np.any(box_hw < 0):
            raise ScenarioError(f"{tag}: disturbance box half-widths must be >= 0")
        w_bar = float(np.linalg.norm(box_hw))  # ball radius covering the box corners
    elif "w_bar" in dist:
        w_bar = float(dist["w_bar"])
        if w_bar < 0:
            raise ScenarioError(f"{tag}: w_bar must be >= 0")
    else:
        w_bar = 0.0

    agent = AgentModel(A=A, B=B, w_bar=w_bar, X=X, U=U, Q=Q, R=R, box_half_widths=box_hw)
    sv = np.linalg.svd(agent.controllability_matrix(), compute_uv=False)
    if sv.min() <= RANK_TOL * sv.max():
        raise ScenarioError(f"{tag}: (A, B) not reachable "
                            f"(controllability singular-value ratio {sv.min() / sv.max():.3e})")
    return agent


def _parse_coupling(node, agents) -> CouplingSpec:
    psi_x_raw = node["psi_x"]
    psi_u_raw = node["psi_u"]
    rhs = np.asarray(node["rhs"], dtype=float).ravel()
    if len(psi_x_raw) != len(agents) or len(psi_u_raw) != len(agents):
        raise ScenarioError("coupling: psi_x/psi_u must list one matrix per agent")

    p = rhs.size
    Psi_x, Psi_u = [], []
    for i, agent in enumerate(agents):
        Px = _as_matrix(psi_x_raw[i], p, agent.n, f"coupling psi_x[{i}]")
        Pu = _as_matrix(psi_u_raw[i], p, agent.m, f"coupling psi_u[{i}]")
        Psi_x.append(Px)
        Psi_u.append(Pu)

    if node.get("absolute", False):
        # |sum(...)| <= rhs becomes the +/- row pair before normalization
        Psi_x = [np.vstack([Px, -Px]) for Px in Psi_x]
        Psi_u = [np.vstack([Pu, -Pu]) for Pu in Psi_u]
        rhs = np.concatenate([rhs, rhs])
        p = 2 * p

    if np.any(rhs <= 0):
        raise ScenarioError("coupling: rhs entries must be positive to normalize to 1")
    scale = 1.0 / rhs
    Psi_x = tuple(Px * scale[:, None] for Px in Psi_x)
    Psi_u = tuple(Pu * scale[:, None] for Pu in Psi_u)
    return CouplingSpec(Psi_x=Psi_x, Psi_u=Psi_u, p=p)


def validate_scenario(raw: dict) -> Scenario:
    """Turn a parsed scenario document into a validated, normalized Scenario."""
    try:
        agent_nodes = raw["agents"]
    except (KeyError, TypeError):
        raise ScenarioError("scenario document must contain an 'agents' list")
    if not agent_nodes:
        raise ScenarioError("scenario needs at least one agent")

    agents = tuple(_parse_agent(node, i) for i, node in enumerate(agent_nodes))

    N = int(raw.get("horizon", 0))
    if N < 1:
        raise ScenarioError(f"horizon must be >= 1, got {N}")
    T_run = int(raw.get("t_run", 0))
    if T_run < 1:
        raise ScenarioError(f"t_run must be >= 1, got {T_run}")

    x0 = []
    for i, (node, agent) in enumerate(zip(agent_nodes, agents)):
        xi = np.asarray(node["x0"], dtype=float).ravel()
        if xi.size != agent.n:
            raise ScenarioError(f"agent {i}: x0 has {xi.size} entries, expected {agent.n}")
        if not membership(agent.X, xi):
            raise ScenarioError(f"agent {i}: x0 outside state_set")
        x0.append(xi)

    if "coupling" not in raw:
        raise ScenarioError("scenario document must contain a 'coupling' section")
    coupling = _parse_coupling(raw["coupling"], agents)

    mode = raw.get("trigger_mode", "self-triggered")
    if mode not in ("self-triggered", "periodic"):
        raise ScenarioError(f"trigger_mode must be 'self-triggered' or 'periodic', got {mode!r}")

    solver = SolverParams(**raw.get("solver", {}))

    return Scenario(agents=agents, coupling=coupling, N=N, T_run=T_run,
                    x0=tuple(x0), seed=int(raw.get("seed", 0)),
                    trigger_mode=mode, solver=solver,
                    name=str(raw.get("name", "scenario")))


def scenario_to_dict(sc: Scenario) -> dict:
    """Serialize a Scenario back to the document structure (round-trips exactly)."""
    agents = []
    for agent, xi in zip(sc.agents, sc.x0):
        node = {
            "A": agent.A.tolist(),
            "B": agent.B.tolist(),
            "Q": agent.Q.tolist(),
            "R": agent.R.tolist(),
            "state_set": {"G": agent.X.G.tolist(), "h": agent.X.h.tolist()},
            "input_set": {"G": agent.U.G.tolist(), "h": agent.U.h.tolist()},
            "x0": xi.tolist(),
        }
        if agent.box_half_widths is not None:
            node["disturbance"] = {"box": agent.box_half_widths.tolist()}
        else:
            node["disturbance"] = {"w_bar": agent.w_bar}
        agents.append(node)
    return {
        "name": sc.name,
        "horizon": sc.N,
        "t_run": sc.T_run,
        "seed": sc.seed,
        "trigger_mode": sc.trigger_mode,
        "agents": agents,
        "coupling": {
            "psi_x": [Px.tolist() for Px in sc.coupling.Psi_x],
            "psi_u": [Pu.tolist() for Pu in sc.coupling.Psi_u],
            "rhs": [1.0] * sc.coupling.p,
        },
        "solver": {
            "rho": sc.solver.rho, "gamma": sc.solver.gamma,
            "tau": sc.solver.tau,
            "tol_primal": sc.solver.tol_primal, "tol_dual": sc.solver.tol_dual,
            "max_iter": sc.solver.max_iter,
            "inner_tol": sc.solver.inner_tol,
            "inner_max_iter": sc.solver.inner_max_iter,
        },
    }
