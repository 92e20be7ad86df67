import numpy as np
import pytest

from tube_dmpc.model import AgentModel, HPolytope
from tube_dmpc.synthesis import TerminalIngredients, synthesize
from tube_dmpc.tightening import tighten_local_sets, ToleranceSchedule
from tube_dmpc.local_solver import (condense, dual_value, project_ball,
                                    rollout_maps, solve_centralized, solve_inner)


def make_agent(A, B, state=1e6, inp=1e6, w_bar=0.0):
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    return AgentModel(A=A, B=B, w_bar=w_bar,
                      X=HPolytope.box([state] * A.shape[0]),
                      U=HPolytope.box([inp] * B.shape[1]),
                      Q=np.eye(A.shape[0]), R=np.eye(B.shape[1]))


def wide_ingredients(agent, eps_r=1e6):
    ing = synthesize(agent)
    return TerminalIngredients(K=ing.K, P=ing.P, r=ing.r, eps_r=eps_r,
                               contraction=ing.contraction)


def plain_ocp(agent, ing, x0, N):
    tz = tighten_local_sets(agent, N)
    p = 1
    return condense(agent, ing, tz, np.zeros((p, agent.n)), np.zeros((p, agent.m)),
                    x0, N)


def test_rollout_structure():
    A = np.array([[1.1, 0.12], [0.35, 0.0075]])
    B = np.array([[1.5], [0.5]])
    Phi, Gamma = rollout_maps(A, B, 3)
    np.testing.assert_array_equal(Phi[0], np.eye(2))
    np.testing.assert_array_equal(Gamma[0], np.zeros((2, 3)))
    np.testing.assert_allclose(Phi[2], A @ A)
    np.testing.assert_allclose(Gamma[2][:, 0], (A @ B).ravel())
    np.testing.assert_allclose(Gamma[2][:, 1], B.ravel())
    np.testing.assert_allclose(Gamma[2][:, 2], np.zeros(2))


def test_condense_n1_hand_expansion():
    # scalar, N = 1: J = q x0^2 + r u^2 + p (a x0 + b u)^2
    a, b = 0.7, 1.3
    agent = make_agent([[a]], [[b]])
    ing = wide_ingredients(agent)
    p = ing.P[0, 0]
    ocp = plain_ocp(agent, ing, [2.0], 1)
    # J(u) = 0.5 H u^2 + q u + c0
    assert ocp.H[0, 0] == pytest.approx(2 * (1.0 + p * b * b))
    assert ocp.q[0] == pytest.approx(2 * p * b * a * 2.0)
    assert ocp.c0 == pytest.approx(2.0 ** 2 + p * (a * 2.0) ** 2)


def test_origin_fixed_point():
    agent = make_agent([[0.5]], [[1.0]], state=10.0, inp=10.0)
    ing = synthesize(agent)
    ocp = plain_ocp(agent, ing, [0.0], 3)
    sol = solve_inner(ocp, np.zeros(3))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.u_star, np.zeros(3), atol=1e-7)
    assert sol.J_star == pytest.approx(0.0, abs=1e-10)


def test_unconstrained_matches_normal_equations():
    agent = make_agent([[1.1, 0.12], [0.35, 0.0075]], [[1.5], [0.5]])
    ing = wide_ingredients(agent)
    ocp = plain_ocp(agent, ing, [1.0, -2.0], 4)
    sol = solve_inner(ocp, np.zeros(4))
    assert sol.status == "optimal"
    u_ref = -np.linalg.solve(ocp.H, ocp.q)
    np.testing.assert_allclose(sol.u_star, u_ref, atol=1e-6)


def test_saturated_inputs_match_grid_search():
    # integrator chain, |u| <= 1, far initial state: both inputs saturate
    agent = make_agent([[1.0]], [[1.0]], state=1e6, inp=1.0)
    ing = wide_ingredients(agent)
    ocp = plain_ocp(agent, ing, [10.0], 2)
    sol = solve_inner(ocp, np.zeros(2))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.u_star, [-1.0, -1.0], atol=1e-6)

    grid = np.linspace(-1.0, 1.0, 2001)
    U1, U2 = np.meshgrid(grid, grid, indexing="ij")
    p = ing.P[0, 0]
    z1 = 10.0 + U1
    z2 = z1 + U2
    J = 100.0 + U1 ** 2 + z1 ** 2 + U2 ** 2 + p * z2 ** 2
    idx = np.unravel_index(np.argmin(J), J.shape)
    assert (grid[idx[0]], grid[idx[1]]) == (-1.0, -1.0)
    assert sol.J_star == pytest.approx(J[idx], rel=1e-9)


def test_terminal_ball_constrains_solution():
    agent = make_agent([[1.0]], [[1.0]], state=1e6, inp=1e6)
    base = synthesize(agent)
    ing = TerminalIngredients(K=base.K, P=np.eye(1), r=base.r, eps_r=0.1,
                              contraction=base.contraction)
    ocp = plain_ocp(agent, ing, [5.0], 2)
    sol = solve_inner(ocp, np.zeros(2))
    assert sol.status == "optimal"
    assert abs(sol.z_star[-1, 0]) <= 0.1 + 1e-6


def test_project_ball_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.normal(size=4) * rng.uniform(0, 3)
        out = project_ball(s, 1.5)
        if np.linalg.norm(s) <= 1.5:
            np.testing.assert_array_equal(out, s)
        else:
            assert np.linalg.norm(out) == pytest.approx(1.5)
            np.testing.assert_allclose(out, 1.5 * s / np.linalg.norm(s))


def test_kkt_stationarity_inactive_constraints():
    agent = make_agent([[1.1, 0.12], [0.35, 0.0075]], [[1.5], [0.5]])
    ing = wide_ingredients(agent)
    ocp = plain_ocp(agent, ing, [0.5, -0.5], 3)
    lam = np.array([0.3, 0.1, 0.4])
    sol = solve_inner(ocp, lam)
    assert sol.status == "optimal"
    grad = ocp.H @ sol.u_star + ocp.q + ocp.F.T @ lam
    assert np.linalg.norm(grad) <= 1e-5


def test_dual_function_concave_on_segments():
    agent = make_agent([[0.9]], [[1.0]], state=20.0, inp=1.0)
    ing = synthesize(agent)
    tz = tighten_local_sets(agent, 3)
    Px, Pu = np.array([[0.5]]), np.array([[1.0]])
    ocp = condense(agent, ing, tz, Px, Pu, [4.0], 3,
                   b_share=np.full(3, 0.2))
    rng = np.random.default_rng(1)
    for _ in range(10):
        la = rng.uniform(0, 2, size=3)
        lb = rng.uniform(0, 2, size=3)
        mid = 0.5 * (la + lb)
        g = {key: dual_value(ocp, lam, solve_inner(ocp, lam))
             for key, lam in (("a", la), ("b", lb), ("m", mid))}
        assert g["m"] >= 0.5 * (g["a"] + g["b"]) - 1e-7


def test_deterministic_iterates():
    agent = make_agent([[1.05]], [[1.0]], state=5.0, inp=0.5)
    ing = synthesize(agent)
    ocp = plain_ocp(agent, ing, [1.5], 4)
    a = solve_inner(ocp, np.zeros(4))
    b = solve_inner(ocp, np.zeros(4))
    np.testing.assert_array_equal(a.u_star, b.u_star)
    assert a.iterations == b.iterations
    assert a.J_star == b.J_star


def test_centralized_single_agent_loose_coupling(default_scenario, default_pipeline):
    # one agent, very loose coupling: identical to the lam = 0 inner solve
    import dataclasses
    sc = default_scenario
    agent, ing, tz = sc.agents[0], default_pipeline.ingredients[0], default_pipeline.tightened[0]
    sub = dataclasses.replace(sc, agents=(agent,), x0=(sc.x0[0],),
                              coupling=dataclasses.replace(
                                  sc.coupling, Psi_x=(sc.coupling.Psi_x[0],),
                                  Psi_u=(sc.coupling.Psi_u[0],)))
    sched = ToleranceSchedule(eps=np.zeros(sc.N + 1),
                              b=np.full(sc.coupling.p * sc.N, 1e6),
                              p=sc.coupling.p)
    sols, total = solve_centralized(sub, [ing], [tz], sched, [sc.x0[0]])
    ocp = condense(agent, ing, tz, sc.coupling.Psi_x[0], sc.coupling.Psi_u[0],
                   sc.x0[0], sc.N)
    ref = solve_inner(ocp, np.zeros(sc.coupling.p * sc.N))
    assert sols[0].status == "optimal"
    assert total == pytest.approx(ref.J_star, rel=1e-7)
    np.testing.assert_allclose(sols[0].u_star, ref.u_star, atol=1e-5)


def test_centralized_symmetric_active_coupling():
    # two identical scalar agents sharing u1 + u2 <= 0, both pulled positive
    agent = make_agent([[0.5]], [[1.0]], state=10.0, inp=5.0)
    ing = synthesize(agent)
    tz = tighten_local_sets(agent, 2)
    import dataclasses
    from tube_dmpc.model import CouplingSpec, Scenario, SolverParams
    Px, Pu = np.zeros((1, 1)), np.ones((1, 1))
    sc = Scenario(agents=(agent, agent),
                  coupling=CouplingSpec(Psi_x=(Px, Px), Psi_u=(Pu, Pu), p=1),
                  N=2, T_run=1, x0=(np.array([-3.0]), np.array([-3.0])),
                  solver=SolverParams())
    sched = ToleranceSchedule(eps=np.zeros(3), b=np.zeros(2), p=1)
    sols, total = solve_centralized(sc, [ing, ing], [tz, tz], sched,
                                    [np.array([-3.0]), np.array([-3.0])])
    np.testing.assert_allclose(sols[0].u_star, sols[1].u_star, atol=1e-5)
    coupling = sols[0].u_star + sols[1].u_star
    assert np.all(coupling <= 1e-6)
    assert coupling[0] == pytest.approx(0.0, abs=1e-5)  # first stage active

    # 2-D grid-search oracle over the shared (symmetric) input sequence
    grid = np.linspace(-1.0, 0.5, 601)
    U1, U2 = np.meshgrid(grid, grid, indexing="ij")
    feasible = (U1 <= 0.0 + 1e-12) & (U2 <= 0.0 + 1e-12)  # u1+u2<=0 symmetric
    x0 = -3.0
    z1 = 0.5 * x0 + U1
    z2 = 0.5 * z1 + U2
    p = ing.P[0, 0]
    J = 2 * (x0 ** 2 + U1 ** 2 + z1 ** 2 + U2 ** 2 + p * z2 ** 2)
    J[~feasible] = np.inf
    assert total == pytest.approx(J.min(), rel=1e-3)


def test_centralized_default_t0(default_scenario, default_pipeline):
    sols, total = solve_centralized(default_scenario, default_pipeline.ingredients,
                                    default_pipeline.tightened,
                                    default_pipeline.schedule, default_scenario.x0)
    assert all(s.status == "optimal" for s in sols)
    assert total > 0
    coupling = sum(np.asarray(o) for o in
                   (condense(default_scenario.agents[i], default_pipeline.ingredients[i],
                             default_pipeline.tightened[i],
                             default_scenario.coupling.Psi_x[i],
                             default_scenario.coupling.Psi_u[i],
                             default_scenario.x0[i], default_scenario.N)
                    .coupling_values(sols[i].u_star) for i in range(4)))
    assert np.all(coupling <= default_pipeline.schedule.b + 1e-6)


def test_condensed_hessian_pd_and_cost_nonnegative(default_scenario, default_pipeline):
    sc, pipe = default_scenario, default_pipeline
    ocp = condense(sc.agents[0], pipe.ingredients[0], pipe.tightened[0],
                   sc.coupling.Psi_x[0], sc.coupling.Psi_u[0], sc.x0[0], sc.N)
    np.testing.assert_allclose(ocp.H, ocp.H.T, atol=1e-12)
    assert np.linalg.eigvalsh(ocp.H).min() > 0
    sol = solve_inner(ocp, np.zeros(ocp.F.shape[0]))
    assert sol.J_star >= 0.0
    rng = np.random.default_rng(4)
    for _ in range(20):
        assert ocp.cost(rng.normal(size=ocp.H.shape[0])) >= 0.0


def test_centralized_infeasible_reports_most_violated_row():
    from tube_dmpc.model import CouplingSpec, Scenario
    from tube_dmpc.local_solver import OcpInfeasibleError

    agent = make_agent([[0.5]], [[1.0]], state=10.0, inp=1.0)
    ing = synthesize(agent)
    tz = tighten_local_sets(agent, 2)
    Px, Pu = np.zeros((1, 1)), np.ones((1, 1))
    sc = Scenario(agents=(agent, agent),
                  coupling=CouplingSpec(Psi_x=(Px, Px), Psi_u=(Pu, Pu), p=1),
                  N=2, T_run=1, x0=(np.array([0.0]), np.array([0.0])))
    # u1 + u2 <= -3 unreachable with |u| <= 1
    sched = ToleranceSchedule(eps=np.zeros(3), b=np.full(2, -3.0), p=1)
    with pytest.raises(OcpInfeasibleError, match="row"):
        solve_centralized(sc, [ing, ing], [tz, tz], sched,
                          [np.zeros(1), np.zeros(1)])


def test_solve_inner_rejects_negative_lambda(default_scenario, default_pipeline):
    sc, pipe = default_scenario, default_pipeline
    ocp = condense(sc.agents[0], pipe.ingredients[0], pipe.tightened[0],
                   sc.coupling.Psi_x[0], sc.coupling.Psi_u[0], sc.x0[0], sc.N)
    with pytest.raises(ValueError, match="nonnegative"):
        solve_inner(ocp, -np.ones(ocp.F.shape[0]))
