import numpy as np
import pytest

import dualgrad as dg
from dualgrad.errors import StructureError, UnsupportedInstanceError


def scalar_system(x0=1.0):
    sub = dg.Subsystem(
        index=0, n_x=1, n_u=1,
        dyn_state={0: np.array([[1.0]])},
        dyn_input={0: np.array([[1.0]])},
        state_weight=np.array([[1.0]]),
        input_weight=np.array([[1.0]]),
        terminal_weight=np.array([[1.0]]),
    )
    return dg.NetworkedSystem([sub], np.array([[1]]), 1, [np.array([x0])])


def test_scalar_system_builds_expected_rows():
    problem = dg.build_problem(scalar_system())
    graph = problem.graph
    assert graph.n_total == 2 and graph.p_total == 1 and graph.q_total == 0
    G, g = dg.assemble_dense(problem)
    assert np.array_equal(G, np.array([[-1.0, 1.0]]))
    assert np.array_equal(g, np.array([1.0]))


def test_scalar_system_optimum_from_kkt_and_solver():
    problem = dg.build_problem(scalar_system())
    # independent 2-variable KKT oracle
    z_kkt, nu_kkt = dg.kkt_solve_equality(problem)
    assert np.allclose(z_kkt, [-0.5, 0.5], atol=1e-12)
    ref = dg.solve_reference(problem)
    assert np.abs(ref.z_star.z - z_kkt).max() < 1e-8
    assert ref.f_star == pytest.approx(0.25, abs=1e-9)
    assert ref.lambda_ref.nu[0] == pytest.approx(nu_kkt[0], abs=1e-8)


def test_zero_initial_state_gives_zero_optimum():
    problem = dg.build_problem(scalar_system(x0=0.0))
    ref = dg.solve_reference(problem)
    assert abs(ref.f_star) < 1e-12
    assert np.abs(ref.z_star.z).max() < 1e-8


def chain_system(m=2, horizon=2, n_x=2, n_u=1, n_c=1, seed=0):
    rng = np.random.default_rng(seed)
    adjacency = np.eye(m, dtype=int)
    for i in range(1, m):
        adjacency[i, i - 1] = 1  # chain: each node sees its predecessor
    subsystems = []
    for i in range(m):
        neighbors = [int(j) for j in np.flatnonzero(adjacency[i])]
        subsystems.append(dg.Subsystem(
            index=i, n_x=n_x, n_u=n_u,
            dyn_state={j: 0.4 * rng.standard_normal((n_x, n_x)) for j in neighbors},
            dyn_input={j: rng.standard_normal((n_x, n_u)) for j in neighbors},
            con_state={j: 0.2 * rng.standard_normal((n_c, n_x)) for j in neighbors},
            con_input={j: 0.2 * rng.standard_normal((n_c, n_u)) for j in neighbors},
            bound=5.0 * np.ones(n_c),
            state_weight=np.eye(n_x),
            input_weight=np.eye(n_u),
            terminal_weight=2.0 * np.eye(n_x),
        ))
    x0 = [rng.standard_normal(n_x) for _ in range(m)]
    return dg.NetworkedSystem(subsystems, adjacency, horizon, x0)


def test_chain_nonzeros_respect_incidence():
    system = chain_system()
    problem = dg.build_problem(system)
    G, _ = dg.assemble_dense(problem)
    graph = problem.graph
    p = graph.p_total
    for j in range(graph.M_bar):
        for i in range(graph.M):
            if graph.E[j, i]:
                continue
            cols = graph.z_slice(i)
            eq_rows = graph.eq_slice(j)
            iq = graph.ineq_slice(j)
            assert not G[eq_rows, cols.start:cols.stop].any()
            assert not G[p + iq.start:p + iq.stop, cols.start:cols.stop].any()


def test_builder_output_passes_validation():
    problem = dg.build_problem(chain_system(m=3, horizon=3))
    report = dg.validate(problem)
    assert report.full_row_rank
    assert report.sigmas_positive


def test_stage_cost_block_layout():
    system = chain_system(m=1, horizon=3, n_x=2, n_u=1, n_c=0)
    sub = system.subsystems[0]
    problem = dg.build_problem(system)
    Q = problem.objectives[0].Q
    # layout u(0) x(1) u(1) x(2) u(2) x(3): R,Q,R,Q,R,P on the diagonal
    expected = np.zeros((9, 9))
    expected[0:1, 0:1] = sub.input_weight
    expected[1:3, 1:3] = sub.state_weight
    expected[3:4, 3:4] = sub.input_weight
    expected[4:6, 4:6] = sub.state_weight
    expected[6:7, 6:7] = sub.input_weight
    expected[7:9, 7:9] = sub.terminal_weight
    assert np.array_equal(Q, expected)


def test_closed_form_check_zero_multiplier():
    problem = dg.build_problem(chain_system(m=1, horizon=2, n_c=0, seed=2))
    # x0 drives b, so z(0) is nonzero in general; with q = 0 and lam = 0
    # the inner minimizer is exactly zero.
    lam = dg.DualPoint(problem.graph)
    z = dg.closed_form_check(problem, lam)
    assert np.array_equal(z.z, np.zeros(problem.graph.n_total))


def test_closed_form_check_matches_solve_block(rng):
    problem = dg.build_problem(chain_system(m=2, horizon=3, seed=3))
    dim = problem.graph.p_total + problem.graph.q_total
    from dualgrad.dual_algo import _workspace
    ws = _workspace(problem)
    for _ in range(3):
        lam = rng.standard_normal(dim)
        lam[problem.graph.p_total:] = np.abs(lam[problem.graph.p_total:])
        z_check = dg.closed_form_check(problem, lam)
        zs = []
        for i, obj in enumerate(problem.objectives):
            w_i = ws.stack_T[i].dot(lam[ws.gather[i]])
            zs.append(dg.solve_block(obj, w_i))
        assert np.array_equal(z_check.z, np.concatenate(zs))


def test_closed_form_check_scalar_hand_value():
    problem = dg.build_problem(scalar_system())
    z = dg.closed_form_check(problem, np.array([1.0]))
    # w = A' nu = [-1, 1]; z = -Q^{-1} w = [1, -1]
    assert np.array_equal(z.z, np.array([1.0, -1.0]))


def test_closed_form_requires_quadratic():
    problem = dg.generate(3, 2, 2, True, 0)
    with pytest.raises(UnsupportedInstanceError):
        dg.closed_form_check(problem, dg.DualPoint(problem.graph))


def test_stage_stepper_matches_dense_path(rng):
    system = dg.random_network(4, 3, n_x=3, n_u=2, n_c=2, degree=2, seed=0)
    problem = dg.build_problem(system)
    weights, _ = dg.compute_weights(problem)
    stepper = dg.StageStepper(system, problem, weights)
    dim = problem.graph.p_total + problem.graph.q_total
    lam = np.abs(rng.standard_normal(dim)) * 0.5
    lam_dense = dg.DualPoint.from_flat(problem.graph, lam)
    lam_stage = lam.copy()
    for _ in range(5):
        lam_stage, z_stage = stepper.step(lam_stage)
        lam_dense, z_dense = dg.dg_step(problem, weights, lam_dense)
    scale = max(1.0, np.abs(lam_stage).max())
    assert np.abs(lam_stage - lam_dense.flat()).max() < 1e-9 * scale
    assert np.abs(z_stage - z_dense.z).max() < 1e-9 * max(1.0, np.abs(z_stage).max())


def test_stage_stepper_rejects_terminal_boxes():
    system = chain_system(m=1, horizon=2, n_c=0, seed=4)
    system.subsystems[0].terminal_box = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    problem = dg.build_problem(system)
    weights, _ = dg.compute_weights(problem)
    with pytest.raises(UnsupportedInstanceError):
        dg.StageStepper(system, problem, weights)


def test_terminal_box_rows_appended():
    system = chain_system(m=1, horizon=2, n_x=2, n_u=1, n_c=1, seed=5)
    lo, up = -np.ones(2), 2.0 * np.ones(2)
    system.subsystems[0].terminal_box = (lo, up)
    problem = dg.build_problem(system)
    graph = problem.graph
    assert graph.ineq_rows[0] == 2 * 1 + 4  # N stage rows plus box rows
    block = problem.C_blocks[(0, 0)]
    # last 4 rows: identity then negated identity on x(2)
    x_cols = slice(4, 6)  # z = [u0, x1(2), u1, x2(2)] -> x(2) at columns 4:6
    assert np.array_equal(block[2:4, x_cols], np.eye(2))
    assert np.array_equal(block[4:6, x_cols], -np.eye(2))
    assert np.array_equal(problem.c[2:4], up)
    assert np.array_equal(problem.c[4:6], -lo)


def test_dimension_mismatch_names_pair():
    system = chain_system(m=2, horizon=2)
    system.subsystems[1].dyn_state[0] = np.zeros((9, 9))
    with pytest.raises(StructureError, match=r"\(1,0\)"):
        dg.build_problem(system)


def test_system_file_roundtrip(tmp_path):
    system = chain_system(m=2, horizon=2, seed=6)
    path = tmp_path / "system.json"
    dg.save_system(system, path)
    again = dg.load_system(path)
    p1 = dg.build_problem(system)
    p2 = dg.build_problem(again)
    G1, g1 = dg.assemble_dense(p1)
    G2, g2 = dg.assemble_dense(p2)
    assert np.array_equal(G1, G2)
    assert np.array_equal(g1, g2)
    assert np.array_equal(p1.objectives[0].Q, p2.objectives[0].Q)


def test_dg_solves_built_problem_to_reference():
    problem = dg.build_problem(chain_system(m=2, horizon=2, seed=7))
    weights, _ = dg.compute_weights(problem)
    ref = dg.solve_reference(problem, weights=weights)
    trace = dg.run(problem, stop=dg.StopRule("prox_residual", 1e-8, 200000),
                   weights=weights)
    assert trace.status == "converged"
    z_gap = np.abs(trace.final_z - ref.z_star.z).max()
    assert z_gap < 1e-6
