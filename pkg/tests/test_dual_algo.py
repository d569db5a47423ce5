import numpy as np
import pytest

import dualgrad as dg
from dualgrad.dual_algo import TRACE_COLUMNS
from dualgrad.errors import StructureError

from conftest import small_instance, small_reference


def random_dual_points(problem, rng, count, nonneg_margin=0.0):
    dim = problem.graph.p_total + problem.graph.q_total
    p = problem.graph.p_total
    points = []
    for _ in range(count):
        lam = rng.standard_normal(dim)
        lam[p:] = np.abs(lam[p:]) + nonneg_margin
        points.append(lam)
    return points


# ---------------------------------------------------------------------------
# dual value / gradient

def test_dual_value_scalar_hand_algebra(scalar_problem):
    assert dg.dual_value(scalar_problem, np.array([0.0])) == 0.0
    assert dg.dual_value(scalar_problem, np.array([-1.0])) == pytest.approx(0.5, abs=1e-15)


def test_dual_value_separable_matches_dense(rng):
    problem, _, _ = small_instance(seed=0, gamma=True)
    for lam in random_dual_points(problem, rng, 5):
        sep = dg.dual_value(problem, lam)
        dense = dg.dense_dual_value(problem, lam)
        assert abs(sep - dense) < 1e-12 * max(1.0, abs(dense))


def test_dual_gradient_scalar_optimum():
    graph = dg.BipartiteGraph([[1]], [1], [1], [0])
    objs = [dg.BlockObjective(np.eye(1), np.zeros(1))]
    problem = dg.BlockProblem(graph, objs, {(0, 0): np.eye(1)}, {},
                              np.zeros(1), np.zeros(0))
    grad, z = dg.dual_gradient(problem, np.zeros(1))
    assert np.allclose(grad.nu, 0.0)
    assert np.allclose(z.z, 0.0)


def test_dual_gradient_scalar_closed_form(scalar_problem):
    for nu in (-2.0, 0.5, 3.0):
        grad, z = dg.dual_gradient(scalar_problem, np.array([nu]))
        assert z.z[0] == pytest.approx(-nu, abs=1e-15)
        assert grad.nu[0] == pytest.approx(-nu - 1.0, abs=1e-15)


@pytest.mark.parametrize("gamma", [False, True])
def test_dual_gradient_matches_finite_differences(gamma, rng):
    problem, _, _ = small_instance(seed=1, gamma=gamma)
    dim = problem.graph.p_total + problem.graph.q_total
    h = 1e-6
    for lam in random_dual_points(problem, rng, 3, nonneg_margin=0.1):
        grad, _ = dg.dual_gradient(problem, lam)
        g = np.concatenate([grad.nu, grad.mu])
        fd = np.empty(dim)
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = h
            fd[k] = (dg.dense_dual_value(problem, lam + e)
                     - dg.dense_dual_value(problem, lam - e)) / (2 * h)
        assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


# ---------------------------------------------------------------------------
# projection and proximal residual

def test_projection_examples():
    graph = dg.BipartiteGraph([[1]], [1], [1], [1])
    lam = dg.DualPoint(graph, np.array([5.0]), np.array([-1.0]))
    proj = dg.project_onto_domain(lam)
    assert proj.nu[0] == 5.0 and proj.mu[0] == 0.0
    lam2 = dg.DualPoint(graph, np.array([5.0]), np.array([2.0]))
    assert dg.project_onto_domain(lam2).mu[0] == 2.0


def test_weighted_projection_equals_clamp(rng):
    # coordinatewise oracle: minimize w*(x - raw)^2 over the domain; the
    # parabola vertex is raw, so the constrained minimizer is the clamp,
    # independent of the positive weight.
    problem, weights, _ = small_instance(seed=2)
    graph = problem.graph
    p = graph.p_total
    for _ in range(5):
        raw = rng.standard_normal(p + graph.q_total) * 3
        lam = dg.DualPoint(graph, raw[:p], raw[p:])
        proj = dg.project_onto_domain(lam).flat()
        oracle = np.empty_like(raw)
        for k in range(raw.size):
            vertex = raw[k]  # argmin of w (x - raw_k)^2
            if k >= p and vertex < 0.0:
                vertex = 0.0
            oracle[k] = vertex
        assert np.array_equal(proj, oracle)


def test_prox_residual_zero_at_optimum():
    problem, weights, _ = small_instance(seed=3)
    ref = small_reference(seed=3)
    _, norm_w = dg.prox_residual(problem, ref.lambda_ref, weights)
    assert norm_w <= 1e-8


def test_prox_residual_equals_step_same_path(scalar_problem, scalar_weights):
    lam = dg.DualPoint(scalar_problem.graph, np.array([0.3]), np.zeros(0))
    res, norm_w = dg.prox_residual(scalar_problem, lam, scalar_weights)
    lam_next, _ = dg.dg_step(scalar_problem, scalar_weights, lam)
    assert np.array_equal(res.nu, lam_next.nu - lam.nu)


def test_prox_residual_matches_dense_recompute(rng):
    problem, weights, _ = small_instance(seed=4, gamma=True)
    G, g = dg.assemble_dense(problem)
    p = problem.graph.p_total
    for lam in random_dual_points(problem, rng, 5):
        res, norm_w = dg.prox_residual(problem, lam, weights)
        z = dg.dual_gradient(problem, lam)[1].z
        raw = lam + (G.dot(z) - g) * weights.inv_flat
        raw[p:] = np.maximum(raw[p:], 0.0)
        dense_res = raw - lam
        assert np.abs(np.concatenate([res.nu, res.mu]) - dense_res).max() < 1e-12
        assert norm_w == pytest.approx(weights.norm(dense_res), rel=1e-12)


# ---------------------------------------------------------------------------
# steps

def test_dg_step_scalar_one_step_convergence(scalar_problem, scalar_weights):
    lam0 = dg.DualPoint(scalar_problem.graph)
    lam1, z0 = dg.dg_step(scalar_problem, scalar_weights, lam0)
    assert z0.z[0] == 0.0
    assert lam1.nu[0] == -1.0
    lam2, z1 = dg.dg_step(scalar_problem, scalar_weights, lam1)
    assert lam2.nu[0] == -1.0  # fixed point
    assert z1.z[0] == 1.0


def test_dg_step_fixed_point_at_optimum():
    problem, weights, _ = small_instance(seed=5)
    ref = small_reference(seed=5)
    lam_next, _ = dg.dg_step(problem, weights, ref.lambda_ref)
    diff = np.abs(lam_next.flat() - ref.lambda_ref.flat()).max()
    assert diff <= 1e-9


def test_dg_step_matches_dense_simulation(rng):
    problem, weights, _ = small_instance(seed=6, m=2, n=3, omega=1)
    G, g = dg.assemble_dense(problem)
    p = problem.graph.p_total
    for lam in random_dual_points(problem, rng, 3):
        lam_next, z = dg.dg_step(problem, weights, lam)
        raw = lam + (G.dot(z.z) - g) * weights.inv_flat
        raw[p:] = np.maximum(raw[p:], 0.0)
        assert np.abs(lam_next.flat() - raw).max() < 1e-12


def test_cg_step_scalar_equals_dg(scalar_problem, scalar_weights):
    lam0 = dg.DualPoint(scalar_problem.graph)
    lips = dg.global_dual_lipschitz(scalar_problem)
    assert lips == pytest.approx(1.0, rel=1e-12)
    cg1, _ = dg.cg_step(scalar_problem, lips, lam0)
    dg1, _ = dg.dg_step(scalar_problem, scalar_weights, lam0)
    assert cg1.nu[0] == dg1.nu[0]


def test_cg_run_is_ascent():
    problem, weights, _ = small_instance(seed=7)
    trace = dg.run(problem, algo="cg", stop=dg.StopRule("iteration_cap", 1.0, 300),
                   weights=weights)
    assert (np.diff(trace.dual) >= -1e-9 * np.maximum(1.0, np.abs(trace.dual[:-1]))).all()


# ---------------------------------------------------------------------------
# run driver

def test_run_scalar_cap_mode_stops_at_fixed_point(scalar_problem):
    trace = dg.run(scalar_problem, stop=dg.StopRule("iteration_cap", 1.0, 10))
    assert trace.status == "converged"
    assert trace.iterations == 1
    assert len(trace) == 2
    assert trace.final_lambda[0] == -1.0


def test_run_from_optimum_converges_immediately():
    problem, weights, _ = small_instance(seed=5)
    ref = small_reference(seed=5)
    trace = dg.run(problem, lam0=ref.lambda_ref,
                   stop=dg.StopRule("prox_residual", 1e-8, 100), weights=weights)
    assert trace.status == "converged"
    assert trace.iterations == 0
    assert len(trace) == 1


def test_run_cap_mode_row_count(scalar_problem):
    graph = scalar_problem.graph
    # a start away from the fixed point so the cap binds: use an instance
    # that does not converge in one step
    problem, weights, _ = small_instance(seed=8)
    trace = dg.run(problem, stop=dg.StopRule("iteration_cap", 1.0, 10), weights=weights)
    assert trace.status == "cap_reached"
    assert len(trace) == 11  # rows k = 0..10
    assert trace.iterations == 10


def test_run_relative_stop_and_trace_columns(tmp_path):
    problem, weights, _ = small_instance(seed=0)
    ref = small_reference(seed=0)
    trace = dg.run(problem, stop=dg.StopRule("relative_primal", 1e-4, 100000),
                   reference=ref, weights=weights)
    assert trace.status == "converged"
    last = len(trace) - 1
    assert abs(trace.f[last] - ref.f_star) / abs(ref.f_star) <= 1e-4
    # residual identity along the whole run
    assert np.array_equal(trace.prox_w, trace.step_w)
    # CSV round trip
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    cols = dg.load_trace_csv(path)
    assert tuple(cols.keys()) == TRACE_COLUMNS
    assert np.array_equal(cols["dual"], trace.dual)
    assert np.array_equal(cols["prox_w"], trace.prox_w)


def test_run_without_reference_uses_nan():
    problem, weights, _ = small_instance(seed=1)
    trace = dg.run(problem, stop=dg.StopRule("iteration_cap", 1.0, 5), weights=weights)
    assert np.isnan(trace.dual_subopt).all()
    assert np.isnan(trace.dist_z).all()
    assert np.isfinite(trace.infeas_w).all()


def test_run_rejects_rel_stop_without_reference():
    problem, weights, _ = small_instance(seed=1)
    with pytest.raises(StructureError):
        dg.run(problem, stop=dg.StopRule("relative_primal", 1e-4, 10), weights=weights)


def test_run_rejects_start_outside_domain():
    problem, weights, _ = small_instance(seed=1)
    lam = np.zeros(problem.graph.p_total + problem.graph.q_total)
    lam[-1] = -1.0
    with pytest.raises(StructureError):
        dg.run(problem, lam0=lam, stop=dg.StopRule("iteration_cap", 1.0, 5),
               weights=weights)


def test_stop_rule_validation():
    with pytest.raises(StructureError):
        dg.StopRule("nonsense")
    with pytest.raises(StructureError):
        dg.StopRule("iteration_cap", eps=-1.0)
    with pytest.raises(StructureError):
        dg.StopRule("iteration_cap", cap=0)


def test_ascent_inequality_along_run():
    problem, weights, _ = small_instance(seed=2, gamma=True)
    trace = dg.run(problem, stop=dg.StopRule("iteration_cap", 1.0, 400), weights=weights)
    gain = np.diff(trace.dual)
    required = 0.5 * trace.step_w[:-1] ** 2 - 1e-9 * np.maximum(1.0, np.abs(trace.dual[:-1]))
    assert (gain >= required).all()


def test_first_iterate_bound():
    problem, weights, _ = small_instance(seed=3)
    ref = small_reference(seed=3)
    trace = dg.run(problem, stop=dg.StopRule("iteration_cap", 1.0, 2),
                   reference=ref, weights=weights)
    radius_sq = weights.norm(ref.lambda_ref.flat()) ** 2  # start is zero
    assert ref.f_star - trace.dual[1] <= 0.5 * radius_sq + 1e-8


def test_monotone_distance_to_reference_multiplier():
    problem, weights, _ = small_instance(seed=4)
    ref = small_reference(seed=4)
    lam_star = ref.lambda_ref.flat()
    dists = []
    dg.run(problem, stop=dg.StopRule("iteration_cap", 1.0, 300), weights=weights,
           on_iterate=lambda k, lam, z: dists.append(weights.norm(lam - lam_star)))
    dists = np.asarray(dists)
    assert (np.diff(dists) <= 1e-9).all()


def test_linear_decay_envelope_on_tail():
    problem, weights, _ = small_instance(seed=0)
    ref = small_reference(seed=0)
    trace = dg.run(problem, stop=dg.StopRule("relative_primal", 1e-5, 100000),
                   reference=ref, weights=weights)
    half = len(trace) // 2
    for name in ("dual_subopt", "infeas_w", "dist_z"):
        tail = getattr(trace, name)[half:]
        tail = tail[tail > 1e-12]
        lag = 10
        assert (tail[lag:] / tail[:-lag] < 1.0).all(), name
    primal = np.abs(trace.primal_subopt[half:])
    primal = primal[primal > 1e-12]
    assert (primal[10:] / primal[:-10] < 1.0).all()


# ---------------------------------------------------------------------------
# metrics

def test_metrics_positive_part_projection():
    graph = dg.BipartiteGraph([[1]], [1], [1], [1])
    objs = [dg.BlockObjective(np.eye(1), np.zeros(1))]
    problem = dg.BlockProblem(graph, objs,
                              {(0, 0): np.array([[1.0]])},
                              {(0, 0): np.array([[1.0]])},
                              np.array([0.7]), np.array([1.5]))
    weights = dg.Weights.from_per_block(graph, np.array([1.0]), np.array([1.0]))
    ref = dg.solve_reference(problem, weights=weights)
    # z = 1.0 gives A z - b = 0.3 and C z - c = -0.5
    row = dg.metrics(problem, weights, ref, np.array([1.0]), dg.DualPoint(graph))
    assert row.infeas_w == pytest.approx(0.3, abs=1e-12)


def test_metrics_at_reference_solution():
    problem, weights, _ = small_instance(seed=5)
    ref = small_reference(seed=5)
    row = dg.metrics(problem, weights, ref, ref.z_star, ref.lambda_ref)
    assert row.infeas_w <= 1e-8
    assert row.dist_z <= 1e-8


def test_metrics_matches_dense_formula(rng):
    problem, weights, _ = small_instance(seed=6)
    ref = small_reference(seed=6)
    G, g = dg.assemble_dense(problem)
    p = problem.graph.p_total
    z = rng.standard_normal(problem.graph.n_total)
    lam = dg.DualPoint(problem.graph)
    row = dg.metrics(problem, weights, ref, z, lam)
    resid = G.dot(z) - g
    resid[p:] = np.maximum(resid[p:], 0.0)
    expected = np.sqrt(resid.dot(resid * weights.inv_flat))
    assert row.infeas_w == pytest.approx(expected, rel=1e-12)
