import numpy as np
import pytest

import dualgrad as dg
from dualgrad.errors import StructureError

from conftest import small_instance


def make_single_block():
    graph = dg.BipartiteGraph([[1]], [1], [1], [1])
    obj = [dg.BlockObjective(np.array([[1.0]]), np.zeros(1))]
    return dg.BlockProblem(
        graph, obj,
        {(0, 0): np.array([[2.0]])},
        {(0, 0): np.array([[-1.0]])},
        np.array([0.0]), np.array([3.0]),
    )


def test_assemble_dense_single_block_stacking():
    G, g = dg.assemble_dense(make_single_block())
    assert np.array_equal(G, np.array([[2.0], [-1.0]]))
    assert np.array_equal(g, np.array([0.0, 3.0]))


def test_assemble_dense_column_count_matches_dimensions():
    problem, _, _ = small_instance(seed=3)
    G, _ = dg.assemble_dense(problem)
    assert G.shape[1] == problem.graph.block_dims.sum()
    assert G.shape[0] == problem.graph.p_total + problem.graph.q_total


def test_blockwise_matvec_matches_dense(rng):
    # 3-block instance: products computed through the graph against the
    # dense assembly.
    problem, _, _ = small_instance(seed=5, m=3, n=4, omega=2)
    G, _ = dg.assemble_dense(problem)
    for _ in range(5):
        z = rng.standard_normal(problem.graph.n_total)
        Az, Cz = dg.apply_constraints(problem, z)
        dense = G.dot(z)
        assert np.abs(np.concatenate([Az, Cz]) - dense).max() < 1e-12


def test_validate_rank_deficient_rows():
    graph = dg.BipartiteGraph([[1]], [2], [2], [0])
    obj = [dg.BlockObjective(np.eye(2), np.zeros(2))]
    problem = dg.BlockProblem(
        graph, obj, {(0, 0): np.array([[1.0, 0.0], [2.0, 0.0]])}, {},
        np.zeros(2), np.zeros(0))
    report = dg.validate(problem)
    assert report.full_row_rank is False
    assert report.rank_A == 1


def test_validate_full_rank_single_row():
    graph = dg.BipartiteGraph([[1]], [2], [1], [0])
    obj = [dg.BlockObjective(np.eye(2), np.zeros(2))]
    problem = dg.BlockProblem(
        graph, obj, {(0, 0): np.array([[1.0, 1.0]])}, {},
        np.zeros(1), np.zeros(0))
    assert dg.validate(problem).full_row_rank is True


@pytest.mark.parametrize("seed", range(10))
def test_generated_instances_have_full_row_rank(seed):
    problem = dg.generate(5, 3, 2, False, seed)
    report = dg.validate(problem)
    assert report.full_row_rank
    assert report.sigmas_positive
    assert report.strict_point_ok


def test_validate_is_pure():
    problem, _, _ = small_instance(seed=1)
    assert dg.validate(problem) == dg.validate(problem)


def test_neighborhoods_identity_incidence():
    graph = dg.BipartiteGraph(np.eye(3, dtype=int), [1] * 3, [1] * 3, [0] * 3)
    v2_of, v1_of, omega = dg.neighborhoods(graph)
    assert all(len(a) == 1 for a in v2_of)
    assert all(len(a) == 1 for a in v1_of)
    assert omega == 1


def test_neighborhoods_complete_bipartite():
    graph = dg.BipartiteGraph(np.ones((4, 4), dtype=int), [1] * 4, [1] * 4, [0] * 4)
    assert dg.neighborhoods(graph)[2] == 4


def test_neighborhoods_mixed_degrees():
    # Row sums {2, 3}, column sums {1, 2, 2}: the measure is 3.
    E = np.array([[0, 1, 1], [1, 1, 1]])
    graph = dg.BipartiteGraph(E, [1] * 3, [1] * 2, [0] * 2)
    assert dg.neighborhoods(graph)[2] == 3


def test_phantom_block_rejected():
    graph = dg.BipartiteGraph([[1, 0]], [1, 1], [1], [0])
    obj = [dg.BlockObjective(np.eye(1), np.zeros(1)) for _ in range(2)]
    with pytest.raises(StructureError):
        dg.BlockProblem(graph, obj, {(0, 1): np.array([[1.0]])}, {},
                        np.zeros(1), np.zeros(0))


def test_block_shape_mismatch_names_edge():
    graph = dg.BipartiteGraph([[1]], [2], [1], [0])
    obj = [dg.BlockObjective(np.eye(2), np.zeros(2))]
    with pytest.raises(StructureError, match=r"\(0,0\)"):
        dg.BlockProblem(graph, obj, {(0, 0): np.array([[1.0]])}, {},
                        np.zeros(1), np.zeros(0))


def test_stored_blocks_roundtrip_through_dense():
    problem, _, _ = small_instance(seed=2)
    G, _ = dg.assemble_dense(problem)
    graph = problem.graph
    for (j, i), block in problem.A_blocks.items():
        rows = graph.eq_slice(j)
        cols = graph.z_slice(i)
        assert np.array_equal(G[rows, cols.start:cols.stop], block)
    for (j, i), block in problem.C_blocks.items():
        rows = graph.ineq_slice(j)
        cols = graph.z_slice(i)
        sub = G[graph.p_total + rows.start:graph.p_total + rows.stop,
                cols.start:cols.stop]
        assert np.array_equal(sub, block)


def test_strict_point_margins_enforced():
    graph = dg.BipartiteGraph([[1]], [1], [0], [1])
    obj = [dg.BlockObjective(np.eye(1), np.zeros(1))]
    # witness sits exactly on the boundary: rejected
    with pytest.raises(StructureError):
        dg.BlockProblem(graph, obj, {}, {(0, 0): np.array([[1.0]])},
                        np.zeros(0), np.array([1.0]), strict_point=np.array([1.0]))
    # comfortably interior: accepted
    dg.BlockProblem(graph, obj, {}, {(0, 0): np.array([[1.0]])},
                    np.zeros(0), np.array([1.0]), strict_point=np.array([0.0]))


def test_dual_point_domain_flag():
    graph = dg.BipartiteGraph([[1]], [1], [1], [1])
    inside = dg.DualPoint(graph, np.array([-5.0]), np.array([0.0]))
    outside = dg.DualPoint(graph, np.array([0.0]), np.array([-1e-12]))
    assert inside.in_domain
    assert not outside.in_domain


def test_problem_file_roundtrip(tmp_path):
    problem, _, _ = small_instance(seed=4, gamma=True)
    path = tmp_path / "problem.json"
    dg.save_problem(problem, path)
    again = dg.load_problem(path)
    assert again.graph == problem.graph
    for (j, i), block in problem.A_blocks.items():
        assert np.array_equal(again.A_blocks[(j, i)], block)
    for idx, obj in enumerate(problem.objectives):
        assert np.array_equal(again.objectives[idx].Q, obj.Q)
        assert np.array_equal(again.objectives[idx].q, obj.q)
        assert again.objectives[idx].gamma == obj.gamma
    assert np.array_equal(again.b, problem.b)
    assert np.array_equal(again.c, problem.c)
    assert np.array_equal(again.strict_point, problem.strict_point)
    # writing the reloaded problem reproduces the file byte for byte
    path2 = tmp_path / "problem2.json"
    dg.save_problem(again, path2)
    assert path.read_bytes() == path2.read_bytes()
