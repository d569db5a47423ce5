"""Seeded random instance generator for the benchmark family.

Instances couple M equal-size blocks through a random incidence pattern
with exactly ``omega`` neighbors per node on both sides (a circulant 0/1
base pattern with a seeded column shuffle).  Per constraint block there
are ceil(3 n / 4) equality rows and ceil(3 n / 2) inequality rows, all
block entries standard normal.  Quadratic terms are made positive
definite by Q <- Q'Q + sigma I with sigma uniform on [1, 10]; linear and
softplus terms are uniform on [-1, 1].

Right-hand sides are built from a standard-normal witness: b = A z~ and
c = C z~ + s with slacks s uniform on [0.1, 1.1], which guarantees a
strictly feasible point (stored with the problem).

All draws use numpy's PCG64 generator seeded with ``[seed, attempt]``, in
a documented fixed order, so equal seeds reproduce byte-identical problem
files across platforms.
"""

import math

import numpy as np

from .errors import GenerationError, StructureError
from .model import BipartiteGraph, BlockProblem, assemble_dense, RANK_TOL
from .oracles import BlockObjective

MAX_ATTEMPTS = 4  # initial draw plus up to 3 reseeded retries


def _shuffled_circulant(rng, m, omega):
    """0/1 incidence with exactly omega ones per row and per column."""
    base = np.zeros((m, m), dtype=np.int8)
    for j in range(m):
        for k in range(omega):
            base[j, (j + k) % m] = 1
    perm = rng.permutation(m)
    E = np.zeros_like(base)
    E[:, perm] = base
    return E


def _sample(rng, m, n_block, omega, gamma_flag, eq_rows, ineq_rows, seed, attempt):
    E = _shuffled_circulant(rng, m, omega)
    graph = BipartiteGraph(E, [n_block] * m, [eq_rows] * m, [ineq_rows] * m)

    objectives = []
    for _ in range(m):
        raw = rng.standard_normal((n_block, n_block))
        sigma = rng.uniform(1.0, 10.0)
        Q = raw.T.dot(raw) + sigma * np.eye(n_block)
        q = rng.uniform(-1.0, 1.0, n_block)
        a = rng.uniform(-1.0, 1.0, n_block)
        gamma = 1.0 if gamma_flag else 0.0
        objectives.append(BlockObjective(Q, q, gamma=gamma, a=a))

    A_blocks, C_blocks = {}, {}
    for j in range(m):
        for i in graph.v1_of[j]:
            i = int(i)
            if eq_rows:
                A_blocks[(j, i)] = rng.standard_normal((eq_rows, n_block))
            if ineq_rows:
                C_blocks[(j, i)] = rng.standard_normal((ineq_rows, n_block))

    witness = rng.standard_normal(graph.n_total)
    slack = rng.uniform(0.1, 1.1, graph.q_total)

    # Right-hand sides from the witness, accumulated blockwise in the same
    # fixed order the solvers use.
    b = np.zeros(graph.p_total)
    c = np.zeros(graph.q_total)
    for j in range(m):
        for i in graph.v1_of[j]:
            i = int(i)
            zi = witness[graph.z_slice(i)]
            if (j, i) in A_blocks:
                b[graph.eq_slice(j)] += A_blocks[(j, i)].dot(zi)
            if (j, i) in C_blocks:
                c[graph.ineq_slice(j)] += C_blocks[(j, i)].dot(zi)
    c += slack

    return BlockProblem(
        graph, objectives, A_blocks, C_blocks, b, c,
        strict_point=witness if ineq_rows else None,
        meta={
            "seed": int(seed),
            "attempt": int(attempt),
            "omega": int(omega),
            "gamma": 1.0 if gamma_flag else 0.0,
        },
    )


def _equality_rank(problem):
    G, _ = assemble_dense(problem)
    A = G[:problem.graph.p_total]
    if A.size == 0:
        return 0
    svals = np.linalg.svd(A, compute_uv=False)
    return int((svals > RANK_TOL * svals[0]).sum())


def generate(m, n_block, omega, gamma_flag, seed):
    """Draw one benchmark instance; deterministic given the seed.

    Parameters
    ----------
    m : int
        Number of primal blocks (and of constraint blocks).
    n_block : int
        Dimension of every primal block.
    omega : int
        Neighborhood size on both sides, 1 <= omega <= m.
    gamma_flag : bool
        Include the softplus term (weight 1) in every block objective.
    seed : int

    Returns
    -------
    BlockProblem
        Full-row-rank equality part, strictly feasible witness stored.
    """
    if not 1 <= omega <= m:
        raise StructureError("need 1 <= omega <= m")
    eq_rows = math.ceil(3 * n_block / 4)
    ineq_rows = math.ceil(3 * n_block / 2)
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([int(seed), attempt])
        problem = _sample(rng, m, n_block, omega, gamma_flag,
                          eq_rows, ineq_rows, seed, attempt)
        if _equality_rank(problem) == problem.graph.p_total:
            return problem
    raise GenerationError(
        f"equality matrix rank-deficient after {MAX_ATTEMPTS} attempts (seed {seed})"
    )


def generate_full_row_rank(m, n_block, omega, seed, eq_rows=1, ineq_rows=1):
    """Quadratic instance whose full constraint matrix has full row rank.

    With few rows per constraint block (p + q <= n) the stacked matrix is
    generically full row rank, which makes the dual strongly concave; the
    error-bound probe needs such instances.  gamma is zero throughout.
    """
    if not 1 <= omega <= m:
        raise StructureError("need 1 <= omega <= m")
    if m * (eq_rows + ineq_rows) > m * n_block:
        raise StructureError("row counts exceed the variable dimension")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([int(seed), 1000 + attempt])
        problem = _sample(rng, m, n_block, omega, False,
                          eq_rows, ineq_rows, seed, attempt)
        G, _ = assemble_dense(problem)
        svals = np.linalg.svd(G, compute_uv=False)
        rank = int((svals > RANK_TOL * svals[0]).sum())
        if rank == G.shape[0]:
            return problem
    raise GenerationError(
        f"stacked matrix rank-deficient after {MAX_ATTEMPTS} attempts (seed {seed})"
    )


def scalar_demo_problem():
    """The hand-checkable one-variable instance: min z^2/2 s.t. z = 1.

    The dual is d(nu) = -nu^2/2 - nu, the weight is 1, and one weighted
    step from zero lands exactly on the optimal multiplier nu = -1 with
    z = 1 and optimal value 1/2.
    """
    graph = BipartiteGraph([[1]], [1], [1], [0])
    objectives = [BlockObjective(np.array([[1.0]]), np.zeros(1))]
    return BlockProblem(
        graph, objectives,
        {(0, 0): np.array([[1.0]])}, {},
        np.array([1.0]), np.zeros(0),
        meta={"seed": 0, "omega": 1, "gamma": 0.0},
    )
