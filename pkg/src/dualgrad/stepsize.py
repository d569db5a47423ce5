"""Dual Lipschitz constants and the diagonal weight matrix for the solver.

The gradient of each block's dual contribution is Lipschitz with constant
||S_i||^2 / sigma_i, where S_i stacks block i's coupling rows.  Summing
those constants over the neighbors of each constraint block yields the
diagonal weight matrix that serves as a fully distributed step size: the
dual function satisfies

    d(x) >= d(y) + <grad d(y), x - y> - 0.5 ||x - y||_W^2

for all dual x, y, and no smaller diagonal matrix works in general (see
:func:`tightness_instance` for the family attaining equality).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, StructureError
from .model import assemble_dense
from .oracles import block_constants

POWER_TOL = 1e-10
POWER_MAX_ITER = 10000
DENSE_FALLBACK_MAX_DIM = 512


def _power_iteration(M, v0):
    """Largest eigenvalue of M'M by power iteration from a fixed start.

    Returns (value, converged).  Convergence is declared when successive
    eigenvalue estimates agree to POWER_TOL relative and the eigenvector
    residual is small.
    """
    v = v0 / np.linalg.norm(v0)
    theta_prev = 0.0
    for _ in range(POWER_MAX_ITER):
        u = M.dot(v)
        w = M.T.dot(u)
        theta = float(v.dot(w))
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0, True
        v_next = w / norm_w
        if abs(theta - theta_prev) <= POWER_TOL * max(abs(theta), 1e-300):
            residual = np.linalg.norm(w - theta * v)
            if residual <= 1e-6 * max(abs(theta), 1e-300):
                return theta, True
        theta_prev = theta
        v = v_next
    return theta_prev, False


def spectral_norm_sq(M):
    """Squared spectral norm ||M||^2, deterministically.

    Power iteration on M'M starting from the normalized all-ones vector.
    A start vector orthogonal to the top eigenvector (or near-equal top
    eigenvalues) is handled by one deterministic perturbation retry
    (1e-3 added to the first coordinate) and then by a dense
    eigendecomposition for dimensions up to DENSE_FALLBACK_MAX_DIM.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    cols = M.shape[1]
    if M.size == 0:
        return 0.0

    v0 = np.ones(cols)
    theta, ok = _power_iteration(M, v0)
    if not ok:
        v0 = np.ones(cols)
        v0[0] += 1e-3
        theta, ok = _power_iteration(M, v0)
    if not ok:
        if max(M.shape) <= DENSE_FALLBACK_MAX_DIM:
            return float(np.linalg.eigvalsh(M.T.dot(M))[-1])
        raise NumericsError(
            "power iteration did not converge (near-equal top eigenvalues)"
        )
    return theta


def stacked_coupling(problem, i):
    """Stack all coupling blocks of primal block i into one matrix.

    Blocks are stacked by constraint block ascending, equality rows above
    inequality rows within each block; absent blocks contribute zero rows
    so the stack always has sum_j (p_j + q_j) rows over the neighborhood.
    """
    graph = problem.graph
    neighbors = graph.v2_of[i]
    if len(neighbors) == 0:
        raise StructureError(f"primal block {i} has no coupling blocks")
    n_i = int(graph.block_dims[i])
    pieces = []
    for j in neighbors:
        j = int(j)
        p_j = int(graph.eq_rows[j])
        q_j = int(graph.ineq_rows[j])
        A = problem.A_blocks.get((j, i))
        C = problem.C_blocks.get((j, i))
        pieces.append(A if A is not None else np.zeros((p_j, n_i)))
        pieces.append(C if C is not None else np.zeros((q_j, n_i)))
    return np.ascontiguousarray(np.vstack(pieces))


def block_dual_lipschitz(problem, i):
    """Lipschitz constant of block i's dual gradient: ||S_i||^2 / sigma_i."""
    stack = stacked_coupling(problem, i)
    sigma, _ = block_constants(problem.objectives[i])
    return spectral_norm_sq(stack) / sigma


def global_dual_lipschitz(problem):
    """Centralized dual gradient Lipschitz constant ||G||^2 / sigma_f.

    Uses the dense assembly; intended for desk-scale experiments and the
    centralized baseline, not for the distributed iteration itself.
    """
    G, _ = assemble_dense(problem)
    sigma_f = min(block_constants(obj)[0] for obj in problem.objectives)
    return spectral_norm_sq(G) / sigma_f


@dataclass
class Weights:
    """Diagonal dual step-size matrix, stored per constraint block.

    ``w_nu[j]`` and ``w_mu[j]`` both equal the sum of the block dual
    Lipschitz constants over the neighbors of constraint block j; they
    scale the equality and inequality rows of block j respectively.
    ``flat`` expands the diagonal to the global dual ordering.
    """

    w_nu: np.ndarray
    w_mu: np.ndarray
    flat: np.ndarray = field(repr=False)
    inv_flat: np.ndarray = field(repr=False)
    inv_w_nu: np.ndarray = field(repr=False)
    inv_w_mu: np.ndarray = field(repr=False)
    underline_w: float
    overline_w: float

    @classmethod
    def from_per_block(cls, graph, w_nu, w_mu):
        w_nu = np.asarray(w_nu, dtype=float)
        w_mu = np.asarray(w_mu, dtype=float)
        active = (graph.eq_rows + graph.ineq_rows) > 0
        if (w_nu[active] <= 0).any() or (w_mu[active] <= 0).any():
            raise StructureError(
                "degenerate weight: some constraint block has no neighbor "
                "with a positive dual Lipschitz constant"
            )
        inv_w_nu = np.where(w_nu > 0, 1.0 / np.where(w_nu > 0, w_nu, 1.0), 0.0)
        inv_w_mu = np.where(w_mu > 0, 1.0 / np.where(w_mu > 0, w_mu, 1.0), 0.0)
        flat = np.concatenate([
            np.repeat(w_nu, graph.eq_rows),
            np.repeat(w_mu, graph.ineq_rows),
        ])
        inv_flat = np.concatenate([
            np.repeat(inv_w_nu, graph.eq_rows),
            np.repeat(inv_w_mu, graph.ineq_rows),
        ])
        if flat.size == 0:
            raise StructureError("weight matrix has no rows")
        return cls(
            w_nu=w_nu,
            w_mu=w_mu,
            flat=flat,
            inv_flat=inv_flat,
            inv_w_nu=inv_w_nu,
            inv_w_mu=inv_w_mu,
            underline_w=float(flat.min()),
            overline_w=float(flat.max()),
        )

    def norm(self, x):
        """Weighted norm ||x||_W of a flat dual-shaped vector."""
        return float(np.sqrt(x.dot(self.flat * x)))

    def inv_norm(self, x):
        """Weighted norm ||x||_{W^{-1}} of a flat dual-shaped vector."""
        return float(np.sqrt(x.dot(self.inv_flat * x)))


def assemble_weights(problem, block_lipschitz):
    """Build the weight matrix from precomputed per-block constants.

    Per constraint block j, the weight is the sum of ``block_lipschitz[i]``
    over neighbors i in ascending order (fixed reduction order keeps the
    result bitwise reproducible).
    """
    graph = problem.graph
    block_lipschitz = np.asarray(block_lipschitz, dtype=float)
    if block_lipschitz.shape != (graph.M,):
        raise StructureError("one dual Lipschitz constant per primal block required")
    w = np.zeros(graph.M_bar)
    for j in range(graph.M_bar):
        total = 0.0
        for i in graph.v1_of[j]:
            total += float(block_lipschitz[int(i)])
        w[j] = total
    return Weights.from_per_block(graph, w, w.copy())


def compute_weights(problem):
    """Per-block dual Lipschitz constants and the assembled weight matrix.

    Returns
    -------
    weights : Weights
    block_lipschitz : (M,) ndarray
    """
    constants = np.array([
        block_dual_lipschitz(problem, i) for i in range(problem.graph.M)
    ])
    return assemble_weights(problem, constants), constants


def tightness_instance(omega, m, sigmas=None):
    """Instance on which the weighted descent inequality is tight.

    Quadratic blocks f_i(z) = sigma_i z^2 / 2 with scalar variables and an
    equality-only m-by-m coupling matrix holding a circulant 0/1 pattern
    with exactly ``omega`` ones per row and per column, column i scaled by
    1 / sqrt(sigma_i).  Along the all-ones direction h the curvature of
    the dual matches the weight matrix exactly:
    ||h||^2_{G Q^{-1} G'} = ||h||^2_W.

    Returns
    -------
    problem : BlockProblem
    h : (m,) ndarray
        The all-ones direction attaining equality.
    """
    from .model import BipartiteGraph, BlockProblem
    from .oracles import BlockObjective

    if not 1 <= omega <= m:
        raise StructureError("need 1 <= omega <= m")
    if sigmas is None:
        sigmas = np.ones(m)
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.shape != (m,) or (sigmas <= 0).any():
        raise StructureError("sigmas must be m positive scalars")

    E = np.zeros((m, m), dtype=np.int8)
    for j in range(m):
        for k in range(omega):
            E[j, (j + k) % m] = 1
    graph = BipartiteGraph(E, [1] * m, [1] * m, [0] * m)
    objectives = [
        BlockObjective(np.array([[s]]), np.zeros(1)) for s in sigmas
    ]
    A_blocks = {}
    for j in range(m):
        for i in graph.v1_of[j]:
            i = int(i)
            A_blocks[(j, i)] = np.array([[1.0 / np.sqrt(sigmas[i])]])
    problem = BlockProblem(
        graph, objectives, A_blocks, {}, np.zeros(m), np.zeros(0),
    )
    return problem, np.ones(m)
