"""Block-structured model of linearly constrained separable convex programs.

A problem couples M primal blocks z_i only through linear constraints
A z = b and C z <= c whose rows are grouped into M_bar constraint blocks.
A bipartite graph records which (constraint block j, primal block i) pairs
interact; block (j, i) of A or C may be stored only where the incidence
is 1, and an absent block is an implicit zero.

Row and column conventions are fixed globally so dense and blockwise
computations are directly comparable: variables are ordered by primal
block i ascending; constraint rows are ordered as all equality rows by
constraint block j ascending, then all inequality rows by j ascending.
Dual vectors follow the same layout, equality multipliers first.

Problems are immutable after construction and safe to share across
concurrent workers.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import jsonio
from .errors import StructureError

# Rank test threshold, scaled by the largest singular value of A.
RANK_TOL = 1e-10
# Witness tolerances: max |A z - b| and required slack of C z - c.
STRICT_EQ_TOL = 1e-9
STRICT_INEQ_MARGIN = 1e-6


def _int_array(values, name):
    arr = np.asarray(values, dtype=int)
    if arr.ndim != 1:
        raise StructureError(f"{name} must be a 1-d sequence of counts")
    if (arr < 0).any():
        raise StructureError(f"{name} entries must be nonnegative")
    return arr


class BipartiteGraph:
    """Coupling pattern between primal blocks (V1) and constraint blocks (V2).

    Parameters
    ----------
    E : (M_bar, M) array_like of 0/1
        Incidence matrix; E[j, i] = 1 when constraint block j touches
        primal block i.
    block_dims : sequence of int, length M
        Variable dimension n_i of each primal block.
    eq_rows : sequence of int, length M_bar
        Number of equality rows p_j owned by each constraint block.
    ineq_rows : sequence of int, length M_bar
        Number of inequality rows q_j owned by each constraint block.

    Attributes
    ----------
    v2_of : list of int arrays
        v2_of[i] lists the constraint blocks adjacent to primal block i.
    v1_of : list of int arrays
        v1_of[j] lists the primal blocks adjacent to constraint block j.
    max_degree : int
        Largest neighborhood cardinality over both sides (the sparsity
        measure of the coupling).
    """

    def __init__(self, E, block_dims, eq_rows, ineq_rows):
        E = np.asarray(E)
        if E.ndim != 2:
            raise StructureError("incidence matrix must be 2-d")
        if not np.isin(E, (0, 1)).all():
            raise StructureError("incidence entries must be 0 or 1")
        self.E = np.ascontiguousarray(E.astype(np.int8))
        self.M_bar, self.M = self.E.shape
        self.block_dims = _int_array(block_dims, "block_dims")
        self.eq_rows = _int_array(eq_rows, "eq_rows")
        self.ineq_rows = _int_array(ineq_rows, "ineq_rows")
        if self.block_dims.size != self.M:
            raise StructureError("block_dims length must equal number of columns of E")
        if self.eq_rows.size != self.M_bar or self.ineq_rows.size != self.M_bar:
            raise StructureError("row-count arrays must match number of rows of E")

        self.z_offsets = np.concatenate(([0], np.cumsum(self.block_dims)))
        self.eq_offsets = np.concatenate(([0], np.cumsum(self.eq_rows)))
        self.ineq_offsets = np.concatenate(([0], np.cumsum(self.ineq_rows)))
        self.n_total = int(self.z_offsets[-1])
        self.p_total = int(self.eq_offsets[-1])
        self.q_total = int(self.ineq_offsets[-1])

        self.v2_of = [np.flatnonzero(self.E[:, i]) for i in range(self.M)]
        self.v1_of = [np.flatnonzero(self.E[j, :]) for j in range(self.M_bar)]
        degrees = [len(a) for a in self.v2_of] + [len(a) for a in self.v1_of]
        self.max_degree = max(degrees) if degrees else 0

    def z_slice(self, i):
        return slice(int(self.z_offsets[i]), int(self.z_offsets[i + 1]))

    def eq_slice(self, j):
        return slice(int(self.eq_offsets[j]), int(self.eq_offsets[j + 1]))

    def ineq_slice(self, j):
        """Slice of constraint block j inside the length-q inequality part."""
        return slice(int(self.ineq_offsets[j]), int(self.ineq_offsets[j + 1]))

    def __eq__(self, other):
        if not isinstance(other, BipartiteGraph):
            return NotImplemented
        return (
            np.array_equal(self.E, other.E)
            and np.array_equal(self.block_dims, other.block_dims)
            and np.array_equal(self.eq_rows, other.eq_rows)
            and np.array_equal(self.ineq_rows, other.ineq_rows)
        )

    def __repr__(self):
        return (
            f"BipartiteGraph(M={self.M}, M_bar={self.M_bar}, "
            f"n={self.n_total}, p={self.p_total}, q={self.q_total}, "
            f"max_degree={self.max_degree})"
        )


def neighborhoods(graph):
    """Return the two neighborhood families and the sparsity measure.

    Returns
    -------
    v2_of : list of int arrays
        Constraint blocks adjacent to each primal block.
    v1_of : list of int arrays
        Primal blocks adjacent to each constraint block.
    max_degree : int
        Maximum cardinality over both families.
    """
    return graph.v2_of, graph.v1_of, graph.max_degree


class PrimalPoint:
    """Primal vector stored flat, with per-block views."""

    def __init__(self, graph, z=None):
        self.graph = graph
        if z is None:
            z = np.zeros(graph.n_total)
        z = np.asarray(z, dtype=float)
        if z.shape != (graph.n_total,):
            raise StructureError(
                f"primal vector has length {z.shape}, expected ({graph.n_total},)"
            )
        self.z = z

    def block(self, i):
        return self.z[self.graph.z_slice(i)]

    def copy(self):
        return PrimalPoint(self.graph, self.z.copy())


class DualPoint:
    """Dual vector (nu, mu): equality multipliers free, inequality ones >= 0.

    Stored as two flat arrays following the global row ordering; per-block
    views are exposed through :meth:`nu_block` and :meth:`mu_block`.
    """

    def __init__(self, graph, nu=None, mu=None):
        self.graph = graph
        if nu is None:
            nu = np.zeros(graph.p_total)
        if mu is None:
            mu = np.zeros(graph.q_total)
        nu = np.asarray(nu, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if nu.shape != (graph.p_total,) or mu.shape != (graph.q_total,):
            raise StructureError("dual vector lengths do not match the graph")
        self.nu = nu
        self.mu = mu

    @classmethod
    def from_flat(cls, graph, lam):
        lam = np.asarray(lam, dtype=float)
        p = graph.p_total
        if lam.shape != (p + graph.q_total,):
            raise StructureError("flat dual vector has wrong length")
        return cls(graph, lam[:p].copy(), lam[p:].copy())

    def flat(self):
        return np.concatenate([self.nu, self.mu])

    @property
    def in_domain(self):
        """True when all inequality multipliers are nonnegative."""
        return bool((self.mu >= 0).all()) if self.mu.size else True

    def nu_block(self, j):
        return self.nu[self.graph.eq_slice(j)]

    def mu_block(self, j):
        return self.mu[self.graph.ineq_slice(j)]

    def copy(self):
        return DualPoint(self.graph, self.nu.copy(), self.mu.copy())


class BlockProblem:
    """A separable convex program with block-sparse linear coupling.

    Parameters
    ----------
    graph : BipartiteGraph
    objectives : sequence of BlockObjective, length M
    A_blocks, C_blocks : dict mapping (j, i) -> 2-d array
        Dense equality / inequality blocks.  A key may only appear where
        E[j, i] = 1; a missing block on an edge is an implicit zero.
        Explicitly stored zero blocks are kept as given.
    b : length-p array
    c : length-q array
    strict_point : length-n array, optional
        Feasible witness with strictly slack inequalities.
    meta : dict, optional
        Free-form provenance (e.g. generator seed); serialized with the
        problem file.
    """

    def __init__(self, graph, objectives, A_blocks, C_blocks, b, c,
                 strict_point=None, meta=None):
        self.graph = graph
        objectives = list(objectives)
        if len(objectives) != graph.M:
            raise StructureError("one objective per primal block required")
        for i, obj in enumerate(objectives):
            if obj.dim != graph.block_dims[i]:
                raise StructureError(
                    f"objective {i} has dimension {obj.dim}, "
                    f"expected {graph.block_dims[i]}"
                )
        self.objectives = objectives

        self.A_blocks = self._check_blocks(A_blocks, graph.eq_rows, "A")
        self.C_blocks = self._check_blocks(C_blocks, graph.ineq_rows, "C")

        b = np.asarray(b, dtype=float)
        c = np.asarray(c, dtype=float)
        if b.shape != (graph.p_total,):
            raise StructureError(f"b has length {b.shape}, expected {graph.p_total}")
        if c.shape != (graph.q_total,):
            raise StructureError(f"c has length {c.shape}, expected {graph.q_total}")
        self.b = b
        self.c = c

        if strict_point is not None:
            strict_point = np.asarray(strict_point, dtype=float)
            if strict_point.shape != (graph.n_total,):
                raise StructureError("strict_point has wrong length")
            eq_res, ineq_res = apply_constraints(self, strict_point)
            if eq_res.size and np.abs(eq_res - self.b).max() > STRICT_EQ_TOL:
                raise StructureError("strict_point violates the equality constraints")
            if ineq_res.size and (ineq_res - self.c).max() > -STRICT_INEQ_MARGIN:
                raise StructureError("strict_point is not strictly inside C z < c")
        self.strict_point = strict_point
        self.meta = dict(meta) if meta else {}

    def _check_blocks(self, blocks, row_counts, name):
        checked = {}
        for (j, i), block in dict(blocks).items():
            if not (0 <= j < self.graph.M_bar and 0 <= i < self.graph.M):
                raise StructureError(f"{name} block ({j},{i}) is out of range")
            if self.graph.E[j, i] != 1:
                raise StructureError(
                    f"{name} block ({j},{i}) stored where incidence is zero"
                )
            block = np.ascontiguousarray(np.asarray(block, dtype=float))
            expected = (int(row_counts[j]), int(self.graph.block_dims[i]))
            if block.shape != expected:
                raise StructureError(
                    f"{name} block ({j},{i}) has shape {block.shape}, "
                    f"expected {expected}"
                )
            checked[(j, i)] = block
        return checked

    def A(self, j, i):
        """Equality block (j, i), or None when absent (implicit zero)."""
        return self.A_blocks.get((j, i))

    def C(self, j, i):
        """Inequality block (j, i), or None when absent (implicit zero)."""
        return self.C_blocks.get((j, i))

    def __repr__(self):
        return f"BlockProblem({self.graph!r})"


def assemble_dense(problem):
    """Materialize the stacked constraint matrix and right-hand side.

    Equality rows come first (by constraint block ascending), inequality
    rows after, matching the global dual ordering.  Intended for tests
    and small-scale reference computations; the solvers never call it in
    their iteration loops.

    Returns
    -------
    G : ((p+q), n) ndarray
    g : (p+q,) ndarray
    """
    graph = problem.graph
    p, q, n = graph.p_total, graph.q_total, graph.n_total
    G = np.zeros((p + q, n))
    for (j, i), block in problem.A_blocks.items():
        G[graph.eq_slice(j), graph.z_slice(i)] = block
    for (j, i), block in problem.C_blocks.items():
        rows = graph.ineq_slice(j)
        G[p + rows.start:p + rows.stop, graph.z_slice(i)] = block
    g = np.concatenate([problem.b, problem.c])
    return G, g


def apply_constraints(problem, z):
    """Blockwise products (A z, C z) without forming dense matrices.

    Per constraint block, contributions are accumulated over primal
    blocks in ascending order, which fixes the floating-point result.
    """
    graph = problem.graph
    z = np.asarray(z, dtype=float)
    Az = np.zeros(graph.p_total)
    Cz = np.zeros(graph.q_total)
    for j in range(graph.M_bar):
        for i in graph.v1_of[j]:
            zi = z[graph.z_slice(i)]
            block = problem.A_blocks.get((j, int(i)))
            if block is not None:
                Az[graph.eq_slice(j)] += block.dot(zi)
            block = problem.C_blocks.get((j, int(i)))
            if block is not None:
                Cz[graph.ineq_slice(j)] += block.dot(zi)
    return Az, Cz


@dataclass
class ValidationReport:
    """Outcome of :func:`validate`; informational, never raises."""

    full_row_rank: bool
    rank_A: int
    eq_row_count: int
    sigmas_positive: bool
    min_sigma: float
    strict_point_present: bool
    strict_point_ok: Optional[bool] = None
    eq_residual_inf: Optional[float] = None
    ineq_margin: Optional[float] = None

    @property
    def ok(self):
        strict_ok = self.strict_point_ok in (None, True)
        return self.full_row_rank and self.sigmas_positive and strict_ok


def validate(problem):
    """Check the standing assumptions and report, without raising.

    Verifies that the equality matrix has full row rank (rank-revealing
    SVD with threshold ``RANK_TOL * ||A||``), that every block objective
    is strongly convex, and, when a strict witness is stored, that it
    satisfies the feasibility margins.
    """
    graph = problem.graph
    G, _ = assemble_dense(problem)
    A = G[:graph.p_total]
    if A.size:
        svals = np.linalg.svd(A, compute_uv=False)
        rank = int((svals > RANK_TOL * svals[0]).sum()) if svals[0] > 0 else 0
    else:
        rank = 0
    full_rank = rank == graph.p_total

    min_sigma = np.inf
    for obj in problem.objectives:
        min_sigma = min(min_sigma, float(np.linalg.eigvalsh(obj.Q)[0]))

    report = ValidationReport(
        full_row_rank=full_rank,
        rank_A=rank,
        eq_row_count=graph.p_total,
        sigmas_positive=bool(min_sigma > 0),
        min_sigma=float(min_sigma),
        strict_point_present=problem.strict_point is not None,
    )
    if problem.strict_point is not None:
        Az, Cz = apply_constraints(problem, problem.strict_point)
        eq_res = float(np.abs(Az - problem.b).max()) if Az.size else 0.0
        ineq = float((Cz - problem.c).max()) if Cz.size else -np.inf
        report.eq_residual_inf = eq_res
        report.ineq_margin = ineq
        report.strict_point_ok = bool(
            eq_res <= STRICT_EQ_TOL and ineq <= -STRICT_INEQ_MARGIN
        )
    return report


# ---------------------------------------------------------------------------
# Problem files

def _blocks_to_doc(blocks):
    doc = []
    for (j, i) in sorted(blocks):
        block = blocks[(j, i)]
        doc.append({
            "j": int(j),
            "i": int(i),
            "rows": int(block.shape[0]),
            "cols": int(block.shape[1]),
            "data": block.ravel().tolist(),
        })
    return doc


def _blocks_from_doc(doc):
    blocks = {}
    for entry in doc:
        data = np.asarray(entry["data"], dtype=float)
        blocks[(int(entry["j"]), int(entry["i"]))] = data.reshape(
            int(entry["rows"]), int(entry["cols"])
        )
    return blocks


def problem_to_doc(problem):
    """Build the JSON-serializable document for a problem."""
    graph = problem.graph
    edges = [[int(j), int(i)] for j, i in np.argwhere(graph.E == 1)]
    doc = {
        "graph": {
            "M": graph.M,
            "M_bar": graph.M_bar,
            "E": edges,
            "n": graph.block_dims.tolist(),
            "p": graph.eq_rows.tolist(),
            "q": graph.ineq_rows.tolist(),
        },
        "objectives": [
            {
                "Q": obj.Q.ravel().tolist(),
                "q": obj.q.tolist(),
                "gamma": float(obj.gamma),
                "a": obj.a.tolist(),
            }
            for obj in problem.objectives
        ],
        "A_blocks": _blocks_to_doc(problem.A_blocks),
        "C_blocks": _blocks_to_doc(problem.C_blocks),
        "b": problem.b.tolist(),
        "c": problem.c.tolist(),
    }
    if problem.strict_point is not None:
        doc["strict_point"] = problem.strict_point.tolist()
    if problem.meta:
        doc["meta"] = problem.meta
    return doc


def problem_from_doc(doc):
    from .oracles import BlockObjective

    gdoc = doc["graph"]
    M, M_bar = int(gdoc["M"]), int(gdoc["M_bar"])
    E = np.zeros((M_bar, M), dtype=np.int8)
    for j, i in gdoc["E"]:
        E[int(j), int(i)] = 1
    graph = BipartiteGraph(E, gdoc["n"], gdoc["p"], gdoc["q"])
    objectives = []
    for entry, dim in zip(doc["objectives"], graph.block_dims):
        Q = np.asarray(entry["Q"], dtype=float).reshape(dim, dim)
        objectives.append(BlockObjective(
            Q, entry["q"], gamma=float(entry["gamma"]), a=entry["a"],
        ))
    return BlockProblem(
        graph,
        objectives,
        _blocks_from_doc(doc["A_blocks"]),
        _blocks_from_doc(doc["C_blocks"]),
        doc["b"],
        doc["c"],
        strict_point=doc.get("strict_point"),
        meta=doc.get("meta"),
    )


def save_problem(problem, path):
    """Write a problem file (JSON, full float precision)."""
    jsonio.dump(problem_to_doc(problem), path)


def load_problem(path):
    """Read a problem file written by :func:`save_problem`."""
    return problem_from_doc(jsonio.load(path))
