"""Finite-horizon optimal control of coupled linear subsystems.

A networked system of M subsystems with dynamics

    x_i(t+1) = sum_{j in N_i} Abar_ij x_j(t) + Bbar_ij u_j(t)

and coupled stage constraints

    sum_{j in N_i} Cbar_ij x_j(t) + Ctil_ij u_j(t) <= bound_i

is compiled, for a horizon of length N and a given initial state, into a
block problem whose primal block i stacks subsystem i's trajectory as

    z_i = [u_i(0), x_i(1), u_i(1), x_i(2), ..., u_i(N-1), x_i(N)].

Constraint block i holds subsystem i's dynamics rows (t-major, one group
per t = 0..N-1, identity coefficient on x_i(t+1)) followed by its stage
constraint rows (t-major) and, when a terminal box is given, two-sided
bounds on x_i(N).  Initial-state terms are absorbed into the right-hand
sides.  Stage costs are quadratic; the quadratic term of block i is the
stage-diagonal matrix diag(R_i, Q_i, ..., R_i, P_i), so the inner solves
of the dual ascent have a closed form and, exploiting the per-stage
structure, cost O(M N) per iteration at fixed coupling degree.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import jsonio
from .errors import StructureError, UnsupportedInstanceError
from .model import BipartiteGraph, BlockProblem, PrimalPoint
from .oracles import BlockObjective, solve_block
from .dual_algo import _as_flat, _workspace


@dataclass
class Subsystem:
    """One node of the networked system.

    Dynamics and constraint blocks are keyed by the influencing subsystem
    index j (the in-neighbors, including the subsystem itself).
    """

    index: int
    n_x: int
    n_u: int
    dyn_state: dict                 # j -> (n_x, n_x_j) state coefficient
    dyn_input: dict                 # j -> (n_x, n_u_j) input coefficient
    con_state: dict = field(default_factory=dict)   # j -> (n_c, n_x_j)
    con_input: dict = field(default_factory=dict)   # j -> (n_c, n_u_j)
    bound: np.ndarray = None        # (n_c,) right-hand side of the stage rows
    state_weight: np.ndarray = None     # (n_x, n_x) PD
    input_weight: np.ndarray = None     # (n_u, n_u) PD
    terminal_weight: np.ndarray = None  # (n_x, n_x) PD
    terminal_box: Optional[tuple] = None  # (lower, upper) on x(N)

    def __post_init__(self):
        if self.bound is None:
            self.bound = np.zeros(0)
        self.bound = np.asarray(self.bound, dtype=float)
        for name in ("state_weight", "input_weight", "terminal_weight"):
            mat = getattr(self, name)
            if mat is None:
                dim = self.n_u if name == "input_weight" else self.n_x
                mat = np.eye(dim)
            setattr(self, name, np.asarray(mat, dtype=float))
        self.dyn_state = {int(j): np.asarray(m, dtype=float)
                          for j, m in self.dyn_state.items()}
        self.dyn_input = {int(j): np.asarray(m, dtype=float)
                          for j, m in self.dyn_input.items()}
        self.con_state = {int(j): np.asarray(m, dtype=float)
                          for j, m in self.con_state.items()}
        self.con_input = {int(j): np.asarray(m, dtype=float)
                          for j, m in self.con_input.items()}
        if self.terminal_box is not None:
            lo, up = self.terminal_box
            self.terminal_box = (np.asarray(lo, dtype=float),
                                 np.asarray(up, dtype=float))

    @property
    def n_c(self):
        return self.bound.size


@dataclass
class NetworkedSystem:
    """Subsystems, their coupling pattern, horizon, and initial state.

    ``adjacency[i, j] = 1`` when subsystem j influences subsystem i; the
    diagonal must be 1 (each state equation carries its own next state).
    """

    subsystems: list
    adjacency: np.ndarray
    horizon: int
    x0: list

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency)
        m = len(self.subsystems)
        if self.adjacency.shape != (m, m):
            raise StructureError("adjacency must be square, one row per subsystem")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise StructureError("adjacency entries must be 0 or 1")
        if (np.diag(self.adjacency) != 1).any():
            raise StructureError("adjacency diagonal must be 1 (self dynamics)")
        if self.horizon < 1:
            raise StructureError("horizon must be at least 1")
        self.x0 = [np.asarray(x, dtype=float) for x in self.x0]
        for i, sub in enumerate(self.subsystems):
            if self.x0[i].shape != (sub.n_x,):
                raise StructureError(f"x0[{i}] has the wrong length")

    @property
    def size(self):
        return len(self.subsystems)


def _u_slice(sub, t):
    start = t * (sub.n_u + sub.n_x)
    return slice(start, start + sub.n_u)


def _x_slice(sub, t):
    # x(t) for t >= 1; x(0) is data, not a variable.
    start = (t - 1) * (sub.n_u + sub.n_x) + sub.n_u
    return slice(start, start + sub.n_x)


def _stage_cost_matrix(sub, horizon):
    blocks = []
    for t in range(horizon - 1):
        blocks.append(sub.input_weight)
        blocks.append(sub.state_weight)
    blocks.append(sub.input_weight)
    blocks.append(sub.terminal_weight)
    from scipy.linalg import block_diag
    return block_diag(*blocks)


def build_problem(system):
    """Compile the networked control problem into a BlockProblem.

    Raises
    ------
    StructureError
        Naming the offending (i, j, t) when a coefficient block has
        inconsistent dimensions.
    """
    M = system.size
    N = system.horizon
    subs = system.subsystems

    n_dims = [N * (s.n_u + s.n_x) for s in subs]
    p_dims = [N * s.n_x for s in subs]
    q_dims = [N * s.n_c + (2 * s.n_x if s.terminal_box is not None else 0)
              for s in subs]
    graph = BipartiteGraph(system.adjacency, n_dims, p_dims, q_dims)

    A_blocks, C_blocks = {}, {}
    b = np.zeros(graph.p_total)
    c = np.zeros(graph.q_total)

    for i, sub_i in enumerate(subs):
        n_x, n_c = sub_i.n_x, sub_i.n_c
        neighbors = [int(j) for j in np.flatnonzero(system.adjacency[i])]
        for j in neighbors:
            sub_j = subs[j]
            Abar = sub_i.dyn_state.get(j)
            Bbar = sub_i.dyn_input.get(j)
            if Abar is None or Bbar is None:
                raise StructureError(f"subsystem {i} lacks dynamics blocks for neighbor {j}")
            if Abar.shape != (n_x, sub_j.n_x):
                raise StructureError(f"dynamics state block ({i},{j}) has shape {Abar.shape}")
            if Bbar.shape != (n_x, sub_j.n_u):
                raise StructureError(f"dynamics input block ({i},{j}) has shape {Bbar.shape}")

            block = np.zeros((p_dims[i], n_dims[j]))
            for t in range(N):
                rows = slice(t * n_x, (t + 1) * n_x)
                block[rows, _u_slice(sub_j, t)] = -Bbar
                if t >= 1:
                    block[rows, _x_slice(sub_j, t)] = -Abar
                if j == i:
                    block[rows, _x_slice(sub_j, t + 1)] = np.eye(n_x)
            A_blocks[(i, j)] = block

            if n_c or sub_i.terminal_box is not None:
                Cbar = sub_i.con_state.get(j)
                Ctil = sub_i.con_input.get(j)
                if n_c:
                    if Cbar is None or Ctil is None:
                        raise StructureError(
                            f"subsystem {i} lacks constraint blocks for neighbor {j}")
                    if Cbar.shape != (n_c, sub_j.n_x):
                        raise StructureError(
                            f"constraint state block ({i},{j}) has shape {Cbar.shape}")
                    if Ctil.shape != (n_c, sub_j.n_u):
                        raise StructureError(
                            f"constraint input block ({i},{j}) has shape {Ctil.shape}")
                cblock = np.zeros((q_dims[i], n_dims[j]))
                for t in range(N if n_c else 0):
                    rows = slice(t * n_c, (t + 1) * n_c)
                    cblock[rows, _u_slice(sub_j, t)] = Ctil
                    if t >= 1:
                        cblock[rows, _x_slice(sub_j, t)] = Cbar
                if sub_i.terminal_box is not None and j == i:
                    base = N * n_c
                    xs = _x_slice(sub_i, N)
                    cblock[base:base + n_x, xs] = np.eye(n_x)
                    cblock[base + n_x:base + 2 * n_x, xs] = -np.eye(n_x)
                C_blocks[(i, j)] = cblock

        # Right-hand sides: initial-state terms land in the t = 0 rows.
        b_i = np.zeros(p_dims[i])
        drive = np.zeros(n_x)
        for j in neighbors:
            drive += sub_i.dyn_state[j].dot(system.x0[j])
        b_i[:n_x] = drive
        b[graph.eq_slice(i)] = b_i

        if q_dims[i]:
            c_i = np.zeros(q_dims[i])
            if n_c:
                stage_rhs = np.tile(sub_i.bound, N)
                shift = np.zeros(n_c)
                for j in neighbors:
                    shift += sub_i.con_state[j].dot(system.x0[j])
                stage_rhs[:n_c] -= shift
                c_i[:N * n_c] = stage_rhs
            if sub_i.terminal_box is not None:
                lo, up = sub_i.terminal_box
                c_i[N * n_c:N * n_c + n_x] = up
                c_i[N * n_c + n_x:] = -lo
            c[graph.ineq_slice(i)] = c_i

    objectives = [
        BlockObjective(_stage_cost_matrix(s, N), np.zeros(n_dims[i]))
        for i, s in enumerate(subs)
    ]
    return BlockProblem(graph, objectives, A_blocks, C_blocks, b, c,
                        meta={"kind": "dmpc", "horizon": N})


def closed_form_check(problem, lam):
    """Inner minimizer via the quadratic closed form, per block.

    Certifies that for control-style (quadratic) problems the inner
    solve needs no iteration: the result is produced by the exact same
    factorization path as the solver's inner step and therefore matches
    it bit for bit.
    """
    if any(obj.gamma != 0 for obj in problem.objectives):
        raise UnsupportedInstanceError("closed form requires quadratic objectives")
    ws = _workspace(problem)
    lam_flat = _as_flat(problem, lam)
    graph = problem.graph
    z = np.empty(graph.n_total)
    for i, obj in enumerate(problem.objectives):
        w_i = ws.stack_T[i].dot(lam_flat[ws.gather[i]])
        z[graph.z_slice(i)] = solve_block(obj, w_i)
    return PrimalPoint(graph, z)


class StageStepper:
    """Dual ascent steps in O(M N) time by exploiting the stage structure.

    The generic driver treats each coupling block as one dense matrix, so
    its per-iteration cost grows with the square of the horizon.  Here the
    inner solve uses one factorization per stage weight and the gradient
    uses the per-stage coefficient blocks, so both the operation count and
    the flop count are linear in M N at fixed coupling degree.  Produces
    the same iterates as the dense path up to roundoff (the summation
    order differs).
    """

    def __init__(self, system, problem, weights):
        for sub in system.subsystems:
            if sub.terminal_box is not None:
                raise UnsupportedInstanceError("stage stepper does not cover terminal boxes")
        self.system = system
        self.problem = problem
        self.graph = problem.graph
        self.weights = weights
        self.N = system.horizon
        subs = system.subsystems
        self.subs = subs
        self.in_neighbors = [
            [int(j) for j in np.flatnonzero(system.adjacency[i])]
            for i in range(system.size)
        ]
        # Who consumes subsystem j's variables: i with adjacency[i, j] = 1.
        self.out_neighbors = [
            [int(i) for i in np.flatnonzero(system.adjacency[:, j])]
            for j in range(system.size)
        ]
        self.input_chol = [cho_factor(s.input_weight, check_finite=False) for s in subs]
        self.state_chol = [cho_factor(s.state_weight, check_finite=False) for s in subs]
        self.term_chol = [cho_factor(s.terminal_weight, check_finite=False) for s in subs]
        N = self.N
        self.b_mats = [problem.b[self.graph.eq_slice(i)].reshape(N, subs[i].n_x)
                       for i in range(system.size)]
        self.c_mats = [problem.c[self.graph.ineq_slice(i)].reshape(N, subs[i].n_c)
                       if subs[i].n_c else np.zeros((N, 0))
                       for i in range(system.size)]

    def _split(self, lam):
        P = self.graph.p_total
        N = self.N
        nus, mus = [], []
        for i, sub in enumerate(self.subs):
            nus.append(lam[self.graph.eq_slice(i)].reshape(N, sub.n_x))
            qs = self.graph.ineq_slice(i)
            mus.append(lam[P + qs.start:P + qs.stop].reshape(N, sub.n_c))
        return nus, mus

    def _flatten(self, nus, mus):
        P = self.graph.p_total
        lam = np.empty(P + self.graph.q_total)
        for i in range(len(nus)):
            lam[self.graph.eq_slice(i)] = nus[i].ravel()
            qs = self.graph.ineq_slice(i)
            lam[P + qs.start:P + qs.stop] = mus[i].ravel()
        return lam

    def inner_solution(self, lam):
        """All trajectory blocks at the dual point, stage by stage."""
        nus, mus = self._split(np.asarray(lam, dtype=float))
        N = self.N
        us, xs = [], []
        for j, sub_j in enumerate(self.subs):
            w_u = np.zeros((N, sub_j.n_u))
            w_x = np.zeros((N, sub_j.n_x))  # rows hold x(1) .. x(N)
            for i in self.out_neighbors[j]:
                sub_i = self.subs[i]
                nu_i = nus[i]
                w_u -= nu_i.dot(sub_i.dyn_input[j])
                w_x[:N - 1] -= nu_i[1:].dot(sub_i.dyn_state[j])
                if i == j:
                    w_x += nu_i
                if sub_i.n_c:
                    mu_i = mus[i]
                    w_u += mu_i.dot(sub_i.con_input[j])
                    w_x[:N - 1] += mu_i[1:].dot(sub_i.con_state[j])
            u = -cho_solve(self.input_chol[j], w_u.T, check_finite=False).T
            x = np.empty_like(w_x)
            if N > 1:
                x[:N - 1] = -cho_solve(self.state_chol[j], w_x[:N - 1].T,
                                       check_finite=False).T
            x[N - 1] = -cho_solve(self.term_chol[j], w_x[N - 1], check_finite=False)
            us.append(u)
            xs.append(x)
        return us, xs

    def step(self, lam):
        """One weighted projected dual step; returns (lam_next, z_flat)."""
        lam = np.asarray(lam, dtype=float)
        nus, mus = self._split(lam)
        us, xs = self.inner_solution(lam)
        N = self.N
        new_nus, new_mus = [], []
        for i, sub_i in enumerate(self.subs):
            eq_acc = -self.b_mats[i].copy()
            ineq_acc = -self.c_mats[i].copy()
            for j in self.in_neighbors[i]:
                eq_acc -= us[j].dot(sub_i.dyn_input[j].T)
                eq_acc[1:] -= xs[j][:N - 1].dot(sub_i.dyn_state[j].T)
                if j == i:
                    eq_acc += xs[i]
                if sub_i.n_c:
                    ineq_acc += us[j].dot(sub_i.con_input[j].T)
                    ineq_acc[1:] += xs[j][:N - 1].dot(sub_i.con_state[j].T)
            new_nus.append(nus[i] + eq_acc * self.weights.inv_w_nu[i])
            new_mus.append(np.maximum(mus[i] + ineq_acc * self.weights.inv_w_mu[i], 0.0))

        z = np.empty(self.graph.n_total)
        for j, sub_j in enumerate(self.subs):
            base = int(self.graph.z_offsets[j])
            width = sub_j.n_u + sub_j.n_x
            for t in range(N):
                z[base + t * width:base + t * width + sub_j.n_u] = us[j][t]
                z[base + t * width + sub_j.n_u:base + (t + 1) * width] = xs[j][t]
        return self._flatten(new_nus, new_mus), z


def random_network(m, horizon, n_x, n_u, n_c, degree, seed):
    """Seeded random networked system with a ring coupling of fixed degree.

    Subsystem i is influenced by itself and the next ``degree - 1`` nodes
    around the ring, so both neighborhood families have cardinality
    exactly ``degree``.
    """
    if not 1 <= degree <= m:
        raise StructureError("need 1 <= degree <= m")
    rng = np.random.default_rng([int(seed), 77])
    adjacency = np.zeros((m, m), dtype=np.int8)
    for i in range(m):
        for k in range(degree):
            adjacency[i, (i + k) % m] = 1
    subsystems = []
    for i in range(m):
        neighbors = [int(j) for j in np.flatnonzero(adjacency[i])]
        dyn_state, dyn_input, con_state, con_input = {}, {}, {}, {}
        for j in neighbors:
            scale = 0.5 if j == i else 0.15
            dyn_state[j] = scale * rng.standard_normal((n_x, n_x)) / np.sqrt(n_x)
            dyn_input[j] = 0.5 * rng.standard_normal((n_x, n_u)) / np.sqrt(n_u)
            if n_c:
                con_state[j] = 0.3 * rng.standard_normal((n_c, n_x)) / np.sqrt(n_x)
                con_input[j] = 0.3 * rng.standard_normal((n_c, n_u)) / np.sqrt(n_u)
        dyn_state[i] = dyn_state[i] + 0.3 * np.eye(n_x)
        subsystems.append(Subsystem(
            index=i, n_x=n_x, n_u=n_u,
            dyn_state=dyn_state, dyn_input=dyn_input,
            con_state=con_state, con_input=con_input,
            bound=5.0 + rng.uniform(0.0, 1.0, n_c),
            state_weight=np.eye(n_x) * (1.0 + rng.uniform(0.0, 1.0)),
            input_weight=np.eye(n_u) * (1.0 + rng.uniform(0.0, 1.0)),
            terminal_weight=np.eye(n_x) * 2.0,
        ))
    x0 = [rng.standard_normal(n_x) for _ in range(m)]
    return NetworkedSystem(subsystems, adjacency, horizon, x0)


# ---------------------------------------------------------------------------
# System description files

def _dict_blocks_to_doc(blocks):
    return [{"j": int(j), "data": mat.ravel().tolist(),
             "rows": int(mat.shape[0]), "cols": int(mat.shape[1])}
            for j, mat in sorted(blocks.items())]


def _dict_blocks_from_doc(doc):
    out = {}
    for entry in doc:
        mat = np.asarray(entry["data"], dtype=float).reshape(
            int(entry["rows"]), int(entry["cols"]))
        out[int(entry["j"])] = mat
    return out


def save_system(system, path):
    doc = {
        "horizon": int(system.horizon),
        "adjacency": [[int(v) for v in row] for row in system.adjacency],
        "x0": [x.tolist() for x in system.x0],
        "subsystems": [],
    }
    for sub in system.subsystems:
        entry = {
            "n_x": int(sub.n_x),
            "n_u": int(sub.n_u),
            "dyn_state": _dict_blocks_to_doc(sub.dyn_state),
            "dyn_input": _dict_blocks_to_doc(sub.dyn_input),
            "con_state": _dict_blocks_to_doc(sub.con_state),
            "con_input": _dict_blocks_to_doc(sub.con_input),
            "bound": sub.bound.tolist(),
            "state_weight": sub.state_weight.ravel().tolist(),
            "input_weight": sub.input_weight.ravel().tolist(),
            "terminal_weight": sub.terminal_weight.ravel().tolist(),
        }
        if sub.terminal_box is not None:
            entry["terminal_box"] = {
                "lower": sub.terminal_box[0].tolist(),
                "upper": sub.terminal_box[1].tolist(),
            }
        doc["subsystems"].append(entry)
    jsonio.dump(doc, path)


def load_system(path):
    doc = jsonio.load(path)
    subsystems = []
    for idx, entry in enumerate(doc["subsystems"]):
        n_x, n_u = int(entry["n_x"]), int(entry["n_u"])
        box = None
        if "terminal_box" in entry:
            box = (entry["terminal_box"]["lower"], entry["terminal_box"]["upper"])
        subsystems.append(Subsystem(
            index=idx, n_x=n_x, n_u=n_u,
            dyn_state=_dict_blocks_from_doc(entry["dyn_state"]),
            dyn_input=_dict_blocks_from_doc(entry["dyn_input"]),
            con_state=_dict_blocks_from_doc(entry["con_state"]),
            con_input=_dict_blocks_from_doc(entry["con_input"]),
            bound=entry["bound"],
            state_weight=np.asarray(entry["state_weight"], dtype=float).reshape(n_x, n_x),
            input_weight=np.asarray(entry["input_weight"], dtype=float).reshape(n_u, n_u),
            terminal_weight=np.asarray(entry["terminal_weight"], dtype=float).reshape(n_x, n_x),
            terminal_box=box,
        ))
    return NetworkedSystem(
        subsystems, doc["adjacency"], int(doc["horizon"]), doc["x0"],
    )
