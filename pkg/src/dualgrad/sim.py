"""Synchronous message-passing execution of the weighted dual ascent.

The solver's iteration is replayed as explicit traffic over the bipartite
coupling graph: constraint nodes broadcast their multiplier blocks to
their primal neighbors, each primal node solves its local subproblem from
only the data it owns, sends back the per-edge products of its coupling
blocks with its minimizer (equality and inequality parts bundled in one
payload), and each constraint node reduces the received products over
neighbors in ascending index order before applying its weighted projected
update.  With that fixed reduction order the simulated state evolution is
bitwise identical to the monolithic driver.

Every message is logged; any attempt to send across a pair that is not an
edge of the graph raises :class:`LocalityError`, which is the test hook
for the locality claims.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import LocalityError, StructureError
from .dual_algo import RunTrace, _as_flat, _require_domain, _workspace
from .oracles import solve_block

DOWN = "V2->V1"  # constraint node j -> primal node i
UP = "V1->V2"    # primal node i -> constraint node j


@dataclass
class MessageRecord:
    round: int
    direction: str
    src: int
    dst: int
    nbytes: int


@dataclass
class MessageLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def count_for_round(self, rnd):
        return sum(1 for rec in self.records if rec.round == rnd)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("round,direction,from,to,bytes\n")
            for rec in self.records:
                fh.write(f"{rec.round},{rec.direction},{rec.src},{rec.dst},{rec.nbytes}\n")


def _edge_exists(graph, direction, src, dst):
    if direction == DOWN:
        j, i = src, dst
    elif direction == UP:
        i, j = src, dst
    else:
        return False
    if not (0 <= j < graph.M_bar and 0 <= i < graph.M):
        return False
    return graph.E[j, i] == 1


def post_message(log, graph, rnd, direction, src, dst, nbytes):
    """Record one message, refusing any traffic across a non-edge."""
    if not _edge_exists(graph, direction, src, dst):
        raise LocalityError(
            f"message {direction} from {src} to {dst} crosses a non-edge"
        )
    log.append(MessageRecord(rnd, direction, src, dst, nbytes))


def verify_locality(log, graph):
    """True iff every logged message traverses an edge of the graph."""
    return all(
        _edge_exists(graph, rec.direction, rec.src, rec.dst)
        for rec in log.records
    )


class _PrimalNode:
    """V1 node: owns one block objective and its coupling blocks."""

    def __init__(self, i, objective, neighbor_js, stack_T, out_blocks):
        self.i = i
        self.objective = objective
        self.neighbor_js = neighbor_js      # ascending
        self.stack_T = stack_T              # transposed stack of own blocks
        self.out_blocks = out_blocks        # j -> bundled (A_ji; C_ji)
        self.lam_parts = {}
        self.z = None

    def receive_multiplier(self, j, payload):
        if j not in self.out_blocks:
            raise LocalityError(f"primal node {self.i} received data for non-neighbor {j}")
        self.lam_parts[j] = payload

    def solve_local(self):
        lam_loc = np.concatenate([self.lam_parts[j] for j in self.neighbor_js])
        w = self.stack_T.dot(lam_loc)
        self.z = solve_block(self.objective, w)

    def product_for(self, j):
        return self.out_blocks[j].dot(self.z)


class _ConstraintNode:
    """V2 node: owns one multiplier block, its right-hand sides and weight."""

    def __init__(self, j, nu, mu, b_j, c_j, inv_w_nu, inv_w_mu):
        self.j = j
        self.nu = nu
        self.mu = mu
        self.b_j = b_j
        self.c_j = c_j
        self.inv_w_nu = inv_w_nu
        self.inv_w_mu = inv_w_mu
        self.acc = None

    def multiplier_payload(self):
        return np.concatenate([self.nu, self.mu])

    def receive_product(self, payload):
        # Arrival order is neighbor-ascending by protocol; partial sums
        # accumulate in that order.
        if self.acc is None:
            self.acc = payload
        else:
            self.acc += payload

    def apply_update(self):
        p_j = self.b_j.size
        if self.acc is None:
            eq_grad = -self.b_j
            ineq_grad = -self.c_j
        else:
            eq_grad = self.acc[:p_j] - self.b_j
            ineq_grad = self.acc[p_j:] - self.c_j
        self.nu = self.nu + eq_grad * self.inv_w_nu
        self.mu = np.maximum(self.mu + ineq_grad * self.inv_w_mu, 0.0)
        self.acc = None


def run_distributed(problem, weights, lam0, rounds, reference=None):
    """Execute the weighted ascent as message passing for a fixed budget.

    Parameters
    ----------
    problem : BlockProblem
    weights : Weights
    lam0 : DualPoint or flat ndarray
        Start point inside the domain.
    rounds : int
        Number of synchronous rounds; each round performs exactly one
        dual update.
    reference : RefSolution, optional
        Enables the reference-based trace columns.

    Returns
    -------
    trace : RunTrace
        One row per round, evaluated at the round's starting multiplier;
        ``final_lambda`` holds the state after the last update and
        ``final_z`` the minimizer computed in the last round.
    log : MessageLog
    """
    if rounds < 1:
        raise StructureError("at least one round required")
    graph = problem.graph
    ws = _workspace(problem)
    lam_start = _as_flat(problem, lam0)
    _require_domain(problem, lam_start)
    P = graph.p_total

    primal_nodes = []
    for i in range(graph.M):
        out_blocks = {}
        for j in graph.v2_of[i]:
            j = int(j)
            for ii, T in ws.bundles[j]:
                if ii == i:
                    out_blocks[j] = T
        primal_nodes.append(_PrimalNode(
            i, problem.objectives[i],
            [int(j) for j in graph.v2_of[i]],
            ws.stack_T[i], out_blocks,
        ))
    constraint_nodes = []
    for j in range(graph.M_bar):
        es, qs = graph.eq_slice(j), graph.ineq_slice(j)
        constraint_nodes.append(_ConstraintNode(
            j,
            lam_start[es].copy(),
            lam_start[P + qs.start:P + qs.stop].copy(),
            ws.b_parts[j], ws.c_parts[j],
            float(weights.inv_w_nu[j]), float(weights.inv_w_mu[j]),
        ))

    log = MessageLog()
    cols = {name: [] for name in
            ("k", "dual", "f", "dual_subopt", "primal_subopt",
             "infeas_w", "dist_z", "step_w", "prox_w")}
    has_ref = reference is not None
    z_last = None

    def flatten_multipliers():
        lam = np.empty(P + graph.q_total)
        for node in constraint_nodes:
            lam[graph.eq_slice(node.j)] = node.nu
            qs = graph.ineq_slice(node.j)
            lam[P + qs.start:P + qs.stop] = node.mu
        return lam

    for rnd in range(rounds):
        lam_round = flatten_multipliers()

        # Phase 1: constraint nodes broadcast their multiplier blocks.
        for j, cnode in enumerate(constraint_nodes):
            payload = cnode.multiplier_payload()
            size = 8 * payload.size
            for i in graph.v1_of[j]:
                i = int(i)
                post_message(log, graph, rnd, DOWN, j, i, size)
                primal_nodes[i].receive_multiplier(j, payload)

        # Phase 2: primal nodes solve locally and send per-edge products
        # (ascending node order fixes the arrival order at each j).
        for i, pnode in enumerate(primal_nodes):
            pnode.solve_local()
            for j in pnode.neighbor_js:
                payload = pnode.product_for(j)
                post_message(log, graph, rnd, UP, i, j, 8 * payload.size)
                constraint_nodes[j].receive_product(payload)

        # Phase 3: constraint nodes reduce and update.
        for cnode in constraint_nodes:
            cnode.apply_update()

        z_last = np.empty(graph.n_total)
        for i, pnode in enumerate(primal_nodes):
            z_last[graph.z_slice(i)] = pnode.z

        # Trace row, evaluated centrally at the round's starting point.
        z_c, d_val = ws.inner_all(lam_round)
        grad = ws.gradient(z_c)
        lam_after = flatten_multipliers()
        step = lam_after - lam_round
        step_w = float(np.sqrt(step.dot(weights.flat * step)))
        f_val = d_val - float(lam_round.dot(grad))
        viol = grad.copy()
        np.maximum(viol[P:], 0.0, out=viol[P:])
        infeas_w = float(np.sqrt(viol.dot(weights.inv_flat * viol)))
        cols["k"].append(rnd)
        cols["dual"].append(d_val)
        cols["f"].append(f_val)
        cols["infeas_w"].append(infeas_w)
        cols["step_w"].append(step_w)
        cols["prox_w"].append(step_w)
        if has_ref:
            cols["dual_subopt"].append(reference.f_star - d_val)
            cols["primal_subopt"].append(f_val - reference.f_star)
            cols["dist_z"].append(float(np.linalg.norm(z_c - reference.z_star.z)))
        else:
            cols["dual_subopt"].append(np.nan)
            cols["primal_subopt"].append(np.nan)
            cols["dist_z"].append(np.nan)

    trace = RunTrace(
        algorithm="dg-distributed",
        status="cap_reached",
        iterations=rounds - 1,
        config={"algorithm": "dg-distributed", "stop_mode": "iteration_cap",
                "eps": np.nan, "cap": rounds, "seed": problem.meta.get("seed")},
        k=np.asarray(cols["k"], dtype=int),
        dual=np.asarray(cols["dual"]),
        f=np.asarray(cols["f"]),
        dual_subopt=np.asarray(cols["dual_subopt"]),
        primal_subopt=np.asarray(cols["primal_subopt"]),
        infeas_w=np.asarray(cols["infeas_w"]),
        dist_z=np.asarray(cols["dist_z"]),
        step_w=np.asarray(cols["step_w"]),
        prox_w=np.asarray(cols["prox_w"]),
        final_lambda=flatten_multipliers(),
        final_z=z_last,
    )
    return trace, log
