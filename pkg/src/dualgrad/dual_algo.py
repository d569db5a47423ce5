"""Dual machinery: value, gradient, projections, and the solver drivers.

The dual function d(nu, mu) = min_z L(z, nu, mu) is concave and smooth
because every block objective is strongly convex.  Two drivers maximize it
over the domain (equality multipliers free, inequality ones nonnegative):

* ``dg``: projected gradient with the diagonal weight matrix W as step
  size, fully distributed (one weight per constraint block);
* ``cg``: projected gradient with the scalar centralized step 1 / L_d.

Per iteration the primal blocks are solved exactly, the dual gradient is
accumulated per constraint block over neighbors in ascending order (a
fixed reduction order keeps results bitwise reproducible regardless of
execution schedule), and diagnostic metrics are recorded.
"""

from dataclasses import dataclass, field

import numpy as np

from scipy.linalg.lapack import dpotrs

from .errors import NumericsError, StructureError
from .model import DualPoint, PrimalPoint, apply_constraints
from .oracles import _sigmoid, _softplus, _softplus_root, eval_objective
from .stepsize import compute_weights, global_dual_lipschitz, stacked_coupling

STOP_MODES = ("relative_primal", "prox_residual", "iteration_cap")
TRACE_COLUMNS = (
    "k", "dual", "f", "dual_subopt", "primal_subopt",
    "infeas_w", "dist_z", "step_w", "prox_w",
)
ASCENT_SLACK = 1e-9


@dataclass
class StopRule:
    """Termination policy for :func:`run`.

    ``relative_primal`` stops when |f(z^k) - f*| / |f*| <= eps (requires a
    reference solution), ``prox_residual`` stops when the weighted proximal
    residual norm falls below eps, and ``iteration_cap`` runs to the cap.
    The cap is honored in every mode.
    """

    mode: str = "relative_primal"
    eps: float = 1e-6
    cap: int = 1_000_000

    def __post_init__(self):
        if self.mode not in STOP_MODES:
            raise StructureError(f"unknown stop mode {self.mode!r}")
        if not self.eps > 0:
            raise StructureError("stopping tolerance must be positive")
        if self.cap < 1:
            raise StructureError("iteration cap must be at least 1")


@dataclass
class MetricRow:
    dual: float
    f: float
    dual_subopt: float
    primal_subopt: float
    infeas_w: float
    dist_z: float


@dataclass
class RunTrace:
    """Per-iteration record of one solver run.

    Columns follow the CSV schema
    ``k,dual,f,dual_subopt,primal_subopt,infeas_w,dist_z,step_w,prox_w``;
    reference-dependent columns hold NaN when no reference was supplied.
    ``final_lambda`` / ``final_z`` carry the state at the last recorded
    row (these are diagnostics, not CSV columns).
    """

    algorithm: str
    status: str
    iterations: int
    config: dict
    k: np.ndarray
    dual: np.ndarray
    f: np.ndarray
    dual_subopt: np.ndarray
    primal_subopt: np.ndarray
    infeas_w: np.ndarray
    dist_z: np.ndarray
    step_w: np.ndarray
    prox_w: np.ndarray
    final_lambda: np.ndarray = field(repr=False, default=None)
    final_z: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.k)

    def write_csv(self, path):
        """Write the trace with 17-significant-digit floats."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for row in range(len(self.k)):
                vals = [str(int(self.k[row]))]
                for col in TRACE_COLUMNS[1:]:
                    vals.append(format(float(getattr(self, col)[row]), ".17g"))
                fh.write(",".join(vals) + "\n")


def load_trace_csv(path):
    """Read a trace CSV back into a dict of column arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TRACE_COLUMNS:
            raise StructureError(f"unexpected trace header {header}")
        data = [line.strip().split(",") for line in fh if line.strip()]
    cols = {name: np.array([float(row[idx]) for row in data])
            for idx, name in enumerate(TRACE_COLUMNS)}
    cols["k"] = cols["k"].astype(int)
    return cols


class DualWorkspace:
    """Structural cache shared by every solver pass over one problem.

    Holds, per primal block, the transposed stack of its coupling blocks
    plus gather indices into the flat dual vector, and, per constraint
    block, the bundled per-edge blocks used for the gradient reduction.
    Reusable buffers back the primal and gradient vectors, so the hot
    loop allocates almost nothing; callers that retain those vectors
    must copy them.
    """

    def __init__(self, problem):
        graph = problem.graph
        self.problem = problem
        self.graph = graph
        self.P = graph.p_total
        self.dim = graph.p_total + graph.q_total
        self.g_flat = np.concatenate([problem.b, problem.c])
        self.lower = np.full(self.dim, -np.inf)
        self.lower[self.P:] = 0.0
        self._zbuf = np.empty(graph.n_total)
        self._gradbuf = np.empty(self.dim)

        self.gather = []
        self.stack_T = []
        for i in range(graph.M):
            idx = []
            for j in graph.v2_of[i]:
                j = int(j)
                es, qs = graph.eq_slice(j), graph.ineq_slice(j)
                idx.extend(range(es.start, es.stop))
                idx.extend(range(self.P + qs.start, self.P + qs.stop))
            self.gather.append(np.asarray(idx, dtype=np.intp))
            self.stack_T.append(np.ascontiguousarray(stacked_coupling(problem, i).T))

        # Inner-solve plan: per block, gather indices, transposed stack,
        # the shared Cholesky pieces, the output view into the primal
        # buffer, and the softplus reduction data where applicable.
        self._inner_plan = []
        for i, obj in enumerate(self.problem.objectives):
            zview = self._zbuf[graph.z_slice(i)]
            factor, flower = obj._chol
            if obj.gamma == 0.0:
                entry = (True, self.gather[i], self.stack_T[i], obj.q,
                         factor, flower, zview, None)
            else:
                qinv_a, a_qinv_a = obj._softplus_solve_cache
                soft = (obj.a, obj.gamma, qinv_a, obj.gamma * a_qinv_a)
                entry = (False, self.gather[i], self.stack_T[i], obj.q,
                         factor, flower, zview, soft)
            self._inner_plan.append(entry)

        # Per constraint block: [(i, T_ji)] with T_ji = vstack(A_ji, C_ji),
        # zero rows standing in for absent parts. One bundle per edge is
        # also the payload a primal node sends in the simulated protocol.
        self.bundles = []
        for j in range(graph.M_bar):
            p_j, q_j = int(graph.eq_rows[j]), int(graph.ineq_rows[j])
            entries = []
            for i in graph.v1_of[j]:
                i = int(i)
                A = problem.A_blocks.get((j, i))
                C = problem.C_blocks.get((j, i))
                n_i = int(graph.block_dims[i])
                T = np.vstack([
                    A if A is not None else np.zeros((p_j, n_i)),
                    C if C is not None else np.zeros((q_j, n_i)),
                ])
                entries.append((i, np.ascontiguousarray(T)))
            self.bundles.append(entries)
        self.b_parts = [problem.b[graph.eq_slice(j)] for j in range(graph.M_bar)]
        self.c_parts = [problem.c[graph.ineq_slice(j)] for j in range(graph.M_bar)]

        # Gradient plan: per block, payload factors paired with views of
        # the primal buffer, plus output views into the gradient buffer.
        self._grad_plan = []
        for j in range(graph.M_bar):
            pairs = [(T, self._zbuf[graph.z_slice(i)]) for i, T in self.bundles[j]]
            p_j = int(graph.eq_rows[j])
            es, qs = graph.eq_slice(j), graph.ineq_slice(j)
            eq_out = self._gradbuf[es]
            ineq_out = self._gradbuf[self.P + qs.start:self.P + qs.stop]
            self._grad_plan.append(
                (pairs, p_j, eq_out, ineq_out, self.b_parts[j], self.c_parts[j])
            )

    def inner_all(self, lam):
        """Solve every block subproblem at the dual point ``lam``.

        Returns the primal minimizer (a reused buffer) and the dual
        value, evaluated in its separable form
        sum_i d_i - <nu, b> - <mu, c>.
        """
        d_sum = 0.0
        for quad, gather, stack_T, q_i, factor, flower, zview, soft in self._inner_plan:
            w_i = stack_T.dot(lam[gather])
            w_i += q_i  # now q_i + w_i
            x, _ = dpotrs(factor, w_i, lower=flower)
            np.negative(x, out=zview)
            if quad:
                d_sum += 0.5 * float(w_i.dot(zview))
            else:
                # Same rank-1 reduction as solve_block, written into the
                # buffer; the min value follows from stationarity
                # (Q z = -(q + w) - gamma*sig*a).
                a, gamma, qinv_a, c = soft
                s = _softplus_root(c, float(a.dot(zview)))
                sig = _sigmoid(s)
                zview -= (gamma * sig) * qinv_a
                d_sum += (0.5 * float(w_i.dot(zview))
                          - 0.5 * gamma * sig * s
                          + gamma * _softplus(s))
        return self._zbuf, d_sum - float(lam.dot(self.g_flat))

    def gradient(self, z):
        """Dual gradient G z - g, reduced per constraint block.

        Per block j the per-edge products T_ji z_i are accumulated over
        neighbors i ascending, then the right-hand side is subtracted.
        ``z`` must be the buffer returned by :meth:`inner_all`; the
        result is a reused buffer as well.
        """
        if z is not self._zbuf:
            self._zbuf[:] = z
        grad = self._gradbuf
        for pairs, p_j, eq_out, ineq_out, b_j, c_j in self._grad_plan:
            if not pairs:
                np.negative(b_j, out=eq_out)
                np.negative(c_j, out=ineq_out)
                continue
            T, zv = pairs[0]
            acc = T.dot(zv)
            for T, zv in pairs[1:]:
                acc += T.dot(zv)
            np.subtract(acc[:p_j], b_j, out=eq_out)
            np.subtract(acc[p_j:], c_j, out=ineq_out)
        return grad

    def lambda_next(self, lam, grad, inv_step):
        """One projected step: clamp(lam + grad * inv_step) onto the domain."""
        return np.maximum(lam + grad * inv_step, self.lower)


def _workspace(problem):
    ws = problem.__dict__.get("_dual_workspace")
    if ws is None:
        ws = DualWorkspace(problem)
        problem.__dict__["_dual_workspace"] = ws
    return ws


def _as_flat(problem, lam):
    if isinstance(lam, DualPoint):
        return lam.flat()
    lam = np.asarray(lam, dtype=float)
    dim = problem.graph.p_total + problem.graph.q_total
    if lam.shape != (dim,):
        raise StructureError(f"dual vector has shape {lam.shape}, expected ({dim},)")
    return lam.copy()


def _require_domain(problem, lam_flat):
    P = problem.graph.p_total
    if lam_flat[P:].size and lam_flat[P:].min() < 0:
        raise StructureError("dual point has negative inequality multipliers")


def dual_value(problem, lam):
    """Dual function value at ``lam`` (separable evaluation)."""
    lam_flat = _as_flat(problem, lam)
    _, d_val = _workspace(problem).inner_all(lam_flat)
    return d_val


def dual_gradient(problem, lam):
    """Dual gradient and the inner minimizer at ``lam``.

    Returns
    -------
    grad : DualPoint
        G z(lam) - g arranged per constraint block (not generally inside
        the domain; it is a gradient, not a multiplier).
    z : PrimalPoint
    """
    ws = _workspace(problem)
    lam_flat = _as_flat(problem, lam)
    z, _ = ws.inner_all(lam_flat)
    grad = ws.gradient(z)
    P = problem.graph.p_total
    return (DualPoint(problem.graph, grad[:P].copy(), grad[P:].copy()),
            PrimalPoint(problem.graph, z))


def project_onto_domain(lam):
    """Project a dual-shaped vector onto the domain (clamp mu at zero).

    Because the weight matrix is diagonal positive, the weighted
    projection coincides with the componentwise clamp, so this single
    implementation serves both.
    """
    return DualPoint(lam.graph, lam.nu.copy(), np.maximum(lam.mu, 0.0))


def prox_residual(problem, lam, weights):
    """Proximal residual: displacement of one weighted projected step.

    Returns the residual as a DualPoint together with its W-norm.  Zero
    exactly at dual optima.
    """
    ws = _workspace(problem)
    lam_flat = _as_flat(problem, lam)
    z, _ = ws.inner_all(lam_flat)
    grad = ws.gradient(z)
    res = ws.lambda_next(lam_flat, grad, weights.inv_flat) - lam_flat
    P = problem.graph.p_total
    return DualPoint(problem.graph, res[:P].copy(), res[P:].copy()), weights.norm(res)


def dg_step(problem, weights, lam):
    """One weighted projected gradient step (the distributed update)."""
    ws = _workspace(problem)
    lam_flat = _as_flat(problem, lam)
    z, _ = ws.inner_all(lam_flat)
    grad = ws.gradient(z)
    lam_next = ws.lambda_next(lam_flat, grad, weights.inv_flat)
    P = problem.graph.p_total
    return (DualPoint(problem.graph, lam_next[:P].copy(), lam_next[P:].copy()),
            PrimalPoint(problem.graph, z))


def cg_step(problem, lipschitz, lam):
    """One projected gradient step with the centralized scalar step size."""
    ws = _workspace(problem)
    lam_flat = _as_flat(problem, lam)
    z, _ = ws.inner_all(lam_flat)
    grad = ws.gradient(z)
    lam_next = ws.lambda_next(lam_flat, grad, 1.0 / lipschitz)
    P = problem.graph.p_total
    return (DualPoint(problem.graph, lam_next[:P].copy(), lam_next[P:].copy()),
            PrimalPoint(problem.graph, z))


def metrics(problem, weights, reference, z, lam):
    """Reference-anchored diagnostics for one primal-dual pair.

    The infeasibility is the inverse-weighted norm of the constraint
    residual projected onto the domain: equality rows enter whole,
    inequality rows through their positive part.
    """
    z_flat = z.z if isinstance(z, PrimalPoint) else np.asarray(z, dtype=float)
    d_val = dual_value(problem, lam)
    f_val = eval_objective(problem, z_flat)
    Az, Cz = apply_constraints(problem, z_flat)
    viol = np.concatenate([Az - problem.b, np.maximum(Cz - problem.c, 0.0)])
    infeas = weights.inv_norm(viol)
    dist = float(np.linalg.norm(z_flat - reference.z_star.z))
    return MetricRow(
        dual=d_val,
        f=f_val,
        dual_subopt=reference.f_star - d_val,
        primal_subopt=f_val - reference.f_star,
        infeas_w=infeas,
        dist_z=dist,
    )


def run(problem, algo="dg", lam0=None, stop=None, reference=None,
        weights=None, lipschitz=None, on_iterate=None):
    """Drive the dual ascent to the stopping rule and record a trace.

    Parameters
    ----------
    problem : BlockProblem
    algo : {"dg", "cg"}
        Weighted distributed step or centralized scalar step.
    lam0 : DualPoint or flat ndarray, optional
        Start point inside the domain; defaults to zero.
    stop : StopRule, optional
        Defaults to ``relative_primal`` at 1e-6 with a 1e6 cap.
    reference : RefSolution, optional
        Required for the relative-primal rule and for the reference-based
        trace columns (NaN otherwise).
    weights : Weights, optional
        Reused when given, recomputed otherwise (also needed by ``cg``
        runs for the weighted diagnostics).
    lipschitz : float, optional
        Centralized constant for ``cg``; computed when absent.
    on_iterate : callable, optional
        Called as ``on_iterate(k, lam_flat, z_flat)`` after each recorded
        row; intended for harnesses that need the raw iterates.

    Returns
    -------
    RunTrace
    """
    algo = algo.lower()
    if algo not in ("dg", "cg"):
        raise StructureError(f"unknown algorithm {algo!r}")
    stop = stop if stop is not None else StopRule()
    ws = _workspace(problem)
    if weights is None:
        weights, _ = compute_weights(problem)
    if algo == "cg":
        if lipschitz is None:
            lipschitz = global_dual_lipschitz(problem)
        inv_step = 1.0 / lipschitz
    else:
        inv_step = weights.inv_flat

    if stop.mode == "relative_primal":
        if reference is None:
            raise StructureError("relative-primal stopping needs a reference solution")
        if reference.f_star == 0.0:
            raise StructureError("relative-primal stopping undefined for f* = 0")

    lam = _as_flat(problem, lam0) if lam0 is not None else np.zeros(ws.dim)
    _require_domain(problem, lam)

    has_ref = reference is not None
    f_star = reference.f_star if has_ref else np.nan
    z_star = reference.z_star.z if has_ref else None

    cols = {name: [] for name in TRACE_COLUMNS}
    status = "cap_reached"
    k = 0
    P = ws.P
    inv_w_flat = weights.inv_flat
    w_flat = weights.flat
    while True:
        z, d_val = ws.inner_all(lam)
        grad = ws.gradient(z)
        lam_next = ws.lambda_next(lam, grad, inv_step)
        step = lam_next - lam
        step_w = float(np.sqrt(step.dot(w_flat * step)))
        if algo == "dg":
            # The weighted step is the proximal residual itself.
            prox_w = step_w
        else:
            pres = ws.lambda_next(lam, grad, inv_w_flat) - lam
            prox_w = float(np.sqrt(pres.dot(w_flat * pres)))

        f_val = d_val - float(lam.dot(grad))
        viol = grad.copy()
        np.maximum(viol[P:], 0.0, out=viol[P:])
        infeas_w = float(np.sqrt(viol.dot(inv_w_flat * viol)))
        if has_ref:
            dual_subopt = f_star - d_val
            primal_subopt = f_val - f_star
            dist_z = float(np.linalg.norm(z - z_star))
        else:
            dual_subopt = primal_subopt = dist_z = np.nan

        cols["k"].append(k)
        cols["dual"].append(d_val)
        cols["f"].append(f_val)
        cols["dual_subopt"].append(dual_subopt)
        cols["primal_subopt"].append(primal_subopt)
        cols["infeas_w"].append(infeas_w)
        cols["dist_z"].append(dist_z)
        cols["step_w"].append(step_w)
        cols["prox_w"].append(prox_w)
        if on_iterate is not None:
            on_iterate(k, lam, z)

        if step_w == 0.0:
            status = "converged"
            break
        if stop.mode == "relative_primal" and abs(f_val - f_star) / abs(f_star) <= stop.eps:
            status = "converged"
            break
        if stop.mode == "prox_residual" and prox_w <= stop.eps:
            status = "converged"
            break
        if k >= stop.cap:
            status = "cap_reached"
            break
        lam = lam_next
        k += 1

    trace = RunTrace(
        algorithm=algo,
        status=status,
        iterations=k,
        config={
            "algorithm": algo,
            "stop_mode": stop.mode,
            "eps": stop.eps,
            "cap": stop.cap,
            "seed": problem.meta.get("seed"),
        },
        k=np.asarray(cols["k"], dtype=int),
        dual=np.asarray(cols["dual"]),
        f=np.asarray(cols["f"]),
        dual_subopt=np.asarray(cols["dual_subopt"]),
        primal_subopt=np.asarray(cols["primal_subopt"]),
        infeas_w=np.asarray(cols["infeas_w"]),
        dist_z=np.asarray(cols["dist_z"]),
        step_w=np.asarray(cols["step_w"]),
        prox_w=np.asarray(cols["prox_w"]),
        final_lambda=lam.copy(),
        final_z=z.copy(),
    )
    _check_ascent(trace)
    return trace


def _check_ascent(trace):
    """Post-run invariant: the dual value never decreases (with slack)."""
    d = trace.dual
    if len(d) < 2:
        return
    slack = ASCENT_SLACK * np.maximum(1.0, np.abs(d[:-1]))
    drop = d[:-1] - d[1:]
    worst = float((drop - slack).max())
    if worst > 0:
        raise NumericsError(
            f"dual value decreased along the run by up to {worst:.3e}"
        )
