"""High-accuracy reference solutions used by metrics and test oracles.

The reference solver is the weighted dual ascent itself, run on a dense
assembly of the problem (dense products are sanctioned for desk-scale
reference work) until the weighted proximal residual falls below 1e-10.
That is six orders below the experiment tolerances, so reference error
cannot pollute any check performed against it.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve, solve

from . import jsonio
from .errors import NumericsError, UnsupportedInstanceError
from .model import DualPoint, PrimalPoint, assemble_dense
from .oracles import _sigmoid, _softplus_root, eval_objective
from .stepsize import compute_weights

PROX_TARGET = 1e-10
INFEAS_TARGET = 1e-8
REFERENCE_CAP = 10_000_000


@dataclass
class RefQuality:
    prox_w: float
    infeas_w: float
    iterations: int
    converged: bool
    f_star_source: str  # "primal" or "dual"

    @property
    def low_quality(self):
        return not (self.converged and self.f_star_source == "primal")


@dataclass
class RefSolution:
    """Primal-dual reference: minimizer, optimal value, one optimal multiplier."""

    z_star: PrimalPoint
    f_star: float
    lambda_ref: DualPoint
    quality: RefQuality


class _DenseEvaluator:
    """Dense inner-solve machinery shared by the reference loop and oracles."""

    def __init__(self, problem):
        self.problem = problem
        self.graph = problem.graph
        self.G, self.g = assemble_dense(problem)
        self.q_full = np.concatenate([obj.q for obj in problem.objectives])
        self.quadratic = all(obj.gamma == 0 for obj in problem.objectives)
        Q_full = block_diag(*[obj.Q for obj in problem.objectives])
        self.Q_full = Q_full
        self.chol = cho_factor(Q_full, check_finite=False)
        self._softplus_blocks = []
        for i, obj in enumerate(problem.objectives):
            if obj.gamma > 0:
                qinv_a, a_qinv_a = obj._softplus_solve_cache
                self._softplus_blocks.append(
                    (self.graph.z_slice(i), obj.a, obj.gamma, qinv_a,
                     obj.gamma * a_qinv_a)
                )
        self._n_soft = len(self._softplus_blocks)

    def inner_solution(self, lam, root_state=None):
        """argmin_z L(z, lam), solved densely.

        The softplus contribution of each block is rank-1, so after the
        quadratic solve it reduces to one scalar root per block (the same
        reduction as the per-block solver), batched over blocks.
        ``root_state``, when given, warm-starts the roots and is updated
        in place; it changes the result only at roundoff level.
        """
        rhs = self.q_full + self.G.T.dot(lam)
        z = -cho_solve(self.chol, rhs, check_finite=False)
        for idx, (sl, a, gamma, qinv_a, c) in enumerate(self._softplus_blocks):
            zi = z[sl]
            start = root_state[idx] if root_state is not None else None
            s = _softplus_root(c, float(a.dot(zi)), start=start)
            if root_state is not None:
                root_state[idx] = s
            zi -= (gamma * _sigmoid(s)) * qinv_a
        return z

    def dual_value(self, lam):
        """d(lam) evaluated through the dense Lagrangian (oracle path)."""
        z = self.inner_solution(lam)
        f_val = 0.5 * z.dot(self.Q_full.dot(z)) + self.q_full.dot(z)
        if not self.quadratic:
            graph = self.graph
            for i, obj in enumerate(self.problem.objectives):
                if obj.gamma > 0:
                    f_val += obj.gamma * np.logaddexp(0.0, obj.a.dot(z[graph.z_slice(i)]))
        return float(f_val + lam.dot(self.G.dot(z) - self.g))


def _dense_evaluator(problem):
    ev = problem.__dict__.get("_dense_evaluator")
    if ev is None:
        ev = _DenseEvaluator(problem)
        problem.__dict__["_dense_evaluator"] = ev
    return ev


def dense_dual_value(problem, lam):
    """Dual value via the dense Lagrangian; independent of the blockwise path.

    Also defined slightly outside the dual domain (the inner minimization
    stays well posed), which finite-difference oracles rely on.
    """
    lam = lam.flat() if isinstance(lam, DualPoint) else np.asarray(lam, dtype=float)
    return _dense_evaluator(problem).dual_value(lam)


def dense_dual_gradient(problem, lam):
    """Dual gradient via dense products (oracle path)."""
    lam = lam.flat() if isinstance(lam, DualPoint) else np.asarray(lam, dtype=float)
    ev = _dense_evaluator(problem)
    z = ev.inner_solution(lam)
    return ev.G.dot(z) - ev.g


def solve_reference(problem, weights=None, prox_target=PROX_TARGET,
                    cap=REFERENCE_CAP):
    """Weighted dual ascent to a 1e-10 proximal residual.

    Deterministic; starts at zero.  The optimal value is taken from the
    primal iterate when the weighted infeasibility is below 1e-8 and from
    the dual value otherwise, with the choice flagged in the quality
    record (never silently degraded).
    """
    if weights is None:
        weights, _ = compute_weights(problem)
    ev = _dense_evaluator(problem)
    graph = problem.graph
    P = graph.p_total
    lower = np.full(P + graph.q_total, -np.inf)
    lower[P:] = 0.0
    inv_w = weights.inv_flat
    w_flat = weights.flat

    lam = np.zeros(P + graph.q_total)
    prox_w = np.inf
    converged = False
    iterations = 0
    root_state = np.zeros(ev._n_soft) if ev._n_soft else None
    for k in range(cap + 1):
        z = ev.inner_solution(lam, root_state=root_state)
        grad = ev.G.dot(z) - ev.g
        lam_next = np.maximum(lam + grad * inv_w, lower)
        step = lam_next - lam
        prox_w = float(np.sqrt(step.dot(w_flat * step)))
        iterations = k
        if prox_w <= prox_target:
            converged = True
            break
        lam = lam_next

    viol = ev.G.dot(z) - ev.g
    viol[P:] = np.maximum(viol[P:], 0.0)
    infeas_w = float(np.sqrt(viol.dot(inv_w * viol)))
    f_primal = eval_objective(problem, z)
    if infeas_w <= INFEAS_TARGET:
        f_star = f_primal
        source = "primal"
    else:
        f_star = ev.dual_value(lam)
        source = "dual"

    quality = RefQuality(
        prox_w=prox_w,
        infeas_w=infeas_w,
        iterations=iterations,
        converged=converged,
        f_star_source=source,
    )
    return RefSolution(
        z_star=PrimalPoint(graph, z.copy()),
        f_star=float(f_star),
        lambda_ref=DualPoint(graph, lam[:P].copy(), lam[P:].copy()),
        quality=quality,
    )


def kkt_solve_equality(problem):
    """Exact oracle for quadratic, inequality-free instances.

    Solves the symmetric indefinite system [[Q, A'], [A, 0]] [z; nu] =
    [-q; b] by a dense factorization and returns (z, nu).
    """
    graph = problem.graph
    if any(obj.gamma != 0 for obj in problem.objectives):
        raise UnsupportedInstanceError("KKT oracle requires quadratic objectives")
    if graph.q_total != 0:
        raise UnsupportedInstanceError("KKT oracle requires an inequality-free problem")
    G, _ = assemble_dense(problem)
    A = G[:graph.p_total]
    Q = block_diag(*[obj.Q for obj in problem.objectives])
    n, p = graph.n_total, graph.p_total
    K = np.zeros((n + p, n + p))
    K[:n, :n] = Q
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-np.concatenate([obj.q for obj in problem.objectives]),
                          problem.b])
    try:
        sol = solve(K, rhs, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise NumericsError("singular KKT system (rank-deficient constraints)") from exc
    residual = np.linalg.norm(K.dot(sol) - rhs)
    if not np.isfinite(residual) or residual > 1e-8 * max(1.0, np.linalg.norm(rhs)):
        raise NumericsError("KKT solve is numerically unreliable")
    return sol[:n], sol[n:]


# ---------------------------------------------------------------------------
# Serialization (stored alongside the problem file for reuse across runs)

def reference_to_doc(reference):
    return {
        "z_star": reference.z_star.z.tolist(),
        "f_star": float(reference.f_star),
        "nu": reference.lambda_ref.nu.tolist(),
        "mu": reference.lambda_ref.mu.tolist(),
        "quality": {
            "prox_w": reference.quality.prox_w,
            "infeas_w": reference.quality.infeas_w,
            "iterations": reference.quality.iterations,
            "converged": reference.quality.converged,
            "f_star_source": reference.quality.f_star_source,
        },
    }


def reference_from_doc(doc, graph):
    quality = RefQuality(
        prox_w=float(doc["quality"]["prox_w"]),
        infeas_w=float(doc["quality"]["infeas_w"]),
        iterations=int(doc["quality"]["iterations"]),
        converged=bool(doc["quality"]["converged"]),
        f_star_source=str(doc["quality"]["f_star_source"]),
    )
    return RefSolution(
        z_star=PrimalPoint(graph, np.asarray(doc["z_star"], dtype=float)),
        f_star=float(doc["f_star"]),
        lambda_ref=DualPoint(graph,
                             np.asarray(doc["nu"], dtype=float),
                             np.asarray(doc["mu"], dtype=float)),
        quality=quality,
    )


def save_reference(reference, path, extra=None):
    doc = reference_to_doc(reference)
    if extra:
        doc.update(extra)
    jsonio.dump(doc, path)


def load_reference(path, graph):
    return reference_from_doc(jsonio.load(path), graph)
