"""Numerical validation of the dual inequalities behind the linear rates.

Four checkable facts drive the convergence theory:

* the weighted descent inequality (the step-size matrix dominates the
  dual curvature);
* the gradient / residual inequality
  <grad d(y) - grad d(x), x - y> <= 2 ||r(x) - r(y)||_W ||x - y||_W,
  where r is the proximal residual;
* the proximal residual is 3-Lipschitz in the weighted norm;
* the error bound itself: the distance to the optimal multiplier set is
  at most a constant times the proximal residual norm.

The error-bound constant is measured, never computed from its closed
form (that form rests on polyhedral Hoffman bounds the literature leaves
abstract).  For full-row-rank constraint matrices the dual is strongly
concave and the measured constant must stay below 2 / sigma_dW, which
this module evaluates by a dense eigendecomposition.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_solve

from . import jsonio
from .errors import UnsupportedInstanceError
from .model import RANK_TOL, assemble_dense
from .dual_algo import StopRule, _as_flat, _workspace, run

RATIO_DENOM_FLOOR = 1e-9


def _point_state(problem, weights, lam_flat):
    """(dual value, gradient, proximal residual) at one dual point."""
    ws = _workspace(problem)
    z, d_val = ws.inner_all(lam_flat)
    grad = ws.gradient(z)
    res = ws.lambda_next(lam_flat, grad, weights.inv_flat) - lam_flat
    return d_val, grad, res


def _descent_terms(problem, weights, lam, lam_bar):
    la = _as_flat(problem, lam)
    lb = _as_flat(problem, lam_bar)
    d_a, _, _ = _point_state(problem, weights, la)
    d_b, grad_b, _ = _point_state(problem, weights, lb)
    diff = la - lb
    model_val = d_b + float(grad_b.dot(diff)) - 0.5 * weights.norm(diff) ** 2
    return d_a, model_val


def check_descent_lemma(problem, weights, lam, lam_bar):
    """Margin of d(lam) >= model(lam_bar); nonnegative up to rounding."""
    d_a, model_val = _descent_terms(problem, weights, lam, lam_bar)
    return d_a - model_val


def _lemma4_terms(problem, weights, lam, other):
    la = _as_flat(problem, lam)
    lo = _as_flat(problem, other)
    _, grad_a, res_a = _point_state(problem, weights, la)
    _, grad_o, res_o = _point_state(problem, weights, lo)
    diff = la - lo
    lhs = float((grad_o - grad_a).dot(diff))
    rhs = 2.0 * weights.norm(res_a - res_o) * weights.norm(diff)
    return lhs, rhs


def check_lemma4(problem, weights, lam, other):
    """Margin of the gradient / residual inequality (RHS - LHS)."""
    lhs, rhs = _lemma4_terms(problem, weights, lam, other)
    return rhs - lhs


def _lipschitz3_terms(problem, weights, lam, lam_tilde):
    la = _as_flat(problem, lam)
    lt = _as_flat(problem, lam_tilde)
    _, _, res_a = _point_state(problem, weights, la)
    _, _, res_t = _point_state(problem, weights, lt)
    lhs = weights.norm(res_a - res_t)
    rhs = 3.0 * weights.norm(la - lt)
    return lhs, rhs


def check_prox_lipschitz3(problem, weights, lam, lam_tilde):
    """Margin of ||r(x) - r(y)||_W <= 3 ||x - y||_W (RHS - LHS)."""
    lhs, rhs = _lipschitz3_terms(problem, weights, lam, lam_tilde)
    return rhs - lhs


def sample_dual_points(problem, weights, center, count, seed,
                       radii=(0.1, 1.0, 10.0)):
    """Dual points around a center: center + radius * unit-ball draws.

    Radii cycle through ``radii`` so both near- and far-field behavior is
    probed; samples are clamped onto the domain.  Deterministic given the
    seed.
    """
    center = _as_flat(problem, center)
    rng = np.random.default_rng(int(seed))
    dim = center.size
    P = problem.graph.p_total
    points = []
    for t in range(count):
        radius = radii[t % len(radii)]
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            direction[0] = 1.0
            norm = 1.0
        direction *= rng.uniform() ** (1.0 / dim) / norm
        lam = center + radius * direction
        lam[P:] = np.maximum(lam[P:], 0.0)
        points.append(lam)
    return points


@dataclass
class InequalityCampaign:
    """Violation counts of the three dual inequalities over sampled pairs."""

    pairs: int
    descent_violations: int
    lemma4_violations: int
    lipschitz3_violations: int
    worst_descent_margin: float
    worst_lemma4_margin: float
    worst_lipschitz3_margin: float

    @property
    def total_violations(self):
        return (self.descent_violations + self.lemma4_violations
                + self.lipschitz3_violations)


def inequality_campaign(problem, weights, center, pairs, seed, slack=1e-8):
    """Evaluate all three inequalities on seeded random point pairs.

    A violation is a margin below ``-slack * scale`` with the scale taken
    from the magnitudes entering each inequality.
    """
    points = sample_dual_points(problem, weights, center, 2 * pairs, seed)
    counts = [0, 0, 0]
    worst = [np.inf, np.inf, np.inf]
    for idx in range(pairs):
        lam, other = points[2 * idx], points[2 * idx + 1]

        d_a, model_val = _descent_terms(problem, weights, lam, other)
        margin = d_a - model_val
        scale = max(1.0, abs(d_a), abs(model_val))
        worst[0] = min(worst[0], margin / scale)
        if margin < -slack * scale:
            counts[0] += 1

        lhs, rhs = _lemma4_terms(problem, weights, lam, other)
        margin = rhs - lhs
        scale = max(1.0, abs(lhs), rhs)
        worst[1] = min(worst[1], margin / scale)
        if margin < -slack * scale:
            counts[1] += 1

        lhs, rhs = _lipschitz3_terms(problem, weights, lam, other)
        margin = rhs - lhs
        scale = max(1.0, lhs, rhs)
        worst[2] = min(worst[2], margin / scale)
        if margin < -slack * scale:
            counts[2] += 1
    return InequalityCampaign(
        pairs=pairs,
        descent_violations=counts[0],
        lemma4_violations=counts[1],
        lipschitz3_violations=counts[2],
        worst_descent_margin=float(worst[0]),
        worst_lemma4_margin=float(worst[1]),
        worst_lipschitz3_margin=float(worst[2]),
    )


@dataclass
class ProbeReport:
    """Measured error-bound ratios along one weighted-ascent run."""

    ks: np.ndarray
    ratios: np.ndarray
    kappa_hat: float
    median_ratio: float
    excluded: int
    violations: int  # non-finite ratios

    def to_doc(self):
        return {
            "kappa_hat": self.kappa_hat,
            "median_ratio": self.median_ratio,
            "excluded": self.excluded,
            "violations": self.violations,
            "ks": [int(k) for k in self.ks],
            "ratios": self.ratios.tolist(),
        }

    def save(self, path):
        jsonio.dump(self.to_doc(), path)


def full_row_rank(problem):
    """Whether the stacked constraint matrix has full row rank."""
    G, _ = assemble_dense(problem)
    if G.shape[0] > G.shape[1]:
        return False
    svals = np.linalg.svd(G, compute_uv=False)
    return bool((svals > RANK_TOL * svals[0]).sum() == G.shape[0])


def probe_error_bound(problem, trace, reference, weights=None):
    """Ratios distance-to-optimum / proximal-residual along a run.

    Restricted to full-row-rank constraint matrices, where the optimal
    multiplier is unique and equals the reference multiplier.  The run
    behind ``trace`` is replayed deterministically to recover the dual
    iterates; points where the residual norm is below ``RATIO_DENOM_FLOOR``
    are excluded (the ratio is 0/0 at the optimum).
    """
    if not full_row_rank(problem):
        raise UnsupportedInstanceError(
            "error-bound probe requires a full-row-rank constraint matrix"
        )
    if weights is None:
        from .stepsize import compute_weights
        weights, _ = compute_weights(problem)
    lam_star = reference.lambda_ref.flat()

    dists = []

    def record(k, lam, z):
        dists.append(weights.norm(lam - lam_star))

    replay = run(
        problem, algo="dg",
        stop=StopRule("iteration_cap", eps=1.0, cap=max(int(trace.iterations), 1)),
        weights=weights, on_iterate=record,
    )
    dists = np.asarray(dists)
    prox = replay.prox_w
    keep = prox > RATIO_DENOM_FLOOR
    ratios = dists[keep] / prox[keep]
    ks = replay.k[keep]
    finite = np.isfinite(ratios)
    return ProbeReport(
        ks=ks,
        ratios=ratios,
        kappa_hat=float(ratios.max()) if ratios.size else 0.0,
        median_ratio=float(np.median(ratios)) if ratios.size else 0.0,
        excluded=int((~keep).sum()),
        violations=int((~finite).sum()),
    )


def strong_concavity_constant(problem, weights):
    """sigma_dW: smallest eigenvalue of W^{-1/2} G Q^{-1} G' W^{-1/2}.

    Defined for quadratic instances with full-row-rank G, where the dual
    is strongly concave in the weighted norm and the error-bound constant
    is exactly 2 / sigma_dW.  Dense eigendecomposition (oracle use only).
    """
    if any(obj.gamma != 0 for obj in problem.objectives):
        raise UnsupportedInstanceError("strong concavity requires quadratic blocks")
    if not full_row_rank(problem):
        raise UnsupportedInstanceError("strong concavity requires full row rank")
    G, _ = assemble_dense(problem)
    from scipy.linalg import cho_factor
    Q = block_diag(*[obj.Q for obj in problem.objectives])
    factor = cho_factor(Q, check_finite=False)
    curvature = G.dot(cho_solve(factor, G.T, check_finite=False))
    scale = 1.0 / np.sqrt(weights.flat)
    scaled = curvature * scale[:, None] * scale[None, :]
    return float(np.linalg.eigvalsh(scaled)[0])
