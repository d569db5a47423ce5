"""Per-block objectives, their convexity constants, and exact inner solves.

Each block carries f_i(z) = 0.5 z'Q z + q'z + gamma * log(1 + exp(<a, z>))
with Q symmetric positive definite and gamma >= 0.  The logistic term is
the smooth non-quadratic member of the family; gamma = 0 recovers the pure
quadratic case used by control applications.
"""

import math
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor
from scipy.linalg.lapack import dpotrs
from scipy.special import expit

from .errors import ConvergenceError, StructureError

NEWTON_GRAD_TOL = 1e-12
NEWTON_MAX_ITER = 100


class BlockObjective:
    """Strongly convex smooth objective of one primal block.

    Parameters
    ----------
    Q : (n, n) array_like
        Symmetric positive definite quadratic term.
    q : (n,) array_like
        Linear term.
    gamma : float, optional
        Nonnegative weight of the softplus term.
    a : (n,) array_like, optional
        Direction of the softplus term; required when gamma > 0.
    """

    def __init__(self, Q, q, gamma=0.0, a=None):
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise StructureError("Q must be a square matrix")
        scale = np.abs(Q).max() if Q.size else 0.0
        if Q.size and np.abs(Q - Q.T).max() > 1e-9 * max(scale, 1.0):
            raise StructureError("Q must be symmetric")
        # Symmetrize exactly so factorizations and eigensolves agree.
        self.Q = np.ascontiguousarray((Q + Q.T) / 2.0)
        self.q = np.ascontiguousarray(np.asarray(q, dtype=float))
        if self.q.shape != (Q.shape[0],):
            raise StructureError("q has the wrong length")
        gamma = float(gamma)
        if gamma < 0:
            raise StructureError("gamma must be nonnegative")
        self.gamma = gamma
        if a is None:
            if gamma > 0:
                raise StructureError("a is required when gamma > 0")
            a = np.zeros(Q.shape[0])
        self.a = np.ascontiguousarray(np.asarray(a, dtype=float))
        if self.a.shape != (Q.shape[0],):
            raise StructureError("a has the wrong length")

    @property
    def dim(self):
        return self.Q.shape[0]

    @cached_property
    def _chol(self):
        try:
            return cho_factor(self.Q, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise StructureError("Q is not positive definite") from exc

    @cached_property
    def _softplus_solve_cache(self):
        # Sherman-Morrison pieces for Newton steps on Q + s*a a'.
        qinv_a = self.solve_quadratic(self.a)
        return qinv_a, float(self.a.dot(qinv_a))

    def solve_quadratic(self, rhs):
        """Solve Q x = rhs through the cached Cholesky factor."""
        factor, lower = self._chol
        x, info = dpotrs(factor, rhs, lower=lower)
        if info != 0:
            raise StructureError("Cholesky solve failed")
        return x

    def value(self, z):
        val = 0.5 * z.dot(self.Q.dot(z)) + self.q.dot(z)
        if self.gamma > 0:
            val += self.gamma * np.logaddexp(0.0, self.a.dot(z))
        return float(val)

    def grad(self, z):
        g = self.Q.dot(z) + self.q
        if self.gamma > 0:
            g = g + self.gamma * expit(self.a.dot(z)) * self.a
        return g


def block_constants(obj):
    """Strong convexity and gradient Lipschitz constants of one block.

    The quadratic part contributes its extreme eigenvalues; the softplus
    term adds at most ||a||^2 / 4 to the curvature (the logistic slope is
    capped at 1/4) and nothing to the lower bound.

    Returns
    -------
    sigma : float
        Strong convexity constant, lambda_min(Q).
    lips : float
        Gradient Lipschitz constant, lambda_max(Q) + gamma ||a||^2 / 4.
    """
    eigs = np.linalg.eigvalsh(obj.Q)
    sigma = float(eigs[0])
    if sigma <= 0:
        raise StructureError("objective is not strongly convex (Q not PD)")
    lips = float(eigs[-1]) + obj.gamma * float(obj.a.dot(obj.a)) / 4.0
    return sigma, lips


def _sigmoid(s):
    # Branching scalar logistic; avoids overflow on both tails.
    if s >= 0.0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def _softplus(s):
    # Scalar log(1 + exp(s)), overflow-safe.
    return math.log1p(math.exp(-abs(s))) + max(s, 0.0)


def _softplus_root(c, beta, start=None):
    """Root of s + c * sigmoid(s) = beta for c >= 0.

    The map is strictly increasing with slope in [1, 1 + c/4], so the
    root is unique and lies in [beta - c, beta].  Newton steps are
    safeguarded by bisection on that bracket.  ``start`` may carry a
    warm start (e.g. the root at a nearby point); the result does not
    depend on it beyond roundoff.
    """
    if c == 0.0:
        return beta
    lo, hi = beta - c, beta
    if start is not None and lo < start < hi:
        s = start
    else:
        s = beta - c * _sigmoid(beta)
    tol = 4e-16 * max(1.0, abs(beta), c)
    for _ in range(NEWTON_MAX_ITER):
        if s >= 0.0:
            sig = 1.0 / (1.0 + math.exp(-s))
        else:
            e = math.exp(s)
            sig = e / (1.0 + e)
        g = s + c * sig - beta
        if -tol <= g <= tol:
            return s
        if g > 0.0:
            hi = s
        else:
            lo = s
        s_next = s - g / (1.0 + c * sig * (1.0 - sig))
        if not lo < s_next < hi:
            s_next = 0.5 * (lo + hi)
        s = s_next
    return s  # bracket width is at machine precision here


def _solve_softplus(obj, qw):
    """Minimizer of 0.5 z'Qz + qw'z + gamma*softplus(<a, z>).

    The softplus couples the block only through the scalar s = <a, z>, so
    stationarity reduces to one monotone scalar equation:
    z = z0 - gamma*sigmoid(s)*Q^{-1}a with z0 = -Q^{-1}qw and
    s + gamma <a, Q^{-1}a> sigmoid(s) = <a, z0>.

    Returns (z, s, sigmoid(s)); the gradient at z vanishes to roundoff
    (well below the 1e-12 inner tolerance).
    """
    qinv_a, a_qinv_a = obj._softplus_solve_cache
    z0 = -obj.solve_quadratic(qw)
    beta = float(obj.a.dot(z0))
    s = _softplus_root(obj.gamma * a_qinv_a, beta)
    sig = _sigmoid(s)
    z = z0 - (obj.gamma * sig) * qinv_a
    return z, s, sig


def solve_block(obj, w):
    """Exact minimizer of f_i(z) + <w, z>.

    For gamma = 0 the solution is the closed form -Q^{-1}(q + w) through
    the cached Cholesky factor.  For gamma > 0 the softplus term is
    rank-1, so the problem reduces to one safeguarded scalar Newton
    (:func:`_softplus_root`); the returned point's gradient norm is below
    1e-12 by construction, which the direct damped-Newton scheme would
    reach only after many more matrix solves.

    Parameters
    ----------
    obj : BlockObjective
    w : (n,) ndarray
        Linear coupling term.

    Returns
    -------
    z : (n,) ndarray

    Raises
    ------
    ConvergenceError
        If the inner tolerance is not certified; this cannot happen for
        valid positive definite data and should be treated as a bug
        signal.
    """
    if obj.gamma == 0.0:
        return -obj.solve_quadratic(obj.q + w)
    z, _, sig = _solve_softplus(obj, obj.q + w)
    if not np.isfinite(sig):
        grad_norm = float(np.linalg.norm(obj.grad(z) + w))
        raise ConvergenceError(
            f"inner solve failed (gradient norm {grad_norm:.3e})",
            grad_norm=grad_norm,
        )
    return z


def inner_value(obj, w, z):
    """Value of min_z f_i(z) + <w, z> given its minimizer ``z``.

    For the quadratic case the stationarity identity Q z = -(q + w)
    collapses the expression to 0.5 <q + w, z>, which saves a matrix
    product in the iteration loop.
    """
    if obj.gamma == 0.0:
        return 0.5 * float((obj.q + w).dot(z))
    return obj.value(z) + float(w.dot(z))


def conjugate_strong_convexity(problem):
    """Strong convexity constants attached to the conjugate of the objective.

    Returns
    -------
    sigma_conj : float
        Sum over blocks of 1 / L_i; the conjugate of the full objective is
        strongly convex with this constant.
    sigma_f : float
        min over blocks of sigma_i, the convexity constant of f itself.
    """
    sigma_conj = 0.0
    sigma_f = np.inf
    for obj in problem.objectives:
        sigma, lips = block_constants(obj)
        sigma_conj += 1.0 / lips
        sigma_f = min(sigma_f, sigma)
    return float(sigma_conj), float(sigma_f)


def eval_objective(problem, z):
    """Total objective value, summed blockwise."""
    z = z.z if hasattr(z, "z") else np.asarray(z, dtype=float)
    graph = problem.graph
    total = 0.0
    for i, obj in enumerate(problem.objectives):
        total += obj.value(z[graph.z_slice(i)])
    return float(total)


def eval_lagrangian(problem, z, lam):
    """Lagrangian f(z) + <nu, A z - b> + <mu, C z - c>, computed blockwise."""
    from .model import apply_constraints

    z = z.z if hasattr(z, "z") else np.asarray(z, dtype=float)
    nu = lam.nu if hasattr(lam, "nu") else np.asarray(lam[0], dtype=float)
    mu = lam.mu if hasattr(lam, "mu") else np.asarray(lam[1], dtype=float)
    Az, Cz = apply_constraints(problem, z)
    value = eval_objective(problem, z)
    if nu.size:
        value += float(nu.dot(Az - problem.b))
    if mu.size:
        value += float(mu.dot(Cz - problem.c))
    return float(value)
