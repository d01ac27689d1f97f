"""Projection of states onto an algebraic constraint manifold {u : g(u,t)=0}.

Two variants are provided. The robust one re-linearizes the constraint at
the current iterate (a Gauss-Newton loop on the multipliers, one m×m
Cholesky per iteration). The fast one freezes the constraint Jacobian at
the unprojected state, so the whole solve needs a single Jacobian
evaluation and a single factorization of J Jᵀ.

Also here: the rhs-level stabilization force -γ Jᵀ(J Jᵀ)⁻¹ g(u), which is
the single-Newton-step relaxation of the fast projection, and the
implicit-differentiation vector-Jacobian products used to backpropagate
through either projection without unrolling its iterations.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import (
    SingularMatrixError,
    cholesky_factor,
    cholesky_solve,
    solve_small,
    solve_spd,
)

DEFAULT_TOLERANCE = 1e-12
ROBUST_MAX_ITERATIONS = 50
FAST_MAX_ITERATIONS = 20

# step used when finite-differencing a constraint Jacobian closure to get
# multiplier-weighted curvature terms; second-order accurate, so the error
# is ~1e-10 at unit scale
_CURVATURE_EPS = 1e-5


class ProjectionError(Exception):
    pass


class NonConvergenceError(ProjectionError):
    def __init__(self, message, residual_norm, iterations):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class DivergenceError(NonConvergenceError):
    """Fixed-Jacobian iteration whose residual grew three times in a row."""


@dataclass(frozen=True)
class ConstraintSpec:
    """Residual g(u,t) in R^m, its Jacobian dg/du, and the conserved levels.

    ``reference_level`` records the per-trajectory values subtracted inside
    ``residual`` (conserved quantities are turned into residuals relative to
    their value at the trajectory's initial condition). It is carried for
    serialization and inspection; ``residual`` already includes it.
    """

    residual: Callable[[np.ndarray, float], np.ndarray]
    jacobian: Callable[[np.ndarray, float], np.ndarray]
    reference_level: np.ndarray
    m: int

    def violation(self, u, t=0.0):
        """Max-norm of the residual, the convergence measure used throughout."""
        if self.m == 0:
            return 0.0
        return float(np.max(np.abs(self.residual(u, t))))


@dataclass(frozen=True)
class ProjectionConfig:
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = FAST_MAX_ITERATIONS
    variant: str = "fast"
    fallback: bool = True  # retry non-converged fast solves with the robust loop

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.variant not in ("robust", "fast"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def robust(cls, tolerance=DEFAULT_TOLERANCE, max_iterations=ROBUST_MAX_ITERATIONS, fallback=False):
        return cls(tolerance=tolerance, max_iterations=max_iterations, variant="robust", fallback=fallback)

    @classmethod
    def fast(cls, tolerance=DEFAULT_TOLERANCE, max_iterations=FAST_MAX_ITERATIONS, fallback=True):
        return cls(tolerance=tolerance, max_iterations=max_iterations, variant="fast", fallback=fallback)


@dataclass(frozen=True)
class ProjectionResult:
    z: np.ndarray
    lam: np.ndarray
    iterations: int
    residual_norm: float
    variant: str = "robust"


def _empty_result(u_tilde, variant):
    return ProjectionResult(
        z=np.array(u_tilde, dtype=float), lam=np.zeros(0), iterations=0,
        residual_norm=0.0, variant=variant,
    )


def project_robust(u_tilde, constraint, t, config=None):
    """Closest-point projection by Gauss-Newton on the multipliers.

    Iterates  λ += (J(z) J(z)ᵀ)⁻¹ (-g(z)),  z = ũ + J(z)ᵀ λ,  re-evaluating
    and re-factorizing the Jacobian each sweep. At convergence z - ũ lies in
    the row space of J(z) and g(z) vanishes to the configured tolerance.
    """
    cfg = config or ProjectionConfig.robust()
    u_tilde = np.asarray(u_tilde, dtype=float)
    if constraint.m == 0:
        return _empty_result(u_tilde, "robust")
    z = u_tilde.copy()
    g = np.asarray(constraint.residual(z, t), dtype=float)
    norm = float(np.max(np.abs(g)))
    lam = np.zeros(constraint.m)
    if norm <= cfg.tolerance:
        return ProjectionResult(z, lam, 0, norm, "robust")
    for it in range(1, cfg.max_iterations + 1):
        J = np.asarray(constraint.jacobian(z, t), dtype=float)
        lam = lam + solve_spd(J @ J.T, -g)
        z = u_tilde + J.T @ lam
        g = np.asarray(constraint.residual(z, t), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonConvergenceError("residual became non-finite", float("nan"), it)
        norm = float(np.max(np.abs(g)))
        if norm <= cfg.tolerance:
            return ProjectionResult(z, lam, it, norm, "robust")
    raise NonConvergenceError(
        f"no convergence after {cfg.max_iterations} iterations (|g|_inf={norm:.3e})",
        norm, cfg.max_iterations,
    )


def project_fast(u_tilde, constraint, t, config=None):
    """Projection with the constraint Jacobian frozen at the input state.

    Newton on g(ũ + J₀ᵀ λ) = 0 with fixed matrix J₀ J₀ᵀ: one Jacobian
    evaluation and one Cholesky factorization for the entire solve. Raises
    DivergenceError if the residual grows three sweeps in a row.
    """
    cfg = config or ProjectionConfig.fast()
    u_tilde = np.asarray(u_tilde, dtype=float)
    if constraint.m == 0:
        return _empty_result(u_tilde, "fast")
    g = np.asarray(constraint.residual(u_tilde, t), dtype=float)
    norm = float(np.max(np.abs(g)))
    lam = np.zeros(constraint.m)
    if norm <= cfg.tolerance:
        return ProjectionResult(u_tilde.copy(), lam, 0, norm, "fast")
    J0 = np.asarray(constraint.jacobian(u_tilde, t), dtype=float)
    L = cholesky_factor(J0 @ J0.T)
    z = u_tilde
    grew = 0
    for it in range(1, cfg.max_iterations + 1):
        lam = lam + cholesky_solve(L, -g)
        z = u_tilde + J0.T @ lam
        g = np.asarray(constraint.residual(z, t), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonConvergenceError("residual became non-finite", float("nan"), it)
        new_norm = float(np.max(np.abs(g)))
        if new_norm <= cfg.tolerance:
            return ProjectionResult(z, lam, it, new_norm, "fast")
        grew = grew + 1 if new_norm > norm else 0
        norm = new_norm
        if grew >= 3:
            raise DivergenceError(
                f"residual grew for 3 consecutive iterations (|g|_inf={norm:.3e})",
                norm, it,
            )
    raise NonConvergenceError(
        f"no convergence after {cfg.max_iterations} iterations (|g|_inf={norm:.3e})",
        norm, cfg.max_iterations,
    )


def project(u_tilde, constraint, t, config):
    """Dispatch on config.variant; optionally fall back from fast to robust."""
    if config.variant == "robust":
        return project_robust(u_tilde, constraint, t, config)
    try:
        return project_fast(u_tilde, constraint, t, config)
    except NonConvergenceError:
        if not config.fallback:
            raise
        robust_cfg = ProjectionConfig.robust(tolerance=config.tolerance)
        return project_robust(u_tilde, constraint, t, robust_cfg)


def stabilization_term(u, constraint, t, gamma):
    """Restoring force -γ Jᵀ (J Jᵀ)⁻¹ g(u,t) pushing u toward the manifold."""
    u = np.asarray(u, dtype=float)
    if constraint.m == 0:
        return np.zeros_like(u)
    g = np.asarray(constraint.residual(u, t), dtype=float)
    J = np.asarray(constraint.jacobian(u, t), dtype=float)
    return -gamma * (J.T @ solve_spd(J @ J.T, g))


def _weighted_curvature(jacobian, u, lam, t):
    """B with B[j,k] = Σ_i lam_i d²g_i/du_j du_k, from the Jacobian closure.

    Central differences of u -> J(u)ᵀ lam; symmetrized since the exact object
    is a sum of Hessians.
    """
    n = u.shape[0]
    B = np.empty((n, n))
    for k in range(n):
        step = np.zeros(n)
        step[k] = _CURVATURE_EPS
        hi = np.asarray(jacobian(u + step, t), dtype=float).T @ lam
        lo = np.asarray(jacobian(u - step, t), dtype=float).T @ lam
        B[:, k] = (hi - lo) / (2.0 * _CURVATURE_EPS)
    return 0.5 * (B + B.T)


def projection_vjp(u_tilde, result, constraint, t, cotangent):
    """Pull a cotangent back through the projection input->output map.

    Solves the linearization of the stationarity conditions at the converged
    (z, λ) — implicit differentiation — rather than differentiating the
    Newton iterations. The robust and fast solves satisfy different
    stationarity systems (Jacobian at z versus frozen at ũ), so the rule
    branches on which variant produced the result.
    """
    u_tilde = np.asarray(u_tilde, dtype=float)
    w = np.asarray(cotangent, dtype=float)
    if constraint.m == 0:
        return w.copy()
    z = result.z
    lam = result.lam
    Jz = np.asarray(constraint.jacobian(z, t), dtype=float)
    try:
        if result.variant == "fast":
            # z = ũ + J₀ᵀλ(ũ), g(z(ũ)) = 0 with J₀ = J(ũ):
            #   dz/dũ = (I - J₀ᵀ (Jz J₀ᵀ)⁻¹ Jz)(I + B),  B = d(J(ũ)ᵀλ)/dũ
            J0 = np.asarray(constraint.jacobian(u_tilde, t), dtype=float)
            v = w - Jz.T @ solve_small(J0 @ Jz.T, J0 @ w)
            if np.any(lam):
                v = v + _weighted_curvature(constraint.jacobian, u_tilde, lam, t) @ v
            return v
        # robust: z = ũ + J(z)ᵀλ, g(z) = 0:
        #   dz/dũ = A⁻¹ - A⁻¹Jᵀ(J A⁻¹ Jᵀ)⁻¹ J A⁻¹,  A = I - d(J(z)ᵀλ)/dz
        n = u_tilde.shape[0]
        if np.any(lam):
            A = np.eye(n) - _weighted_curvature(constraint.jacobian, z, lam, t)
            La = cholesky_factor(A)
            p = cholesky_solve(La, w)
            K = np.column_stack([cholesky_solve(La, Jz[i]) for i in range(constraint.m)])
        else:
            p = w.copy()
            K = Jz.T
        S = Jz @ K
        return p - K @ solve_small(0.5 * (S + S.T), Jz @ p)
    except SingularMatrixError as exc:
        raise ProjectionError(f"singular linearized projection system: {exc}") from exc


def stabilization_vjp(u, constraint, t, gamma, cotangent):
    """Pull a cotangent back through u -> stabilization_term(u).

    With y = (J Jᵀ)⁻¹ g and a = (J Jᵀ)⁻¹ J w, the exact transpose Jacobian
    action is -γ (Jᵀ a + ∇_u <J(u), C>_F) with C = y wᵀ - a (Jᵀy)ᵀ - y (Jᵀa)ᵀ;
    the Frobenius-pairing gradient picks up the constraint curvature and is
    evaluated by central differences of the Jacobian closure.
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(cotangent, dtype=float)
    if constraint.m == 0:
        return np.zeros_like(u)
    g = np.asarray(constraint.residual(u, t), dtype=float)
    J = np.asarray(constraint.jacobian(u, t), dtype=float)
    L = cholesky_factor(J @ J.T)
    y = cholesky_solve(L, g)
    a = cholesky_solve(L, J @ w)
    C = np.outer(y, w) - np.outer(a, J.T @ y) - np.outer(y, J.T @ a)
    n = u.shape[0]
    grad_pair = np.empty(n)
    for k in range(n):
        step = np.zeros(n)
        step[k] = _CURVATURE_EPS
        hi = np.sum(np.asarray(constraint.jacobian(u + step, t), dtype=float) * C)
        lo = np.sum(np.asarray(constraint.jacobian(u - step, t), dtype=float) * C)
        grad_pair[k] = (hi - lo) / (2.0 * _CURVATURE_EPS)
    return -gamma * (J.T @ a + grad_pair)


def residual_vjp(u, constraint, t, cotangent):
    """Pull a cotangent back through u -> g(u,t): exactly Jᵀ cotangent."""
    J = np.asarray(constraint.jacobian(u, t), dtype=float)
    return J.T @ np.asarray(cotangent, dtype=float)
