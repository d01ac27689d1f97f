"""Dense small-matrix kernels: Cholesky solves for SPD normal systems and
finite-difference Jacobians used as gradient-check oracles.

Everything here operates on plain numpy arrays (vectors are 1-d, matrices
2-d, row-major) and is pure: no state, safe to call from multiple threads.
"""

import numpy as np

SYMMETRY_RTOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a factorization hits a non-positive (or zero) pivot.

    ``pivot_index`` is the row at which the factorization failed.
    """

    def __init__(self, message, pivot_index):
        super().__init__(message)
        self.pivot_index = pivot_index


def matvec(a, x):
    """Matrix-vector product with explicit dimension checking."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if a.ndim != 2 or x.ndim != 1:
        raise ValueError(f"matvec expects a matrix and a vector, got shapes {a.shape} and {x.shape}")
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, vector has length {x.shape[0]}")
    return a @ x


def cholesky_factor(a):
    """Lower-triangular L with L Lᵀ = a for symmetric positive-definite a.

    Raises SingularMatrixError (with the offending pivot index) as soon as a
    pivot fails to be strictly positive, so callers can report rank-deficient
    constraint Jacobians instead of silently regularizing.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if n == 1:
        pivot = a[0, 0]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise SingularMatrixError(
                f"non-positive pivot {pivot:.3e} at index 0", pivot_index=0
            )
        return np.array([[np.sqrt(pivot)]])
    scale = np.max(np.abs(a)) if n else 0.0
    if n and np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * max(1.0, scale):
        raise ValueError("matrix is not symmetric within tolerance")
    L = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - np.dot(L[j, :j], L[j, :j])
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise SingularMatrixError(
                f"non-positive pivot {pivot:.3e} at index {j}", pivot_index=j
            )
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def cholesky_solve(L, b):
    """Solve L Lᵀ x = b given the factor from cholesky_factor."""
    b = np.asarray(b, dtype=float)
    n = L.shape[0]
    if b.shape != (n,):
        raise ValueError(f"right-hand side has length {b.shape}, expected {n}")
    if n == 1:
        return b / (L[0, 0] * L[0, 0])
    y = np.empty(n)
    for i in range(n):
        y[i] = (b[i] - np.dot(L[i, :i], y[:i])) / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - np.dot(L[i + 1:, i], x[i + 1:])) / L[i, i]
    return x


def solve_spd(a, b):
    """Solve a x = b for symmetric positive-definite a via Cholesky."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, rhs has length {b.shape[0]}")
    return cholesky_solve(cholesky_factor(a), b)


def solve_small(a, b):
    """General (possibly nonsymmetric) solve for tiny systems.

    Used for the near-symmetric m×m systems arising in implicit
    differentiation of the fixed-Jacobian projection; falls back to LAPACK
    above 2×2.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if n == 1:
        if a[0, 0] == 0.0:
            raise SingularMatrixError("zero pivot at index 0", pivot_index=0)
        return b / a[0, 0]
    if n == 2:
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        if det == 0.0:
            raise SingularMatrixError("singular 2x2 system", pivot_index=1)
        return np.array([
            (a[1, 1] * b[0] - a[0, 1] * b[1]) / det,
            (a[0, 0] * b[1] - a[1, 0] * b[0]) / det,
        ])
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc), pivot_index=-1) from exc


def finite_diff_jacobian(fn, x, eps=1e-6):
    """Central-difference Jacobian of a vector-valued fn at x.

    Column j is (fn(x + eps e_j) - fn(x - eps e_j)) / (2 eps). This is the
    independent oracle used to cross-check analytic Jacobians and reverse-mode
    gradients; it must stay free of any autodiff machinery.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cols = []
    for j in range(n):
        step = np.zeros(n)
        step[j] = eps
        hi = np.asarray(fn(x + step), dtype=float)
        lo = np.asarray(fn(x - step), dtype=float)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise ValueError(f"function returned non-finite values near column {j}")
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=1) if cols else np.zeros((0, 0))
