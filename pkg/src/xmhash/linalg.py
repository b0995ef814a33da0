"""Dense float64 matrix kernel used by every numerical module.

Thin, validated wrappers around numpy/BLAS plus a Cholesky-based solver
for symmetric positive definite systems. The solver owns its own
factorization loop so that a failed pivot can be reported by index
instead of a generic library error.
"""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ContractError, NumericalError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and verify every entry is finite."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got ndim={m.ndim}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.flatnonzero(~np.isfinite(a).ravel())[0])
        raise NumericalError(f"{name} contains a non-finite entry (flat index {bad})")


def matmul(a, b) -> np.ndarray:
    """Matrix product with conformance and output-finiteness checks."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ContractError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    out = a @ b
    check_finite(out, "matmul result")
    return out


def row_sums(m) -> np.ndarray:
    """Sum over columns, one value per row."""
    m = as_matrix(m, "row_sums input")
    return m.sum(axis=1)


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Outer-product form, one pivot per iteration, so a non-positive pivot is
    caught exactly where the matrix stops being positive definite.

    Raises:
        NumericalError: naming the failing pivot index when a <= 0 pivot
            (or a non-finite one) is hit.
    """
    a = as_matrix(a, "cholesky input")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ContractError(f"cholesky input must be square, got {a.shape}")
    low = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - low[k, :k] @ low[k, :k]
        if not np.isfinite(d) or d <= 0.0:
            raise NumericalError(
                f"matrix is not positive definite: pivot {k} = {d:.6e}"
            )
        low[k, k] = np.sqrt(d)
        if k + 1 < n:
            low[k + 1 :, k] = (a[k + 1 :, k] - low[k + 1 :, :k] @ low[k, :k]) / low[k, k]
    return low


def spd_solve(a, b) -> np.ndarray:
    """Solve a x = b for symmetric positive definite a via Cholesky.

    b may have any number of right-hand-side columns. No explicit inverse
    is ever formed.
    """
    a = as_matrix(a, "spd_solve matrix")
    b_arr = np.asarray(b, dtype=np.float64)
    squeeze = b_arr.ndim == 1
    if squeeze:
        b_arr = b_arr[:, None]
    b_arr = as_matrix(b_arr, "spd_solve right-hand side")
    if a.shape[0] != a.shape[1]:
        raise ContractError(f"spd_solve matrix must be square, got {a.shape}")
    if b_arr.shape[0] != a.shape[0]:
        raise ContractError(
            f"spd_solve shape mismatch: matrix {a.shape} vs rhs {b_arr.shape}"
        )
    low = cholesky_lower(a)
    y = solve_triangular(low, b_arr, lower=True)
    x = solve_triangular(low.T, y, lower=False)
    check_finite(x, "spd_solve result")
    return x[:, 0] if squeeze else x
