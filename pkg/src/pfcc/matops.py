"""Matrix operators used throughout the package.

The half-vectorizations ``vecv`` and ``vecm`` carry a sqrt(2) scaling on the
off-diagonal terms so that the quadratic form collapses to an inner product:

    vecv(x) . vecm(P) == x^T P x        (P symmetric)

That identity is what lets Bellman equations be rewritten as linear
regressions over measured data, so its exactness is load bearing.
"""

from __future__ import annotations

import numpy as np

_SQRT2 = float(np.sqrt(2.0))

SYMMETRY_ATOL = 1e-12


def vecv(d: np.ndarray) -> np.ndarray:
    """Upper-triangular vectorization of the outer square of a vector.

    Diagonal slots hold d_i**2, off-diagonal slots hold sqrt(2)*d_i*d_j,
    ordered row-major: (0,0), (0,1), ..., (0,n-1), (1,1), (1,2), ...
    """
    d = np.asarray(d, dtype=float).ravel()
    n = d.size
    if n < 1:
        raise ValueError("vecv requires a vector of length >= 1")
    out = np.empty(n * (n + 1) // 2)
    k = 0
    for i in range(n):
        out[k] = d[i] * d[i]
        k += 1
        if i + 1 < n:
            width = n - i - 1
            out[k : k + width] = _SQRT2 * d[i] * d[i + 1 :]
            k += width
    return out


def vecm(s: np.ndarray, atol: float = SYMMETRY_ATOL) -> np.ndarray:
    """Half-vectorization of a symmetric matrix, same ordering as ``vecv``.

    Diagonal entries are kept as-is, off-diagonal entries scaled by sqrt(2).
    Raises ValueError when the input is asymmetric beyond ``atol``.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"vecm requires a square matrix, got shape {s.shape}")
    if not np.allclose(s, s.T, atol=atol, rtol=0.0):
        raise ValueError("vecm requires a symmetric matrix")
    n = s.shape[0]
    out = np.empty(n * (n + 1) // 2)
    k = 0
    for i in range(n):
        out[k] = s[i, i]
        k += 1
        if i + 1 < n:
            width = n - i - 1
            out[k : k + width] = _SQRT2 * s[i, i + 1 :]
            k += width
    return out


def unvecm(v: np.ndarray, n: int) -> np.ndarray:
    """Exact left inverse of ``vecm``: rebuild the symmetric matrix."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != n * (n + 1) // 2:
        raise ValueError(f"unvecm: expected length {n * (n + 1) // 2} for order {n}, got {v.size}")
    out = np.zeros((n, n))
    k = 0
    for i in range(n):
        out[i, i] = v[k]
        k += 1
        if i + 1 < n:
            width = n - i - 1
            row = v[k : k + width] / _SQRT2
            out[i, i + 1 :] = row
            out[i + 1 :, i] = row
            k += width
    return out


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization: vec(M) = [M[:,0]; M[:,1]; ...]."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("vec requires a matrix")
    return m.flatten(order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of ``vec`` for a ``rows x cols`` matrix."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != rows * cols:
        raise ValueError(f"unvec: expected length {rows * cols}, got {v.size}")
    return v.reshape((rows, cols), order="F")


def pinv(b: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with a rank-revealing cutoff.

    Singular values below sigma_max * max(rows, cols) * eps are treated as
    zero; exact-rank behaviour on rank-deficient products like B^T P B is
    required by the gain formulas downstream.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    rcond = max(b.shape) * np.finfo(float).eps
    return np.linalg.pinv(b, rcond=rcond)


def spectral_radius(m: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("spectral_radius requires a square matrix")
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose (guards against drift)."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def is_positive_definite(m: np.ndarray, atol: float = SYMMETRY_ATOL) -> bool:
    """Cholesky-based positive definiteness test for symmetric input."""
    m = np.asarray(m, dtype=float)
    if not np.allclose(m, m.T, atol=atol, rtol=0.0):
        return False
    try:
        np.linalg.cholesky(m)
        return True
    except np.linalg.LinAlgError:
        return False
