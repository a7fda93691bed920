"""Minimal dense complex linear algebra on numpy complex128 arrays.

Vectors are 1-d arrays, matrices 2-d, always complex128. The inner product
is conjugate-linear in the FIRST argument (bra-ket convention), which fixes
the sign of every interference term downstream.

The eigenvalue routine exists for tests and oracles only; nothing on the
training path eigendecomposes.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, DimensionError, NotHermitianError

__all__ = [
    "as_vector",
    "as_matrix",
    "inner",
    "outer",
    "l2_normalize",
    "trace",
    "hermitian_eigenvalues",
]


def as_vector(u) -> np.ndarray:
    """Coerce to a finite 1-d complex128 vector of length >= 1."""
    v = np.asarray(u, dtype=np.complex128)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a 1-d vector of length >= 1, got shape {v.shape}")
    if not (np.all(np.isfinite(v.real)) and np.all(np.isfinite(v.imag))):
        raise ValueError("vector contains NaN or Inf")
    return v


def as_matrix(m) -> np.ndarray:
    """Coerce to a finite 2-d complex128 matrix."""
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    if not (np.all(np.isfinite(a.real)) and np.all(np.isfinite(a.imag))):
        raise ValueError("matrix contains NaN or Inf")
    return a


def inner(u, v) -> complex:
    """Hermitian inner product sum_k conj(u_k) v_k."""
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    return complex(np.vdot(u, v))


def outer(u, v) -> np.ndarray:
    """Outer product M[j, k] = u_j conj(v_k).

    For a unit vector u, outer(u, u) is the rank-1 density matrix |u><u|:
    Hermitian, PSD, trace 1.
    """
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    return np.outer(u, v.conj())


def l2_normalize(u, eps: float = 1e-12) -> np.ndarray:
    """Return u / ||u||_2.

    Raises DegenerateVectorError when ||u||_2 < eps; callers decide how to
    recover (the model layer re-initializes degenerate rows).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = as_vector(u)
    norm = float(np.linalg.norm(u))
    if norm < eps:
        raise DegenerateVectorError(f"vector norm {norm:.3e} below eps={eps:.3e}")
    return u / norm


def trace(m) -> complex:
    """Sum of the diagonal of a square matrix."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"trace of non-square matrix with shape {a.shape}")
    return complex(np.trace(a))


def hermitian_eigenvalues(m, tol: float = 1e-10) -> np.ndarray:
    """All eigenvalues of a Hermitian matrix, ascending.

    Embeds M = A + iB into the real symmetric matrix [[A, -B], [B, A]]
    (every eigenvalue of M appears twice) and runs cyclic Jacobi sweeps.
    Intended for the small matrices (n <= 64) used by tests and oracles.

    Raises NotHermitianError when max|M - M^H| exceeds tol.
    """
    a = as_matrix(m)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"eigenvalues of non-square matrix with shape {a.shape}")
    dev = float(np.max(np.abs(a - a.conj().T)))
    if dev > tol:
        raise NotHermitianError(f"max|M - M^H| = {dev:.3e} exceeds tol={tol:.3e}")
    # Work on the exactly Hermitian part so the real embedding is exactly symmetric.
    h = 0.5 * (a + a.conj().T)
    re, im = h.real, h.imag
    big = np.block([[re, -im], [im, re]])
    eigs = _jacobi_symmetric_eigenvalues(big)
    # Pairs are adjacent after sorting; keep one of each.
    return eigs[::2].copy()


def _jacobi_symmetric_eigenvalues(a: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy()
    scale = float(np.linalg.norm(a)) or 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a * a) - np.sum(np.diag(a) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                # Stable rotation angle (Golub & Van Loan sym.schur2).
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.hypot(1.0, tau))
                else:
                    t = -1.0 / (-tau + np.hypot(1.0, tau))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                # a <- J^T a J restricted to rows/cols p, q.
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = 0.0
                a[q, p] = 0.0
    return np.sort(np.diag(a))
