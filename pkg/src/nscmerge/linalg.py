"""Dense linear-algebra kernel shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Everything
returned from this module is marked read-only so cached results (Gram
inverses in particular) cannot be mutated by accident.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class LinalgError(RuntimeError):
    """Raised when a factorization fails or an input violates its contract."""


class NotPositiveDefiniteError(LinalgError):
    pass


def as_matrix(x, *, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D float64 array and return a read-only copy."""
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinalgError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def svd(m, *, full: bool = False) -> SvdResult:
    """Singular value decomposition with a deterministic sign convention.

    With ``full=False`` the thin factorization is returned (``u`` is m x p,
    ``vt`` is p x n, p = min(m, n)). With ``full=True`` ``u`` and ``vt`` are
    square, which is what null-space basis construction needs.

    Each left-singular vector is flipped so that its largest-magnitude entry
    is non-negative (first such row on ties); the matching row of ``vt`` is
    flipped with it.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise LinalgError(f"svd needs a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"svd input of shape {m.shape} has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"svd did not converge for {m.shape[0]}x{m.shape[1]} matrix") from exc

    p = s.shape[0]
    pivot = np.argmax(np.abs(u[:, :p]), axis=0)
    signs = np.where(u[pivot, np.arange(p)] < 0.0, -1.0, 1.0)
    u = u.copy()
    vt = vt.copy()
    u[:, :p] *= signs
    vt[:p, :] *= signs[:, None]
    return SvdResult(_frozen(u), _frozen(s), _frozen(vt))


def numerical_rank(s: np.ndarray, rtol: float = 1e-12) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def cholesky_inverse(g, jitter: float = 0.0) -> np.ndarray:
    """Return ``(g + jitter * I)^{-1}`` via a Cholesky factorization."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise LinalgError(f"cholesky_inverse needs a square matrix, got shape {g.shape}")
    scale = max(1.0, float(np.max(np.abs(g)))) if g.size else 1.0
    if g.size and np.max(np.abs(g - g.T)) > 1e-10 * scale:
        raise LinalgError("cholesky_inverse input is not symmetric")
    n = g.shape[0]
    h = g + jitter * np.eye(n)
    try:
        lower = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"{n}x{n} matrix is not positive definite (jitter={jitter:g})"
        ) from exc
    if not np.all(np.diag(lower) > 0.0):
        raise NotPositiveDefiniteError(f"{n}x{n} matrix is singular (jitter={jitter:g})")
    lower_inv = solve_triangular(lower, np.eye(n), lower=True)
    inv = lower_inv.T @ lower_inv
    return _frozen(0.5 * (inv + inv.T))


def default_jitter(g: np.ndarray) -> float:
    return 1e-10 * float(np.trace(g)) / g.shape[0]


def gram_inverse(a, jitter: float | None = None) -> np.ndarray:
    """Return the r x r matrix ``(A A^T + jitter * I)^{-1}`` for an r x d ``a``.

    ``jitter=None`` selects ``1e-10 * trace(A A^T) / r``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"gram_inverse needs a 2-D matrix, got shape {a.shape}")
    r, d = a.shape
    if r > d:
        raise LinalgError(f"gram_inverse needs r <= d, got {r}x{d}")
    g = a @ a.T
    g = 0.5 * (g + g.T)
    if jitter is None:
        jitter = default_jitter(g)
    return cholesky_inverse(g, jitter)
