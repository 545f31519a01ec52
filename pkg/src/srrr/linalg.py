"""Dense linear-algebra primitives for the manifold and solver layers.

Everything here is a pure function of its inputs. Decompositions follow fixed
sign conventions so that downstream iterations are deterministic across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, RetractionError

# Relative cutoff deciding when a QR diagonal entry counts as zero.
_QR_RANK_TOL = 1e-12
# Relative eigenvalue cutoff for the pseudo-inverse.
_PINV_TOL = 1e-12


def sym(m: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M^T) / 2 of a square matrix."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"sym expects a square matrix, got shape {m.shape}")
    return 0.5 * (m + m.T)


def qf(a: np.ndarray) -> np.ndarray:
    """Q factor of the thin QR decomposition, with positive-diagonal R.

    The sign convention (R has strictly positive diagonal) makes the factor
    unique, so repeated retractions are reproducible bit for bit.

    Raises
    ------
    RetractionError
        If ``a`` is (numerically) rank deficient.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ValueError(f"qf expects a tall matrix (m >= k), got shape {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.diag(r)
    scale = np.abs(diag).max(initial=0.0)
    if scale == 0.0 or np.abs(diag).min() <= _QR_RANK_TOL * scale:
        raise RetractionError(
            "rank-deficient input: retraction undefined at this point"
        )
    signs = np.where(diag < 0, -1.0, 1.0)
    return q * signs


@dataclass(frozen=True)
class SpdFactorization:
    """Symmetric square root (and inverse root) of an SPD matrix.

    ``sqrt @ sqrt`` reconstructs ``matrix + ridge_used * I``; ``regularized``
    is that ridged matrix, which is what the manifold geometry actually uses.
    """

    matrix: np.ndarray
    regularized: np.ndarray
    sqrt: np.ndarray
    inv_sqrt: np.ndarray
    ridge_used: float


def spd_factorize(g: np.ndarray, ridge: float = 0.0) -> SpdFactorization:
    """Factorize a symmetric positive-definite matrix via eigendecomposition.

    A single symmetric eigendecomposition yields both G^{1/2} and G^{-1/2},
    which the generalized Stiefel retraction needs.

    Raises
    ------
    NumericalError
        If ``g + ridge * I`` is not positive definite.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    gs = sym(g)
    w, v = np.linalg.eigh(gs)
    w = w + ridge
    if w.min(initial=np.inf) <= 0:
        raise NumericalError(
            "G not positive definite; increase ridge or check rank(X)"
        )
    root = np.sqrt(w)
    return SpdFactorization(
        matrix=gs,
        regularized=gs + ridge * np.eye(gs.shape[0]) if ridge > 0 else gs,
        sqrt=(v * root) @ v.T,
        inv_sqrt=(v / root) @ v.T,
        ridge_used=float(ridge),
    )


def auto_ridge(g: np.ndarray, n_samples: int) -> float:
    """Default ridge policy for a Gram matrix G = X^T X / n.

    Zero when the sample size exceeds the dimension and G is comfortably
    invertible; otherwise a small multiple of the mean eigenvalue.
    """
    gs = sym(g)
    w = np.linalg.eigvalsh(gs)
    p = gs.shape[0]
    if n_samples > p and w[0] > 1e-10 * max(w[-1], 0.0):
        return 0.0
    return 1e-8 * float(np.trace(gs)) / p


def top_eigen(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``r`` eigenpairs of a symmetric matrix, values descending.

    Each eigenvector is sign-fixed so its first significant entry is
    positive, which keeps downstream initializations deterministic.
    """
    ms = sym(m)
    q = ms.shape[0]
    if not 0 <= r <= q:
        raise ValueError(f"requested {r} eigenpairs from a {q}x{q} matrix")
    w, v = np.linalg.eigh(ms)
    w = w[::-1][:r].copy()
    v = v[:, ::-1][:, :r].copy()
    for k in range(r):
        col = v[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-8 * np.abs(col).max(initial=0.0))
        if nz.size and col[nz[0]] < 0:
            v[:, k] = -col
    return w, v


def pseudo_solve(g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Moore-Penrose solution G^+ B for symmetric positive-semidefinite G.

    Eigenvalues below ``1e-12 * lambda_max`` are treated as zero, which keeps
    the result stable when columns of the underlying design are collinear.
    """
    gs = sym(g)
    b = np.asarray(b, dtype=float)
    w, v = np.linalg.eigh(gs)
    cutoff = _PINV_TOL * max(w.max(initial=0.0), 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return v @ (inv[:, None] * (v.T @ b))
