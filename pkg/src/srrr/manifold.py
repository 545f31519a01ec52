"""Geometry of the Stiefel manifold St(r, q) and its generalized form.

Points are plain arrays: a Stiefel point V is q x r with V^T V = I, and a
generalized Stiefel point U is p x r with U^T G U = I for an SPD metric G
(held as an :class:`~srrr.linalg.SpdFactorization`, computed once per fit
and shared read-only by every call).
"""

from __future__ import annotations

import numpy as np

from .linalg import SpdFactorization, qf, sym


def _check_shapes(point: np.ndarray, z: np.ndarray) -> None:
    if point.shape != z.shape:
        raise ValueError(
            f"direction shape {z.shape} does not match point shape {point.shape}"
        )


# ---------------------------------------------------------------------------
# Stiefel manifold: V^T V = I, Euclidean metric.
# ---------------------------------------------------------------------------

def st_project(v: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Project an ambient q x r matrix onto the tangent space at V."""
    _check_shapes(v, z)
    return z - v @ sym(v.T @ z)


def st_retract(v: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Retract V + Z back onto the manifold via the QR factor."""
    _check_shapes(v, z)
    return qf(v + z)


def st_riemannian_grad(v: np.ndarray, egrad: np.ndarray) -> np.ndarray:
    """Riemannian gradient at V from the Euclidean gradient."""
    return st_project(v, egrad)


def st_membership_error(v: np.ndarray) -> float:
    """Frobenius deviation of V^T V from the identity."""
    r = v.shape[1]
    return float(np.linalg.norm(v.T @ v - np.eye(r)))


def st_tangent_error(v: np.ndarray, z: np.ndarray) -> float:
    """Frobenius norm of V^T Z + Z^T V (zero iff Z is tangent at V)."""
    m = v.T @ z
    return float(np.linalg.norm(m + m.T))


# ---------------------------------------------------------------------------
# Generalized Stiefel manifold: U^T G U = I, metric <Z1, Z2> = tr(Z1^T G Z2).
# ---------------------------------------------------------------------------

def gst_project(u: np.ndarray, metric: SpdFactorization, z: np.ndarray) -> np.ndarray:
    """Project an ambient p x r matrix onto the tangent space at U.

    This is the orthogonal projection in the G-weighted metric; with G = I it
    reduces to :func:`st_project`.
    """
    _check_shapes(u, z)
    return z - u @ sym(u.T @ (metric.regularized @ z))


def gst_retract(u: np.ndarray, metric: SpdFactorization, z: np.ndarray) -> np.ndarray:
    """Retract U + Z onto the manifold: G^{-1/2} qf(G^{1/2} (U + Z))."""
    _check_shapes(u, z)
    return metric.inv_sqrt @ qf(metric.sqrt @ (u + z))


def gst_riemannian_grad(
    u: np.ndarray, metric: SpdFactorization, egrad: np.ndarray
) -> np.ndarray:
    """Riemannian gradient at U under the G-weighted metric.

    The Euclidean gradient is first mapped through G^{-1} so that the metric
    inner product of the result with any tangent direction reproduces the
    directional derivative; with G = I this reduces to plain projection.
    """
    return gst_project(u, metric, metric.inv_sqrt @ (metric.inv_sqrt @ egrad))


def gst_membership_error(u: np.ndarray, metric: SpdFactorization) -> float:
    """Frobenius deviation of U^T G U from the identity."""
    r = u.shape[1]
    return float(np.linalg.norm(u.T @ (metric.regularized @ u) - np.eye(r)))


def gst_tangent_error(u: np.ndarray, metric: SpdFactorization, z: np.ndarray) -> float:
    """Frobenius norm of U^T G Z + Z^T G U (zero iff Z is tangent at U)."""
    m = u.T @ (metric.regularized @ z)
    return float(np.linalg.norm(m + m.T))


def gst_inner(metric: SpdFactorization, z1: np.ndarray, z2: np.ndarray) -> float:
    """Metric inner product tr(Z1^T G Z2)."""
    return float(np.sum(z1 * (metric.regularized @ z2)))
