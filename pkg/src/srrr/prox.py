"""Closed-form thresholding operators used by the split updates.

Levels arrive fully precomputed (sample size, penalty, weights and ADMM
parameters already combined), so these operators carry no policy.
"""

from __future__ import annotations

import numpy as np


def soft_threshold(x, level):
    """Elementwise soft threshold sign(x) * max(|x| - level, 0).

    ``x`` and ``level`` may be scalars or broadcastable arrays; levels must
    be nonnegative.
    """
    level = np.asarray(level, dtype=float)
    if np.any(level < 0):
        raise ValueError("soft_threshold level must be nonnegative")
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.maximum(np.abs(x) - level, 0.0)
    return float(out) if out.ndim == 0 else out


def hard_threshold_column(v: np.ndarray, level: float) -> np.ndarray:
    """Keep-or-kill threshold on a vector: v if ||v||_2 > level, else 0.

    A survivor is returned unshrunk, and the tie ||v||_2 == level maps to
    zero. Negative levels are rejected.
    """
    if level < 0:
        raise ValueError("hard_threshold_column level must be nonnegative")
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(v) > level:
        return v.copy()
    return np.zeros_like(v)


def hard_threshold_columns(m: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Apply :func:`hard_threshold_column` to each column of a matrix."""
    levels = np.asarray(levels, dtype=float)
    if np.any(levels < 0):
        raise ValueError("hard_threshold_columns levels must be nonnegative")
    norms = np.linalg.norm(m, axis=0)
    keep = norms > levels
    return m * keep
