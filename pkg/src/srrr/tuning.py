"""Adaptive weights, BIC scoring and the penalty grid search."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import NumericalError
from .linalg import SpdFactorization, auto_ridge, spd_factorize, sym
from .solver import AdmmState, FactorTriple, FitResult, SolverConfig, fit, initialize

# Magnitudes below this are clamped before forming 1/|value|^gamma, so zero
# initial estimates yield a finite, very large weight instead of infinity.
WEIGHT_CLAMP = 1e-8


@dataclass
class Weights:
    """Adaptive penalty weights 1/|initial estimate|^gamma."""

    w_u: np.ndarray
    w_v: np.ndarray
    w_d: np.ndarray
    gamma_u: float = 2.0
    gamma_v: float = 2.0
    gamma_d: float = 2.0


def adaptive_weights(
    initial: FactorTriple,
    gamma_u: float = 2.0,
    gamma_v: float = 2.0,
    gamma_d: float = 2.0,
) -> Weights:
    """Build adaptive weights from an initial factor estimate.

    Larger initial magnitudes receive smaller weights, so strong coefficients
    are penalized less. Magnitudes are clamped below at ``WEIGHT_CLAMP``
    before exponentiation.
    """
    if gamma_u <= 0 or gamma_v <= 0 or gamma_d <= 0:
        raise ValueError("gamma exponents must be positive")
    return Weights(
        w_u=1.0 / np.maximum(np.abs(initial.u), WEIGHT_CLAMP) ** gamma_u,
        w_v=1.0 / np.maximum(np.abs(initial.v), WEIGHT_CLAMP) ** gamma_v,
        w_d=1.0 / np.maximum(np.abs(initial.d), WEIGHT_CLAMP) ** gamma_d,
        gamma_u=gamma_u,
        gamma_v=gamma_v,
        gamma_d=gamma_d,
    )


def bic(sse: float, df: int, n: int, q: int) -> float:
    """Bayesian information criterion log(SSE/nq) + (log(qn)/(nq)) df.

    A nonpositive SSE (reachable on noiseless data) is clamped to
    ``1e-12 * n * q`` with a warning.
    """
    if n < 1 or q < 1:
        raise ValueError("n and q must be at least 1")
    if sse <= 0:
        warnings.warn(
            "nonpositive SSE clamped for BIC evaluation", RuntimeWarning, stacklevel=2
        )
        sse = 1e-12 * n * q
    return float(np.log(sse / (n * q)) + (np.log(q * n) / (n * q)) * df)


@dataclass
class TuningGrid:
    """Logarithmically spaced candidate values for both penalty levels."""

    lambda_max: float = 1.0
    lambda_min: float = 1e-15
    points_per_axis: int = 10

    def validate(self) -> None:
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")
        # A single point (lambda_max alone) is allowed so one cell can be fit
        # through the same code path.
        if self.points_per_axis < 1:
            raise ValueError("points_per_axis must be at least 1")

    def values(self) -> np.ndarray:
        """Candidate levels, descending from lambda_max to lambda_min."""
        self.validate()
        if self.points_per_axis == 1:
            return np.array([self.lambda_max])
        return np.geomspace(self.lambda_max, self.lambda_min, self.points_per_axis)


@dataclass
class CellRecord:
    """Outcome of one (lambda1, lambda2) grid cell."""

    lambda1: float
    lambda2: float
    bic: float
    sse: float
    df: int
    rank: int
    converged: bool
    iterations: int
    error: str | None = None


@dataclass
class TuningReport:
    """All grid cells plus the BIC-minimizing fit."""

    cells: list[CellRecord]
    best_index: int
    best_fit: FitResult

    @property
    def best_cell(self) -> CellRecord:
        return self.cells[self.best_index]


def grid_search(
    x,
    y,
    r: int,
    grid: TuningGrid,
    config: SolverConfig,
    *,
    metric: SpdFactorization | None = None,
    init: AdmmState | None = None,
    weights: Weights | None = None,
) -> TuningReport:
    """Fit every (lambda1, lambda2) cell and pick the BIC minimizer.

    The spectral initialization, the metric factorization and the adaptive
    weights do not depend on the penalty levels, so they are computed once
    and shared read-only across all cells. Converged cells are preferred when
    ranking; ties in BIC break toward larger (lambda1, lambda2)
    lexicographically, i.e. toward the sparser model.

    Raises
    ------
    NumericalError
        If every cell fails numerically (per-cell diagnostics included).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if metric is None:
        gram = sym(x.T @ x) / n
        metric = spd_factorize(gram, auto_ridge(gram, n))
    if init is None:
        init = initialize(x, y, r)
    if weights is None:
        weights = adaptive_weights(
            FactorTriple(u=init.u, d=init.d, v=init.v, rank=r)
        )

    values = grid.values()
    cells: list[CellRecord] = []
    fits: list[FitResult | None] = []
    for lam1 in values:
        for lam2 in values:
            cell_config = replace(
                config, lambda1=float(lam1), lambda2=float(lam2), weights=weights
            )
            try:
                result = fit(x, y, r, cell_config, init=init, metric=metric)
            except NumericalError as exc:
                cells.append(
                    CellRecord(
                        lambda1=float(lam1),
                        lambda2=float(lam2),
                        bic=np.inf,
                        sse=np.inf,
                        df=0,
                        rank=0,
                        converged=False,
                        iterations=0,
                        error=str(exc),
                    )
                )
                fits.append(None)
                continue
            cells.append(
                CellRecord(
                    lambda1=float(lam1),
                    lambda2=float(lam2),
                    bic=result.bic,
                    sse=result.sse,
                    df=result.df,
                    rank=result.factors.rank,
                    converged=result.converged,
                    iterations=result.iterations,
                )
            )
            fits.append(result)

    eligible = [i for i, c in enumerate(cells) if c.error is None and c.converged]
    if not eligible:
        eligible = [i for i, c in enumerate(cells) if c.error is None]
    if not eligible:
        details = "; ".join(
            f"(l1={c.lambda1:.3g}, l2={c.lambda2:.3g}): {c.error}" for c in cells
        )
        raise NumericalError(f"all grid cells failed: {details}")
    best_index = min(
        eligible, key=lambda i: (cells[i].bic, -cells[i].lambda1, -cells[i].lambda2)
    )
    return TuningReport(cells=cells, best_index=best_index, best_fit=fits[best_index])
