"""Spherical-spline scalp interpolation.

Reconstructs signals at arbitrary electrode positions from observed
channels using only geometry: a Legendre-series kernel on the unit sphere
with a mean-constrained ridge-regularized linear solve. One factorization
per epoch is reused across all time samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg


class SplineError(ValueError):
    """Raised for infeasible or singular interpolation problems."""


@dataclass(frozen=True)
class SplineConfig:
    """Kernel stiffness, series length, and ridge regularization."""

    stiffness: int = 4
    n_legendre_terms: int = 50
    ridge: float = 1e-5

    def __post_init__(self):
        if self.stiffness < 2:
            raise SplineError("stiffness must be >= 2 for series convergence")
        if self.n_legendre_terms < 1:
            raise SplineError("need at least one Legendre term")
        if self.ridge < 0:
            raise SplineError("ridge must be non-negative")


@dataclass
class SplineSolve:
    """Fitted interpolant: unit-sphere positions plus solved coefficients."""

    good_positions: np.ndarray  # (n, 3) unit vectors
    gram: np.ndarray            # (n, n) kernel Gram matrix
    coefficients: np.ndarray    # (n, T)
    offset: np.ndarray          # (T,)
    config: SplineConfig


def _series_coeffs(cfg: SplineConfig) -> np.ndarray:
    n = np.arange(1, cfg.n_legendre_terms + 1, dtype=np.float64)
    weights = (2.0 * n + 1.0) / (n * (n + 1.0)) ** cfg.stiffness
    return np.concatenate([[0.0], weights])


def legendre_g(x, cfg: SplineConfig = SplineConfig()):
    """Evaluate the spline kernel g(x) for cosine-of-angle x in [-1, 1].

    g(x) = (1 / 4 pi) * sum_{n=1..N} (2n+1) / (n (n+1))^m * P_n(x),
    evaluated with the stable Legendre (Clenshaw) recurrence.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0 + 1e-9):
        raise SplineError("kernel argument must satisfy |x| <= 1")
    x = np.clip(x, -1.0, 1.0)
    out = npleg.legval(x, _series_coeffs(cfg)) / (4.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def _to_unit_sphere(positions: np.ndarray) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise SplineError(f"positions must be (n, 3), got {pos.shape}")
    if not np.all(np.isfinite(pos)):
        raise SplineError("positions must be finite")
    norms = np.linalg.norm(pos, axis=1)
    if np.any(norms < 1e-12):
        raise SplineError("electrode at the head origin cannot be projected")
    return pos / norms[:, None]


def fit(
    good_positions: np.ndarray,
    good_values: np.ndarray,
    cfg: SplineConfig = SplineConfig(),
) -> SplineSolve:
    """Fit spline coefficients to observed channels.

    ``good_values`` is (n, T): one row per observed channel. Positions are
    projected to the unit sphere. Solves the mean-constrained system
    [[G + ridge I, 1], [1^T, 0]] [c; c0] = [v; 0] once for all T columns.
    """
    values = np.atleast_2d(np.asarray(good_values, dtype=np.float64))
    pos = _to_unit_sphere(good_positions)
    n = pos.shape[0]
    if n < 3:
        raise SplineError(f"insufficient channels: need >= 3, got {n}")
    if values.shape[0] != n:
        raise SplineError(
            f"{values.shape[0]} value rows but {n} positions"
        )

    cosines = np.clip(pos @ pos.T, -1.0, 1.0)
    gram = legendre_g(cosines, cfg)
    gram = 0.5 * (gram + gram.T)  # enforce exact symmetry

    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = gram + cfg.ridge * np.eye(n)
    a[:n, n] = 1.0
    a[n, :n] = 1.0
    rhs = np.vstack([values, np.zeros((1, values.shape[1]))])
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as err:
        raise SplineError(f"singular interpolation system: {err}") from err

    residual = np.linalg.norm(a @ sol - rhs)
    scale = max(np.linalg.norm(rhs), 1e-30)
    if not np.isfinite(residual) or residual / scale > 1e-6:
        raise SplineError(
            f"ill-conditioned interpolation system, relative residual "
            f"{residual / scale:.2e}"
        )
    return SplineSolve(pos, gram, sol[:n], sol[n], cfg)


def interpolate(solve: SplineSolve, target_positions: np.ndarray) -> np.ndarray:
    """Evaluate a fitted spline at target positions; returns (K, T)."""
    targets = _to_unit_sphere(target_positions)
    cosines = np.clip(targets @ solve.good_positions.T, -1.0, 1.0)
    basis = legendre_g(cosines, solve.config)  # (K, n)
    return basis @ solve.coefficients + solve.offset[None, :]


def interpolate_epoch(
    samples: np.ndarray,
    positions: np.ndarray,
    dropped: np.ndarray,
    cfg: SplineConfig = SplineConfig(),
) -> np.ndarray:
    """Reconstruct dropped channels of one epoch from the observed ones.

    Returns a full (C, T) array: observed rows are passed through, dropped
    rows are spline estimates.
    """
    dropped = np.asarray(dropped, dtype=bool)
    good = ~dropped
    solve = fit(positions[good], samples[good], cfg)
    out = np.array(samples, dtype=np.float64, copy=True)
    if dropped.any():
        out[dropped] = interpolate(solve, positions[dropped])
    return out
