"""Small shared numerical helpers (least squares, IRLS logistic)."""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def lstsq(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None):
    """Least squares via SVD; returns (beta, rank)."""
    if weights is not None:
        sw = np.sqrt(weights)
        X = X * sw[:, None]
        y = y * sw
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    return beta, rank


def solve_ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS via normal equations; fast path for refits with a known-good design."""
    try:
        return np.linalg.solve(X.T @ X, X.T @ y)
    except np.linalg.LinAlgError:
        beta, _ = lstsq(X, y)
        return beta


def irls_logistic(
    X: np.ndarray,
    t: np.ndarray,
    weights: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    beta0: np.ndarray | None = None,
) -> tuple[np.ndarray, int, bool]:
    """Logistic regression by iteratively reweighted least squares.

    Stops when the max absolute coefficient change drops below ``tol`` or
    after ``max_iter`` iterations; under perfect separation the iteration cap
    applies and downstream clipping keeps predictions usable.  ``beta0`` only
    warm-starts the iteration; the converged solution does not depend on it.
    Returns (beta, n_iter, converged).
    """
    n, p = X.shape
    w_obs = np.ones(n) if weights is None else weights
    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        w = w_obs * np.maximum(mu * (1.0 - mu), 1e-10)
        Xw = X * w[:, None]
        try:
            delta = np.linalg.solve(Xw.T @ X, X.T @ (w_obs * (t - mu)))
        except np.linalg.LinAlgError:
            delta, _ = lstsq(Xw.T @ X, X.T @ (w_obs * (t - mu)))
        beta = beta + delta
        if np.max(np.abs(delta)) < tol:
            converged = True
            break
    return beta, it, converged


def hc0_cov(X: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Heteroskedasticity-robust (HC0) covariance of OLS coefficients."""
    XtX_inv = np.linalg.pinv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    return XtX_inv @ meat @ XtX_inv
