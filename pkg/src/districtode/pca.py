"""Top principal components by power iteration with deflation."""

from __future__ import annotations

import warnings

import numpy as np


def _dominant(cov: np.ndarray, basis: list[np.ndarray], rng, max_iter: int, tol: float):
    v = rng.standard_normal(cov.shape[0])
    for b in basis:
        v -= (v @ b) * b
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 0.0, np.zeros_like(v)
    v /= norm
    rq = float(v @ cov @ v)
    for _ in range(max_iter):
        w = cov @ v
        # re-orthogonalize against found components each sweep
        for b in basis:
            w -= (w @ b) * b
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        new_rq = float(v @ cov @ v)
        done = abs(new_rq - rq) < tol
        rq = new_rq
        if done:
            break
    return rq, v


def power_pca(X, n_components: int = 2, max_iter: int = 200, tol: float = 1e-10,
              seed: int = 0, rank_tol: float = 1e-12):
    """Project rows of ``X`` onto its top principal components.

    Returns ``(scores, components, eigenvalues)``. Components whose
    eigenvalue is negligible (rank-deficient data) are returned as zeros
    with a warning, giving zero scores.
    """
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(len(X) - 1, 1)
    rng = np.random.default_rng(seed)
    scale = float(np.trace(cov))
    comps, vals = [], []
    for k in range(n_components):
        deflated = cov.copy()
        for lam, b in zip(vals, comps):
            deflated -= lam * np.outer(b, b)
        lam, v = _dominant(deflated, [c for c in comps if c.any()], rng, max_iter, tol)
        if lam <= rank_tol * max(scale, 1e-300) or not v.any():
            warnings.warn(f"degenerate covariance: component {k + 1} set to zero", RuntimeWarning)
            lam, v = 0.0, np.zeros(cov.shape[0])
        else:
            # sign convention: largest-magnitude loading positive
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
        comps.append(v)
        vals.append(lam)
    components = np.array(comps)
    return centered @ components.T, components, np.array(vals)
