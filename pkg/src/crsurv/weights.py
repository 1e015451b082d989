"""Inverse-probability-of-inclusion weights from a weighted logit model."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NotConverged, Separation, SingularDesign

log = logging.getLogger(__name__)

SCORE_TOL = 1e-8
LOGLIK_RTOL = 1e-10
MAX_ITER = 50


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray  # intercept first
    fitted_probabilities: np.ndarray
    converged: bool
    iterations_used: int
    loglik: float = float("nan")
    score: np.ndarray | None = None

    def predict(self, features) -> np.ndarray:
        Z = _design(np.asarray(features, dtype=float))
        return _expit(Z @ self.coefficients)


def _design(features):
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    return np.hstack((np.ones((F.shape[0], 1)), F))


def _expit(eta):
    return np.where(eta >= 0, 1.0 / (1.0 + np.exp(-np.abs(eta))), np.exp(-np.abs(eta)) / (1.0 + np.exp(-np.abs(eta))))


def logit_loglik(beta, Z, y, w) -> float:
    """Weighted Bernoulli log-likelihood, evaluated without overflow."""
    eta = Z @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def logit_score(beta, Z, y, w) -> np.ndarray:
    return Z.T @ (w * (y - _expit(Z @ beta)))


def fit_propensity(features, included, base_weights=None) -> PropensityModel:
    """Weighted maximum-likelihood logit by iteratively reweighted least squares.

    Parameters
    ----------
    features : (n, k) array_like
        Covariates without the intercept column (``k`` may be 0).
    included : (n,) array_like of bool
    base_weights : (n,) array_like, optional
        Sampling weights (equal if omitted).

    Raises
    ------
    Separation
        Fitted probabilities collapse to 0 or 1 while coefficients diverge.
    SingularDesign
        The weighted information matrix is singular.
    """
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[:, None] if F.size else np.empty((F.shape[0], 0))
    y = np.asarray(included, dtype=bool).astype(float)
    n = y.shape[0]
    w = np.ones(n) if base_weights is None else np.asarray(base_weights, dtype=float)
    Z = _design(F)
    k = Z.shape[1]
    if n <= k - 1:
        raise SingularDesign(f"need n > k (n={n}, k={k - 1})")
    if np.isnan(Z).any():
        raise ValueError("features contain missing values")
    if y.min() == y.max():
        raise Separation("only one inclusion class present")
    if np.linalg.matrix_rank(Z * np.sqrt(w)[:, None]) < k:
        raise SingularDesign("design matrix is rank deficient")

    ybar = np.sum(w * y) / np.sum(w)
    beta = np.zeros(k)
    beta[0] = np.log(ybar / (1.0 - ybar))
    ll = logit_loglik(beta, Z, y, w)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        p = _expit(Z @ beta)
        score = Z.T @ (w * (y - p))
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            it -= 1
            break
        info = Z.T @ (Z * (w * p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularDesign("information matrix is singular") from None
        new = beta + step
        new_ll = logit_loglik(new, Z, y, w)
        halvings = 0
        while new_ll < ll - 1e-12 * abs(ll) and halvings < 30:
            step *= 0.5
            new = beta + step
            new_ll = logit_loglik(new, Z, y, w)
            halvings += 1
        rel = abs(new_ll - ll) / max(abs(ll), 1e-300)
        beta, ll = new, new_ll
        if rel < LOGLIK_RTOL:
            converged = True
            break
    p = _expit(Z @ beta)
    if np.any((p < 1e-12) | (p > 1.0 - 1e-12)) and np.max(np.abs(beta[1:]), initial=0.0) > 20.0:
        raise Separation("fitted probabilities collapse to 0/1; coefficients diverge")
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    if not converged:
        log.warning("propensity model did not converge in %d iterations", MAX_ITER)
    return PropensityModel(
        coefficients=beta,
        fitted_probabilities=p,
        converged=converged,
        iterations_used=it,
        loglik=ll,
        score=logit_score(beta, Z, y, w),
    )


def compute_ipw(model, base_weights, included=None, truncation_quantile=0.99) -> np.ndarray:
    """Analysis weights ``base / p`` for included subjects.

    The inverse-propensity factor ``1 / p`` is capped at its
    ``truncation_quantile`` empirical quantile over included subjects (linear
    interpolation) before multiplying by the base weight, so ``p = 1``
    returns the base weights unchanged.  Excluded subjects get weight 0.
    ``model`` may also be a plain probability vector.
    """
    if isinstance(model, PropensityModel):
        if not model.converged:
            raise NotConverged("propensity model did not converge")
        p = model.fitted_probabilities
    else:
        p = np.asarray(model, dtype=float)
    base = np.asarray(base_weights, dtype=float)
    if np.any(base <= 0):
        raise ValueError("base weights must be positive")
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("propensities must lie in (0, 1]")
    inc = np.ones(base.shape[0], dtype=bool) if included is None else np.asarray(included, dtype=bool)
    factor = 1.0 / p
    if inc.any() and truncation_quantile is not None and truncation_quantile < 1.0:
        cap = np.quantile(factor[inc], truncation_quantile)
        factor = np.minimum(factor, cap)
    out = np.zeros_like(base)
    out[inc] = base[inc] * factor[inc]
    return out
