"""Bayesian linear regression on random features with rank-one online updates.

Prior ``w ~ N(0, sigma_02 I)`` and likelihood ``y ~ N(w.x, sigma_y2)`` give

    Sigma_w = (X X^T / sigma_y2 + I / sigma_02)^{-1}
    mu_w    = Sigma_w X Y^T / sigma_y2

Every output column is its own regression problem, but because all of them
share features, noise and prior, ``Sigma_w`` is identical across outputs and
is stored once; only the columns of ``mu_w`` differ.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BrokenPosterior, FactorizationFailure, ImproperParameters, NonFiniteInput

DEFAULT_SIGMA_Y2 = 1e-4
DEFAULT_SIGMA_02 = 1.0


@dataclass
class RegressorState:
    """Posterior over the weights of ``d_y`` linear regressions sharing features.

    Attributes
    ----------
    sigma_w : ndarray, shape (D, D)
        Posterior covariance shared by every output.
    xy : ndarray, shape (D, d_y)
        Accumulated ``X Y^T``.
    mu_w : ndarray, shape (D, d_y)
        Posterior means, kept equal to ``sigma_w @ xy / sigma_y2``.
    """

    sigma_w: np.ndarray
    xy: np.ndarray
    mu_w: np.ndarray
    sigma_y2: float
    sigma_02: float
    n_seen: int = 0

    @classmethod
    def init(cls, d_out: int, d_y: int, sigma_02: float = DEFAULT_SIGMA_02,
             sigma_y2: float = DEFAULT_SIGMA_Y2) -> "RegressorState":
        if d_out < 1 or d_y < 1 or not (sigma_02 > 0 and sigma_y2 > 0):
            raise ImproperParameters("dimensions and variances must be positive")
        return cls(sigma_02 * np.eye(d_out), np.zeros((d_out, d_y)), np.zeros((d_out, d_y)),
                   float(sigma_y2), float(sigma_02), 0)

    @property
    def d_out(self) -> int:
        return self.sigma_w.shape[0]

    @property
    def d_y(self) -> int:
        return self.xy.shape[1]

    def copy(self) -> "RegressorState":
        return copy.deepcopy(self)

    def update(self, x, y) -> "RegressorState":
        return online_update(self, x, y)

    def predict(self, x) -> Tuple[np.ndarray, np.ndarray]:
        return predict(self, x)


def batch_fit(X, Y, sigma_02: float = DEFAULT_SIGMA_02,
              sigma_y2: float = DEFAULT_SIGMA_Y2) -> RegressorState:
    """Posterior from ``X`` (D x N features) and ``Y`` (d_y x N targets)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1] or X.shape[1] < 1:
        raise ImproperParameters(f"need matching, non-empty X {X.shape} and Y {Y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NonFiniteInput("non-finite training data")
    state = RegressorState.init(X.shape[0], Y.shape[0], sigma_02, sigma_y2)
    precision = X @ X.T / sigma_y2 + np.eye(X.shape[0]) / sigma_02
    try:
        factor = cho_factor(precision, lower=True)
    except LinAlgError as exc:
        raise FactorizationFailure(str(exc)) from exc
    sigma = cho_solve(factor, np.eye(X.shape[0]))
    state.sigma_w = 0.5 * (sigma + sigma.T)
    state.xy = X @ Y.T
    state.mu_w = cho_solve(factor, state.xy) / sigma_y2
    state.n_seen = X.shape[1]
    return state


def online_update(state: RegressorState, x, y) -> RegressorState:
    """Absorb one observation in place with a rank-one downdate of ``sigma_w``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("non-finite observation")
    if x.size != state.d_out or y.size != state.d_y:
        raise ImproperParameters("observation dimensions do not match the regressor")
    sx = state.sigma_w @ x
    denom = state.sigma_y2 + x @ sx
    if not denom > 0:
        raise BrokenPosterior(f"rank-one update denominator {denom} is not positive")
    sigma = state.sigma_w - np.outer(sx, sx) / denom
    state.sigma_w = 0.5 * (sigma + sigma.T)
    state.xy = state.xy + np.outer(x, y)
    state.mu_w = state.sigma_w @ state.xy / state.sigma_y2
    state.n_seen += 1
    return state


def predict(state: RegressorState, x) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive means and variances, one per output.

    ``x`` may be a single feature vector or an (N, D) batch.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite query")
    mean = x @ state.mu_w
    if x.ndim == 1:
        var = float(x @ state.sigma_w @ x) + state.sigma_y2
        return mean, np.full(state.d_y, var)
    var = np.einsum("ni,ij,nj->n", x, state.sigma_w, x) + state.sigma_y2
    return mean, np.repeat(var[:, None], state.d_y, axis=1)


def loo_residuals(X, Y, sigma_02: float, sigma_y2: float) -> np.ndarray:
    """Leave-one-out residuals of the posterior mean, in closed form.

    ``X`` is D x N and ``Y`` is d_y x N; returns d_y x N residuals
    ``(y_i - yhat_i) / (1 - H_ii)``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    lam = sigma_y2 / sigma_02
    factor = cho_factor(X @ X.T + lam * np.eye(X.shape[0]), lower=True)
    proj = cho_solve(factor, X)
    hat_diag = np.einsum("dn,dn->n", X, proj)
    fitted = (Y @ X.T) @ proj
    return (Y - fitted) / (1.0 - hat_diag)
