"""Expectation-maximisation baseline for mixtures of linear regressions.

The noise scale is passed in as known, the same information the
thresholding estimator gets.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _rng
from .exceptions import SingularSystemError, ValidationError
from .recover import RecoveryOutput, WeightEstimate

RIDGE = 1e-8
# a zero noise scale makes the likelihood degenerate
SIGMA_FLOOR = 1e-3
INITS = ("random_weights", "spectral_stub")


@dataclass(frozen=True)
class EMConfig:
    k: int
    max_iters: int = 500
    tol: float = 1e-8
    restarts: int = 10
    init: str = "random_weights"
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.init not in INITS:
            raise ValidationError(f"unknown init {self.init!r}")
        if self.k < 1 or self.restarts < 1:
            raise ValidationError("k and restarts must be positive")


@dataclass
class EMResult:
    weights: np.ndarray
    mixing: np.ndarray
    log_likelihood: float
    history: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    restart: int = 0


def _log_joint(X, y, W, p, sigma):
    resid = y[:, None] - X @ W.T
    return (
        np.log(np.maximum(p, 1e-300))[None, :]
        - 0.5 * (resid / sigma) ** 2
        - np.log(sigma * np.sqrt(2 * np.pi))
    )


def e_step(X, y, W, p, sigma):
    """Responsibilities and total log-likelihood."""
    lj = _log_joint(X, y, W, p, sigma)
    top = lj.max(axis=1, keepdims=True)
    R = np.exp(lj - top)
    total = R.sum(axis=1, keepdims=True)
    R /= total
    return R, float((top + np.log(total)).sum())


def m_step(X, y, R):
    n, d = X.shape
    k = R.shape[1]
    W = np.empty((k, d))
    for j in range(k):
        r = R[:, j]
        gram = (X * r[:, None]).T @ X + RIDGE * np.eye(d)
        if not np.all(np.isfinite(gram)):
            raise SingularSystemError(f"non-finite normal equations for component {j}")
        try:
            W[j] = cho_solve(cho_factor(gram), X.T @ (r * y))
        except LinAlgError as exc:
            raise SingularSystemError(f"weighted normal equations for component {j} are singular") from exc
        if not np.all(np.isfinite(W[j])):
            raise SingularSystemError(f"non-finite solution for component {j}")
    return W, R.mean(axis=0)


def _initial_weights(X, y, k, init, rng):
    n, d = X.shape
    if init == "random_weights":
        return rng.standard_normal((k, d)) / np.sqrt(d)
    # second-moment subspace: E[y^2 x x^T] - E[y^2] I = 2 sum_j p_j w_j w_j^T
    M = (X * (y**2)[:, None]).T @ X / n - np.mean(y**2) * np.eye(d)
    vals, vecs = np.linalg.eigh(M)
    basis = vecs[:, np.argsort(vals)[::-1][:k]]
    scale = np.sqrt(max(np.mean(y**2), 1e-12))
    return (rng.standard_normal((k, k)) @ basis.T) * scale / np.sqrt(k)


def _run_em(X, y, sigma, config, rng, restart):
    W = _initial_weights(X, y, config.k, config.init, rng)
    p = np.full(config.k, 1.0 / config.k)
    n = X.shape[0]
    R, ll = e_step(X, y, W, p, sigma)
    history = [ll]
    converged = False
    for _ in range(config.max_iters):
        W, p = m_step(X, y, R)
        R, new_ll = e_step(X, y, W, p, sigma)
        # the ridge term perturbs the M-step by O(RIDGE)
        assert new_ll >= ll - 1e-7 * (1.0 + abs(ll)), "log-likelihood decreased"
        history.append(new_ll)
        if abs(new_ll - ll) / n < config.tol:
            converged = True
            ll = new_ll
            break
        ll = new_ll
    return EMResult(W, p, ll, history, len(history) - 1, converged, restart)


def em_fit(X, y, config, noise_sigma):
    """Best-of-restarts EM fit by final log-likelihood.

    Raises
    ------
    ValidationError
        If there are fewer than ``10 * k * d`` samples.
    SingularSystemError
        If a ridge-regularised weighted least-squares solve fails.
    """
    X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
    n, d = X.shape
    if n < 10 * config.k * d:
        raise ValidationError(f"EM needs at least {10 * config.k * d} samples, got {n}")
    sigma = max(float(noise_sigma), SIGMA_FLOOR)
    best = None
    for r in range(config.restarts):
        rng = _rng.stream(config.seed, "em", r)
        res = _run_em(X, y, sigma, config, rng, r)
        if best is None or res.log_likelihood > best.log_likelihood:
            best = res
    return best


def em_recovery_output(result, n_raw, runtime_ms=None):
    """Wrap an EM fit in the recovery JSON schema with ``method="em"``."""
    estimates = []
    for j, w in enumerate(result.weights):
        mag = float(np.linalg.norm(w))
        u = w / mag if mag > 0 else np.zeros_like(w)
        estimates.append(WeightEstimate(u, mag, j, 0))
    diagnostics = {
        "log_likelihood": result.log_likelihood,
        "n_iter": result.n_iter,
        "converged": result.converged,
        "mixing": result.mixing,
    }
    if runtime_ms is not None:
        diagnostics["runtime_ms"] = runtime_ms
    return RecoveryOutput(estimates, None, n_raw, n_raw, result.mixing, diagnostics, method="em")


class EMRegressionMixture(BaseEstimator):
    """Mixture of linear regressions fitted by EM with known noise scale.

    Parameters
    ----------
    n_components : int, default=2
    sigma : float, default=0.1
    max_iters : int, default=500
    tol : float, default=1e-8
    restarts : int, default=10
    init : {"random_weights", "spectral_stub"}, default="random_weights"
    random_state : int, default=0
    """

    def __init__(
        self, n_components=2, sigma=0.1, max_iters=500, tol=1e-8, restarts=10, init="random_weights", random_state=0
    ):
        self.n_components = n_components
        self.sigma = sigma
        self.max_iters = max_iters
        self.tol = tol
        self.restarts = restarts
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        config = EMConfig(self.n_components, self.max_iters, self.tol, self.restarts, self.init, self.random_state)
        self.result_ = em_fit(X, y, config, self.sigma)
        self.coef_ = self.result_.weights
        self.mixing_ = self.result_.mixing
        self.log_likelihood_ = self.result_.log_likelihood
        self.n_features_in_ = self.coef_.shape[1]
        return self

    def predict(self, X):
        """Per-component predictions, shape ``(n_samples, n_components)``."""
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_.T

    def predict_proba(self, X, y):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        R, _ = e_step(X, np.asarray(y, dtype=float), self.coef_, self.mixing_, max(self.sigma, SIGMA_FLOOR))
        return R
