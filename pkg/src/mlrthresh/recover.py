"""Weight recovery from clustered thresholded samples.

For every cluster the direction of ``w_i`` is the direction of the cluster
mean, and the norm comes from the ratio

    r = mean(y) / (u . mean(x))

over the same cluster.  Without noise ``r = |w_i|``.  With noise the
band selects responses whose noise leans positive, and ``r`` converges to
a known function ``r(a)`` of the true norm ``a`` (for Gaussian noise
``r(a) = (a**2 + sigma**2) / a``).  :class:`NoiseCalibration` inverts that
map on ``[c, 1]``.
"""

import itertools
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cluster import ClusterParams, cluster_points
from .exceptions import (
    MLRError,
    NearZeroMeanError,
    SignError,
    SmallClusterError,
    ValidationError,
)
from .model import NoiseModel, validate_assumptions
from .threshold import (
    BandConfig,
    acceptance_rate,
    band_moments,
    compute_band,
    default_rate_method,
    required_raw_samples,
    sample_thresholded,
    threshold_arrays,
)

logger = logging.getLogger(__name__)

RECOVERY_SCHEMA = "mlr-recovery v1"

DIRECTION_FLOOR = 1e-6
DENOMINATOR_FLOOR = 1e-6
MAGNITUDE_MIN_COUNT = 100
BRUTE_FORCE_MAX_K = 8


class NoiseCalibration:
    """Population map from a weight norm to the expected magnitude ratio.

    Parameters
    ----------
    noise : NoiseModel
    band : ThresholdBand
    norm_range : (float, float)
        Interval known to contain every weight norm, ``(c, 1)``.
    """

    def __init__(self, noise, band, norm_range, grid_size=400):
        self.noise = noise
        self.band = band
        self.norm_range = (float(norm_range[0]), float(norm_range[1]))
        self.grid_size = grid_size

    def _moments(self, a):
        return band_moments(a, self.noise, self.band)

    def ratio(self, a):
        """Expected ``E[y | band] / E[g | band]`` for weight norm ``a``."""
        if self.noise.is_degenerate:
            return a
        if self.noise.kind == "gaussian":
            return (a * a + self.noise.sigma**2) / a
        p, m1, _, eta_p = self._moments(a)
        return (a * m1 + eta_p) / m1

    def conditional_variance(self, a):
        """``Var(g | band)`` where ``g`` is the covariate along ``w``."""
        p, m1, m2, _ = self._moments(a)
        return m2 / p - (m1 / p) ** 2

    def invert(self, r, along_variance=None):
        """Weight norm in ``norm_range`` whose expected ratio equals ``r``.

        When several norms match, the one whose predicted conditional
        variance is closest to ``along_variance`` is chosen.  If none
        matches, the closest endpoint is returned.
        """
        if self.noise.is_degenerate:
            return r
        lo, hi = self.norm_range
        grid = np.linspace(lo, hi, self.grid_size)
        vals = np.array([self.ratio(a) for a in grid]) - r
        roots = []
        for j in range(len(grid) - 1):
            if vals[j] == 0:
                roots.append(grid[j])
            elif vals[j] * vals[j + 1] < 0:
                roots.append(brentq(lambda a: self.ratio(a) - r, grid[j], grid[j + 1], xtol=1e-13))
        if vals[-1] == 0:
            roots.append(grid[-1])
        if not roots:
            return float(grid[np.abs(vals).argmin()])
        if len(roots) == 1 or along_variance is None:
            return float(roots[0])
        gaps = [abs(self.conditional_variance(a) - along_variance) for a in roots]
        return float(roots[int(np.argmin(gaps))])


@dataclass
class WeightEstimate:
    direction: np.ndarray
    magnitude: float
    cluster_index: int
    kept_count: int
    raw_ratio: float = float("nan")

    @property
    def w_star(self):
        return self.magnitude * self.direction

    def to_dict(self):
        return {
            "cluster_index": self.cluster_index,
            "kept_count": self.kept_count,
            "direction": self.direction.tolist(),
            "magnitude": self.magnitude,
            "raw_ratio": self.raw_ratio,
            "w_star": self.w_star.tolist(),
        }


@dataclass
class RecoveryOutput:
    estimates: list
    band: object
    raw_count: int
    kept_count: int
    effective_mixing: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    method: str = "threshold"

    @property
    def weights(self):
        return np.array([e.w_star for e in self.estimates])

    def to_dict(self):
        return {
            "schema": RECOVERY_SCHEMA,
            "method": self.method,
            "band": {"lower": self.band.lower, "upper": self.band.upper} if self.band else None,
            "raw_count": int(self.raw_count),
            "kept_count": int(self.kept_count),
            "effective_mixing": [float(p) for p in self.effective_mixing],
            "estimates": [e.to_dict() for e in self.estimates],
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def estimate_direction(cluster_mean, floor=DIRECTION_FLOOR):
    mean = np.asarray(cluster_mean, dtype=float)
    nrm = np.linalg.norm(mean)
    if not nrm > floor:
        raise NearZeroMeanError(f"cluster mean norm {nrm:.3g} is below {floor:g}")
    return mean / nrm


def magnitude_ratio(cluster_points, cluster_responses, direction):
    """``mean(y) / (direction . mean(x))`` with the sign and size guards."""
    X = np.asarray(cluster_points, dtype=float)
    y = np.asarray(cluster_responses, dtype=float)
    denom = float(np.asarray(direction) @ X.mean(axis=0))
    if abs(denom) <= DENOMINATOR_FLOOR:
        raise NearZeroMeanError(f"projected cluster mean {denom:.3g} is too close to zero")
    ratio = float(y.mean()) / denom
    if ratio <= 0:
        raise SignError(f"magnitude ratio {ratio:.4g} is not positive")
    return ratio


def estimate_magnitude(
    cluster_points, cluster_responses, direction, min_count=MAGNITUDE_MIN_COUNT, calibration=None
):
    """Norm of the weight behind one cluster.

    Without ``calibration`` this is the plain ratio of mean response to
    projected mean covariate.  With a :class:`NoiseCalibration` the ratio
    is mapped back through the population relation for the noise family.

    Raises
    ------
    SmallClusterError
        Fewer than ``min_count`` points.
    SignError
        Non-positive ratio.
    """
    X = np.asarray(cluster_points, dtype=float)
    y = np.asarray(cluster_responses, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValidationError("points and responses differ in length")
    if X.shape[0] < min_count:
        raise SmallClusterError(f"cluster has {X.shape[0]} points, need {min_count}")
    ratio = magnitude_ratio(X, y, direction)
    if calibration is None:
        return ratio
    along = X @ np.asarray(direction)
    return calibration.invert(ratio, along_variance=float(along.var()))


def _estimates_from_labels(tset, labels, k, calibration, min_count, floor):
    estimates = []
    for j in range(k):
        members = labels == j
        Xj, yj = tset.points[members], tset.responses[members]
        try:
            if Xj.shape[0] == 0:
                raise SmallClusterError("cluster is empty")
            u = estimate_direction(Xj.mean(axis=0), floor)
            mag = estimate_magnitude(Xj, yj, u, min_count, calibration)
            ratio = magnitude_ratio(Xj, yj, u)
        except MLRError as exc:
            exc.cluster_index = j
            exc.args = (f"cluster {j}: {exc}",)
            raise
        estimates.append(WeightEstimate(u, mag, j, int(Xj.shape[0]), ratio))
    return estimates


def recover_weights(
    thresholded,
    k,
    cluster_params,
    band,
    calibration=None,
    magnitude_min_count=MAGNITUDE_MIN_COUNT,
    direction_floor=DIRECTION_FLOOR,
):
    """Cluster the thresholded covariates and turn each cluster into a weight.

    Only ``points`` and ``responses`` are read; ``hidden_labels`` never
    reaches this code path.
    """
    if thresholded.kept_count == 0:
        raise ValidationError("thresholded set is empty")
    # every retained response is bounded by the band edge
    assert np.all(np.abs(thresholded.responses) <= band.upper)
    if cluster_params.k != k:
        cluster_params = ClusterParams(**{**cluster_params.__dict__, "k": k})
    result = cluster_points(thresholded.points, cluster_params)
    estimates = _estimates_from_labels(
        thresholded, result.assignment, k, calibration, magnitude_min_count, direction_floor
    )
    kept = thresholded.kept_count
    return RecoveryOutput(
        estimates=estimates,
        band=band,
        raw_count=thresholded.raw_count,
        kept_count=kept,
        effective_mixing=result.sizes / kept,
        diagnostics={
            "acceptance_rate": kept / thresholded.raw_count,
            "cluster_objective": result.objective,
            "backend": result.backend_used,
        },
    )


class MatchResult(NamedTuple):
    permutation: np.ndarray
    errors: np.ndarray
    max_error: float

    @property
    def mean_error(self):
        return float(self.errors.mean())


def match_and_score(estimates, truth):
    """Optimal one-to-one matching of estimates to true weights.

    ``permutation[j]`` is the true component assigned to estimate ``j`` and
    ``errors[j]`` the l2 distance between them.  Exact enumeration is used
    for ``k <= 8`` and the Hungarian algorithm above that.
    """
    est = np.array([e.w_star if isinstance(e, WeightEstimate) else e for e in estimates], dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValidationError(f"cannot match {est.shape} estimates to {truth.shape} truth")
    k = est.shape[0]
    cost = np.linalg.norm(est[:, None, :] - truth[None, :, :], axis=2)
    if k <= BRUTE_FORCE_MAX_K:
        perms = np.array(list(itertools.permutations(range(k))))
        totals = cost[np.arange(k), perms].sum(axis=1)
        perm = perms[int(np.argmin(totals))]
    else:
        _, perm = linear_sum_assignment(cost)
    errors = cost[np.arange(k), perm]
    return MatchResult(perm, errors, float(errors.max()))


def calibration_for(noise, band, c, mode="auto"):
    """Build the magnitude calibration selected by ``mode``.

    ``"none"`` keeps the plain ratio, ``"auto"`` calibrates whenever the
    noise is not degenerate.
    """
    if mode not in ("auto", "none"):
        raise ValidationError(f"unknown magnitude correction {mode!r}")
    if mode == "none" or noise.is_degenerate:
        return None
    return NoiseCalibration(noise, band, (c, 1.0))


def run_pipeline(
    instance,
    band_cfg,
    cluster_params,
    kept_target,
    seed,
    safety=1.5,
    budget_cap=None,
    magnitude_correction="auto",
    p_floor_factor=0.5,
):
    """Sample, threshold, cluster and recover for a known instance.

    ``kept_target`` is the number of retained samples wanted for the
    rarest component.  Returns the recovery output with matching
    diagnostics against the instance's true weights.
    """
    start = time.perf_counter()
    instance_report = _validated(instance)
    band_cfg.check_components(instance.k)
    band = compute_band(band_cfg)
    rates = acceptance_rate(instance, band, default_rate_method(instance.noise))
    p_floor = p_floor_factor * instance.p_min
    if rates.effective_mixing.min() < p_floor:
        warnings.warn(
            f"post-threshold mixing weight {rates.effective_mixing.min():.4g} is below "
            f"the floor {p_floor:.4g}; clustering may miss a component",
            RuntimeWarning,
            stacklevel=2,
        )
    budget_kwargs = {} if budget_cap is None else {"cap": budget_cap}
    n_raw = required_raw_samples(
        instance, band, kept_target, safety, per_component=True, rates=rates, **budget_kwargs
    )
    tset = sample_thresholded(instance, band, n_raw, seed)
    calibration = calibration_for(instance.noise, band, band_cfg.c, magnitude_correction)
    out = recover_weights(tset, instance.k, cluster_params, band, calibration)
    match = match_and_score(out.estimates, instance.weights)
    out.diagnostics.update(
        expected_acceptance_rate=rates.mixture,
        expected_effective_mixing=rates.effective_mixing,
        matching_cost=float(match.errors.sum()),
        max_error=match.max_error,
        mean_error=match.mean_error,
        permutation=match.permutation,
        errors=match.errors,
        assumptions_passed=instance_report.passed,
        runtime_ms=(time.perf_counter() - start) * 1e3,
    )
    return out


def _validated(instance):
    report = validate_assumptions(instance)
    report.raise_if_failed()
    return report


class ThresholdedMLR(BaseEstimator):
    """Mixture-of-linear-regressions estimator by response thresholding.

    Samples whose response lands in a narrow band near
    ``T = c_prime (1 + sigma) sqrt(ln(1/eps)) / c**2`` are kept; their
    covariates form well-separated clusters around ``T w_i / |w_i|**2``.
    Each cluster gives one weight vector.

    Parameters
    ----------
    n_components : int, default=2
    eps : float, default=0.05
        Target accuracy, must be below ``1 / n_components``.
    c : float, default=0.9
        Lower bound on every weight norm (upper bound is 1).
    sigma : float, default=0.0
        Subgaussian proxy of the noise, assumed known.
    noise : {"gaussian", "uniform", "rademacher", "zero"}, default="gaussian"
    c_prime : float, default=1.0
    backend : str, default="kmeans_pp"
    restarts : int, default=20
    trim_fraction : float, default=0.05
    pca_preprocess : bool, default=True
    max_iters : int, default=200
    magnitude_correction : {"auto", "none"}, default="auto"
    magnitude_min_count : int, default=100
    random_state : int, default=0

    Attributes
    ----------
    coef_ : ndarray of shape (n_components, n_features)
    band_ : ThresholdBand
    n_kept_ : int
    recovery_ : RecoveryOutput
    """

    def __init__(
        self,
        n_components=2,
        eps=0.05,
        c=0.9,
        sigma=0.0,
        noise="gaussian",
        c_prime=1.0,
        backend="kmeans_pp",
        restarts=20,
        trim_fraction=0.05,
        pca_preprocess=True,
        max_iters=200,
        magnitude_correction="auto",
        magnitude_min_count=MAGNITUDE_MIN_COUNT,
        random_state=0,
    ):
        self.n_components = n_components
        self.eps = eps
        self.c = c
        self.sigma = sigma
        self.noise = noise
        self.c_prime = c_prime
        self.backend = backend
        self.restarts = restarts
        self.trim_fraction = trim_fraction
        self.pca_preprocess = pca_preprocess
        self.max_iters = max_iters
        self.magnitude_correction = magnitude_correction
        self.magnitude_min_count = magnitude_min_count
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        cfg = BandConfig(self.c, self.sigma, self.eps, self.c_prime)
        cfg.check_components(self.n_components)
        band = compute_band(cfg)
        tset = threshold_arrays(X, y, band)
        params = ClusterParams(
            k=self.n_components,
            backend=self.backend,
            restarts=self.restarts,
            trim_fraction=self.trim_fraction,
            pca_preprocess=self.pca_preprocess,
            max_iters=self.max_iters,
            seed=self.random_state,
        )
        noise = NoiseModel(self.noise, self.sigma)
        calibration = calibration_for(noise, band, self.c, self.magnitude_correction)
        self.recovery_ = recover_weights(
            tset, self.n_components, params, band, calibration, self.magnitude_min_count
        )
        self.band_ = band
        self.n_kept_ = tset.kept_count
        self.coef_ = self.recovery_.weights
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Per-component predictions, shape ``(n_samples, n_components)``."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_.T

    def assign(self, X, y):
        """Index of the component with the smallest absolute residual."""
        resid = np.abs(self.predict(X) - np.asarray(y, dtype=float)[:, None])
        return resid.argmin(axis=1)

    def score(self, X, y):
        """Negative mean absolute residual under the best component."""
        resid = np.abs(self.predict(X) - np.asarray(y, dtype=float)[:, None])
        return -float(resid.min(axis=1).mean())
