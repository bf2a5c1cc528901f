"""Response thresholding.

Conditioning on the band ``T - c*eps < <w_i, x> + eta < T`` is the same
event for every component, because ``<w_z, x> + eta`` is exactly the
observed response ``y``.  The per-component sets therefore collapse to a
single filter on ``y`` and no labels are needed to apply it.  The upper
edge is

    T = C' (1 + sigma) sqrt(ln(1/eps)) / c**2

and the retained covariates of component ``i`` concentrate around
``T * w_i / |w_i|**2``.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import norm

from . import _rng
from .exceptions import (
    DomainError,
    EmptySelectionError,
    InfeasibleBudget,
    UnsupportedNoise,
    ValidationError,
)
from .model import _parse_header, iter_blocks

DEFAULT_BUDGET_CAP = 10**9

THRESHOLDED_HEADER = "# mlr-thresholded v1 lower={lower!r} upper={upper!r} raw={raw}"


@dataclass(frozen=True)
class BandConfig:
    c: float
    sigma: float
    eps: float
    c_prime: float = 1.0

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise DomainError("c must lie in (0, 1)")
        if not self.sigma >= 0:
            raise DomainError("sigma must be nonnegative")
        if not 0 < self.eps < 1:
            raise DomainError("eps must lie in (0, 1) so that ln(1/eps) > 0")
        if not self.c_prime > 0:
            raise DomainError("c_prime must be positive")

    def check_components(self, k):
        if not self.eps < 1.0 / k:
            raise ValidationError(f"eps={self.eps} must be below 1/k={1.0 / k:.6g}")

    @property
    def scale(self):
        """``C' (1 + sigma) sqrt(ln(1/eps))``, shared by the band and targets."""
        return self.c_prime * (1.0 + self.sigma) * math.sqrt(math.log(1.0 / self.eps))


class ThresholdBand(NamedTuple):
    lower: float
    upper: float

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, y):
        y = np.asarray(y)
        return (y > self.lower) & (y < self.upper)


def compute_band(cfg):
    upper = cfg.scale / cfg.c**2
    return ThresholdBand(upper - cfg.c * cfg.eps, upper)


def target_vectors(instance, cfg):
    """Ground-truth cluster targets ``T * w_i / |w_i|**2``.

    Evaluation only; recovery never sees these.
    """
    w = instance.weights
    sq = (w**2).sum(axis=1, keepdims=True)
    return cfg.scale * w / (cfg.c**2 * sq)


@dataclass
class ThresholdedSet:
    points: np.ndarray
    responses: np.ndarray
    hidden_labels: Optional[np.ndarray]
    raw_count: int
    band: ThresholdBand

    @property
    def kept_count(self):
        return self.responses.shape[0]

    @property
    def acceptance(self):
        return self.kept_count / self.raw_count if self.raw_count else 0.0


def _filter(X, y, z, band):
    keep = band.contains(y)
    return X[keep], y[keep], (None if z is None else z[keep])


def apply_threshold(dataset, band):
    """Keep samples with ``lower < y < upper``, in input order.

    Raises
    ------
    EmptySelectionError
        If no response falls inside the band.
    """
    X, y, z = _filter(dataset.X, dataset.y, dataset.z, band)
    if y.shape[0] == 0:
        raise EmptySelectionError(
            f"no responses in ({band.lower:.6g}, {band.upper:.6g}) among {len(dataset)} samples"
        )
    return ThresholdedSet(X, y, z, len(dataset), band)


def threshold_arrays(X, y, band):
    """Label-free filter for raw arrays (used by the estimator API)."""
    Xk, yk, _ = _filter(np.asarray(X), np.asarray(y), None, band)
    if yk.shape[0] == 0:
        raise EmptySelectionError(f"no responses in ({band.lower:.6g}, {band.upper:.6g})")
    return ThresholdedSet(Xk, yk, None, len(y), band)


def sample_thresholded(instance, band, n_raw, seed):
    """Stream ``n_raw`` raw samples and keep those inside the band.

    Identical to ``apply_threshold(sample_dataset(instance, n_raw, seed), band)``
    but never holds more than one block of raw samples in memory.
    """
    parts = [_filter(X, y, z, band) for X, y, z in iter_blocks(instance, n_raw, seed)]
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    if y.shape[0] == 0:
        raise EmptySelectionError(f"no responses in band among {n_raw} raw samples")
    return ThresholdedSet(X, y, z, n_raw, band)


class AcceptanceRates(NamedTuple):
    per_component: np.ndarray
    mixture: float
    effective_mixing: np.ndarray
    standard_error: Optional[np.ndarray] = None


def _gaussian_band_prob(scale, band):
    # survival-function difference keeps precision deep in the tail
    return norm.sf(band.lower / scale) - norm.sf(band.upper / scale)


def band_moments(a, noise, band, n_nodes=96):
    """Band-restricted moments for ``y = a*g + eta`` with ``g ~ N(0, 1)``.

    Returns the unnormalised expectations ``E[1{y in band}]``,
    ``E[g 1{..}]``, ``E[g^2 1{..}]`` and ``E[eta 1{..}]``, integrating the
    Gaussian part in closed form and the noise by quadrature.
    """
    nodes, weights = noise.quadrature(n_nodes)
    lo = (band.lower - nodes) / a
    hi = (band.upper - nodes) / a
    p = norm.sf(lo) - norm.sf(hi)
    m1 = norm.pdf(lo) - norm.pdf(hi)
    m2 = p + lo * norm.pdf(lo) - hi * norm.pdf(hi)
    return weights @ p, weights @ m1, weights @ m2, weights @ (nodes * p)


def _quadrature_rates(instance, band, n_nodes=96):
    nodes, weights = instance.noise.quadrature(n_nodes)
    norms = np.linalg.norm(instance.weights, axis=1)
    q = np.empty(instance.k)
    for i, a in enumerate(norms):
        q[i] = weights @ (norm.sf((band.lower - nodes) / a) - norm.sf((band.upper - nodes) / a))
    return q


def _monte_carlo_rates(instance, band, mc_n, seed):
    # <w_i, x> is N(0, |w_i|^2), so only the scalar projection is drawn
    norms = np.linalg.norm(instance.weights, axis=1)
    hits = np.zeros(instance.k, dtype=np.int64)
    for i, a in enumerate(norms):
        done, b = 0, 0
        while done < mc_n:
            m = min(_rng.BLOCK_SIZE * 4, mc_n - done)
            rng = _rng.stream(seed, f"acceptance-{i}", b)
            y = a * rng.standard_normal(m) + instance.noise.sample(rng, m)
            hits[i] += np.count_nonzero(band.contains(y))
            done += m
            b += 1
    q = hits / mc_n
    return q, np.sqrt(q * (1 - q) / mc_n)


def acceptance_rate(instance, band, method="closed_form", mc_n=10**6, seed=0):
    """Band acceptance probability per component and for the mixture.

    ``closed_form`` uses ``y | z=i ~ N(0, |w_i|^2 + sigma^2)`` and needs
    Gaussian or zero noise.  ``quadrature`` integrates the Gaussian CDF
    against the noise law and works for every noise family.
    ``monte_carlo`` draws ``mc_n`` responses per component.

    Returns
    -------
    AcceptanceRates
        ``per_component[i] = P(y in band | z = i)``, the mixture rate and
        the post-threshold mixing weights ``p_i q_i / sum_j p_j q_j``.
    """
    se = None
    if method == "closed_form":
        if instance.noise.kind not in ("gaussian", "zero"):
            raise UnsupportedNoise(f"closed form needs Gaussian noise, got {instance.noise.kind}")
        scales = np.sqrt((instance.weights**2).sum(axis=1) + instance.sigma**2)
        q = _gaussian_band_prob(scales, band)
    elif method == "quadrature":
        q = _quadrature_rates(instance, band)
    elif method == "monte_carlo":
        q, se = _monte_carlo_rates(instance, band, mc_n, seed)
    else:
        raise ValidationError(f"unknown acceptance method {method!r}")
    q = np.clip(q, 0.0, 1.0)
    mix = float(instance.mixing @ q)
    eff = instance.mixing * q / mix if mix > 0 else np.full(instance.k, np.nan)
    return AcceptanceRates(q, mix, eff, se)


def default_rate_method(noise):
    return "closed_form" if noise.kind in ("gaussian", "zero") else "quadrature"


def budget_from_rate(rate, kept_target, safety=1.5, cap=DEFAULT_BUDGET_CAP):
    """``ceil(safety * kept_target / rate)``, refusing budgets above ``cap``."""
    if safety < 1:
        raise ValidationError("safety factor must be at least 1")
    if not rate > 0:
        raise InfeasibleBudget(f"acceptance rate {rate:.3g} is zero", rate=rate)
    need = safety * kept_target / rate
    if need > cap:
        raise InfeasibleBudget(
            f"acceptance rate {rate:.3g} needs {need:.3g} raw samples (cap {cap:.3g})",
            rate=rate,
            required=need,
        )
    return int(math.ceil(need))


def required_raw_samples(
    instance, band, kept_target, safety=1.5, cap=DEFAULT_BUDGET_CAP, per_component=False, rates=None
):
    """Raw samples needed to keep ``kept_target`` points after thresholding.

    With ``per_component`` the target applies to the rarest component,
    i.e. the rate used is ``min_i p_i q_i`` rather than the mixture rate.
    """
    if rates is None:
        rates = acceptance_rate(instance, band, default_rate_method(instance.noise))
    rate = float((instance.mixing * rates.per_component).min()) if per_component else rates.mixture
    return budget_from_rate(rate, kept_target, safety, cap)


def write_thresholded(tset, path):
    header = THRESHOLDED_HEADER.format(
        lower=float(tset.band.lower), upper=float(tset.band.upper), raw=tset.raw_count
    )
    labels = tset.hidden_labels if tset.hidden_labels is not None else np.full(tset.kept_count, -1)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for x, y, z in zip(tset.points, tset.responses, labels):
            fh.write(",".join(f"{v:.17g}" for v in x))
            fh.write(f",{y:.17g},{int(z)}\n")


def read_thresholded(path):
    with open(path) as fh:
        meta = _parse_header(fh.readline(), "mlr-thresholded")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    band = ThresholdBand(float(meta["lower"]), float(meta["upper"]))
    d = rows.shape[1] - 2
    z = rows[:, d + 1].astype(int)
    labels = None if (z < 0).all() else z
    raw = int(meta.get("raw", rows.shape[0]))
    return ThresholdedSet(rows[:, :d].copy(), rows[:, d].copy(), labels, raw, band)
