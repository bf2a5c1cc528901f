"""Monte Carlo checks of the structural facts behind the reduction.

* conditional mean: the retained covariates of a single component average
  to ``T w / |w|**2`` up to ``O(eps)``;
* separation: the targets of distinct components are at least
  ``C' (1 + sigma) sqrt(ln(1/eps)) / c`` apart;
* moments: Gaussian coordinates, the truncated band coordinate and every
  direction of the thresholded law have even moments within
  ``(proxy * s)**(s/2)``-type bounds.

Each check returns a :class:`LemmaReport` whose rows carry the empirical
value, the bound, the margin and a standard error, so the pass rule
(``margin >= -3 SE``, or ``deviation <= tolerance`` for closeness checks)
can be audited from the JSON output alone.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm

from . import _rng
from .exceptions import HypothesisError, ValidationError
from .model import _pairwise_min_distance
from .threshold import band_moments, compute_band, target_vectors

SE_MULTIPLIER = 3.0
K_MEAN = 5.0
K_TRUNCATED = 10.0
C_DIRECTIONAL = 4.0


@dataclass
class ReportRow:
    quantities: dict
    passed: bool
    component: Optional[int] = None
    s: Optional[int] = None


@dataclass
class LemmaReport:
    lemma: str
    rows: list = field(default_factory=list)
    samples_used: int = 0
    seed: Optional[int] = None
    sequential: bool = True

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def row(self, component=None, s=None):
        for r in self.rows:
            if r.component == component and r.s == s:
                return r
        raise KeyError((component, s))

    def json_lines(self):
        for r in self.rows:
            yield json.dumps(
                {
                    "lemma": self.lemma,
                    "component": r.component,
                    "s": r.s,
                    "pass": bool(r.passed),
                    "quantities": {k: float(v) for k, v in r.quantities.items()},
                    "samples_used": self.samples_used,
                    "seed": self.seed,
                    "sequential": self.sequential,
                }
            )


def truncated_normal_mean(lower, upper):
    """Mean of a standard normal restricted to ``(lower, upper)``."""
    mass = norm.sf(lower) - norm.sf(upper)
    return (norm.pdf(lower) - norm.pdf(upper)) / mass


def gaussian_abs_moment(s):
    """``E|g|**s`` for ``g ~ N(0, 1)``: ``2**(s/2) Gamma((s+1)/2) / sqrt(pi)``."""
    return math.exp(0.5 * s * math.log(2.0) + gammaln((s + 1) / 2.0) - 0.5 * math.log(math.pi))


def coordinate_moment_bound(s):
    return (s / 2.0) ** (s / 2.0)


class PowerSums:
    """Running sums of ``|v|**s`` and ``|v|**(2s)`` per column, in float64.

    Each chunk is reduced with numpy's pairwise summation and the chunk
    partials are combined with ``math.fsum``.
    """

    def __init__(self, powers):
        self.powers = tuple(powers)
        self.count = 0
        self._parts = {s: [] for s in self.powers}
        self._parts_sq = {s: [] for s in self.powers}

    def add(self, values):
        v = np.abs(np.asarray(values, dtype=np.float64))
        self.count += v.shape[0]
        for s in self.powers:
            vs = v**s
            self._parts[s].append(vs.sum(axis=0))
            self._parts_sq[s].append((vs * vs).sum(axis=0))

    def _fsum(self, parts):
        arr = np.array(parts)
        if arr.ndim == 1:
            return math.fsum(arr)
        return np.array([math.fsum(col) for col in arr.T])

    def moment(self, s):
        return self._fsum(self._parts[s]) / self.count

    def standard_error(self, s):
        m = self.moment(s)
        m2 = self._fsum(self._parts_sq[s]) / self.count
        return np.sqrt(np.maximum(m2 - m * m, 0.0) / self.count)


def _even_orders(s_max, low=4):
    if s_max % 2 or s_max < low:
        raise ValidationError(f"s_max must be even and at least {low}")
    return list(range(low, s_max + 1, 2))


def sample_component_band(weight, noise, band, M, seed, tag, full=True):
    """Draw ``M`` covariates of one component conditioned on the band.

    Only the coordinate along the weight decides acceptance, so it is drawn
    first together with the noise; the orthogonal coordinates are drawn for
    the accepted samples only.  The law is exactly that of filtering full
    ``N(0, I_d)`` draws.

    Returns ``(along, X, raw_count)`` where ``along`` is the coordinate on
    ``weight / |weight|`` and ``X`` the full covariates (``None`` unless
    ``full``).
    """
    w = np.asarray(weight, dtype=float)
    a = np.linalg.norm(w)
    u = w / a
    along_parts, raw, kept, b = [], 0, 0, 0
    while kept < M:
        rng = _rng.stream(seed, tag, b)
        m = _rng.BLOCK_SIZE * 8
        g = rng.standard_normal(m)
        y = a * g + noise.sample(rng, m)
        acc = g[band.contains(y)]
        along_parts.append(acc)
        kept += acc.shape[0]
        raw += m
        b += 1
        if b > 100_000:
            raise ValidationError("band acceptance too small for the requested sample size")
    along = np.concatenate(along_parts)[:M]
    # raw draws needed for exactly M acceptances, up to the last block
    raw = int(round(raw * M / kept))
    if not full:
        return along, None, raw
    rng = _rng.stream(seed, tag + "-orth", 0)
    H = rng.standard_normal((M, w.shape[0]))
    H -= np.outer(H @ u, u)
    X = H + np.outer(along, u)
    return along, X, raw


def check_conditional_mean(instance, cfg, M=10**5, seed=0, K=K_MEAN):
    """Distance between retained-covariate means and the targets.

    Every component is checked in isolation.  Tolerance is
    ``K * eps + 3 sqrt(d / M)``.  The row also records the exact
    population mean along the weight, ``analytic_gap = |v| - E[g | band]``.
    """
    band = compute_band(cfg)
    targets = target_vectors(instance, cfg)
    report = LemmaReport("conditional_mean", seed=seed)
    for i, w in enumerate(instance.weights):
        _, X, raw = sample_component_band(w, instance.noise, band, M, seed, f"lemma1-{i}")
        mean = X.mean(axis=0)
        dev = float(np.linalg.norm(mean - targets[i]))
        tol = K * cfg.eps + SE_MULTIPLIER * math.sqrt(instance.d / M)
        a = np.linalg.norm(w)
        p, m1, _, _ = band_moments(a, instance.noise, band)
        analytic = m1 / p
        report.rows.append(
            ReportRow(
                {
                    "deviation": dev,
                    "tolerance": tol,
                    "margin": tol - dev,
                    "standard_error": math.sqrt(instance.d / M),
                    "analytic_mean_along": analytic,
                    "target_norm": float(np.linalg.norm(targets[i])),
                    "analytic_gap": float(np.linalg.norm(targets[i]) - analytic),
                    "acceptance": M / raw,
                },
                dev <= tol,
                component=i,
            )
        )
        report.samples_used += raw
    return report


def check_separation(instance, cfg):
    """Pairwise target distances against ``C' (1 + sigma) sqrt(ln(1/eps)) / c``.

    Pure arithmetic.  Raises :class:`HypothesisError` if two weights are
    closer than ``c`` or a norm leaves ``[c, 1]``.
    """
    norms = np.linalg.norm(instance.weights, axis=1)
    if (norms < cfg.c).any() or (norms > 1.0).any():
        raise HypothesisError(f"weight norms {norms.round(6).tolist()} leave [c, 1]")
    gap = _pairwise_min_distance(instance.weights)
    if gap < cfg.c:
        raise HypothesisError(f"two weights are {gap:.6g} apart, below c={cfg.c}")
    v = target_vectors(instance, cfg)
    bound = cfg.scale / cfg.c
    report = LemmaReport("separation")
    k = instance.k
    worst = np.inf
    for i in range(k):
        for j in range(i + 1, k):
            dist = float(np.linalg.norm(v[i] - v[j]))
            worst = min(worst, dist - bound)
            report.rows.append(
                ReportRow(
                    {"distance": dist, "bound": bound, "margin": dist - bound, "standard_error": 0.0},
                    dist >= bound,
                    component=i * k + j,
                )
            )
    if not report.rows:
        report.rows.append(ReportRow({"bound": bound, "margin": math.inf, "standard_error": 0.0}, True))
    return report


def check_coordinate_moments(s_max=8, M=10**6, seed=0):
    """Even absolute moments of a standard normal against ``(s/2)**(s/2)``.

    The exact moment must satisfy the bound, and the empirical moment must
    be within 3 standard errors of both the exact value and the bound.
    """
    orders = _even_orders(s_max)
    if s_max > 20:
        raise ValidationError("s_max must be at most 20")
    acc = PowerSums(orders)
    done, b = 0, 0
    while done < M:
        m = min(_rng.BLOCK_SIZE * 8, M - done)
        acc.add(_rng.stream(seed, "coordinate-moments", b).standard_normal(m))
        done += m
        b += 1
    report = LemmaReport("coordinate_moments", samples_used=M, seed=seed)
    for s in orders:
        exact = gaussian_abs_moment(s)
        bound = coordinate_moment_bound(s)
        emp = acc.moment(s)
        # exact standard error from the known 2s-th moment
        se = math.sqrt((gaussian_abs_moment(2 * s) - exact**2) / M)
        margin = bound - emp
        close = abs(emp - exact) <= SE_MULTIPLIER * se
        report.rows.append(
            ReportRow(
                {
                    "exact": exact,
                    "empirical": emp,
                    "bound": bound,
                    "margin": margin,
                    "standard_error": se,
                    "deviation": emp - exact,
                },
                exact <= bound and margin >= -SE_MULTIPLIER * se and close,
                s=s,
            )
        )
    return report


def truncated_moment_bound(s, sigma, c, K_m=K_TRUNCATED):
    return K_m * ((1.0 + sigma) / c) ** s * coordinate_moment_bound(s)


def check_truncated_moments(instance, cfg, s_max=8, M=10**5, seed=0, K_m=K_TRUNCATED):
    """Central absolute moments of the band coordinate.

    Checks ``E|g - mean|**s <= K_m ((1 + sigma) / c)**s (s/2)**(s/2)`` for
    the covariate along each weight under the thresholded law.
    """
    orders = _even_orders(s_max)
    if s_max > 12:
        raise ValidationError("s_max must be at most 12")
    band = compute_band(cfg)
    report = LemmaReport("truncated_moments", seed=seed)
    for i, w in enumerate(instance.weights):
        along, _, raw = sample_component_band(w, instance.noise, band, M, seed, f"lemma2t-{i}", full=False)
        acc = PowerSums(orders)
        acc.add(along - along.mean())
        report.samples_used += raw
        for s in orders:
            emp = acc.moment(s)
            se = acc.standard_error(s)
            bound = truncated_moment_bound(s, cfg.sigma, cfg.c, K_m)
            report.rows.append(
                ReportRow(
                    {"empirical": emp, "bound": bound, "margin": bound - emp, "standard_error": se},
                    bound - emp >= -SE_MULTIPLIER * se,
                    component=i,
                    s=s,
                )
            )
    return report


def directional_moment_bound(s, sigma, c, c_dd=C_DIRECTIONAL):
    return (c_dd * (1.0 + sigma) ** 2 * s / c**2) ** (s / 2.0)


def unit_directions(d, n_directions, seed):
    """``n_directions`` uniform unit vectors followed by the ``2d`` signed axes."""
    rng = _rng.stream(seed, "directions")
    U = rng.standard_normal((n_directions, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    axes = np.vstack([np.eye(d), -np.eye(d)])
    return np.vstack([U, axes])


def check_directional_moments(
    instance, cfg, s_max=8, n_directions=100, M=10**5, seed=0, c_dd=C_DIRECTIONAL
):
    """Even directional moments ``E<x - mu, u>**s`` against ``(C'' (1+sigma)^2 s / c^2)**(s/2)``.

    The centre ``mu`` is the empirical mean of the retained covariates.
    One row per (component, s) reports the worst direction.
    """
    orders = _even_orders(s_max)
    if n_directions < 100:
        raise ValidationError("need at least 100 random directions")
    band = compute_band(cfg)
    U = unit_directions(instance.d, n_directions, seed)
    report = LemmaReport("directional_moments", seed=seed)
    for i, w in enumerate(instance.weights):
        _, X, raw = sample_component_band(w, instance.noise, band, M, seed, f"lemma2d-{i}")
        proj = (X - X.mean(axis=0)) @ U.T
        acc = PowerSums(orders)
        acc.add(proj)
        report.samples_used += raw
        for s in orders:
            emp = acc.moment(s)
            se = acc.standard_error(s)
            bound = directional_moment_bound(s, cfg.sigma, cfg.c, c_dd)
            margins = bound - emp
            worst = int(np.argmin(margins + SE_MULTIPLIER * se))
            report.rows.append(
                ReportRow(
                    {
                        "empirical": emp[worst],
                        "bound": bound,
                        "margin": margins[worst],
                        "standard_error": se[worst],
                        "max_empirical": emp.max(),
                        "n_directions": U.shape[0],
                    },
                    bool((margins >= -SE_MULTIPLIER * se).all()),
                    component=i,
                    s=s,
                )
            )
    return report


def verify_all(instance, cfg, s_max=8, M=10**5, coordinate_M=10**6, n_directions=100, seed=0):
    """Run every check for ``instance``; separation raises on a broken hypothesis."""
    return [
        check_conditional_mean(instance, cfg, M, seed),
        check_separation(instance, cfg),
        check_coordinate_moments(s_max, coordinate_M, seed),
        check_truncated_moments(instance, cfg, min(s_max, 12), M, seed),
        check_directional_moments(instance, cfg, s_max, n_directions, M, seed),
    ]
