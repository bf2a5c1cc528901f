"""Mixture-of-linear-regressions instances, validation and sampling.

The generative model is

    z ~ multinomial(p),  x ~ N(0, I_d),  y = <w_z, x> + eta

with eta drawn from a zero-mean sigma-subgaussian noise family.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _rng
from .exceptions import FeasibilityError, ValidationError

NOISE_KINDS = ("gaussian", "uniform", "rademacher", "zero")

MAX_WEIGHT_ATTEMPTS = 10_000

DATASET_HEADER = "# mlr-dataset v1 d={d} k={k} seed={seed}"


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean noise with subgaussian proxy ``sigma``.

    ``uniform`` has support [-sigma, sigma] and ``rademacher`` takes the
    values +-sigma; both are sigma-subgaussian by Hoeffding's lemma.
    """

    kind: str = "gaussian"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if not self.sigma >= 0:
            raise ValidationError("noise sigma must be nonnegative")
        if self.kind == "zero" and self.sigma != 0:
            object.__setattr__(self, "sigma", 0.0)

    @property
    def is_degenerate(self):
        return self.kind == "zero" or self.sigma == 0

    def sample(self, rng, n):
        s = self.sigma
        if self.is_degenerate:
            return np.zeros(n)
        if self.kind == "gaussian":
            return s * rng.standard_normal(n)
        if self.kind == "uniform":
            return rng.uniform(-s, s, size=n)
        return s * (2.0 * rng.integers(0, 2, size=n) - 1.0)

    def mgf(self, t):
        """Exact moment generating function E exp(t * eta)."""
        st = self.sigma * np.asarray(t, dtype=float)
        if self.is_degenerate:
            return np.ones_like(st)
        if self.kind == "gaussian":
            return np.exp(st**2 / 2)
        if self.kind == "rademacher":
            return np.cosh(st)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.sinh(st) / st
        return np.where(st == 0, 1.0, out)

    def quadrature(self, n_nodes=64):
        """Nodes and weights integrating against the noise law.

        Exact for polynomials up to degree ``2 * n_nodes - 1`` in the
        Gaussian and uniform cases, exact for any function otherwise.
        """
        s = self.sigma
        if self.is_degenerate:
            return np.zeros(1), np.ones(1)
        if self.kind == "rademacher":
            return np.array([-s, s]), np.array([0.5, 0.5])
        if self.kind == "gaussian":
            t, w = np.polynomial.hermite_e.hermegauss(n_nodes)
            return s * t, w / w.sum()
        t, w = np.polynomial.legendre.leggauss(n_nodes)
        return s * t, w / 2.0

    def to_dict(self):
        return {"kind": self.kind, "sigma": float(self.sigma)}


@dataclass
class ModelInstance:
    """Ground-truth MLR problem.

    Construction only checks parameter ranges; the assumptions on the
    weights and mixing vector are checked by :func:`validate_assumptions`
    so that deliberately broken instances can still be represented.
    """

    weights: np.ndarray
    mixing: np.ndarray
    noise: NoiseModel
    c: float
    delta: float
    p_min: float
    seed: Optional[int] = None

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.mixing = np.asarray(self.mixing, dtype=float).ravel()
        if self.mixing.shape[0] != self.weights.shape[0]:
            raise ValidationError("mixing vector length must equal the number of weights")
        if not 0 < self.c < 1:
            raise ValidationError("c must lie in (0, 1)")
        if not 0 < self.p_min <= 1.0 / self.k + 1e-15:
            raise ValidationError("p_min must lie in (0, 1/k]")

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.weights.shape[1]

    @property
    def sigma(self):
        return self.noise.sigma

    def fingerprint(self, seed=None):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weights).tobytes())
        h.update(np.ascontiguousarray(self.mixing).tobytes())
        meta = dict(self.noise.to_dict(), c=self.c, delta=self.delta, p_min=self.p_min, seed=seed)
        h.update(json.dumps(meta, sort_keys=True).encode())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {
            "k": self.k,
            "d": self.d,
            "weights": self.weights.tolist(),
            "mixing": self.mixing.tolist(),
            "noise": self.noise.to_dict(),
            "c": self.c,
            "delta": self.delta,
            "p_min": self.p_min,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            weights=np.array(data["weights"], dtype=float),
            mixing=np.array(data["mixing"], dtype=float),
            noise=NoiseModel(**data["noise"]),
            c=data["c"],
            delta=data["delta"],
            p_min=data["p_min"],
            seed=data.get("seed"),
        )


class AssumptionCheck(NamedTuple):
    name: str
    passed: bool
    margin: float


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(ch.passed for ch in self.checks)

    def __getitem__(self, name):
        for ch in self.checks:
            if ch.name == name:
                return ch
        raise KeyError(name)

    def failures(self):
        return [ch for ch in self.checks if not ch.passed]

    def raise_if_failed(self):
        bad = self.failures()
        if bad:
            desc = ", ".join(f"{ch.name} (margin {ch.margin:.4g})" for ch in bad)
            raise ValidationError(f"instance violates assumptions: {desc}")


def _pairwise_min_distance(weights):
    k = weights.shape[0]
    if k < 2:
        return np.inf
    diff = weights[:, None, :] - weights[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    return dist[np.triu_indices(k, 1)].min()


def validate_assumptions(instance):
    """Report each modelling assumption with its worst-case margin.

    Checks are ``simplex`` (sum of p equals one), ``A1`` (min p_i >= p_min),
    ``A2-norm`` (c <= |w_i| <= 1) and ``A2-separation``
    (|w_i - w_j| >= delta).  Never raises.
    """
    p = instance.mixing
    norms = np.linalg.norm(instance.weights, axis=1)
    simplex = 1e-12 - abs(p.sum() - 1.0)
    a1 = p.min() - instance.p_min
    a2_norm = min(norms.min() - instance.c, 1.0 - norms.max())
    a2_sep = _pairwise_min_distance(instance.weights) - instance.delta
    checks = [
        AssumptionCheck("simplex", bool(simplex >= 0 and (p >= 0).all()), float(simplex)),
        AssumptionCheck("A1", bool(a1 >= 0), float(a1)),
        AssumptionCheck("A2-norm", bool(a2_norm >= 0), float(a2_norm)),
        AssumptionCheck("A2-separation", bool(a2_sep >= 0), float(a2_sep)),
    ]
    return ValidationReport(checks)


def make_instance(k, d, c, delta, p_min, noise, seed):
    """Build a random instance satisfying the modelling assumptions.

    Directions are uniform on the sphere and norms uniform in ``[c, 1]``.
    Candidates closer than ``delta`` to an accepted weight are redrawn;
    at most 10,000 candidates are drawn in total.

    Raises
    ------
    FeasibilityError
        If ``k`` separated weights cannot be placed within the attempt cap.
    """
    if k < 1 or d < 2:
        raise ValidationError("need k >= 1 and d >= 2")
    if not 0 < c < delta < 1:
        raise ValidationError("need 0 < c < delta < 1")
    if not 0 < p_min <= 1.0 / k:
        raise ValidationError("need 0 < p_min <= 1/k")
    if isinstance(noise, str):
        noise = NoiseModel(noise)

    rng = _rng.stream(seed, "instance")
    weights = []
    attempts = 0
    while len(weights) < k:
        if attempts >= MAX_WEIGHT_ATTEMPTS:
            raise FeasibilityError(
                f"placed only {len(weights)} of {k} weights with separation {delta} "
                f"in d={d} after {MAX_WEIGHT_ATTEMPTS} attempts"
            )
        attempts += 1
        u = rng.standard_normal(d)
        w = rng.uniform(c, 1.0) * u / np.linalg.norm(u)
        if all(np.linalg.norm(w - v) >= delta for v in weights):
            weights.append(w)

    raw = rng.dirichlet(np.ones(k))
    mixing = p_min + (1.0 - k * p_min) * raw
    mixing /= mixing.sum()
    return ModelInstance(np.array(weights), mixing, noise, c, delta, p_min, seed=seed)


class LabeledSample(NamedTuple):
    x: np.ndarray
    y: float
    z: int


@dataclass
class Dataset:
    """Samples stored column-wise; ``z`` is kept for evaluation only."""

    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    k: int
    seed: Optional[int] = None
    instance_fingerprint: Optional[str] = None

    def __len__(self):
        return self.y.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield LabeledSample(self.X[i], float(self.y[i]), int(self.z[i]))

    @property
    def d(self):
        return self.X.shape[1]

    def features(self):
        """Label-free view ``(X, y)`` handed to estimators."""
        return self.X, self.y


def iter_blocks(instance, n, seed, tag="sample"):
    """Yield ``(X, y, z)`` blocks totalling ``n`` samples.

    Block ``b`` is drawn from its own stream, so the result does not depend
    on how the blocks are consumed or distributed.
    """
    cum = np.cumsum(instance.mixing)
    cum[-1] = np.inf
    n_blocks = -(-n // _rng.BLOCK_SIZE)
    for b in range(n_blocks):
        m = min(_rng.BLOCK_SIZE, n - b * _rng.BLOCK_SIZE)
        rng = _rng.stream(seed, tag, b)
        # draw whole blocks and truncate so a prefix of n is stable in n
        full = _rng.BLOCK_SIZE
        z = np.searchsorted(cum, rng.random(full)[:m], side="right")
        X = rng.standard_normal((full, instance.d))[:m]
        eta = instance.noise.sample(rng, full)[:m]
        y = np.einsum("ij,ij->i", X, instance.weights[z]) + eta
        yield X, y, z


def sample_dataset(instance, n, seed):
    if n < 1:
        raise ValidationError("n must be positive")
    parts = list(iter_blocks(instance, n, seed))
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    return Dataset(X, y, z, instance.k, seed, instance.fingerprint(seed))


def write_dataset(dataset, path):
    header = DATASET_HEADER.format(d=dataset.d, k=dataset.k, seed=dataset.seed)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for x, y, z in zip(dataset.X, dataset.y, dataset.z):
            fh.write(",".join(f"{v:.17g}" for v in x))
            fh.write(f",{y:.17g},{int(z)}\n")


def _parse_header(line, magic):
    parts = line.strip().split()
    if len(parts) < 3 or parts[0] != "#" or parts[1] != magic or parts[2] != "v1":
        raise ValidationError(f"not a {magic} v1 file: {line.strip()!r}")
    meta = {}
    for token in parts[3:]:
        key, _, value = token.partition("=")
        meta[key] = value
    return meta


def read_dataset(path):
    with open(path) as fh:
        meta = _parse_header(fh.readline(), "mlr-dataset")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = int(meta["d"])
    seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
    X = rows[:, :d].copy()
    return Dataset(X, rows[:, d].copy(), rows[:, d + 1].astype(int), int(meta["k"]), seed)
