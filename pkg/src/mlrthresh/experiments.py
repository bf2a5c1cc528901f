"""Experiment configuration, single runs and resumable parameter sweeps."""

import copy
import csv
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from .baseline import EMConfig, em_fit, em_recovery_output
from .cluster import ClusterParams
from .exceptions import MLRError, ValidationError
from .model import ModelInstance, NoiseModel, make_instance, sample_dataset
from .recover import match_and_score, run_pipeline
from .threshold import (
    DEFAULT_BUDGET_CAP,
    BandConfig,
    acceptance_rate,
    compute_band,
    default_rate_method,
    required_raw_samples,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

RECOVER_COLUMNS = [
    "seed", "k", "d", "c", "delta", "sigma", "eps", "c_prime", "backend",
    "n_raw", "n_kept", "acc_rate", "max_err", "mean_err", "runtime_ms",
]
SWEEP_COLUMNS = ["cell", "method"] + RECOVER_COLUMNS + ["separated", "error"]
SWEEP_AXES = ("sigma", "eps", "k", "backend", "method")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "instance": {
        "k": 2, "d": 10, "c": 0.95, "delta": 0.96, "p_min": None,
        "noise": "gaussian", "sigma": 0.1, "seed": None,
        "weights": None, "mixing": None,
    },
    "band": {"eps": 0.05, "c_prime": 1.0},
    "cluster": {
        "backend": "kmeans_pp", "restarts": 20, "trim_fraction": 0.05,
        "pca_preprocess": True, "max_iters": 200,
    },
    "kept_target": 10_000,
    "safety": 1.5,
    "budget_cap": DEFAULT_BUDGET_CAP,
    "magnitude_correction": "auto",
    "seeds": [0],
    "gen": {"n_samples": 10_000},
    "em": {"max_iters": 500, "tol": 1e-8, "restarts": 10, "init": "random_weights", "max_samples": 100_000},
    "verify": {"s_max": 8, "M": 100_000, "coordinate_M": 1_000_000, "n_directions": 100},
    "sweep": {"grid": {"sigma": [0.1], "eps": [0.05], "k": [2], "backend": ["kmeans_pp"], "method": ["threshold"]}},
    "output": {"dir": "results"},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "grid":
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment settings.  ``raw`` keeps the merged mapping."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data):
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=False)

    def __getitem__(self, key):
        return self.raw[key]

    def replace(self, **updates):
        """Copy with dotted-key overrides, e.g. ``replace(**{"instance.sigma": 1.0})``."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in updates.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return ExperimentConfig.from_dict(raw)

    @property
    def seeds(self):
        return [int(s) for s in self.raw["seeds"]]

    @property
    def k(self):
        inst = self.raw["instance"]
        if inst.get("weights") is not None:
            return len(inst["weights"])
        return int(inst["k"])

    def p_min(self):
        p = self.raw["instance"]["p_min"]
        return 1.0 / (2 * self.k) if p is None else float(p)

    def noise(self):
        inst = self.raw["instance"]
        return NoiseModel(inst["noise"], float(inst["sigma"]))

    def band_config(self):
        inst, band = self.raw["instance"], self.raw["band"]
        return BandConfig(float(inst["c"]), float(inst["sigma"]), float(band["eps"]), float(band["c_prime"]))

    def cluster_params(self, seed=0):
        return ClusterParams(k=self.k, seed=int(seed), **self.raw["cluster"])

    def em_config(self, seed=0):
        em = dict(self.raw["em"])
        em.pop("max_samples", None)
        return EMConfig(k=self.k, seed=int(seed), **em)

    def instance(self, seed):
        """Instance for ``seed``; explicit ``weights`` in the config win over sampling."""
        inst = self.raw["instance"]
        if inst.get("weights") is not None:
            W = np.array(inst["weights"], dtype=float)
            mixing = inst.get("mixing") or [1.0 / W.shape[0]] * W.shape[0]
            return ModelInstance(
                W, mixing, self.noise(), float(inst["c"]), float(inst["delta"]), self.p_min(), seed=inst["seed"]
            )
        inst_seed = seed if inst["seed"] is None else int(inst["seed"])
        return make_instance(
            self.k, int(inst["d"]), float(inst["c"]), float(inst["delta"]), self.p_min(), self.noise(), inst_seed
        )

    def validate(self):
        if self.raw.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {self.raw.get('schema_version')!r}")
        inst = self.raw["instance"]
        if not 0 < float(inst["c"]) < float(inst["delta"]) < 1:
            raise ValidationError("need 0 < c < delta < 1")
        if int(inst["d"]) < 2 or self.k < 1:
            raise ValidationError("need k >= 1 and d >= 2")
        if not 0 < self.p_min() <= 1.0 / self.k:
            raise ValidationError("need 0 < p_min <= 1/k")
        self.noise()
        self.band_config().check_components(self.k)
        self.cluster_params()
        self.em_config()
        if int(self.raw["kept_target"]) < 1 or float(self.raw["safety"]) < 1:
            raise ValidationError("kept_target must be positive and safety at least 1")
        if self.raw["magnitude_correction"] not in ("auto", "none"):
            raise ValidationError("magnitude_correction must be 'auto' or 'none'")
        if not self.seeds:
            raise ValidationError("at least one seed is required")


def _base_row(cfg, seed, backend):
    inst, band = cfg["instance"], cfg["band"]
    return {
        "seed": seed, "k": cfg.k, "d": int(inst["d"]), "c": float(inst["c"]),
        "delta": float(inst["delta"]), "sigma": float(inst["sigma"]), "eps": float(band["eps"]),
        "c_prime": float(band["c_prime"]), "backend": backend,
    }


def raw_budget(cfg, instance):
    band = compute_band(cfg.band_config())
    rates = acceptance_rate(instance, band, default_rate_method(instance.noise))
    n_raw = required_raw_samples(
        instance, band, int(cfg["kept_target"]), float(cfg["safety"]),
        cap=float(cfg["budget_cap"]), per_component=True, rates=rates,
    )
    return n_raw, rates


def run_threshold(cfg, seed):
    """One thresholding recovery; returns ``(csv_row, RecoveryOutput)``."""
    start = time.perf_counter()
    instance = cfg.instance(seed)
    out = run_pipeline(
        instance,
        cfg.band_config(),
        cfg.cluster_params(seed),
        int(cfg["kept_target"]),
        seed,
        safety=float(cfg["safety"]),
        budget_cap=float(cfg["budget_cap"]),
        magnitude_correction=cfg["magnitude_correction"],
    )
    row = _base_row(cfg, seed, cfg["cluster"]["backend"])
    row.update(
        n_raw=out.raw_count,
        n_kept=out.kept_count,
        acc_rate=out.kept_count / out.raw_count,
        max_err=out.diagnostics["max_error"],
        mean_err=out.diagnostics["mean_error"],
        runtime_ms=(time.perf_counter() - start) * 1e3,
    )
    out.diagnostics["true_weights"] = instance.weights
    return row, out


def run_em(cfg, seed):
    """EM baseline on the same raw budget, capped at ``em.max_samples``."""
    start = time.perf_counter()
    instance = cfg.instance(seed)
    n_raw, _ = raw_budget(cfg, instance)
    n = min(n_raw, int(cfg["em"]["max_samples"]))
    data = sample_dataset(instance, n, seed)
    X, y = data.features()
    result = em_fit(X, y, cfg.em_config(seed), instance.sigma)
    runtime = (time.perf_counter() - start) * 1e3
    out = em_recovery_output(result, n, runtime)
    match = match_and_score(result.weights, instance.weights)
    out.diagnostics.update(
        max_error=match.max_error, mean_error=match.mean_error, permutation=match.permutation,
        errors=match.errors, true_weights=instance.weights, matched_budget=n_raw,
    )
    row = _base_row(cfg, seed, "em")
    row.update(
        n_raw=n, n_kept=n, acc_rate=1.0, max_err=match.max_error,
        mean_err=match.mean_error, runtime_ms=runtime,
    )
    return row, out


def format_row(row, columns):
    out = {}
    for col in columns:
        v = row.get(col, "")
        if isinstance(v, (float, np.floating)):
            v = repr(float(v))
        out[col] = v
    return out


def append_csv(path, rows, columns):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(format_row(row, columns))


# -- sweeps -----------------------------------------------------------------


def sweep_cells(cfg):
    """Cartesian product of the sweep grid and the seeds, in a fixed order."""
    grid = cfg["sweep"]["grid"]
    axes = [a for a in SWEEP_AXES if a in grid]
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ValidationError(f"unknown sweep axes {sorted(unknown)}")
    cells = []
    for values in itertools.product(*(grid[a] for a in axes)):
        params = dict(zip(axes, values))
        for seed in cfg.seeds:
            key = ",".join(f"{a}={params[a]}" for a in axes) + f",seed={seed}"
            cells.append((key, params, seed))
    return cells


def cell_config(cfg, params):
    updates = {}
    for axis, value in params.items():
        if axis in ("sigma", "k"):
            updates[f"instance.{axis}"] = value
        elif axis == "eps":
            updates["band.eps"] = value
        elif axis == "backend":
            updates["cluster.backend"] = value
    return cfg.replace(**updates)


def run_cell(cfg, key, params, seed):
    """Run one sweep cell; errors are recorded in the row, never raised."""
    method = params.get("method", "threshold")
    row = {"cell": key, "method": method, "seed": seed, "error": ""}
    try:
        ccfg = cell_config(cfg, params)
        runner = run_em if method == "em" else run_threshold
        result, out = runner(ccfg, seed)
        row.update(result)
        delta = float(ccfg["instance"]["delta"])
        row["separated"] = bool(result["max_err"] < delta / 2)
    except (MLRError, ValueError, ArithmeticError, AssertionError) as exc:
        row.update(separated=False, max_err=float("nan"), mean_err=float("nan"))
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _run_cell_packed(args):
    raw, key, params, seed = args
    return run_cell(ExperimentConfig.from_dict(raw), key, params, seed)


def _write_manifest(path, done):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "completed": sorted(done)}, fh, indent=1)
    os.replace(tmp, path)


def _read_manifest(path):
    if not os.path.exists(path):
        return set()
    with open(path) as fh:
        return set(json.load(fh)["completed"])


def _prune_csv(path, done):
    # drop rows written after the last manifest update
    if not os.path.exists(path):
        return
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["cell"] in done]
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def run_sweep(cfg, out_dir, threads=None, max_cells=None):
    """Run every missing sweep cell, appending rows and updating the manifest.

    Returns the number of cells run in this call.  ``max_cells`` stops
    early, which is how interruption is exercised in tests.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    manifest = os.path.join(out_dir, "sweep_manifest.json")
    done = _read_manifest(manifest)
    _prune_csv(csv_path, done)
    todo = [c for c in sweep_cells(cfg) if c[0] not in done]
    if max_cells is not None:
        todo = todo[:max_cells]
    threads = threads or int(os.environ.get("MLR_THREADS", "1"))

    def record(row):
        append_csv(csv_path, [row], SWEEP_COLUMNS)
        done.add(row["cell"])
        _write_manifest(manifest, done)

    if threads <= 1:
        for key, params, seed in todo:
            logger.info("sweep cell %s", key)
            record(run_cell(cfg, key, params, seed))
    else:
        jobs = [(cfg.raw, key, params, seed) for key, params, seed in todo]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for row in pool.map(_run_cell_packed, jobs):
                record(row)
    if not os.path.exists(manifest):
        _write_manifest(manifest, done)
    return len(todo)


def read_sweep(out_dir):
    with open(os.path.join(out_dir, "sweep.csv"), newline="") as fh:
        return list(csv.DictReader(fh))
