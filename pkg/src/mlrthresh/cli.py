"""Command line entry point: ``mlrthresh {gen,recover,verify,sweep,em}``.

Exit codes: 0 success, 2 validation, 3 budget infeasible, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

from . import experiments, verify
from .exceptions import InfeasibleBudget, MLRError, ValidationError
from .model import sample_dataset, write_dataset

logger = logging.getLogger("mlrthresh")

EXIT_OK, EXIT_VALIDATION, EXIT_BUDGET, EXIT_NUMERICAL = 0, 2, 3, 4


def _load_config(args):
    cfg = experiments.ExperimentConfig.load(args.config) if args.config else experiments.ExperimentConfig.from_dict({})
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.backend is not None:
        updates["cluster.backend"] = args.backend
    if updates:
        cfg = cfg.replace(**updates)
    return cfg


def _out_dir(args, cfg):
    path = args.out or cfg["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _say(args, msg):
    if not args.quiet:
        print(msg)


def cmd_generate(args, cfg):
    out = _out_dir(args, cfg)
    n = int(cfg["gen"]["n_samples"])
    for seed in cfg.seeds:
        instance = cfg.instance(seed)
        with open(os.path.join(out, f"instance_seed{seed}.json"), "w") as fh:
            json.dump(instance.to_dict(), fh, indent=1)
        path = os.path.join(out, f"dataset_seed{seed}.csv")
        write_dataset(sample_dataset(instance, n, seed), path)
        _say(args, f"wrote {n} samples to {path}")
        n_raw, rates = experiments.raw_budget(cfg, instance)
        _say(
            args,
            f"seed {seed}: acceptance rate {rates.mixture:.6g}, per component "
            f"{[float(f'{q:.6g}') for q in rates.per_component]}; "
            f"recovery needs {n_raw} raw samples for {cfg['kept_target']} kept per component",
        )
    return EXIT_OK


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def _run_and_record(args, cfg, runner, name):
    out = _out_dir(args, cfg)
    csv_path = os.path.join(out, f"{name}.csv")
    status = EXIT_OK
    for seed in cfg.seeds:
        json_path = os.path.join(out, f"{name}_seed{seed}.json")
        try:
            row, result = runner(cfg, seed)
        except MLRError as exc:
            _write_json(json_path, {"schema": "mlr-recovery v1", "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            logger.error("seed %s failed: %s", seed, exc)
            status = max(status, exc.exit_code)
            continue
        experiments.append_csv(csv_path, [row], experiments.RECOVER_COLUMNS)
        payload = result.to_dict()
        payload["seed"] = seed
        _write_json(json_path, payload)
        _say(args, f"seed {seed}: max_err={row['max_err']:.5g} mean_err={row['mean_err']:.5g} n_raw={row['n_raw']}")
    return status


def cmd_recover(args, cfg):
    return _run_and_record(args, cfg, experiments.run_threshold, "recover")


def cmd_em(args, cfg):
    return _run_and_record(args, cfg, experiments.run_em, "em")


def cmd_verify(args, cfg):
    out = _out_dir(args, cfg)
    v = cfg["verify"]
    seed = cfg.seeds[0]
    reports = verify.verify_all(
        cfg.instance(seed), cfg.band_config(), int(v["s_max"]), int(v["M"]),
        int(v["coordinate_M"]), int(v["n_directions"]), seed,
    )
    with open(os.path.join(out, "verify.jsonl"), "w") as fh:
        for rep in reports:
            for line in rep.json_lines():
                fh.write(line + "\n")
                _say(args, line)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERICAL


def cmd_sweep(args, cfg):
    out = _out_dir(args, cfg)
    n = experiments.run_sweep(cfg, out)
    _say(args, f"ran {n} sweep cells into {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


COMMANDS = {"gen": cmd_generate, "recover": cmd_recover, "verify": cmd_verify, "sweep": cmd_sweep, "em": cmd_em}


def build_parser():
    parser = argparse.ArgumentParser(prog="mlrthresh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config's seeds with one seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--backend", help="clustering backend override")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except InfeasibleBudget as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MLRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
