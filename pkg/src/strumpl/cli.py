"""Command-line front door: world generation, training, evaluation and the
ablation grid, driven by experiment config files.

Exit codes are a stable contract for scripting: 0 success, 2 config error,
3 missing input, 4 incompatibility between artefacts, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import model as M
from . import trainer as TR
from . import world as W
from .config import (AblationGrid, ConfigError, ExperimentConfig, apply_patch,
                     builtin_grid, parse_experiment_config, parse_grid)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4


class MissingInputError(FileNotFoundError):
    pass


class IncompatibilityError(RuntimeError):
    pass


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("STRUMPL_OUT", "strumpl_out"))


def _dataset_dir(args, exp: ExperimentConfig) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return _out_root(args) / exp.name / "dataset"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    exp = parse_experiment_config(args.config)
    dataset = W.generate_world(exp.world)
    target = _dataset_dir(args, exp)
    W.save_dataset(dataset, target)
    print(f"dataset written to {target}")
    return EXIT_OK


def _train_one_seed(exp: ExperimentConfig, dataset: W.Dataset, seed: int,
                    run_dir: Path, ds_hash: str) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump({"status": "running", "seed": seed, "name": exp.name}, fh, indent=2)
    train_cfg = TR.TrainConfig(**{**vars(exp.train), "seed": seed})
    run = TR.train(dataset, exp.model, exp.loss, train_cfg)
    run.manifest["seed"] = seed
    run.manifest["name"] = exp.name
    run.manifest["world_config"] = W.config_to_dict(exp.world)
    TR.write_run_dir(run, run_dir, dataset_hash=ds_hash)
    report = E.evaluate_model(run.best_params, dataset, "test", exp.eval)
    return {
        "seed": seed,
        "best_val_rmse_agb": run.best_val_rmse,
        "test_rmse_agb": report.per_variable["AGB"]["rmse"],
        "test_bias_agb": report.per_variable["AGB"]["bias"],
    }


def cmd_train(args) -> int:
    exp = parse_experiment_config(args.config)
    ds_dir = _dataset_dir(args, exp)
    if not (ds_dir / "manifest.json").exists():
        raise MissingInputError(f"dataset not found under {ds_dir}; run generate first")
    dataset = W.load_dataset(ds_dir)
    ds_hash = W.dataset_hash(ds_dir)
    seeds = [args.seed] if args.seed is not None else exp.seeds

    rows = []
    for seed in seeds:
        run_dir = _out_root(args) / exp.name / "runs" / f"seed_{seed}"
        rows.append(_train_one_seed(exp, dataset, seed, run_dir, ds_hash))
        print(f"seed {seed}: best val AGB RMSE {rows[-1]['best_val_rmse_agb']:.3f} "
              f"-> {run_dir}")

    summary_path = _out_root(args) / exp.name / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        metrics = ["best_val_rmse_agb", "test_rmse_agb", "test_bias_agb"]
        writer.writerow(["metric", "mean", "std", "n_seeds"])
        for metric in metrics:
            values = np.array([r[metric] for r in rows])
            writer.writerow([metric, f"{values.mean():.6g}", f"{values.std():.6g}",
                             len(values)])
    print(f"summary written to {summary_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    ckpt = run_dir / "best.strm"
    if not ckpt.exists():
        raise MissingInputError(f"no checkpoint at {ckpt}")
    ds_dir = Path(args.dataset)
    if not (ds_dir / "manifest.json").exists():
        raise MissingInputError(f"dataset not found under {ds_dir}")
    params = M.load_checkpoint(ckpt)
    dataset = W.load_dataset(ds_dir)
    if params.config.K != dataset.config.K:
        raise IncompatibilityError(
            f"checkpoint K={params.config.K} but dataset K={dataset.config.K}"
        )
    if params.config.C_in != dataset.config.C_in:
        raise IncompatibilityError(
            f"checkpoint C_in={params.config.C_in} but dataset C_in={dataset.config.C_in}"
        )

    eval_cfg = (parse_experiment_config(args.config).eval if args.config
                else E.EvalConfig())
    baseline_errors = None
    if args.bootstrap_against:
        other_ckpt = Path(args.bootstrap_against) / "best.strm"
        if not other_ckpt.exists():
            raise MissingInputError(f"no checkpoint at {other_ckpt}")
        other = M.load_checkpoint(other_ckpt)
        if other.config.K != dataset.config.K:
            raise IncompatibilityError("bootstrap baseline has a different K")
        baseline_errors = E.target_errors(other, dataset, "test")

    report = E.evaluate_model(params, dataset, "test", eval_cfg, baseline_errors)
    if not args.stratified:
        report.stratified = []
    if not args.calibration:
        report.calibration = None
    out_dir = Path(args.out) if args.out else run_dir / "eval"
    E.write_eval_report(report, out_dir)
    print(f"evaluation written to {out_dir}")
    return EXIT_OK


def _run_variant(payload) -> dict:
    """One ablation row; isolated so a pool worker can execute it."""
    base_cfg_path, overrides, name, out_root, seed, ds_dir = payload
    try:
        exp = parse_experiment_config(base_cfg_path)
        exp = apply_patch(exp, overrides)
        exp.name = f"{exp.name}-{name}"
        dataset = W.load_dataset(ds_dir)
        run_dir = Path(out_root) / "ablation" / name
        row = _train_one_seed(exp, dataset, seed, run_dir, W.dataset_hash(ds_dir))
        params = M.load_checkpoint(run_dir / "best.strm")
        report = E.evaluate_model(params, dataset, "test")
        result = {"variant": name, "status": "ok", "seed": seed}
        for var, metrics in report.per_variable.items():
            result[f"rmse_{var}"] = metrics["rmse"]
            if var == "AGB":
                result["bias_AGB"] = metrics["bias"]
        return result
    except Exception as exc:  # grid keeps going; the row records the failure
        return {"variant": name, "status": f"error: {exc}", "seed": seed}


def cmd_ablate(args) -> int:
    if args.grid == "standard":
        grid = builtin_grid()
    else:
        grid = parse_grid(args.grid)
    base_cfg = args.config or grid.base_path
    if base_cfg is None:
        raise ConfigError("ablation grid needs a base config (--config or [grid] base)")
    if not Path(base_cfg).exists():
        raise MissingInputError(f"base config not found: {base_cfg}")
    exp = parse_experiment_config(base_cfg)

    out_root = _out_root(args)
    ds_dir = _dataset_dir(args, exp)
    if not (ds_dir / "manifest.json").exists():
        dataset = W.generate_world(exp.world)
        W.save_dataset(dataset, ds_dir)
    seed = args.seed if args.seed is not None else exp.seeds[0]

    payloads = [
        (str(base_cfg), overrides, name, str(out_root), seed, str(ds_dir))
        for name, overrides in grid.variants.items()
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_variant, payloads))
    else:
        rows = [_run_variant(p) for p in payloads]

    table = out_root / "ablation" / "results.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    columns = sorted({k for row in rows for k in row} - {"variant", "status", "seed"})
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "status", "seed"] + columns)
        for row in rows:
            writer.writerow([row["variant"], row["status"], row["seed"]]
                            + [row.get(c, "") for c in columns])
    print(f"ablation table written to {table}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strumpl",
        description="Synthetic-world training framework for multi-task dense "
                    "regression with MNAR-corrected supervision",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", default=None)
    gen.add_argument("--dataset", default=None, help="explicit dataset directory")

    train = sub.add_parser("train", help="train one run per configured seed")
    train.add_argument("--config", required=True)
    train.add_argument("--dataset", default=None)
    train.add_argument("--seed", type=int, default=None, help="train only this seed")
    train.add_argument("--out", default=None)

    ev = sub.add_parser("evaluate", help="evaluate a run directory on a dataset")
    ev.add_argument("--run", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--config", default=None, help="experiment file supplying [eval]")
    ev.add_argument("--out", default=None)
    ev.add_argument("--stratified", action="store_true")
    ev.add_argument("--calibration", action="store_true")
    ev.add_argument("--bootstrap-against", dest="bootstrap_against", default=None)

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--grid", required=True, help="grid file or 'standard'")
    ab.add_argument("--config", default=None, help="base experiment config")
    ab.add_argument("--dataset", default=None)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--jobs", type=int, default=1)
    ab.add_argument("--out", default=None)

    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, W.WorldError, M.ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except IncompatibilityError as exc:
        print(f"incompatible artefacts: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except Exception as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
