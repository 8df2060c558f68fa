"""Command-line entry point: train, eval, md, bench, balance and gen-toy."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .crystal import DatasetParseError, ValidationError, generate_lj_toy, load_dataset, write_dataset
from .model import CheckpointError, ModelConfig, load_checkpoint
from .sampler import SampleLoad, balance_assign, coefficient_of_variance, contiguous_assign
from .trainer import GraphDataset, TrainConfig, evaluate, load_state, read_metrics, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("crystal_gnn")

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class UsageError(Exception):
    """Bad flags, bad config or a missing input file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag name -> (config key, type, help). Defaults come from the config dataclasses.
_MODEL_FLAGS = {
    "--d": ("d", int, "feature width"),
    "--blocks": ("n_blocks", int, "interaction blocks"),
    "--n-radial": ("n_radial", int, "radial basis size"),
    "--n-angular": ("n_angular", int, "angular basis size"),
    "--p": ("p", int, "envelope exponent"),
    "--r-cut-atom": ("r_cut_atom", float, "atom graph cutoff in A"),
    "--r-cut-bond": ("r_cut_bond", float, "bond graph cutoff in A"),
    "--head-mode": ("head_mode", str, "decoupled or derivative-free-only-energy"),
}
_TRAIN_FLAGS = {
    "--epochs": ("epochs", int, "training epochs"),
    "--batch": ("global_batch", int, "global batch size"),
    "--workers": ("workers", int, "in-process data-parallel workers"),
    "--lr": ("base_lr", float, "base learning rate at batch lr_k"),
    "--lr-k": ("lr_k", int, "reference batch size of the learning-rate rule"),
    "--huber-delta": ("huber_delta", float, "Huber transition"),
    "--energy-weight": ("energy_weight", float, "energy loss prefactor"),
    "--force-weight": ("force_weight", float, "force loss prefactor"),
    "--stress-weight": ("stress_weight", float, "stress loss prefactor"),
    "--magmom-weight": ("magmom_weight", float, "magmom loss prefactor"),
    "--seed": ("seed", int, "random seed"),
}


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _add_flags(parser: argparse.ArgumentParser, table: dict, defaults: dict) -> None:
    for flag, (key, kind, text) in table.items():
        parser.add_argument(flag, dest=key, type=kind, default=None,
                            help=f"{text} (default: {defaults[key]})")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML or JSON file; flags override it")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")


def build_parser() -> argparse.ArgumentParser:
    model_defaults, train_defaults = _defaults(ModelConfig), _defaults(TrainConfig)
    parser = _Parser(prog="crystal-gnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train a model on a JSONL dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, help="training JSONL (required)")
    p.add_argument("--val", type=Path, help="validation JSONL")
    p.add_argument("--out", type=Path, help="output directory (default: run)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/state.ckpt")
    p.add_argument("--no-prefetch", dest="prefetch", action="store_const", const=False,
                   default=None, help="collate batches synchronously")
    p.add_argument("--no-balance", dest="balance", action="store_const", const=False,
                   default=None, help="split batches contiguously across workers")
    _add_flags(p, _MODEL_FLAGS, model_defaults)
    _add_flags(p, _TRAIN_FLAGS, train_defaults)

    p = sub.add_parser("eval", help="report MAEs of a checkpoint as JSON")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, help="model checkpoint (required)")
    p.add_argument("--data", type=Path, help="labeled JSONL (required)")
    p.add_argument("--out", type=Path, help="write JSON here instead of stdout")

    for name, text, steps in (("md", "run NVE dynamics", 1000), ("bench", "time MD steps", 10)):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--ckpt", type=Path, help="model checkpoint (required)")
        p.add_argument("--structure", type=Path, help="JSONL file; the first line is used (required)")
        p.add_argument("--steps", type=int, default=None, help=f"MD steps (default: {steps})")
        p.add_argument("--dt", type=float, default=None, help="time step in fs (default: 1.0)")
        p.add_argument("--temperature", type=float, default=None,
                       help="initial Maxwell-Boltzmann temperature in K (default: 0)")
        p.add_argument("--seed", type=int, default=None, help="velocity seed (default: 0)")
        default_out = "traj.jsonl" if name == "md" else "stdout"
        p.add_argument("--out", type=Path, help=f"output file (default: {default_out})")

    p = sub.add_parser("balance", help="compare per-worker loads of the two samplers as CSV")
    _add_common(p)
    p.add_argument("--data", "--dataset", dest="data", type=Path,
                   help="JSONL whose graph sizes give the loads; "
                   "without it loads are drawn from a long-tailed distribution")
    p.add_argument("--iterations", type=int, default=None, help="batches to draw (default: 10)")
    p.add_argument("--batch", dest="global_batch", type=int, default=None,
                   help=f"global batch size (default: {train_defaults['global_batch']})")
    p.add_argument("--workers", type=int, default=None, help="workers (default: 4)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    p = sub.add_parser("gen-toy", help="write a Lennard-Jones labeled toy dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, help="JSONL path (required)")
    p.add_argument("--n", type=int, default=None, help="structures (default: 64)")
    p.add_argument("--atoms", type=int, default=None, help="atoms per cell (default: 8)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    p.add_argument("--displacement", type=float, default=None,
                   help="Gaussian displacement in A (default: 0.05)")
    p.add_argument("--strain", type=float, default=None, help="max lattice strain (default: 0.02)")
    return parser


_COMMAND_DEFAULTS = {
    "train": {"data": None, "val": None, "out": "run", "resume": False,
              **_defaults(ModelConfig), **_defaults(TrainConfig)},
    "eval": {"ckpt": None, "data": None, "out": None},
    "md": {"ckpt": None, "structure": None, "steps": 1000, "dt": 1.0, "temperature": 0.0,
           "seed": 0, "out": "traj.jsonl"},
    "bench": {"ckpt": None, "structure": None, "steps": 10, "dt": 1.0, "temperature": 0.0,
              "seed": 0, "out": None},
    "balance": {"data": None, "iterations": 10, "global_batch": 128, "workers": 4, "seed": 0,
                "out": None},
    "gen-toy": {"out": None, "n": 64, "atoms": 8, "seed": 0, "displacement": 0.05,
                "strain": 0.02},
}
_NOT_CONFIG = {"command", "config", "log_level"}


def _read_config(path: Path) -> dict:
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            data = tomllib.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a table of keys")
    return data


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then config file values, then explicitly given flags."""
    merged = dict(_COMMAND_DEFAULTS[args.command])
    if args.config is not None:
        data = _read_config(args.config)
        unknown = sorted(set(data) - set(merged))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(data)
    for key, value in vars(args).items():
        if key in _NOT_CONFIG or value is None:
            continue
        if key == "resume" and value is False and "resume" in merged:
            continue
        merged[key] = value
    for key in ("data", "val", "out", "ckpt", "structure"):
        if merged.get(key) is not None:
            merged[key] = str(merged[key])
    return merged


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise UsageError(f"--{key} is required")


def _existing(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is not None and not Path(cfg[key]).is_file():
            raise UsageError(f"file not found: {cfg[key]}")


def _split_config(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model = {k: v for k, v in cfg.items() if k in model_keys}
    for key in ("energy_hidden", "force_hidden", "stress_hidden", "magmom_hidden"):
        model[key] = tuple(model[key])
    try:
        return ModelConfig(**model), TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data")
    _existing(cfg, "data", "val")
    model_cfg, train_cfg = _split_config(cfg)
    structures = load_dataset(cfg["data"])
    val = load_dataset(cfg["val"]) if cfg["val"] else []
    out = Path(cfg["out"])
    resume, history = None, []
    if cfg["resume"]:
        state_path = out / "state.ckpt"
        if not state_path.is_file():
            raise UsageError(f"file not found: {state_path}")
        resume, saved_cfg = load_state(state_path)
        if saved_cfg != model_cfg:
            raise UsageError("model configuration differs from the checkpoint being resumed")
        metrics = out / "metrics.csv"
        history = read_metrics(metrics)[: resume.epoch] if metrics.is_file() else []
    train(structures, train_cfg, model_cfg, out, val, resume=resume, history=history)
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "ckpt", "data")
    _existing(cfg, "ckpt", "data")
    model_cfg, params = load_checkpoint(cfg["ckpt"])
    data = GraphDataset.build(load_dataset(cfg["data"]), model_cfg)
    result = {f"{task}_mae": value for task, value in evaluate(params, model_cfg, data).items()}
    result["n_structures"] = len(data)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _md_setup(cfg: dict):
    from .md import MDState, initial_velocities
    from .crystal import masses_for

    _require(cfg, "ckpt", "structure")
    _existing(cfg, "ckpt", "structure")
    model_cfg, params = load_checkpoint(cfg["ckpt"])
    structures = load_dataset(cfg["structure"])
    if not structures:
        raise UsageError(f"no structure in {cfg['structure']}")
    structure = structures[0]
    velocities = None
    if cfg["temperature"] > 0:
        velocities = initial_velocities(masses_for(structure.atomic_numbers), cfg["temperature"],
                                        cfg["seed"])
    return model_cfg, params, MDState.start(structure, velocities, cfg["dt"])


def cmd_md(cfg: dict) -> int:
    from .md import model_forces, run

    model_cfg, params, state = _md_setup(cfg)
    states = run(state, model_forces(params, model_cfg), cfg["steps"], cfg["out"])
    drift = states[-1].momentum() - states[0].momentum()
    log.info("momentum drift %s amu A/fs", np.array2string(drift, precision=3))
    return 0


def cmd_bench(cfg: dict) -> int:
    from .md import bench_inference, write_bench_csv

    model_cfg, params, state = _md_setup(cfg)
    result = bench_inference(state.structure, params, model_cfg, cfg["steps"], cfg["dt"])
    write_bench_csv(cfg["out"] or sys.stdout, [result])
    return 0


def balance_rows(loads_per_batch: Sequence[Sequence[int]], workers: int) -> list[dict]:
    rows = []
    for iteration, batch in enumerate(loads_per_batch):
        loads = [SampleLoad(k, int(f)) for k, f in enumerate(batch)]
        default = contiguous_assign(loads, workers)
        balanced = balance_assign(loads, workers)
        cv_default = coefficient_of_variance(default.loads)
        cv_balanced = coefficient_of_variance(balanced.loads)
        for w in range(workers):
            rows.append({"iteration": iteration, "worker": w, "total_load": balanced.loads[w],
                         "cv_default": cv_default, "cv_balanced": cv_balanced})
    return rows


def long_tail_loads(rng: np.random.Generator, size: int) -> np.ndarray:
    """Log-normal feature numbers, loosely shaped like a materials dataset."""
    return np.maximum(1, np.round(np.exp(rng.normal(6.0, 1.0, size)))).astype(np.int64)


def cmd_balance(cfg: dict) -> int:
    _existing(cfg, "data")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["workers"] < 1 or cfg["global_batch"] < 1 or cfg["iterations"] < 1:
        raise UsageError("--workers, --batch and --iterations must be positive")
    if cfg["data"]:
        data = GraphDataset.build(load_dataset(cfg["data"]), ModelConfig())
        pool = np.array([f.feature_number for f in data.loads(range(len(data)))])
        batches = [pool[rng.choice(len(pool), min(cfg["global_batch"], len(pool)), replace=False)]
                   for _ in range(cfg["iterations"])]
    else:
        batches = [long_tail_loads(rng, cfg["global_batch"]) for _ in range(cfg["iterations"])]
    rows = balance_rows(batches, cfg["workers"])
    handle = open(cfg["out"], "w", newline="") if cfg["out"] else sys.stdout
    try:
        writer = csv.DictWriter(handle, ["iteration", "worker", "total_load", "cv_default",
                                         "cv_balanced"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if handle is not sys.stdout:
            handle.close()
    return 0


def cmd_gen_toy(cfg: dict) -> int:
    _require(cfg, "out")
    structures = generate_lj_toy(cfg["n"], cfg["atoms"], cfg["seed"],
                                 displacement=cfg["displacement"], strain=cfg["strain"])
    write_dataset(cfg["out"], structures)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "md": cmd_md,
    "bench": cmd_bench,
    "balance": cmd_balance,
    "gen-toy": cmd_gen_toy,
}


def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(f"error: {category}: {' '.join(str(message).split())}\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s",
                            stream=sys.stderr)
        cfg = effective_config(args)
        sys.stderr.write(json.dumps({"command": args.command, **cfg}, sort_keys=True) + "\n")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (DatasetParseError, ValidationError, CheckpointError) as exc:
        return _fail("input", exc, EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - one-line report for any runtime failure
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
