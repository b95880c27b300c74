"""
SuperLoRA command line.

Commands:
    sweep        parameter counts over a hyperparameter grid (CSV)
    materialize  initialize an adapter, write it and print its summary
    train-toy    train an adapter on the toy attention transfer task
    analyze      subspace similarity and distance between two SLTF matrices
"""

import argparse
import itertools
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

src_path = os.path.dirname(os.path.abspath(__file__))
if src_path not in sys.path:
    sys.path.insert(0, src_path)

import pandas as pd  # noqa: E402

from adapter import (SuperLoraConfig, classify_variant, count_params, derive_seed,  # noqa: E402
                     init_adapter, load_config, materialize_deltas, save_adapter)
from config_manager import ConfigManager  # noqa: E402
from errors import InfeasibleConfigError, InvalidInputError, SuperLoraError  # noqa: E402
from geometry import NORMS, analyze  # noqa: E402
from grouping import WeightManifest, bundled_manifest_path  # noqa: E402
from Libs.log import setup_logger  # noqa: E402
from tensor_core import read_sltf  # noqa: E402
from trainer import SyntheticTask, ToyModel, TrainConfig, converged, train  # noqa: E402


RUNTIME_CONFIG_FILE = "config/superlora.json"
SWEEP_COLUMNS = ["variant", "G", "group_mode", "M", "K", "r", "rho", "core", "projection", "reshape", "params"]

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str], config: ConfigManager) -> None:
    """Root logger from the runtime config; ``--log-level`` wins over the file."""
    settings = config.get_logging_settings()
    setup_logger(None, settings.get('file'), level or settings.get('level', 'INFO'))


def resolve_manifest(path_or_name: str) -> WeightManifest:
    """Load a manifest file, or a bundled one by short name (``vit_base_qv``, ``unet_qv``)."""
    if os.path.exists(path_or_name):
        return WeightManifest.load(path_or_name)
    bundled = bundled_manifest_path(path_or_name)
    if os.path.exists(bundled):
        return WeightManifest.load(bundled)
    raise InvalidInputError(f"Manifest {path_or_name!r} is neither a file nor a bundled manifest")


def parse_budget(text: Optional[str]) -> Optional[Tuple[float, float]]:
    if not text:
        return None
    try:
        low, high = (float(x) for x in text.split(':'))
    except ValueError:
        raise InvalidInputError(f"--budget must look like MIN:MAX, got {text!r}")
    if low > high:
        raise InvalidInputError(f"--budget minimum {low} exceeds maximum {high}")
    return low, high


def expand_grid(grid: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Cross product of the grid's value lists, in key order then value order."""
    keys = [k for k in grid if k != "budget"]
    values = [v if isinstance(v, list) else [v] for v in (grid[k] for k in keys)]
    if any(not v for v in values):
        raise InvalidInputError("Every grid entry needs at least one value")
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _format_rank(rank: Any) -> str:
    if isinstance(rank, (list, tuple)):
        return "x".join(str(r) for r in rank)
    return str(rank)


def run_sweep(manifest: WeightManifest, grid: Dict[str, Any],
              budget: Optional[Tuple[float, float]] = None,
              max_ratio: float = 4.0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Evaluate every grid point.

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: feasible rows sorted by params, and rejected points with reasons
    """
    if budget is None and grid.get("budget") is not None:
        low, high = grid["budget"]
        budget = (float(low), float(high))
    rows, rejected = [], []
    points = expand_grid(grid)
    for point in points:
        try:
            config = SuperLoraConfig.from_dict(point)
            params = count_params(config, manifest, max_ratio)
        except (InvalidInputError, InfeasibleConfigError) as e:
            rejected.append({"config": json.dumps(point, sort_keys=True), "reason": str(e)})
            continue
        if budget is not None and not budget[0] <= params <= budget[1]:
            rejected.append({"config": json.dumps(point, sort_keys=True),
                             "reason": f"params {params} outside budget [{budget[0]:g}, {budget[1]:g}]"})
            continue
        rows.append({
            "variant": classify_variant(config),
            "G": config.resolved_groups(manifest),
            "group_mode": config.group_mode,
            "M": config.order,
            "K": config.splits,
            "r": _format_rank(config.rank),
            "rho": config.rho,
            "core": config.core,
            "projection": config.projection,
            "reshape": config.reshape,
            "params": params,
        })
    logger.info(f"Sweep: {len(points)} grid points, {len(rows)} feasible, {len(rejected)} rejected")
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    table = table.sort_values("params", kind="mergesort").reset_index(drop=True)
    return table, pd.DataFrame(rejected, columns=["config", "reason"])


def cmd_sweep(args: argparse.Namespace, config: ConfigManager) -> int:
    manifest = resolve_manifest(args.manifest)
    with open(args.grid, 'r', encoding='utf-8') as f:
        grid = json.load(f)
    if not isinstance(grid, dict):
        raise InvalidInputError(f"Grid {args.grid} must be a JSON object of value lists")
    table, rejected = run_sweep(manifest, grid, parse_budget(args.budget),
                                config.get_grouping_settings()['max_ratio'])
    rejected_path = f"{args.out}.rejected.csv"
    rejected.to_csv(rejected_path, index=False)
    if table.empty:
        raise InfeasibleConfigError(f"No feasible configuration in the grid; see {rejected_path}")
    table.to_csv(args.out, index=False)
    logger.info(f"Wrote {len(table)} rows to {args.out}")
    print(json.dumps({"rows": len(table), "rejected": len(rejected), "out": args.out}))
    return 0


def cmd_materialize(args: argparse.Namespace, config: ConfigManager) -> int:
    adapter_config = load_config(args.config)
    manifest = resolve_manifest(args.manifest)
    seed = args.seed if args.seed is not None else config.get_default_seed()
    state = init_adapter(adapter_config, manifest, seed, config.get_grouping_settings()['max_ratio'])
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_adapter(state, args.out)
    print(json.dumps(state.summary()))
    return 0


def cmd_train_toy(args: argparse.Namespace, config: ConfigManager) -> int:
    adapter_config = load_config(args.config)
    if not os.path.exists(args.train):
        raise InvalidInputError(f"Training settings file {args.train} not found")
    settings = ConfigManager(args.train)
    seed = args.seed if args.seed is not None else config.get_default_seed()

    model = ToyModel.from_settings(settings.get_model_settings(), settings.get_task_settings(), derive_seed(seed, 0))
    task = SyntheticTask.generate(model, settings.get_task_settings(), derive_seed(seed, 1))
    train_config = TrainConfig.from_settings(settings.get_train_settings(), seed)
    state = init_adapter(adapter_config, model.adaptation_manifest(), derive_seed(seed, 2),
                         config.get_grouping_settings()['max_ratio'])

    os.makedirs(args.out, exist_ok=True)
    history = train(state, model, task, train_config, os.path.join(args.out, "metrics.jsonl"))
    save_adapter(state, os.path.join(args.out, "adapter.slad"))

    summary = state.summary()
    summary.update({"initial_loss": history[0]["loss"], "final_loss": history[-1]["loss"],
                    "final_eval_acc": history[-1]["eval_acc"],
                    "source_train_acc": model.accuracy(materialize_deltas(state), task.source_train)})
    print(json.dumps(summary))
    if not converged(history, train_config.target_loss_ratio):
        logger.error(f"Convergence check failed: final loss {history[-1]['loss']:.6f} > "
                     f"{train_config.target_loss_ratio} x initial loss {history[0]['loss']:.6f}")
        return 4
    return 0


def cmd_analyze(args: argparse.Namespace, config: ConfigManager) -> int:
    report = analyze(read_sltf(args.a), read_sltf(args.b), args.k, args.norm)
    print(json.dumps(report.to_dict()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superlora", description="SuperLoRA adapter toolkit")
    parser.add_argument('--runtime-config', default=RUNTIME_CONFIG_FILE,
                        help="Runtime settings JSON (logging, default seed, grouping)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING or ERROR")
        return p

    p = add("sweep", "Parameter counts over a hyperparameter grid")
    p.add_argument('--manifest', required=True, help="Manifest JSON or bundled name")
    p.add_argument('--grid', required=True, help="Grid JSON: config field -> list of values")
    p.add_argument('--out', required=True, help="Output CSV")
    p.add_argument('--budget', default=None, help="Parameter budget MIN:MAX")
    p.set_defaults(handler=cmd_sweep)

    p = add("materialize", "Initialize an adapter and write it")
    p.add_argument('--config', required=True, help="Adapter config JSON")
    p.add_argument('--manifest', required=True, help="Manifest JSON or bundled name")
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', required=True, help="Adapter file")
    p.set_defaults(handler=cmd_materialize)

    p = add("train-toy", "Train an adapter on the toy transfer task")
    p.add_argument('--config', required=True, help="Adapter config JSON")
    p.add_argument('--train', required=True, help="Toy training settings JSON")
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--out', required=True, help="Output directory")
    p.set_defaults(handler=cmd_train_toy)

    p = add("analyze", "Geometry of two weight-update matrices")
    p.add_argument('--a', required=True, help="Reference matrix (SLTF)")
    p.add_argument('--b', required=True, help="Compared matrix (SLTF)")
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--norm', choices=NORMS, default="frobenius")
    p.set_defaults(handler=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = ConfigManager(args.runtime_config)
        setup_logging(args.log_level, config)
        return args.handler(args, config)
    except SuperLoraError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Input error: {e}")
        return InvalidInputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
