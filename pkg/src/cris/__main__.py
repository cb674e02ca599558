"""CLI entry point: python -m cris <command>"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import optuna

from ._version import __version__
from .errors import CrisError, ExperimentSpecError

logger = logging.getLogger("cris")


def _cell(spec, args: argparse.Namespace):
    from .backbones import BackboneKind
    from .experiments import GridCell
    from .training import Strategy

    names = [d.name for d in spec.datasets]
    dataset = args.dataset or names[0]
    if dataset not in names:
        raise ExperimentSpecError(f"Dataset {dataset!r} is not in the experiment ({names})")
    return GridCell(dataset, BackboneKind(args.backbone), Strategy(args.strategy))


def _source(spec, name: str):
    return next(d for d in spec.datasets if d.name == name)


def prepare_data_cmd(args: argparse.Namespace) -> None:
    """Handle: prepare-data <root> --dataset {kvasir|cvc|synth}"""
    from .data import DatasetLayout, SplitSpec, load_dataset, split_dataset, synth_shapes, write_dataset
    from .persistence import write_manifest

    size = (args.size, args.size)
    root = Path(args.root)
    if args.dataset == "synth":
        d = synth_shapes(args.n, size, seed=args.seed, name=root.name or "synth")
        write_dataset(d, root)
        print(f"  wrote {len(d)} synthetic samples to {root}")
    d = load_dataset(DatasetLayout.for_root(root, args.dataset), size, name=root.name)
    splits = split_dataset(d, SplitSpec(seed=args.seed))
    print(f"  {d.name}: {len(d)} pairs at {size[0]}x{size[1]}")
    print(f"  split (seed {args.seed}): train={len(splits.train)} val={len(splits.val)} test={len(splits.test)}")
    if args.manifest:
        digest = write_manifest(args.manifest, splits.assignments())
        print(f"  manifest {args.manifest} sha256 {digest}")
    print("\nDone.")


def tune_cmd(args: argparse.Namespace) -> None:
    """Handle: tune <experiment.yaml> --dataset NAME --backbone KIND --strategy NAME"""
    from .experiments import load_experiment, prepare_splits
    from .tuning import tune

    spec = load_experiment(args.spec)
    cell = _cell(spec, args)
    splits, digest = prepare_splits(spec, _source(spec, cell.dataset))
    best, records = tune(
        spec.tuning, (splits.train, splits.val),
        spec.training.with_updates(strategy=cell.strategy), lambda: spec.build_model(cell),
        seed=spec.master_seed, study_dir=spec.output_dir / cell.name / "trials", n_jobs=spec.n_jobs,
        manifest_hash=digest,
    )
    for r in records:
        print(f"  trial {r.trial_id:3d}: lr={r.learning_rate:.3g} {r.status.value:8s} dice={r.final_score:.4f}")
    print(f"\nBest learning rate for {cell.name}: {best.learning_rate:.4g}")


def train_cmd(args: argparse.Namespace) -> None:
    """Handle: train <experiment.yaml> --dataset NAME --backbone KIND --strategy NAME [--lr X]"""
    from .experiments import load_experiment, prepare_splits
    from .persistence import save_checkpoint
    from .training import train

    spec = load_experiment(args.spec)
    cell = _cell(spec, args)
    splits, digest = prepare_splits(spec, _source(spec, cell.dataset))
    cell_dir = spec.output_dir / cell.name
    cfg = spec.training.with_updates(strategy=cell.strategy, checkpoint_dir=str(cell_dir / "checkpoints"))
    if args.lr is not None:
        cfg = cfg.with_updates(learning_rate=args.lr)
    model, history = train(
        spec.build_model(cell), (splits.train, splits.val), cfg,
        resume_from=args.resume, manifest_hash=digest,
    )
    history.to_csv(cell_dir / "history.csv", digest)
    ckpt = save_checkpoint(
        model, None, len(history) - 1, cell_dir / "model.ckpt",
        history=history.to_dicts(), train_config=cfg.to_dict(), manifest_hash=digest,
    )
    for r in history:
        print(f"  epoch {r.epoch:3d} {r.active_loss:3s} loss={r.train_loss:.5f} "
              f"val_dice={r.val_dice:.4f} val_mse={r.val_mse:.5f}")
    print(f"\nDone. Checkpoint written to {ckpt}")


def evaluate_cmd(args: argparse.Namespace) -> None:
    """Handle: evaluate <model.ckpt> <experiment.yaml> [--dataset NAME]"""
    from .experiments import load_experiment, prepare_splits
    from .persistence import load_checkpoint, write_report
    from .training import evaluate_model

    spec = load_experiment(args.spec)
    names = [d.name for d in spec.datasets]
    dataset = args.dataset or names[0]
    if dataset not in names:
        raise ExperimentSpecError(f"Dataset {dataset!r} is not in the experiment ({names})")
    ckpt = load_checkpoint(args.checkpoint)
    splits, digest = prepare_splits(spec, _source(spec, dataset))
    if ckpt.manifest_hash and ckpt.manifest_hash != digest:
        logger.warning("Checkpoint was trained on split %s, evaluating on %s",
                       ckpt.manifest_hash[:12], digest[:12])
    strategy = (ckpt.train_config or {}).get("strategy", "")
    report = evaluate_model(
        ckpt.model, splits.train, splits.test, spec.threshold_grid,
        model=ckpt.config["backbone"]["kind"], dataset=dataset, strategy=strategy,
        manifest_hash=digest,
    )
    out = write_report(report, Path(args.out) if args.out else Path(args.checkpoint).parent)
    print(f"  dice={report.dice:.4f} mse={report.mse:.4f} threshold={report.best_threshold:.2f}")
    print(f"\nDone. Report written to {out}")


def run_grid_cmd(args: argparse.Namespace) -> None:
    """Handle: run-grid <experiment.yaml> [--dry-run]"""
    from .experiments import load_experiment, run_grid
    from .report import emit_tables, load_reports

    spec = load_experiment(args.spec)
    if args.dry_run:
        print(spec.describe())
        print(f"\nDry run: {len(spec.cells())} cell(s) resolved (nothing trained).")
        return
    results = run_grid(spec)
    for name, report in results.items():
        status = "FAILED" if report is None else f"dice={report.dice:.4f} mse={report.mse:.4f}"
        print(f"  {name}: {status}")
    reports = load_reports(spec.output_dir)
    if reports:
        for path in emit_tables(reports, spec.output_dir, crf_placeholder=args.crf_placeholder):
            print(f"  table {path}")
    ok = sum(1 for r in results.values() if r is not None)
    print(f"\nDone. {ok}/{len(results)} cell(s) completed.")


def emit_table_cmd(args: argparse.Namespace) -> None:
    """Handle: emit-table <results-dir>"""
    from .report import emit_tables, load_reports

    reports = load_reports(args.results_dir)
    if not reports:
        raise FileNotFoundError(f"No report.csv files under {args.results_dir}")
    for path in emit_tables(reports, args.results_dir, crf_placeholder=args.crf_placeholder):
        print(f"  {path}")
    print(f"\nDone. {len(reports)} report(s) tabulated.")


def emit_plots_cmd(args: argparse.Namespace) -> None:
    """Handle: emit-plots <results-dir> [--samples N]"""
    from .experiments import emit_plots

    written = emit_plots(args.results_dir, samples=args.samples)
    for path in written:
        print(f"  {path}")
    print(f"\nDone. {len(written)} figure(s) written.")


def _add_cell_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("spec", help="experiment YAML file")
    p.add_argument("--dataset", help="dataset name from the experiment (default: first)")
    p.add_argument("--backbone", choices=["unet", "unetpp", "segnet"], default="unet")
    p.add_argument("--strategy", choices=["backbone_only", "backbone_fcn_joint", "cris"], default="cris")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cris", description="Segmentation refinement experiments: train, tune, evaluate, report."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="validate (or generate) a dataset and show its split")
    p.add_argument("root")
    p.add_argument("--dataset", choices=["kvasir", "cvc", "synth"], required=True)
    p.add_argument("--size", type=int, default=128, help="square resize target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=60, help="synthetic sample count")
    p.add_argument("--manifest", help="write the split manifest to this path")
    p.set_defaults(func=prepare_data_cmd)

    p = sub.add_parser("tune", help="learning-rate search for one grid cell")
    _add_cell_args(p)
    p.set_defaults(func=tune_cmd)

    p = sub.add_parser("train", help="train one grid cell")
    _add_cell_args(p)
    p.add_argument("--lr", type=float, help="learning rate (default: from the experiment)")
    p.add_argument("--resume", help="epoch checkpoint to resume from")
    p.set_defaults(func=train_cmd)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset's test split")
    p.add_argument("checkpoint")
    p.add_argument("spec", help="experiment YAML file")
    p.add_argument("--dataset")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=evaluate_cmd)

    p = sub.add_parser("run-grid", help="run every dataset x backbone x strategy cell")
    p.add_argument("spec")
    p.add_argument("--dry-run", action="store_true", help="validate and print the grid only")
    p.add_argument("--no-crf-placeholder", dest="crf_placeholder", action="store_false")
    p.set_defaults(func=run_grid_cmd)

    p = sub.add_parser("emit-table", help="markdown tables from a results directory")
    p.add_argument("results_dir")
    p.add_argument("--no-crf-placeholder", dest="crf_placeholder", action="store_false")
    p.set_defaults(func=emit_table_cmd)

    p = sub.add_parser("emit-plots", help="PR curves and probability-map grids")
    p.add_argument("results_dir")
    p.add_argument("--samples", type=int, default=1)
    p.set_defaults(func=emit_plots_cmd)
    return parser


def _error_record(exc: BaseException) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    optuna.logging.set_verbosity(optuna.logging.DEBUG if args.verbose else optuna.logging.WARNING)
    try:
        args.func(args)
    except (CrisError, FileNotFoundError) as exc:
        _error_record(exc)
        return 1
    except Exception as exc:
        logger.debug("Unhandled error", exc_info=True)
        _error_record(exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
