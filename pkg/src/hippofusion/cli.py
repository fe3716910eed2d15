"""Command-line entry point: ``hippofusion <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from hippofusion import __version__, db
from hippofusion.config import (
    deep_merge,
    get_output_dir,
    get_setting,
    get_workers,
    load_config,
    read_config_file,
    resolve_config,
    run_config_schema,
)
from hippofusion.errors import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_UNEXPECTED,
    EXIT_USAGE,
    ConfigError,
    HippoFusionError,
    IncompatibleOptionsError,
    ManifestError,
    MissingFileError,
)
from hippofusion.gradcheck import TOLERANCE, run_suite
from hippofusion.harness import (
    TEST_SETS,
    build_plan,
    config_echo,
    evaluate,
    load_data,
    load_manifest,
    prepare_dataset,
    train,
    write_json,
    write_run_outputs,
)
from hippofusion.data import realize_sample, save_sample
from hippofusion.nifti import read_nifti
from hippofusion.progress import ProgressCallback
from hippofusion.report import load_runs, summary_json, write_report
from hippofusion.run_service import cancel_run, reference_grid, sweep
from hippofusion.synth import write_synth_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="run configuration JSON (a config_echo.json also works)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted config key; VALUE is parsed as JSON, else taken as a string",
    )
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--output-dir", "-o", help="output directory (default $HIPPOFUSION_OUTPUT_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hippofusion",
        description="Multimodal hippocampal ROI fusion networks for AD/MCI/NC classification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic NIfTI cohort and its manifest")
    _add_config_options(p)

    p = sub.add_parser("ingest", help="validate every volume referenced by a manifest")
    p.add_argument("manifest", help="dataset manifest JSON")

    p = sub.add_parser("extract", help="write realized samples to a sample store")
    _add_config_options(p)
    p.add_argument("--sets", nargs="+", default=["train", *TEST_SETS], choices=["train", *TEST_SETS])
    p.add_argument("--limit", type=int, help="at most this many samples per set")

    p = sub.add_parser("augment", help="plan test hold-out, balancing augmentation and test sets")
    _add_config_options(p)

    p = sub.add_parser("train", help="train one run and write its log, summary and checkpoint")
    _add_config_options(p)
    p.add_argument("--workers", type=int, help="parallel evaluation workers")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the three test sets")
    _add_config_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workers", type=int, help="parallel evaluation workers")

    p = sub.add_parser("sweep", help="run a grid of configurations")
    _add_config_options(p)
    p.add_argument("--grid", help="JSON list of config layers, each merged over the base config")
    p.add_argument("--reference-grid", action="store_true", help="2 input modes x 8 (ROI, architecture) pairings")
    p.add_argument("--all-modes", action="store_true", help="with --reference-grid, use all four input modes")
    p.add_argument("--pair", choices=["AD-NC", "AD-MCI", "MCI-NC"], help="with --reference-grid, the classifier pair")
    p.add_argument("--resume", action="store_true", help="skip runs the registry lists as completed")
    p.add_argument("--workers", type=int, help="runs trained in parallel")

    p = sub.add_parser("runs", help="list or cancel the runs a sweep registered")
    p.add_argument("sweep_dir", help="sweep output directory holding runs.db")
    p.add_argument("--status", choices=["pending", "running", *db.FINISHED], help="only runs in this state")
    p.add_argument("--cancel", type=int, metavar="RUN_ID", help="cancel a pending or running run")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and a tiny network")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--tolerance", type=float, default=TOLERANCE)

    p = sub.add_parser("report", help="render top-mean tables and per-curve CSVs from run directories")
    p.add_argument("runs", nargs="+", help="run or sweep directories")
    p.add_argument("--output-dir", "-o", help="also write report.txt and curves/")
    p.add_argument("--json", action="store_true", help="print the run summaries as JSON instead")

    p = sub.add_parser("schema", help="print the run configuration JSON schema")
    p.add_argument("--write", help="write the schema to this file instead")
    return parser


def configure_logging(verbose: int) -> None:
    if verbose >= 2:
        level = "DEBUG"
    elif verbose == 1:
        level = "INFO"
    else:
        level = str(get_setting("log_level")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format=LOG_FORMAT, stream=sys.stderr)


def _resolved(args) -> Any:
    return load_config(args.config, args.overrides, args.seed)


def _echo(out_dir: Path, run) -> None:
    write_json(out_dir / "config_echo.json", config_echo(run))


def cmd_synth(args) -> int:
    run = _resolved(args)
    out_dir = get_output_dir(args.output_dir)
    synth = run.data.synth
    if synth is None:
        raise IncompatibleOptionsError("synth needs data.synth, but the config names a manifest")
    manifest = write_synth_dataset(out_dir, synth, run.roi.centers, [run.network.roi_size])
    _echo(out_dir, run)
    counts: Dict[str, int] = {}
    for entry in manifest.subjects:
        counts[entry.diagnosis] = counts.get(entry.diagnosis, 0) + 1
    print(f"Wrote {len(manifest.subjects)} subjects to {out_dir / 'manifest.json'}")
    for diagnosis, count in counts.items():
        print(f"  {diagnosis}: {count}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    for entry in manifest.subjects:
        for modality, rel in entry.files.items():
            path = Path(rel) if Path(rel).is_absolute() else base / rel
            image = read_nifti(path)
            if manifest.volume_shape is not None and tuple(image.grid.shape) != tuple(manifest.volume_shape):
                raise ManifestError(
                    f"{path}: shape {image.grid.shape} differs from declared {tuple(manifest.volume_shape)}",
                    subject_id=entry.subject_id,
                )
            info = image.describe()
            print(
                f"{entry.subject_id} {modality} {path.name}: shape {info['shape']} "
                f"{info['datatype']} {info['endianness']} slope {info['scl_slope']} "
                f"inter {info['scl_inter']} range [{info['min']:.4g}, {info['max']:.4g}]"
            )
    print(f"{len(manifest.subjects)} subjects OK")
    return EXIT_OK


def cmd_extract(args) -> int:
    run = _resolved(args)
    out_dir = get_output_dir(args.output_dir)
    bank, manifest = load_data(run)
    dataset = prepare_dataset(run, bank, manifest)
    pipelines = run.network.input_pipelines
    labels = [p.label for p in pipelines]
    sets = {"train": dataset.train_pool, **dataset.test_sets}
    for name in args.sets:
        samples = sets[name][: args.limit] if args.limit else sets[name]
        for sample in samples:
            tensors = realize_sample(bank, sample, pipelines, run.network.roi_size)
            save_sample(out_dir / "samples" / name, sample, tensors, labels)
        print(f"{name}: {len(samples)} samples -> {out_dir / 'samples' / name}")
    _echo(out_dir, run)
    return EXIT_OK


def cmd_augment(args) -> int:
    run = _resolved(args)
    out_dir = get_output_dir(args.output_dir)
    bank, manifest = load_data(run)
    plan = build_plan(run, bank, manifest)
    if manifest is not None:
        base = Path(run.data.manifest).parent
        for entry in plan.subjects:
            entry.files = {
                m: str((Path(p) if Path(p).is_absolute() else base / p).resolve()) for m, p in entry.files.items()
            }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.augmented.json"
    path.write_text(plan.model_dump_json(indent=2))
    _echo(out_dir, run)

    counts: Dict[str, Dict[str, int]] = {}
    for sample in plan.train_samples:
        row = counts.setdefault(sample.diagnosis, {"original": 0, "generated": 0})
        row[sample.kind] += 1
    print(f"{'class':<6}{'subjects':>9}{'test':>6}{'generated':>11}{'train':>7}  " + "  ".join(TEST_SETS))
    for diagnosis, row in counts.items():
        test_sizes = "  ".join(
            f"{sum(1 for s in plan.test_sets[name] if s.diagnosis == diagnosis):>5}" for name in TEST_SETS
        )
        print(
            f"{diagnosis:<6}{row['original'] + len(plan.test_subjects.get(diagnosis, [])):>9}"
            f"{len(plan.test_subjects.get(diagnosis, [])):>6}{row['generated']:>11}"
            f"{row['original'] + row['generated']:>7}  {test_sizes}"
        )
    print(f"Wrote {path}")
    return EXIT_OK


def _print_top_means(summary) -> None:
    for name, metrics in summary.top_mean.items():
        cells = []
        for metric, report in metrics.items():
            cells.append(f"{metric} {report.value:.3f} ± {report.half_width:.3f}" if report else f"{metric} n/a")
        print(f"  {name:<6} " + "  ".join(cells))


def cmd_train(args) -> int:
    run = _resolved(args)
    out_dir = get_output_dir(args.output_dir)
    workers = get_workers(args.workers if args.workers is not None else run.training.workers)
    bank, manifest = load_data(run)
    dataset = prepare_dataset(run, bank, manifest)
    progress = ProgressCallback(lambda msg: logger.info(msg))
    result = train(run, dataset, progress=progress, workers=workers)
    write_run_outputs(out_dir, run, result)
    print(f"{run.run_key}: {run.training.iterations} iterations, {result.summary.evaluations} evaluations")
    _print_top_means(result.summary)
    print(f"Outputs in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = _resolved(args)
    workers = get_workers(args.workers if args.workers is not None else run.training.workers)
    bank, manifest = load_data(run)
    dataset = prepare_dataset(run, bank, manifest)
    results = evaluate(args.checkpoint, dataset, run, workers)
    for name, ev in results.items():
        cells = []
        for metric in ("acc", "sen", "spc"):
            report = getattr(ev, metric)
            cells.append(
                f"{metric} {report.value:.3f} [{report.ci_low:.3f}, {report.ci_high:.3f}]"
                if report.value is not None
                else f"{metric} n/a"
            )
        c = ev.confusion
        print(f"{name:<6} n={ev.n:<4} " + "  ".join(cells) + f"  tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
    if args.output_dir:
        out_dir = Path(args.output_dir)
        write_json(out_dir / "evaluation.json", {k: v.model_dump(mode="json") for k, v in results.items()})
        _echo(out_dir, run)
    return EXIT_OK


def _grid_from_file(path: str, base_layer: Dict[str, Any], overrides: Sequence[str], seed: Optional[int]) -> List:
    if not Path(path).exists():
        raise MissingFileError(f"grid file not found: {path}", path=path)
    try:
        layers = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", key_path="grid") from None
    if not isinstance(layers, list):
        raise ConfigError(f"{path} must hold a JSON list of config layers", key_path="grid")
    return [resolve_config(deep_merge(base_layer, layer), overrides, seed) for layer in layers]


def cmd_sweep(args) -> int:
    if args.grid and args.reference_grid:
        raise IncompatibleOptionsError("--grid and --reference-grid are mutually exclusive")
    if (args.all_modes or args.pair) and not args.reference_grid:
        raise IncompatibleOptionsError("--all-modes and --pair only apply with --reference-grid")
    if not args.grid and not args.reference_grid:
        raise IncompatibleOptionsError("sweep needs --grid or --reference-grid")
    out_dir = get_output_dir(args.output_dir)
    workers = get_workers(args.workers)
    base_layer = read_config_file(args.config) if args.config else {}
    if args.reference_grid:
        base = resolve_config(base_layer, args.overrides, args.seed)
        grid = reference_grid(base, args.pair, args.all_modes)
    else:
        grid = _grid_from_file(args.grid, base_layer, args.overrides, args.seed)
    rows = sweep(grid, out_dir, workers=workers, resume=args.resume)
    for row in rows:
        acc = row.summary.top_mean["test0"]["acc"] if row.summary else None
        cell = f"{acc.value:.3f} ± {acc.half_width:.3f}" if acc else row.error or "n/a"
        print(f"{row.status:<10} {row.run.run_key:<50} test0 acc {cell}")
    print(f"Wrote {out_dir / 'sweep_table.csv'}")
    return EXIT_OK


def cmd_runs(args) -> int:
    db_path = Path(args.sweep_dir) / db.DB_NAME
    if not db_path.exists():
        raise MissingFileError(f"no run registry at {db_path}", path=str(db_path))
    if args.cancel is not None:
        if not cancel_run(db_path, args.cancel):
            raise IncompatibleOptionsError(f"run {args.cancel} is unknown or already finished", run_id=args.cancel)
        print(f"Cancelled run {args.cancel}")
        return EXIT_OK
    for record in db.list_runs(db_path, args.status):
        note = record["error_message"] or record["progress_message"] or ""
        print(f"{record['id']:>4} {record['status']:<10} {record['run_key']}  {note}".rstrip())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seeds, args.tolerance)
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, error in worst.items():
        print(f"{name:<16} max relative error {error:.3e}  {'ok' if error < args.tolerance else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_report(args) -> int:
    if args.json:
        if args.output_dir:
            raise IncompatibleOptionsError("--json prints to stdout; drop --output-dir")
        sys.stdout.write(summary_json(load_runs(args.runs)))
        return EXIT_OK
    sys.stdout.write(write_report(args.runs, args.output_dir))
    return EXIT_OK


def cmd_schema(args) -> int:
    text = json.dumps(run_config_schema(), indent=2, sort_keys=True) + "\n"
    if args.write:
        Path(args.write).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "augment": cmd_augment,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "runs": cmd_runs,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "schema": cmd_schema,
}


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except HippoFusionError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("unexpected error", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e), "details": {}}), file=sys.stderr)
        return EXIT_UNEXPECTED


def main() -> None:
    sys.exit(parse_and_dispatch())
