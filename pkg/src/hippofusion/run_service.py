"""Sweep execution against the run registry."""

from __future__ import annotations

import asyncio
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from hippofusion import db
from hippofusion.errors import ConfigError, HippoFusionError, TrainingCancelled
from hippofusion.harness import TEST_SETS, Dataset, load_data, prepare_dataset, train, write_run_outputs
from hippofusion.models import INPUT_MODES, REFERENCE_PAIRINGS, RunConfig, RunSummary
from hippofusion.progress import ProgressCallback
from hippofusion.seeding import stable_key

logger = logging.getLogger(__name__)

REFERENCE_MODES = ("sMRI_L+sMRI_R", "sMRI_L+sMRI_R+DTI_L+DTI_R")
REFERENCE_ROI_ARCHITECTURES: Tuple[Tuple[int, str], ...] = tuple(
    (roi, name) for roi in (28, 38, 42, 48) for name in sorted(REFERENCE_PAIRINGS) if roi in REFERENCE_PAIRINGS[name]
)
TABLE_COLUMNS = (
    ["classifier_pair", "input_mode", "roi_size", "architecture", "status"]
    + [f"{name}_{metric}{suffix}" for name in TEST_SETS for metric in ("acc", "sen", "spc") for suffix in ("", "_hw")]
    + ["error"]
)

# Store active run callbacks so a run can be cancelled while it trains
_active_runs: Dict[int, ProgressCallback] = {}
_cancelled_runs: set[int] = set()


def run_seed(base_seed: int, run_key: str) -> int:
    """Per-run master seed; independent of grid order."""
    return (base_seed + stable_key(run_key)) % (2 ** 63)


def reference_grid(base: RunConfig, classifier_pair: Optional[str] = None, all_modes: bool = False) -> List[RunConfig]:
    """Input modes × the published (ROI size, architecture) pairings, one seed per run."""
    modes = tuple(INPUT_MODES) if all_modes else REFERENCE_MODES
    grid = []
    for mode in modes:
        for roi, name in REFERENCE_ROI_ARCHITECTURES:
            payload = base.model_dump()
            payload["classifier_pair"] = classifier_pair or base.classifier_pair
            payload["input_mode"] = mode
            payload["network"] = {
                **{k: v for k, v in payload["network"].items() if k not in ("conv_kernel_sizes", "conv_filter_counts", "fc_units")},
                "name": name,
                "roi_size": roi,
                "input_pipelines": [],
            }
            run = RunConfig.model_validate(payload)
            grid.append(run.model_copy(update={"seed": run_seed(base.seed, run.run_key)}))
    return grid


def run_dir(out_dir: Union[str, Path], run: RunConfig) -> Path:
    return Path(out_dir) / run.run_key.replace("+", "_").replace("/", "__")


def _data_key(run: RunConfig) -> str:
    return json.dumps(
        {
            "data": run.data.model_dump(mode="json"),
            "roi": run.roi.model_dump(mode="json"),
            "margin": run.augmentation.max_shift,
        },
        sort_keys=True,
    )


@dataclass
class SweepRow:
    run: RunConfig
    status: str
    summary: Optional[RunSummary] = None
    error: Optional[str] = None

    def cells(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "classifier_pair": self.run.classifier_pair,
            "input_mode": self.run.input_mode,
            "roi_size": self.run.network.roi_size,
            "architecture": self.run.network.name,
            "status": self.status,
            "error": self.error or "",
        }
        for name in TEST_SETS:
            for metric in ("acc", "sen", "spc"):
                report = self.summary.top_mean[name][metric] if self.summary else None
                row[f"{name}_{metric}"] = format(report.value, ".17g") if report else ""
                row[f"{name}_{metric}_hw"] = format(report.half_width, ".17g") if report else ""
        return row


def write_sweep_table(path: Union[str, Path], rows: Sequence[SweepRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.cells())
    return path


def _train_and_write(run: RunConfig, dataset: Dataset, out: Path, progress: ProgressCallback, workers: int) -> RunSummary:
    result = train(run, dataset, progress=progress, workers=workers)
    write_run_outputs(out, run, result)
    return result.summary


def _cancelled_in_registry(db_path: Path, run_id: int) -> bool:
    record = db.get_run(db_path, run_id)
    return record is not None and record["status"] == "cancelled"


async def execute_run(
    db_path: Path,
    run_id: int,
    run: RunConfig,
    dataset: Dataset,
    out_dir: Path,
    eval_workers: int = 1,
) -> SweepRow:
    """Train one run in a worker thread and record the outcome in the registry."""
    if run_id in _cancelled_runs or _cancelled_in_registry(db_path, run_id):
        db.update_run_status(db_path, run_id, "cancelled", progress="Run was cancelled before execution")
        _cancelled_runs.discard(run_id)
        return SweepRow(run, "cancelled")

    db.update_run_status(db_path, run_id, "running", progress="Starting run...")

    def report(message: str) -> None:
        # ``hippofusion runs --cancel`` from another process only touches the registry
        if _cancelled_in_registry(db_path, run_id):
            progress_callback.cancel()
        else:
            db.update_run_status(db_path, run_id, "running", progress=message)

    progress_callback = ProgressCallback(report)
    _active_runs[run_id] = progress_callback
    out = run_dir(out_dir, run)

    try:
        summary = await asyncio.to_thread(_train_and_write, run, dataset, out, progress_callback, eval_workers)
        db.update_run_status(
            db_path,
            run_id,
            "completed",
            result={"output_dir": str(out), "summary": summary.model_dump(mode="json")},
            progress="Run completed",
        )
        return SweepRow(run, "completed", summary)
    except TrainingCancelled as e:
        db.update_run_status(db_path, run_id, "cancelled", progress=e.message)
        return SweepRow(run, "cancelled", error=e.message)
    except HippoFusionError as e:
        logger.error(f"Run {run.run_key} failed: {e.message}")
        db.update_run_status(db_path, run_id, "failed", error=f"{type(e).__name__}: {e.message}")
        return SweepRow(run, "failed", error=f"{type(e).__name__}: {e.message}")
    except Exception as e:
        logger.error(f"Run {run.run_key} failed unexpectedly", exc_info=True)
        db.update_run_status(db_path, run_id, "failed", error=f"Unexpected error: {e}")
        return SweepRow(run, "failed", error=f"Unexpected error: {e}")
    finally:
        _active_runs.pop(run_id, None)
        _cancelled_runs.discard(run_id)


def cancel_run(db_path: Union[str, Path], run_id: int) -> bool:
    """Cancel a pending or running run; False if it is unknown or already finished."""
    run = db.get_run(db_path, run_id)
    if not run or run["status"] in db.FINISHED:
        return False

    _cancelled_runs.add(run_id)
    callback = _active_runs.get(run_id)
    if callback:
        callback.cancel()
    else:
        db.update_run_status(db_path, run_id, "cancelled", progress="Run cancelled before execution")
    return True


def _completed_row(run: RunConfig, record: Dict[str, Any]) -> SweepRow:
    summary = RunSummary.model_validate(record["result"]["summary"])
    return SweepRow(run, "completed", summary)


async def _sweep(
    grid: Sequence[RunConfig],
    out_dir: Path,
    db_path: Path,
    workers: int,
    resume: bool,
) -> List[SweepRow]:
    rows: List[Optional[SweepRow]] = [None] * len(grid)
    pending: List[Tuple[int, int, RunConfig]] = []
    for index, run in enumerate(grid):
        record = db.get_run_by_key(db_path, run.run_key)
        if resume and record and record["status"] == "completed":
            logger.info(f"Skipping completed run {run.run_key}")
            rows[index] = _completed_row(run, record)
            continue
        run_id = db.create_run(db_path, run.run_key, run.model_dump(mode="json"))
        pending.append((index, run_id, run))

    # one ROI bank per data source, wide enough for every ROI size in the grid
    banks: Dict[str, Any] = {}
    datasets: Dict[int, Dataset] = {}
    for index, run_id, run in pending:
        key = _data_key(run)
        try:
            if key not in banks:
                max_roi = max(r.network.roi_size for r in grid if _data_key(r) == key)
                banks[key] = load_data(run, max_roi)
            bank, manifest = banks[key]
            datasets[index] = prepare_dataset(run, bank, manifest)
        except HippoFusionError as e:
            logger.error(f"Run {run.run_key} failed during data preparation: {e.message}")
            db.update_run_status(db_path, run_id, "failed", error=f"{type(e).__name__}: {e.message}")
            rows[index] = SweepRow(run, "failed", error=f"{type(e).__name__}: {e.message}")

    semaphore = asyncio.Semaphore(max(1, workers))

    async def run_one(index: int, run_id: int, run: RunConfig) -> None:
        async with semaphore:
            rows[index] = await execute_run(db_path, run_id, run, datasets[index], out_dir)

    await asyncio.gather(*(run_one(i, rid, r) for i, rid, r in pending if i in datasets))
    return [row for row in rows if row is not None]


def sweep(
    grid: Sequence[RunConfig],
    out_dir: Union[str, Path],
    workers: int = 1,
    resume: bool = False,
) -> List[SweepRow]:
    """Run every config, record each in ``runs.db`` and write ``sweep_table.csv``.

    Rows keep grid order. A failed run is recorded with its error and the
    sweep carries on.
    """
    keys = [run.run_key for run in grid]
    duplicates = sorted({k for k in keys if keys.count(k) > 1})
    if duplicates:
        raise ConfigError(f"grid repeats run keys: {duplicates}", key_path="grid")
    out_dir = Path(out_dir)
    db_path = db.init_db(out_dir / db.DB_NAME)
    rows = asyncio.run(_sweep(grid, out_dir, db_path, workers, resume))
    write_sweep_table(out_dir / "sweep_table.csv", rows)
    completed = sum(1 for r in rows if r.status == "completed")
    logger.info(f"Sweep finished: {completed}/{len(rows)} runs completed")
    return rows
