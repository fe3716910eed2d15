"""Training loop, evaluation and run outputs.

One optimizer iteration draws q class-balanced samples from the current fit
split, accumulates mini-group gradients at the Nesterov lookahead point and
applies one update. The 90/10 fit/validation split is redrawn every
``resplit_period`` iterations. Every ``eval_period`` iterations (and at
iteration 0) the network is evaluated on validation and the three test sets.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from hippofusion.checkpoint import load_checkpoint, save_checkpoint
from hippofusion.data import (
    CLASS_ORDER,
    ROIBank,
    SubjectRecord,
    balance_and_augment,
    build_test_sets,
    expand_merged,
    ingest_nifti,
    make_validation_split,
    realize_batch,
    select_test_subjects,
)
from hippofusion.errors import ManifestError, MissingFileError, OptimizerError, ShapeMismatchError, TrainingCancelled
from hippofusion.metrics import POSITIVE_CLASS, MetricSeries, acc_sen_spc, confusion, metric_report, top_mean
from hippofusion.model import FusionNetwork, batch_loss_and_grad, build_network, one_hot, predict
from hippofusion.models import (
    DatasetManifest,
    RunConfig,
    RunSummary,
    SampleRecord,
    SetEvaluation,
)
from hippofusion.optim import MiniGroupAccumulator, OptimizerState, accumulate, lr_at, nesterov_step
from hippofusion.progress import ProgressCallback
from hippofusion.seeding import derive_seeds, stream
from hippofusion.synth import check_fits, subject_ids, synth_subject

logger = logging.getLogger(__name__)

EVAL_SETS = ("val", "test0", "test1", "test2")
TEST_SETS = ("test0", "test1", "test2")
METRICS = ("acc", "sen", "spc")
LOG_COLUMNS = (
    ["iteration", "lr", "train_loss", "val_acc", "test0_acc", "test1_acc", "test2_acc", "train_acc"]
    + [f"{name}_{metric}" for name in EVAL_SETS for metric in ("sen", "spc")]
)
EVAL_BATCH = 32


# Data sources

def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}", path=str(path))
    try:
        return DatasetManifest.model_validate_json(path.read_text())
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        raise ManifestError(f"{path}: {key}: {first['msg']}", key_path=key) from None


def load_data(run: RunConfig, max_roi_size: Optional[int] = None) -> Tuple[ROIBank, Optional[DatasetManifest]]:
    """Read every subject once and keep only the ROI boxes."""
    size = max_roi_size or run.network.roi_size
    bank = ROIBank(run.roi.centers, size, run.augmentation.max_shift)
    if run.data.manifest:
        manifest = load_manifest(run.data.manifest)
        base = Path(run.data.manifest).parent
        if manifest.roi_centers and {k: tuple(v) for k, v in manifest.roi_centers.items()} != dict(bank.centers):
            logger.warning("manifest ROI centers differ from roi.centers; using roi.centers")
        for entry in manifest.subjects:
            volumes = {}
            for modality, rel in entry.files.items():
                path = Path(rel) if Path(rel).is_absolute() else base / rel
                volumes[modality] = ingest_nifti(path, entry.subject_id, modality, manifest.volume_shape)
            bank.add_subject(SubjectRecord(entry.subject_id, entry.diagnosis, volumes))
        logger.info(f"Loaded {len(manifest.subjects)} subjects from {run.data.manifest}")
        return bank, manifest

    synth = run.data.synth
    check_fits(run.roi.centers, synth.volume_shape, [size], run.augmentation.max_shift)
    for sid, diagnosis, index in subject_ids(synth.subjects_per_class):
        bank.add_subject(synth_subject(sid, diagnosis, index, run.roi.centers, synth))
    logger.info(f"Generated {len(bank.diagnoses)} synthetic subjects (separation {synth.separation})")
    return bank, None


@dataclass
class Dataset:
    bank: ROIBank
    classes: Tuple[str, str]
    train_pool: List[SampleRecord]
    test_sets: Dict[str, List[SampleRecord]]
    test_subjects: Dict[str, List[str]]
    plan: Optional[DatasetManifest] = None

    def label(self, sample: SampleRecord) -> int:
        return self.classes.index(sample.diagnosis)

    def labels(self, samples: Sequence[SampleRecord]) -> np.ndarray:
        return np.array([self.label(s) for s in samples], dtype=int)


def _class_subjects(bank: ROIBank) -> Dict[str, List[str]]:
    by_class: Dict[str, List[str]] = {}
    for sid in bank.subjects():
        by_class.setdefault(bank.diagnoses[sid], []).append(sid)
    return by_class


def build_plan(run: RunConfig, bank: ROIBank, manifest: Optional[DatasetManifest] = None) -> DatasetManifest:
    """Test hold-out, balanced train samples and the three test sets for every class.

    Sections already present in ``manifest`` are reused as they are.
    """
    seeds = derive_seeds(run.seed)
    aug = run.augmentation
    by_class = _class_subjects(bank)

    if manifest is not None and manifest.test_subjects:
        test = {c: list(ids) for c, ids in manifest.test_subjects.items()}
        held = {s for ids in test.values() for s in ids}
        train = {c: [s for s in ids if s not in held] for c, ids in by_class.items()}
    else:
        test, train = select_test_subjects(by_class, aug.test_subjects_per_class, seeds["test"])

    if manifest is not None and manifest.train_samples:
        pool = list(manifest.train_samples)
    else:
        pool = balance_and_augment(
            train, aug.k, seeds["augmentation"], aug.max_shift, aug.max_sigma, bank.check_shift
        ).samples
    if manifest is not None and manifest.test_sets:
        test_sets = {name: list(samples) for name, samples in manifest.test_sets.items()}
    else:
        test_sets = build_test_sets(
            test, seeds["test"], aug.test_augmented_per_class, aug.max_shift, aug.max_sigma, bank.check_shift
        )
    missing = [name for name in TEST_SETS if name not in test_sets]
    if missing:
        raise ManifestError(f"manifest test_sets lacks {missing}", missing=missing)

    return DatasetManifest(
        subjects=list(manifest.subjects) if manifest is not None else [],
        roi_centers={k: tuple(v) for k, v in bank.centers.items()},
        volume_shape=manifest.volume_shape if manifest is not None else run.data.synth.volume_shape,
        seed=run.seed,
        k=aug.k,
        test_subjects=test,
        train_samples=pool,
        test_sets=test_sets,
    )


def prepare_dataset(run: RunConfig, bank: ROIBank, manifest: Optional[DatasetManifest] = None) -> Dataset:
    """Plan the data and keep the run's class pair."""
    by_class = _class_subjects(bank)
    for diagnosis in run.classes:
        if diagnosis not in by_class:
            raise ManifestError(f"no {diagnosis} subjects for classifier pair {run.classifier_pair}")
    needed = sorted({p.modality for p in run.network.input_pipelines})
    for diagnosis in run.classes:
        for sid in by_class[diagnosis]:
            for modality in needed:
                if not bank.has(sid, modality):
                    raise ManifestError(
                        f"subject {sid} has no {modality} volume, required by input mode {run.input_mode}",
                        subject_id=sid,
                        modality=modality,
                    )

    plan = build_plan(run, bank, manifest)
    classes = run.classes
    pool = [s for s in plan.train_samples if s.diagnosis in classes]
    test_sets = {name: [s for s in plan.test_sets[name] if s.diagnosis in classes] for name in TEST_SETS}
    held_out = {s for ids in plan.test_subjects.values() for s in ids}
    leaked = sorted({s.subject_id for s in pool} & held_out)
    if leaked:
        raise ManifestError(f"training samples derive from test subjects: {leaked[:5]}", subjects=leaked)
    if run.input_mode == "sMRI_LR+DTI_LR":
        pool = expand_merged(pool)
        test_sets = {name: expand_merged(samples) for name, samples in test_sets.items()}
    logger.info(
        f"{run.classifier_pair}: {len(pool)} training samples, "
        + ", ".join(f"{name} {len(samples)}" for name, samples in test_sets.items())
    )
    return Dataset(bank, classes, pool, test_sets, {c: plan.test_subjects.get(c, []) for c in classes}, plan)


# Sampling

class BalancedSampler:
    """Draws ceil(q/2) and floor(q/2) samples of the two classes without replacement.

    A class's order is reshuffled when exhausted; the combined batch is then
    mixed so mini-groups see both classes.
    """

    def __init__(self, fit: Sequence[SampleRecord], classes: Sequence[str], seed: int, epoch: int):
        self.classes = list(classes)
        self.pools = {c: [s for s in fit if s.diagnosis == c] for c in self.classes}
        for c, pool in self.pools.items():
            if not pool:
                raise ManifestError(f"fit split has no {c} samples")
        self.seed, self.epoch = seed, epoch
        self.rounds = {c: 0 for c in self.classes}
        self.orders = {c: self._order(c) for c in self.classes}
        self.cursor = {c: 0 for c in self.classes}
        self.draws = 0

    def _order(self, c: str) -> np.ndarray:
        rng = stream(self.seed, self.epoch, 0, CLASS_ORDER.index(c), self.rounds[c])
        return rng.permutation(len(self.pools[c]))

    def _take(self, c: str, n: int) -> List[SampleRecord]:
        out = []
        while len(out) < n:
            if self.cursor[c] == len(self.orders[c]):
                self.rounds[c] += 1
                self.orders[c] = self._order(c)
                self.cursor[c] = 0
            out.append(self.pools[c][self.orders[c][self.cursor[c]]])
            self.cursor[c] += 1
        return out

    def draw(self, q: int) -> List[SampleRecord]:
        batch = self._take(self.classes[0], (q + 1) // 2) + self._take(self.classes[1], q // 2)
        mix = stream(self.seed, self.epoch, 1, self.draws).permutation(q)
        self.draws += 1
        return [batch[i] for i in mix]


def mini_groups(batch: Sequence[SampleRecord], group_size: int) -> List[List[SampleRecord]]:
    n_groups = -(-len(batch) // group_size)
    bounds = np.linspace(0, len(batch), n_groups + 1).round().astype(int)
    return [list(batch[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


# Evaluation

class Evaluator:
    def __init__(self, net: FusionNetwork, dataset: Dataset, roi_size: int, workers: int = 1):
        self.net = net
        self.dataset = dataset
        self.roi_size = roi_size
        self.workers = max(1, workers)

    def _predict_chunk(self, chunk: Sequence[SampleRecord]) -> np.ndarray:
        inputs = realize_batch(
            self.dataset.bank, chunk, self.net.config.input_pipelines, self.roi_size, self.net.dtype
        )
        return np.atleast_1d(predict(self.net, inputs))

    async def _predict_parallel(self, chunks: List[Sequence[SampleRecord]]) -> List[np.ndarray]:
        semaphore = asyncio.Semaphore(self.workers)

        async def run(chunk):
            async with semaphore:
                return await asyncio.to_thread(self._predict_chunk, chunk)

        return list(await asyncio.gather(*(run(c) for c in chunks)))

    def predict(self, samples: Sequence[SampleRecord]) -> np.ndarray:
        chunks = [samples[i:i + EVAL_BATCH] for i in range(0, len(samples), EVAL_BATCH)]
        if not chunks:
            return np.zeros(0, dtype=int)
        if self.workers > 1 and len(chunks) > 1:
            results = asyncio.run(self._predict_parallel(chunks))
        else:
            results = [self._predict_chunk(c) for c in chunks]
        return np.concatenate(results)

    def evaluate_set(self, samples: Sequence[SampleRecord], positive: int):
        preds = self.predict(samples)
        counts = confusion(preds, self.dataset.labels(samples), positive)
        return counts, acc_sen_spc(counts)


def positive_index(run: RunConfig) -> int:
    positive = run.evaluation.positive_class or POSITIVE_CLASS[run.classifier_pair]
    if positive not in run.classes:
        raise ManifestError(f"positive class {positive} not in pair {run.classifier_pair}")
    return run.classes.index(positive)


# Run log

def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


@dataclass
class RunLog:
    rows: List[Dict[str, Optional[float]]] = field(default_factory=list)
    set_sizes: Dict[str, int] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def series(self, column: str) -> Optional[MetricSeries]:
        series = MetricSeries()
        for row in self.rows:
            if row[column] is None:
                return None
            series.append(int(row["iteration"]), row[column])
        return series

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(c)) for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"


def summarize(run: RunConfig, log: RunLog) -> RunSummary:
    """Top-mean report per (set, metric)."""
    ev = run.evaluation
    points = max(1, ev.window // run.training.eval_period)
    if len(log.rows) < points:
        logger.warning(f"only {len(log.rows)} evaluations; top-mean window shrinks from {points}")
        points = max(1, len(log.rows))
    top: Dict[str, Dict[str, object]] = {}
    for name in EVAL_SETS:
        top[name] = {}
        for metric in METRICS:
            series = log.series(f"{name}_{metric}")
            if series is None or not len(series):
                top[name][metric] = None
                continue
            top[name][metric] = top_mean(series, points, log.set_sizes[name], ev.theta, ev.interval)
    return RunSummary(
        run_key=run.run_key,
        classifier_pair=run.classifier_pair,
        input_mode=run.input_mode,
        roi_size=run.network.roi_size,
        architecture=run.network.name,
        iterations=run.training.iterations,
        evaluations=len(log.rows),
        window_points=points,
        set_sizes=dict(log.set_sizes),
        top_mean=top,
    )


@dataclass
class TrainResult:
    net: FusionNetwork
    log: RunLog
    summary: RunSummary
    seeds: Dict[str, int]
    iteration: int


def train(
    run: RunConfig,
    dataset: Dataset,
    progress: Optional[ProgressCallback] = None,
    workers: int = 1,
) -> TrainResult:
    started = time.perf_counter()
    cfg = run.training
    seeds = derive_seeds(run.seed)
    net = build_network(run.network, seeds["init"], cfg.precision)
    state = OptimizerState.create(net.params.size, run.optimizer)
    acc = MiniGroupAccumulator.create(net.params.size, cfg.q)
    pipelines = run.network.input_pipelines
    roi_size = run.network.roi_size
    positive = positive_index(run)
    evaluator = Evaluator(net, dataset, roi_size, workers)

    fit, val = make_validation_split(dataset.train_pool, cfg.validation_fraction, seeds["split"], 0)
    sampler = BalancedSampler(fit, dataset.classes, seeds["training"], 0)
    log = RunLog(set_sizes={"val": len(val), **{n: len(s) for n, s in dataset.test_sets.items()}})

    def record(iteration: int, train_loss: Optional[float], train_acc: Optional[float]) -> None:
        row: Dict[str, Optional[float]] = {
            "iteration": iteration,
            "lr": lr_at(state, iteration),
            "train_loss": train_loss,
            "train_acc": train_acc,
        }
        for name, samples in (("val", val), *dataset.test_sets.items()):
            _, (a, sen, spc) = evaluator.evaluate_set(samples, positive)
            row.update({f"{name}_acc": a, f"{name}_sen": sen, f"{name}_spc": spc})
        log.rows.append(row)
        if progress:
            progress.update(
                f"iteration {iteration}/{cfg.iterations}: val {_fmt(row['val_acc'])}, test0 {_fmt(row['test0_acc'])}"
            )

    record(0, None, None)
    for t in range(cfg.iterations):
        if progress and progress.is_cancelled():
            raise TrainingCancelled(f"training cancelled at iteration {t}", iteration=t)
        if t > 0 and t % cfg.resplit_period == 0:
            epoch = t // cfg.resplit_period
            fit, val = make_validation_split(dataset.train_pool, cfg.validation_fraction, seeds["split"], epoch)
            sampler = BalancedSampler(fit, dataset.classes, seeds["training"], epoch)
            log.set_sizes["val"] = len(val)
        batch = sampler.draw(cfg.q)
        step: Dict[str, float] = {}

        def grad_eval(lookahead: np.ndarray) -> np.ndarray:
            flat = lookahead.astype(net.dtype)
            total_loss, correct, offset, released = 0.0, 0, 0, None
            for group in mini_groups(batch, cfg.mini_group_size):
                inputs = realize_batch(dataset.bank, group, pipelines, roi_size, net.dtype)
                labels = dataset.labels(group)
                keys = [(t, offset + i) for i in range(len(group))]
                result = batch_loss_and_grad(
                    net, inputs, one_hot(labels, run.network.num_classes), seeds["dropout"], keys, flat=flat
                )
                released = accumulate(acc, result.grad.astype(np.float64) * len(group), len(group))
                total_loss += result.loss * len(group)
                correct += int(np.sum(np.argmax(result.probs, axis=1) == labels))
                offset += len(group)
            step["loss"], step["acc"] = total_loss / cfg.q, correct / cfg.q
            return released

        params, state = nesterov_step(net.params, state, grad_eval)
        net.set_flat(params)
        done = t + 1
        if not np.all(np.isfinite(net.params)):
            raise OptimizerError(f"non-finite parameters after iteration {done}", iteration=done)
        if done % cfg.eval_period == 0 or done == cfg.iterations:
            record(done, step["loss"], step["acc"])

    log.timings["train_seconds"] = time.perf_counter() - started
    summary = summarize(run, log)
    logger.info(f"Finished {run.run_key}: {cfg.iterations} iterations in {log.timings['train_seconds']:.1f}s")
    return TrainResult(net, log, summary, seeds, cfg.iterations)


def evaluate(
    net_or_checkpoint: Union[FusionNetwork, str, Path],
    dataset: Dataset,
    run: RunConfig,
    workers: int = 1,
) -> Dict[str, SetEvaluation]:
    """Infer-phase metrics on every test set, with intervals over the set size."""
    if isinstance(net_or_checkpoint, FusionNetwork):
        net = net_or_checkpoint
    else:
        net = load_checkpoint(net_or_checkpoint).network
    if net.config.input_pipelines != run.network.input_pipelines or net.config.roi_size != run.network.roi_size:
        raise ShapeMismatchError(
            "checkpoint network does not match the run's input mode or ROI size",
            checkpoint_roi=net.config.roi_size,
            run_roi=run.network.roi_size,
        )
    evaluator = Evaluator(net, dataset, net.config.roi_size, workers)
    positive = positive_index(run)
    ev = run.evaluation
    out = {}
    for name in TEST_SETS:
        samples = dataset.test_sets[name]
        counts, (a, sen, spc) = evaluator.evaluate_set(samples, positive)
        n = len(samples)
        out[name] = SetEvaluation(
            n=n,
            confusion=counts,
            acc=metric_report(a, n, ev.theta, ev.interval),
            sen=metric_report(sen, n, ev.theta, ev.interval),
            spc=metric_report(spc, n, ev.theta, ev.interval),
        )
    return out


# Outputs

def config_echo(run: RunConfig) -> Dict[str, object]:
    return {"config": run.model_dump(mode="json"), "seeds": derive_seeds(run.seed)}


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_run_outputs(out_dir: Union[str, Path], run: RunConfig, result: TrainResult) -> Path:
    """log.csv, summary.json, timings.json, config_echo.json and model.hfck."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "log.csv").write_text(result.log.to_csv())
    write_json(out_dir / "summary.json", result.summary.model_dump(mode="json"))
    write_json(out_dir / "timings.json", result.log.timings)
    write_json(out_dir / "config_echo.json", config_echo(run))
    save_checkpoint(out_dir / "model.hfck", result.net, result.iteration)
    return out_dir
