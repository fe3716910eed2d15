"""Volumes, ROI windows, balancing augmentation, test sets and validation splits.

Samples are kept as provenance records (``SampleRecord``: source subject,
shift, blur sigma, side) and realized into ROI tensors on demand from an
``ROIBank``, which stores for every subject only the box around each
hippocampus that any allowed shift can reach.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import convolve1d

from hippofusion.errors import (
    BlurSigmaError,
    ManifestError,
    MissingFileError,
    ROIOutOfBoundsError,
    ShapeMismatchError,
    WindowOutOfBoundsError,
)
from hippofusion.models import PipelineInput, SampleRecord
from hippofusion.nifti import read_nifti
from hippofusion.seeding import stream
from hippofusion.tensor import Tensor, crop, flip_axis

logger = logging.getLogger(__name__)

CLASS_ORDER = ("AD", "MCI", "NC")
ROI_NAMES = ("left_hippocampus", "right_hippocampus")
REGISTERED_SHAPE = (121, 145, 121)
# x axis of the (x, y, z) voxel grid
SAGITTAL_AXIS = 0

Shift = Tuple[int, int, int]


@dataclass
class Volume:
    grid: Tensor
    subject_id: str
    modality: str

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ShapeMismatchError(f"volume {self.subject_id} must be 3-D", shape_a=self.grid.shape)
        if not np.all(np.isfinite(self.grid)):
            raise ManifestError(f"volume {self.subject_id}/{self.modality} has non-finite intensities")


@dataclass
class SubjectRecord:
    subject_id: str
    diagnosis: str
    volumes: Dict[str, Volume] = field(default_factory=dict)

    def __post_init__(self):
        if not self.volumes:
            raise ManifestError(f"subject {self.subject_id} has no volumes", subject_id=self.subject_id)


@dataclass(frozen=True)
class ROISpec:
    name: str
    center: Shift
    size: int

    def origin(self, shift: Shift = (0, 0, 0)) -> Shift:
        return tuple(c - self.size // 2 + s for c, s in zip(self.center, shift))


def ingest_nifti(
    path: Union[str, Path],
    subject_id: str = "",
    modality: str = "sMRI",
    expected_shape: Optional[Tuple[int, int, int]] = None,
) -> Volume:
    image = read_nifti(path)
    if expected_shape is not None and tuple(image.grid.shape) != tuple(expected_shape):
        raise ManifestError(
            f"{path}: shape {image.grid.shape} differs from declared {tuple(expected_shape)}",
            subject_id=subject_id,
        )
    return Volume(image.grid, subject_id or Path(path).stem, modality)


def extract_roi(volume: Volume, spec: ROISpec, shift: Shift = (0, 0, 0)) -> Tensor:
    """Cube of side ``spec.size`` at ``center - size // 2 + shift``, as ``1×s×s×s``."""
    origin = spec.origin(shift)
    try:
        block = crop(volume.grid, origin, (spec.size,) * 3)
    except WindowOutOfBoundsError as exc:
        raise ROIOutOfBoundsError(
            f"{spec.name} window for subject {volume.subject_id} leaves the volume",
            subject_id=volume.subject_id,
            **exc.details,
        ) from exc
    return block[None]


def mirror_sagittal(roi: Tensor) -> Tensor:
    return flip_axis(roi, roi.ndim - 3 + SAGITTAL_AXIS)


def merge_lr(left_roi: Tensor, right_roi: Tensor) -> List[Tensor]:
    """Left ROI as is, right ROI mirrored across the sagittal plane."""
    if left_roi.shape != right_roi.shape:
        raise ShapeMismatchError(
            f"left {left_roi.shape} and right {right_roi.shape} ROIs differ",
            shape_a=left_roi.shape,
            shape_b=right_roi.shape,
        )
    return [left_roi.copy(), mirror_sagittal(right_roi)]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur3d(roi: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian over the last three axes, edge-replicating."""
    if sigma < 0:
        raise BlurSigmaError(f"blur sigma must be >= 0, got {sigma}", sigma=sigma)
    if sigma == 0:
        return roi.copy()
    kernel = gaussian_kernel(sigma)
    out = roi
    for axis in range(roi.ndim - 3, roi.ndim):
        out = convolve1d(out, kernel, axis=axis, mode="nearest")
    return np.ascontiguousarray(out, dtype=roi.dtype)


# Augmentation plans

def _class_index(diagnosis: str) -> int:
    return CLASS_ORDER.index(diagnosis)


def _draw_transform(rng: np.random.Generator, max_shift: int, max_sigma: float, blur: bool) -> Tuple[Shift, float]:
    shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=3))
    sigma = float(rng.uniform(0.0, max_sigma)) if blur else 0.0
    return shift, sigma


@dataclass
class AugmentationPlan:
    target_per_class: int
    original_counts: Dict[str, int]
    generated_counts: Dict[str, int]
    samples: List[SampleRecord]

    def by_class(self) -> Dict[str, List[SampleRecord]]:
        out: Dict[str, List[SampleRecord]] = {c: [] for c in self.original_counts}
        for sample in self.samples:
            out[sample.diagnosis].append(sample)
        return out


def balance_and_augment(
    class_subjects: Mapping[str, Sequence[str]],
    k: int,
    seed: int,
    max_shift: int = 2,
    max_sigma: float = 1.2,
    validate: Optional[Callable[[str, Shift], None]] = None,
) -> AugmentationPlan:
    """Bring every class to ``n_max * k`` samples.

    Originals are kept; class ``i`` gets ``n_max * k - n_i`` generated samples
    whose sources cycle through its subjects in order. Generated sample ``j``
    of a class draws its shift and sigma from ``stream(seed, class, j)``.
    """
    if k < 1:
        raise ManifestError(f"k must be >= 1, got {k}")
    sizes = {c: len(ids) for c, ids in class_subjects.items()}
    if not sizes or min(sizes.values()) < 1:
        raise ManifestError(f"every class needs at least one subject, got {sizes}")
    target = max(sizes.values()) * k

    samples: List[SampleRecord] = []
    generated: Dict[str, int] = {}
    for diagnosis in sorted(class_subjects, key=_class_index):
        ids = list(class_subjects[diagnosis])
        ci = _class_index(diagnosis)
        samples.extend(SampleRecord(sample_id=s, subject_id=s, diagnosis=diagnosis) for s in ids)
        n_new = target - len(ids)
        for j in range(n_new):
            source = ids[j % len(ids)]
            shift, sigma = _draw_transform(stream(seed, ci, j), max_shift, max_sigma, blur=True)
            if validate is not None:
                validate(source, shift)
            samples.append(
                SampleRecord(
                    sample_id=f"{diagnosis}-g{j:05d}-{source}",
                    subject_id=source,
                    diagnosis=diagnosis,
                    kind="generated",
                    shift=shift,
                    sigma=sigma,
                )
            )
        generated[diagnosis] = n_new
    logger.info(f"Balanced {sizes} to {target} per class (k={k}), generated {generated}")
    return AugmentationPlan(target, sizes, generated, samples)


def build_test_sets(
    test_subjects: Mapping[str, Sequence[str]],
    seed: int,
    augmented_per_class: int = 108,
    max_shift: int = 2,
    max_sigma: float = 1.2,
    validate: Optional[Callable[[str, Shift], None]] = None,
) -> Dict[str, List[SampleRecord]]:
    """test0: originals. test1: originals + shift-only. test2: originals + shift and blur."""
    sets: Dict[str, List[SampleRecord]] = {"test0": [], "test1": [], "test2": []}
    for diagnosis in sorted(test_subjects, key=_class_index):
        ids = list(test_subjects[diagnosis])
        if not ids:
            raise ManifestError(f"no test subjects for class {diagnosis}")
        ci = _class_index(diagnosis)
        originals = [SampleRecord(sample_id=s, subject_id=s, diagnosis=diagnosis) for s in ids]
        for name in sets:
            sets[name].extend(o.model_copy() for o in originals)
        for set_index, name in ((1, "test1"), (2, "test2")):
            for j in range(augmented_per_class):
                source = ids[j % len(ids)]
                shift, sigma = _draw_transform(stream(seed, set_index, ci, j), max_shift, max_sigma, blur=set_index == 2)
                if validate is not None:
                    validate(source, shift)
                sets[name].append(
                    SampleRecord(
                        sample_id=f"{name}-{diagnosis}-{j:04d}-{source}",
                        subject_id=source,
                        diagnosis=diagnosis,
                        kind="generated",
                        shift=shift,
                        sigma=sigma,
                    )
                )
    return sets


def select_test_subjects(
    class_subjects: Mapping[str, Sequence[str]],
    per_class: int,
    seed: int,
) -> Tuple[Dict[str, List[str]], Dict[str, List[str]]]:
    """Hold out ``per_class`` subjects of every class; returns (test, train)."""
    test, train = {}, {}
    for diagnosis, ids in class_subjects.items():
        ids = sorted(ids)
        if len(ids) <= per_class:
            raise ManifestError(
                f"class {diagnosis} has {len(ids)} subjects, cannot hold out {per_class} for testing",
                diagnosis=diagnosis,
            )
        order = stream(seed, _class_index(diagnosis)).permutation(len(ids))
        held = set(order[:per_class].tolist())
        test[diagnosis] = [s for i, s in enumerate(ids) if i in held]
        train[diagnosis] = [s for i, s in enumerate(ids) if i not in held]
    return test, train


def make_validation_split(
    pool: Sequence[SampleRecord],
    fraction: float = 0.1,
    seed: int = 0,
    epoch_index: int = 0,
) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Stratified random (fit, validation) partition keyed by ``(seed, epoch_index)``."""
    if len(pool) < 10:
        raise ManifestError(f"validation split needs at least 10 samples, got {len(pool)}")
    by_class: Dict[str, List[int]] = {}
    for index, sample in enumerate(pool):
        by_class.setdefault(sample.diagnosis, []).append(index)
    val_index = set()
    for diagnosis, indices in by_class.items():
        n_val = min(len(indices) - 1, max(1, int(round(len(indices) * fraction))))
        order = stream(seed, epoch_index, _class_index(diagnosis)).permutation(len(indices))
        val_index.update(indices[i] for i in order[:n_val])
    fit = [s for i, s in enumerate(pool) if i not in val_index]
    val = [s for i, s in enumerate(pool) if i in val_index]
    return fit, val


def expand_merged(samples: Iterable[SampleRecord]) -> List[SampleRecord]:
    """Each sample becomes a left and a (mirrored) right sample."""
    out = []
    for sample in samples:
        for side, suffix in (("left", "L"), ("right", "R")):
            out.append(sample.model_copy(update={"sample_id": f"{sample.sample_id}-{suffix}", "side": side}))
    return out


# ROI bank and sample realization

class ROIBank:
    """Per-subject boxes around each ROI center, wide enough for any shift."""

    def __init__(self, centers: Mapping[str, Sequence[int]], max_size: int, margin: int = 2):
        self.centers = {name: tuple(int(c) for c in center) for name, center in centers.items()}
        self.max_size = max_size
        self.margin = margin
        self.boxes: Dict[Tuple[str, str, str], Volume] = {}
        self.diagnoses: Dict[str, str] = {}

    @property
    def box_size(self) -> int:
        return self.max_size + 2 * self.margin

    def add_subject(self, record: SubjectRecord) -> None:
        for modality, volume in record.volumes.items():
            for name, center in self.centers.items():
                box = extract_roi(volume, ROISpec(name, center, self.box_size))[0]
                self.boxes[(record.subject_id, modality, name)] = Volume(box, record.subject_id, modality)
        self.diagnoses[record.subject_id] = record.diagnosis

    def subjects(self) -> List[str]:
        return sorted(self.diagnoses)

    def has(self, subject_id: str, modality: str) -> bool:
        return (subject_id, modality, ROI_NAMES[0]) in self.boxes

    def check_shift(self, subject_id: str, shift: Shift) -> None:
        if any(abs(s) > self.margin for s in shift):
            raise ROIOutOfBoundsError(
                f"shift {shift} for subject {subject_id} exceeds margin {self.margin}",
                subject_id=subject_id,
            )

    def window(self, subject_id: str, modality: str, roi: str, size: int, shift: Shift = (0, 0, 0)) -> Tensor:
        if size > self.max_size:
            raise ROIOutOfBoundsError(f"ROI size {size} above bank size {self.max_size}", subject_id=subject_id)
        self.check_shift(subject_id, shift)
        try:
            box = self.boxes[(subject_id, modality, roi)]
        except KeyError:
            raise ManifestError(
                f"no {modality} {roi} data for subject {subject_id}",
                subject_id=subject_id,
                modality=modality,
            ) from None
        # the ROI center sits at the middle of its box
        center = (self.max_size // 2 + self.margin,) * 3
        return extract_roi(box, ROISpec(roi, center, size), shift)


def realize_sample(
    bank: ROIBank,
    sample: SampleRecord,
    pipelines: Sequence[PipelineInput],
    roi_size: int,
) -> List[Tensor]:
    """One ``1×s×s×s`` tensor per pipeline for ``sample``."""
    tensors = []
    for pipe in pipelines:
        if pipe.roi == "merged_LR":
            if sample.side is None:
                raise ManifestError(f"sample {sample.sample_id} has no side for a merged pipeline")
            roi = f"{sample.side}_hippocampus"
        else:
            roi = pipe.roi
        t = bank.window(sample.subject_id, pipe.modality, roi, roi_size, sample.shift)
        t = gaussian_blur3d(t, sample.sigma)
        if pipe.roi == "merged_LR" and sample.side == "right":
            t = mirror_sagittal(t)
        tensors.append(t)
    return tensors


def realize_batch(
    bank: ROIBank,
    samples: Sequence[SampleRecord],
    pipelines: Sequence[PipelineInput],
    roi_size: int,
    dtype=np.float32,
) -> List[Tensor]:
    """Per-pipeline ``N×1×s×s×s`` batches."""
    per_sample = [realize_sample(bank, s, pipelines, roi_size) for s in samples]
    return [
        np.stack([tensors[p] for tensors in per_sample]).astype(dtype, copy=False)
        for p in range(len(pipelines))
    ]


# Sample store

def save_sample(store_dir: Union[str, Path], sample: SampleRecord, tensors: Sequence[Tensor], labels: Sequence[str] = ()) -> Path:
    """Write ``<id>.bin`` (little-endian float32) and a ``<id>.json`` sidecar."""
    store_dir = Path(store_dir)
    store_dir.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors)
    bin_path = store_dir / f"{sample.sample_id}.bin"
    bin_path.write_bytes(blob)
    sidecar = {
        "sample": sample.model_dump(mode="json"),
        "dtype": "<f4",
        "shapes": [list(t.shape) for t in tensors],
        "pipelines": list(labels),
    }
    (store_dir / f"{sample.sample_id}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return bin_path


def load_stored_sample(store_dir: Union[str, Path], sample_id: str) -> Tuple[SampleRecord, List[Tensor]]:
    store_dir = Path(store_dir)
    bin_path, json_path = store_dir / f"{sample_id}.bin", store_dir / f"{sample_id}.json"
    for p in (bin_path, json_path):
        if not p.exists():
            raise MissingFileError(f"stored sample file missing: {p}", path=str(p))
    sidecar = json.loads(json_path.read_text())
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    tensors, offset = [], 0
    for shape in sidecar["shapes"]:
        n = int(np.prod(shape))
        if offset + n > raw.size:
            raise ManifestError(f"stored sample {sample_id} is truncated", sample_id=sample_id)
        tensors.append(raw[offset:offset + n].reshape(shape).astype(np.float32))
        offset += n
    if offset != raw.size:
        raise ManifestError(f"stored sample {sample_id} has trailing data", sample_id=sample_id)
    return SampleRecord.model_validate(sidecar["sample"]), tensors
