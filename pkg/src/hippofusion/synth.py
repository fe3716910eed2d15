"""Synthetic phantom cohort with class-dependent hippocampi."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from hippofusion.data import CLASS_ORDER, SubjectRecord, Volume
from hippofusion.errors import ROIOutOfBoundsError
from hippofusion.models import DatasetManifest, SubjectEntry, SynthConfig
from hippofusion.nifti import write_nifti
from hippofusion.seeding import stream

logger = logging.getLogger(__name__)

# atrophy severity per diagnosis
SEVERITY = {"AD": 1.0, "MCI": 0.5, "NC": 0.0}
DEFAULT_COHORT = {"AD": 48, "MCI": 108, "NC": 58}
# ellipsoid semi-axes relative to the nominal radius
AXIS_RATIOS = (1.0, 1.3, 0.8)
EDGE_SOFTNESS = 1.0


def _ellipsoid(shape: Tuple[int, int, int], center: Sequence[int], radius: float) -> np.ndarray:
    x, y, z = np.ogrid[: shape[0], : shape[1], : shape[2]]
    rx, ry, rz = (radius * r for r in AXIS_RATIOS)
    rho = np.sqrt(((x - center[0]) / rx) ** 2 + ((y - center[1]) / ry) ** 2 + ((z - center[2]) / rz) ** 2)
    return 1.0 / (1.0 + np.exp((rho - 1.0) * rx / EDGE_SOFTNESS))


def synth_subject(
    subject_id: str,
    diagnosis: str,
    index: int,
    centers: Mapping[str, Sequence[int]],
    config: SynthConfig,
) -> SubjectRecord:
    """One subject; draws come from ``stream(config.seed, class, index, ...)``."""
    ci = CLASS_ORDER.index(diagnosis)
    contrast = config.separation * SEVERITY[diagnosis]
    shrink = max(0.2, 1.0 - 0.15 * contrast)
    fade = max(0.1, 1.0 - 0.25 * contrast)
    rng = stream(config.seed, ci, index, 0)

    tissue = np.zeros(config.volume_shape)
    for name in sorted(centers):
        radius = config.radius * shrink * (1.0 + rng.uniform(-0.05, 0.05))
        tissue = np.maximum(tissue, _ellipsoid(config.volume_shape, centers[name], radius))

    smri_noise = stream(config.seed, ci, index, 1).normal(0.0, config.noise, size=config.volume_shape)
    dti_noise = stream(config.seed, ci, index, 2).normal(0.0, config.noise, size=config.volume_shape)
    smri = (0.2 + 0.8 * fade * tissue + smri_noise).astype(np.float32)
    # mean diffusivity is low in tissue and rises with atrophy
    dti = (0.9 - 0.6 * fade * tissue + dti_noise).astype(np.float32)
    return SubjectRecord(
        subject_id,
        diagnosis,
        {"sMRI": Volume(smri, subject_id, "sMRI"), "MD-DTI": Volume(dti, subject_id, "MD-DTI")},
    )


def subject_ids(subjects_per_class: Mapping[str, int]) -> List[Tuple[str, str, int]]:
    """(subject_id, diagnosis, index) in class order."""
    out = []
    for diagnosis in CLASS_ORDER:
        for i in range(subjects_per_class.get(diagnosis, 0)):
            out.append((f"{diagnosis}{i:03d}", diagnosis, i))
    return out


def check_fits(
    centers: Mapping[str, Sequence[int]],
    volume_shape: Sequence[int],
    roi_sizes: Sequence[int],
    margin: int = 2,
) -> None:
    half = max(roi_sizes) // 2 + margin
    span = max(roi_sizes) + 2 * margin
    for name, center in centers.items():
        for axis, (c, extent) in enumerate(zip(center, volume_shape)):
            if c - half < 0 or c - half + span > extent:
                raise ROIOutOfBoundsError(
                    f"{name} center {tuple(center)} cannot hold ROI {max(roi_sizes)} with margin {margin}",
                    axis=axis,
                    extent=extent,
                )


def synth_dataset(
    subjects_per_class: Optional[Mapping[str, int]] = None,
    centers: Optional[Mapping[str, Sequence[int]]] = None,
    separation: float = 1.0,
    seed: int = 0,
    roi_sizes: Sequence[int] = (28,),
    **kwargs,
) -> List[SubjectRecord]:
    """Phantom volumes with an ellipsoidal hippocampus per ROI center.

    Hippocampal radius and contrast shrink with the class's severity times
    ``separation``; with ``separation=0`` every class is drawn from the same
    distribution. sMRI and MD-DTI use opposite contrast.
    """
    config = SynthConfig(
        subjects_per_class=dict(subjects_per_class or DEFAULT_COHORT),
        separation=separation,
        seed=seed,
        **kwargs,
    )
    if centers is None:
        raise ROIOutOfBoundsError("synthetic volumes need ROI centers")
    check_fits(centers, config.volume_shape, roi_sizes)
    return [synth_subject(sid, dx, i, centers, config) for sid, dx, i in subject_ids(config.subjects_per_class)]


def write_synth_dataset(
    out_dir: Union[str, Path],
    config: SynthConfig,
    centers: Mapping[str, Sequence[int]],
    roi_sizes: Sequence[int] = (28,),
) -> DatasetManifest:
    """Write every phantom volume as NIfTI plus ``manifest.json``."""
    out_dir = Path(out_dir)
    check_fits(centers, config.volume_shape, roi_sizes)
    entries = []
    for sid, dx, i in subject_ids(config.subjects_per_class):
        record = synth_subject(sid, dx, i, centers, config)
        files: Dict[str, str] = {}
        for modality, volume in record.volumes.items():
            name = f"{sid}_{'smri' if modality == 'sMRI' else 'md'}.nii"
            write_nifti(out_dir / "volumes" / name, volume.grid)
            files[modality] = str(Path("volumes") / name)
        entries.append(SubjectEntry(subject_id=sid, diagnosis=dx, files=files))
    manifest = DatasetManifest(
        subjects=entries,
        roi_centers={k: tuple(v) for k, v in centers.items()},
        volume_shape=tuple(config.volume_shape),
        seed=config.seed,
    )
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {len(entries)} synthetic subjects to {out_dir}")
    return manifest
