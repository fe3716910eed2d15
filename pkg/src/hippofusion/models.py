from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

Modality = Literal["sMRI", "MD-DTI"]
ROIName = Literal["left_hippocampus", "right_hippocampus", "merged_LR"]
Diagnosis = Literal["AD", "MCI", "NC"]
ClassifierPair = Literal["AD-NC", "AD-MCI", "MCI-NC"]
InputMode = Literal["DTI_L+DTI_R", "sMRI_L+sMRI_R", "sMRI_L+sMRI_R+DTI_L+DTI_R", "sMRI_LR+DTI_LR"]
Side = Literal["left", "right"]

# name -> (kernel sizes, filter counts, fc units)
ARCHITECTURE_PRESETS: Dict[str, Tuple[List[int], List[int], List[int]]] = {
    "C1": ([5, 4, 3, 3], [16, 32, 64, 128], [16, 8]),
    "C2": ([5, 4, 3, 3, 3], [16, 32, 64, 128, 128], [16, 8]),
    "C3": ([7, 6, 5, 4, 3], [16, 32, 64, 128, 256], [32, 8]),
    "C4": ([7, 6, 5, 4, 3, 3], [16, 32, 64, 128, 256, 256], [16]),
}

# ROI sizes each architecture was paired with in the published grid
REFERENCE_PAIRINGS: Dict[str, Tuple[int, ...]] = {
    "C1": (28, 38),
    "C2": (28, 38),
    "C3": (42, 48),
    "C4": (42, 48),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineInput(_Strict):
    """One pipeline's input: a modality seen through one ROI."""
    modality: Modality
    roi: ROIName

    @property
    def label(self) -> str:
        return f"{self.modality}:{self.roi}"


def _pipelines(*pairs: Tuple[str, str]) -> Tuple[PipelineInput, ...]:
    return tuple(PipelineInput(modality=m, roi=r) for m, r in pairs)


INPUT_MODES: Dict[str, Tuple[PipelineInput, ...]] = {
    "DTI_L+DTI_R": _pipelines(("MD-DTI", "left_hippocampus"), ("MD-DTI", "right_hippocampus")),
    "sMRI_L+sMRI_R": _pipelines(("sMRI", "left_hippocampus"), ("sMRI", "right_hippocampus")),
    "sMRI_L+sMRI_R+DTI_L+DTI_R": _pipelines(
        ("sMRI", "left_hippocampus"),
        ("sMRI", "right_hippocampus"),
        ("MD-DTI", "left_hippocampus"),
        ("MD-DTI", "right_hippocampus"),
    ),
    "sMRI_LR+DTI_LR": _pipelines(("sMRI", "merged_LR"), ("MD-DTI", "merged_LR")),
}


class NetworkConfig(_Strict):
    """Architecture row plus fusion inputs.

    A preset name (C1-C4) fills empty layer lists; ``custom`` takes them as given.
    """
    name: str = "C1"
    conv_kernel_sizes: List[int] = Field(default_factory=list)
    conv_filter_counts: List[int] = Field(default_factory=list)
    fc_units: List[int] = Field(default_factory=list)
    dropout_rate: float = Field(default=0.5, ge=0.0, lt=1.0)
    roi_size: int = Field(default=28, ge=1)
    input_pipelines: List[PipelineInput] = Field(default_factory=list)
    num_classes: int = Field(default=2, ge=2)
    shared_weights: bool = False
    bn_epsilon: float = Field(default=1e-5, gt=0.0)
    bn_momentum: float = Field(default=0.9, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _fill_preset(self) -> "NetworkConfig":
        if self.name in ARCHITECTURE_PRESETS:
            kernels, filters, fc = ARCHITECTURE_PRESETS[self.name]
            if not self.conv_kernel_sizes and not self.conv_filter_counts and not self.fc_units:
                self.conv_kernel_sizes = list(kernels)
                self.conv_filter_counts = list(filters)
                self.fc_units = list(fc)
            elif (self.conv_kernel_sizes, self.conv_filter_counts, self.fc_units) != (kernels, filters, fc):
                raise ValueError(f"layer lists contradict preset {self.name}; use name 'custom' to override")
        elif self.name != "custom":
            raise ValueError(f"unknown architecture {self.name!r}; expected C1-C4 or custom")
        if len(self.conv_kernel_sizes) != len(self.conv_filter_counts):
            raise ValueError("conv_kernel_sizes and conv_filter_counts must have equal length")
        if any(k < 1 for k in self.conv_kernel_sizes) or any(f < 1 for f in self.conv_filter_counts):
            raise ValueError("kernel sizes and filter counts must be positive")
        if any(u < 1 for u in self.fc_units):
            raise ValueError("fc_units must be positive")
        return self

    @classmethod
    def preset(cls, name: str, roi_size: int, input_mode: str = "sMRI_L+sMRI_R", **kwargs) -> "NetworkConfig":
        return cls(
            name=name,
            roi_size=roi_size,
            input_pipelines=[p.model_copy() for p in INPUT_MODES[input_mode]],
            **kwargs,
        )


class OptimizerConfig(_Strict):
    momentum: float = Field(default=0.93, ge=0.0, lt=1.0)
    mu0: float = Field(default=0.01, gt=0.0)
    decay_rate: float = Field(default=0.8, gt=0.0, le=1.0)
    decay_step: int = Field(default=100, ge=1)
    schedule: Literal["staircase", "compounding"] = "staircase"


class TrainingConfig(_Strict):
    iterations: int = Field(default=1000, ge=0)
    q: int = Field(default=90, ge=2)
    mini_group_size: int = Field(default=10, ge=2)
    resplit_period: int = Field(default=100, ge=1)
    eval_period: int = Field(default=10, ge=1)
    validation_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    precision: Literal["float32", "float64"] = "float32"
    workers: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _groups_fit_batchnorm(self) -> "TrainingConfig":
        groups = -(-self.q // self.mini_group_size)
        if self.q // groups < 2:
            raise ValueError(
                f"q={self.q} split into mini-groups of {self.mini_group_size} leaves a group of one sample"
            )
        return self


class AugmentationConfig(_Strict):
    k: int = Field(default=10, ge=1)
    max_shift: int = Field(default=2, ge=0)
    max_sigma: float = Field(default=1.2, ge=0.0)
    test_subjects_per_class: int = Field(default=12, ge=1)
    test_augmented_per_class: int = Field(default=108, ge=0)


class EvaluationConfig(_Strict):
    window: int = Field(default=100, ge=1)
    theta: float = Field(default=1.96, gt=0.0)
    interval: Literal["wald", "wilson"] = "wald"
    positive_class: Optional[Diagnosis] = None


class ROIConfig(_Strict):
    centers: Dict[Literal["left_hippocampus", "right_hippocampus"], Tuple[int, int, int]]


class SynthConfig(_Strict):
    subjects_per_class: Dict[Diagnosis, int] = Field(default_factory=lambda: {"AD": 48, "MCI": 108, "NC": 58})
    volume_shape: Tuple[int, int, int] = (121, 145, 121)
    separation: float = Field(default=1.0, ge=0.0)
    noise: float = Field(default=0.05, ge=0.0)
    radius: float = Field(default=6.0, gt=0.0)
    seed: int = 0


class DataConfig(_Strict):
    manifest: Optional[str] = None
    synth: Optional[SynthConfig] = None

    @model_validator(mode="after")
    def _one_source(self) -> "DataConfig":
        if self.manifest and self.synth is not None:
            raise ValueError("data.manifest and data.synth are mutually exclusive")
        if not self.manifest and self.synth is None:
            self.synth = SynthConfig()
        return self


class RunConfig(_Strict):
    """Everything one training run depends on."""
    seed: int = Field(default=0, ge=0)
    classifier_pair: ClassifierPair = "AD-NC"
    input_mode: InputMode = "sMRI_L+sMRI_R"
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    roi: ROIConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _pipelines_match_mode(self) -> "RunConfig":
        expected = list(INPUT_MODES[self.input_mode])
        if not self.network.input_pipelines:
            self.network.input_pipelines = [p.model_copy() for p in expected]
        elif self.network.input_pipelines != expected:
            raise ValueError(f"network.input_pipelines do not match input_mode {self.input_mode}")
        return self

    @property
    def classes(self) -> Tuple[str, str]:
        first, second = self.classifier_pair.split("-")
        return first, second

    @property
    def run_key(self) -> str:
        return f"{self.classifier_pair}/{self.input_mode}/{self.network.roi_size}/{self.network.name}"


# Dataset manifest

class SubjectEntry(_Strict):
    subject_id: str
    diagnosis: Diagnosis
    files: Dict[Modality, str]


class SampleRecord(_Strict):
    """Provenance of one training or test sample."""
    sample_id: str
    subject_id: str
    diagnosis: Diagnosis
    kind: Literal["original", "generated"] = "original"
    shift: Tuple[int, int, int] = (0, 0, 0)
    sigma: float = 0.0
    side: Optional[Side] = None


class DatasetManifest(_Strict):
    subjects: List[SubjectEntry]
    roi_centers: Optional[Dict[str, Tuple[int, int, int]]] = None
    volume_shape: Optional[Tuple[int, int, int]] = None
    seed: Optional[int] = None
    k: Optional[int] = None
    test_subjects: Dict[Diagnosis, List[str]] = Field(default_factory=dict)
    train_samples: List[SampleRecord] = Field(default_factory=list)
    test_sets: Dict[str, List[SampleRecord]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _unique_subjects(self) -> "DatasetManifest":
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate subject_id in manifest")
        return self


# Metrics and summaries

class ConfusionCounts(_Strict):
    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class TopMeanReport(_Strict):
    value: float
    variance: float
    window_start: int
    window_length: int
    ci_low: float
    ci_high: float
    half_width: float
    n: int
    interval: Literal["wald", "wilson"] = "wald"


class MetricReport(_Strict):
    """Single-point metric with its confidence interval."""
    value: Optional[float]
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    half_width: Optional[float] = None


class SetEvaluation(_Strict):
    n: int
    confusion: ConfusionCounts
    acc: MetricReport
    sen: MetricReport
    spc: MetricReport


class RunSummary(_Strict):
    run_key: str
    classifier_pair: ClassifierPair
    input_mode: InputMode
    roi_size: int
    architecture: str
    iterations: int
    evaluations: int
    window_points: int
    set_sizes: Dict[str, int]
    top_mean: Dict[str, Dict[str, Optional[TopMeanReport]]]
