"""Configuration types for the encoder, view generation, and training curriculum.

A run is fully described by a RunConfig (encoder + views + curriculum), which
round-trips through YAML with field names mirrored exactly. The hash of the
canonical serialization identifies a run in checkpoint metadata.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

DECODER_UPSAMPLE_STAGES = 4  # stride-2 stages: output size = 2**4 * seed map size


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    depth: int = 4
    width: int = 128
    heads: int = 4
    embed_dim: int = 128
    proj_dim_dino: int = 256
    proj_dim_contrast: int = 64

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "depth", "width", "heads",
                     "embed_dim", "proj_dim_dino", "proj_dim_contrast"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"encoder.{name} must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigurationError(
                f"width {self.width} not divisible by heads {self.heads}")
        scale = 2 ** DECODER_UPSAMPLE_STAGES
        if self.image_size % scale != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} must be a multiple of {scale} "
                f"({DECODER_UPSAMPLE_STAGES} stride-2 decoder stages)")

    @property
    def decoder_seed_size(self) -> int:
        return self.image_size // 2 ** DECODER_UPSAMPLE_STAGES


@dataclass
class ViewConfig:
    m_global: int = 2
    n_local: int = 4
    global_size: int = 64
    local_size: int = 32
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.15, 0.5)
    brightness: float = 0.3
    contrast: float = 0.3
    flip_prob: float = 0.5
    # grayscale collapse and photometric inversion (1 - x) scramble the two
    # loudest modality tells — color (H&E is chromatic, fluorescence is not)
    # and blob polarity (dark-on-bright vs bright-on-dark). They must be
    # strong: at weaker settings the distillation term keeps rebuilding a
    # dominant modality axis between stages and the stage-3 contrastive loss
    # cannot pull pairs together.
    grayscale_prob: float = 0.7
    invert_prob: float = 0.5
    standardize_prob: float = 0.5

    def validate(self) -> None:
        if self.m_global < 2:
            raise ConfigurationError("m_global must be >= 2 (the view pair sum needs two teacher views)")
        if self.n_local < 0:
            raise ConfigurationError("n_local must be >= 0")
        if self.global_size < 1 or self.local_size < 1:
            raise ConfigurationError("view sizes must be >= 1")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigurationError(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
        for name in ("flip_prob", "grayscale_prob", "invert_prob", "standardize_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")
        if self.brightness < 0 or self.contrast < 0:
            raise ConfigurationError("jitter strengths must be >= 0")


@dataclass
class Temperatures:
    t_teacher: float = 0.04
    t_student: float = 0.1
    tau_contrast: float = 0.2

    def validate(self) -> None:
        for name in ("t_teacher", "t_student", "tau_contrast"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"temperature {name} must be > 0")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 0.0
    lambda4: float = 0.0

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass
class GrlSchedule:
    # max_value balances the adversarial game at desk scale: below ~2 the
    # reversal is inert, at 5 it stalls the stage-3 contrastive descent, and
    # at 10 the minimax orbits and collapses the features outright.
    kind: str = "ramp"  # "constant" | "ramp"
    max_value: float = 3.0

    def validate(self) -> None:
        if self.kind not in ("constant", "ramp"):
            raise ConfigurationError(f"unknown grl schedule kind {self.kind!r}")
        if self.max_value < 0:
            raise ConfigurationError("grl max_value must be >= 0")


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.04
    # the auxiliary heads (domain classifier, decoders) are small networks
    # trained from scratch inside a single 300-step stage; they need a faster
    # learning rate than the backbone to reach a useful state in that window
    # (the adversarial game in particular assumes a near-optimal domain
    # classifier). The contrastive projection is NOT in this group — see
    # ModelBundle.parameter_groups.
    head_lr_multiplier: float = 50.0

    def validate(self) -> None:
        if self.name != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.name!r}")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.head_lr_multiplier <= 0:
            raise ConfigurationError("head_lr_multiplier must be > 0")


@dataclass
class StageSpec:
    stage_id: int
    weights: LossWeights
    steps: int = 300
    data_mode: str = "unpaired"  # "unpaired" | "paired"

    # which lambdas must be zero per stage: stage k activates losses 1..k
    def validate(self) -> None:
        if not 1 <= self.stage_id <= 4:
            raise ConfigurationError(f"stage_id must be in 1..4, got {self.stage_id}")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.data_mode not in ("unpaired", "paired"):
            raise ConfigurationError(f"unknown data_mode {self.data_mode!r}")
        self.weights.validate()
        lam = self.weights.as_tuple()
        for idx in range(self.stage_id, 4):
            if lam[idx] != 0.0:
                raise ConfigurationError(
                    f"stage {self.stage_id} must have lambda{idx + 1} == 0, got {lam[idx]}")
        if self.stage_id >= 3 and self.data_mode != "paired":
            raise ConfigurationError(f"stage {self.stage_id} requires paired data")


@dataclass
class CurriculumConfig:
    stages: list[StageSpec] = field(default_factory=lambda: default_stages())
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 24
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    grl_schedule: GrlSchedule = field(default_factory=GrlSchedule)
    temps: Temperatures = field(default_factory=Temperatures)
    seed: int = 0

    def validate(self) -> None:
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        ids = [s.stage_id for s in self.stages]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigurationError(f"stages must be ordered 1..k without gaps, got {ids}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("ema_momentum", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")
        self.optimizer.validate()
        self.grl_schedule.validate()
        self.temps.validate()
        prev_active: set[int] = set()
        for spec in self.stages:
            spec.validate()
            active = {i for i, lam in enumerate(spec.weights.as_tuple()) if lam > 0}
            if not prev_active <= active:
                raise ConfigurationError(
                    f"stage {spec.stage_id} must keep every loss active in stage {spec.stage_id - 1}")
            prev_active = active
        if all(lam == 0 for s in self.stages for lam in s.weights.as_tuple()):
            raise ConfigurationError("at least one loss weight must be > 0")


def default_stages(steps: int = 300) -> list[StageSpec]:
    """Default progressive schedule: each stage adds one objective."""
    return [
        StageSpec(1, LossWeights(1.0, 0.0, 0.0, 0.0), steps, "unpaired"),
        StageSpec(2, LossWeights(1.0, 0.1, 0.0, 0.0), steps, "unpaired"),
        StageSpec(3, LossWeights(1.0, 0.1, 0.5, 0.0), steps, "paired"),
        StageSpec(4, LossWeights(1.0, 0.1, 0.5, 1.0), steps, "paired"),
    ]


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.views.validate()
        self.curriculum.validate()

    def to_dict(self) -> dict:
        return _asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = _from_dict(cls, raw, "config")
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


def _from_dict(cls, raw, path: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in names.items():
        if name not in raw:
            continue
        value = raw[name]
        if name == "stages":
            value = [_from_dict(StageSpec, v, f"{path}.stages[{i}]") for i, v in enumerate(value)]
        elif name == "weights":
            value = _from_dict(LossWeights, value, f"{path}.weights")
        elif dataclasses.is_dataclass(_field_type(f)):
            value = _from_dict(_field_type(f), value, f"{path}.{name}")
        elif name in ("global_scale", "local_scale"):
            value = tuple(float(v) for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:  # missing required field
        raise ConfigurationError(f"{path}: {exc}") from None


_FIELD_TYPES = {
    "encoder": EncoderConfig,
    "views": ViewConfig,
    "curriculum": CurriculumConfig,
    "optimizer": OptimizerConfig,
    "grl_schedule": GrlSchedule,
    "temps": Temperatures,
    "weights": LossWeights,
}


def _field_type(f: dataclasses.Field):
    return _FIELD_TYPES.get(f.name, object)


def load_config(path: str | Path) -> RunConfig:
    """Load a RunConfig from a YAML file (JSON is accepted too)."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    if raw is None:
        raw = {}
    return RunConfig.from_dict(raw)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
