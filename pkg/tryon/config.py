"""
Experiment configuration.

The whole experiment is one dataclass tree. It is read from and written to
YAML through omegaconf structured configs, so unknown keys and wrongly typed
values are rejected before anything runs.

"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import yaml
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .codec import DOWNSAMPLE, CodecSpec
from .controlnet import ControlNetConfig
from .diffusion import DiffusionConfig
from .dit import DenoiserConfig
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

SWAP_MODES = ("scattered", "contiguous")
INFERENCE_MODES = ("clip", "ar", "iar")
TUNING_MODES = (
    "full",
    "freeze",
    "freeze_control",
    "freeze_control_garment",
    "control_garment",
)


@dataclass
class DataConfig:
    # directory written by `synth_data`; scenes are rendered on the fly when unset
    dataset: Optional[str] = None
    scenes: int = 4
    scene_frames: int = 48
    height: int = 128
    width: int = 128
    clip_frames: int = 8
    stride_min: int = 1
    stride_max: int = 4
    # cap on the random swap count; None means floor(f / 3)
    k_max: Optional[int] = None
    swap_mode: str = "scattered"
    augment: bool = True
    max_rotation: float = 15.0
    scale_min: float = 0.8
    scale_max: float = 1.2


@dataclass
class StageSettings:
    steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 4
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    # stage 3 only: "full" opens everything but the denoiser SSA/PCA/FF;
    # "freeze" trains the temporal attention of denoiser and ControlNet,
    # "freeze_control" the ControlNet TSA and SSA, "freeze_control_garment"
    # those plus the extractor SSA; "control_garment" trains ControlNet and
    # extractor in full with the whole denoiser frozen
    tuning: str = "full"
    log_every: int = 50


@dataclass
class InferenceConfig:
    mode: str = "iar"
    frames: int = 36
    window: int = 12
    overlap: int = 3
    subvideos: int = 4
    sampler: str = "ancestral"


@dataclass
class ExperimentConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    controlnet: ControlNetConfig = field(default_factory=ControlNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    codec: CodecSpec = field(default_factory=CodecSpec)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: StageSettings = field(default_factory=StageSettings)
    stage2: StageSettings = field(default_factory=StageSettings)
    stage3: StageSettings = field(default_factory=lambda: StageSettings(steps=2000))
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    seed: int = 0

    def stage(self, stage_id: int) -> StageSettings:
        if stage_id not in (1, 2, 3):
            raise ConfigError(f"Unknown training stage {stage_id}")
        return getattr(self, f"stage{stage_id}")

    def validate(self) -> ExperimentConfig:  # noqa: C901
        """Check cross-field constraints; returns self so calls can be chained."""
        self.model.validate()
        self.diffusion.validate()
        data = self.data
        factor = DOWNSAMPLE * self.model.patch_size
        if data.height % factor or data.width % factor:
            raise ConfigError(
                f"Frame size {data.height}x{data.width} must be a multiple of {factor}"
            )
        if not 1 <= data.stride_min <= data.stride_max:
            raise ConfigError("Stride range must satisfy 1 <= stride_min <= stride_max")
        if data.clip_frames > self.model.max_frames:
            raise ConfigError(
                f"Clip of {data.clip_frames} frames exceeds max_frames={self.model.max_frames}"
            )
        if data.swap_mode not in SWAP_MODES:
            raise ConfigError(f"Unknown swap mode {data.swap_mode!r}")
        if data.scenes < 1:
            raise ConfigError("At least one scene is required")
        for stage_id in (1, 2, 3):
            settings = self.stage(stage_id)
            if settings.steps < 0 or settings.batch_size < 1 or settings.learning_rate <= 0:
                raise ConfigError(f"Invalid optimisation settings for stage {stage_id}")
            if settings.tuning not in TUNING_MODES:
                raise ConfigError(f"Unknown tuning mode {settings.tuning!r}")
        if self.inference.mode not in INFERENCE_MODES:
            raise ConfigError(f"Unknown inference mode {self.inference.mode!r}")
        if self.inference.window > self.model.max_frames:
            raise ConfigError(
                f"Window of {self.inference.window} frames exceeds "
                f"max_frames={self.model.max_frames}"
            )
        return self

    @classmethod
    def full_scale(cls) -> ExperimentConfig:
        """Sizes and optimiser settings of the full-size model (not runnable at desk scale)."""
        return cls(
            model=DenoiserConfig.full_scale(),
            diffusion=DiffusionConfig(steps=1000),
            codec=CodecSpec(kind="conv"),
            data=DataConfig(height=256, width=192, clip_frames=16, scene_frames=120),
            stage1=StageSettings(learning_rate=1e-5, batch_size=8),
            stage2=StageSettings(learning_rate=1e-5, batch_size=8),
            stage3=StageSettings(learning_rate=1e-5, batch_size=1, steps=2000),
            inference=InferenceConfig(frames=120, window=16, overlap=4, subvideos=8),
        )


def to_container(cfg: ExperimentConfig) -> Dict[str, Any]:
    return OmegaConf.to_container(OmegaConf.structured(cfg), resolve=True)  # type: ignore


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form; identical configs share a hash."""
    canonical = json.dumps(to_container(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def merge_config(
    source: Union[str, Path, Dict[str, Any], None] = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    """
    Build a validated config from the defaults, a YAML file (or dict) and dotlist overrides.

    Overrides use omegaconf dot notation, e.g. "inference.window=8".

    """
    try:
        merged = OmegaConf.structured(ExperimentConfig)
        if isinstance(source, dict):
            merged = OmegaConf.merge(merged, OmegaConf.create(source))
        elif source is not None:
            merged = OmegaConf.merge(merged, OmegaConf.load(str(source)))
        if overrides:
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(list(overrides)))
        cfg = OmegaConf.to_object(merged)
    except FileNotFoundError as ex:
        raise ConfigError(f"Config file not found: {source}") from ex
    except (OmegaConfBaseException, yaml.YAMLError) as ex:
        raise ConfigError(f"Invalid experiment config: {ex}") from ex
    assert isinstance(cfg, ExperimentConfig)
    return cfg.validate()


def load_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    cfg = merge_config(path, overrides)
    logger.debug("Loaded config %s (hash %s)", path, config_hash(cfg)[:12])
    return cfg


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    OmegaConf.save(OmegaConf.structured(cfg), str(path))
    return path
