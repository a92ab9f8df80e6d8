"""
Experiment directory plumbing shared by the management commands.

Layout of an experiment directory::

    config.yaml
    checkpoints/stage1 .. stage3/
    samples/
    reports/
    logs/

"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch

from . import settings
from .codec import Codec, build_codec, fit_codec
from .config import ExperimentConfig, config_hash, load_config, merge_config, save_config
from .diffusion import DiffusionSchedule, schedule_from_config
from .exceptions import ConfigError, DataError
from .scenes import SceneRender, random_scene_spec, render_scene
from .stack import TryOnStack, build_stack
from .storage import load_dataset
from .training import Checkpoint, apply_checkpoint, load_checkpoint

logger = logging.getLogger(__name__)


def resolve_config(
    path: Optional[Union[str, Path]], seed: Optional[int] = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    """Config from `path` (or the defaults) with dotlist overrides and an optional seed."""
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    if path is None:
        return merge_config(None, extra)
    return load_config(path, extra)


def scene_seeds(cfg: ExperimentConfig) -> List[int]:
    return [cfg.seed * 10_000 + i for i in range(cfg.data.scenes)]


def render_scenes(cfg: ExperimentConfig, frames: Optional[int] = None) -> List[SceneRender]:
    data = cfg.data
    total = frames or data.scene_frames
    return [
        render_scene(random_scene_spec(seed, data.height, data.width, total))
        for seed in scene_seeds(cfg)
    ]


class Experiment:
    """One run directory bound to one config (and so to one config hash)."""

    def __init__(self, root: Union[str, Path], cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = config_hash(cfg)

    def path(self, name: str) -> Path:
        if name not in settings.TRYON_EXPERIMENT_DIRS:
            raise ConfigError(f"Unknown experiment folder {name!r}")
        return self.root / name

    @property
    def config_path(self) -> Path:
        return self.root / settings.TRYON_CONFIG_FILENAME

    def checkpoint_path(self, stage: int) -> Path:
        return self.path("checkpoints") / f"stage{stage}"

    def loss_history_path(self, stage: int) -> Path:
        return self.path("logs") / f"stage{stage}_{settings.TRYON_LOSS_HISTORY_FILENAME}"

    def prepare(self) -> None:
        """Create the folder layout and store (or verify) the config copy."""
        for name in settings.TRYON_EXPERIMENT_DIRS:
            self.path(name).mkdir(parents=True, exist_ok=True)
        if self.config_path.exists():
            stored = config_hash(load_config(self.config_path))
            if stored != self.hash:
                raise ConfigError(
                    f"{self.root} belongs to a different config ({stored[:12]} != {self.hash[:12]})"
                )
            return
        save_config(self.cfg, self.config_path)
        logger.info("Experiment %s (config %s)", self.root, self.hash[:12])

    def scenes(self) -> List[SceneRender]:
        if self.cfg.data.dataset:
            scenes = load_dataset(self.cfg.data.dataset)
            logger.info("Loaded %s scenes from %s", len(scenes), self.cfg.data.dataset)
            return scenes
        return render_scenes(self.cfg)

    def schedule(self) -> DiffusionSchedule:
        return schedule_from_config(self.cfg.diffusion)

    def codec(self, scenes: Optional[Sequence[SceneRender]] = None) -> Codec:
        """The experiment codec; trainable codecs are fitted on the scene frames."""
        codec = build_codec(self.cfg.codec)
        if codec.parameters() and scenes:
            frames = torch.cat([scene.video for scene in scenes])
            fit_codec(codec, frames, seed=self.cfg.seed)
        return codec

    def stack(self, codec: Codec, use_controlnet: bool = True) -> TryOnStack:
        return build_stack(
            self.cfg.model,
            codec,
            self.cfg.controlnet,
            settings.TRYON_DEFAULT_PROMPT,
            seed=self.cfg.seed,
            use_controlnet=use_controlnet,
        )

    def load_checkpoint(self, path: Union[str, Path], allow_mismatch: bool = False) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise DataError(f"No checkpoint at {path}")
        ckpt = load_checkpoint(path)
        if ckpt.config_hash != self.hash:
            logger.warning(
                "Checkpoint %s was written under config %s, this run uses %s",
                path,
                ckpt.config_hash[:12],
                self.hash[:12],
            )
            if not allow_mismatch:
                raise ConfigError(f"Config hash mismatch for checkpoint {path}")
        return ckpt

    def restored_stack(self, ckpt: Checkpoint, use_controlnet: bool = True) -> TryOnStack:
        codec = build_codec(self.cfg.codec)
        stack = self.stack(codec, use_controlnet)
        apply_checkpoint(stack, ckpt)
        return stack
