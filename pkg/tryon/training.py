"""
Three-stage self-supervised training.

1. image pre-training of the garment extractor (everything else frozen, no
   ControlNet): reconstruct a person frame from its parsed garment;
2. image training of extractor and ControlNet on single frames, the
   denoiser's SSA, PCA and feed-forward layers frozen;
3. video training on stride-varied clips with random agnostic-condition
   swaps, same freeze map by default; the `tuning` setting selects one of
   the freeze-tuning variants instead.

"""
from __future__ import annotations

import fnmatch
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn
from tqdm import tqdm

from . import settings
from .codec import Codec
from .config import ExperimentConfig
from .controlnet import build_control_input
from .diffusion import DiffusionSchedule, training_loss
from .exceptions import ConfigError, DataError, DivergenceError
from .scenes import (
    ConditioningTuple,
    SceneRender,
    apply_swap,
    augment_garment,
    sample_stride_clip,
    sample_swap_count,
    swap_indices,
)
from .stack import TryOnStack
from .storage import read_arrays, save_arrays

logger = logging.getLogger(__name__)

# frozen: the denoiser's spatial self-attention, prompt cross-attention and feed-forward
FROZEN_DENOISER = (
    "!denoiser.blocks.*.ssa.*",
    "!denoiser.blocks.*.pca.*",
    "!denoiser.blocks.*.ff.*",
)
STAGE_SELECTORS: Dict[int, Tuple[str, ...]] = {
    1: ("garment_extractor.*",),
    2: ("*",) + FROZEN_DENOISER,
    3: ("*",) + FROZEN_DENOISER,
}
TEMPORAL_SELECTORS = ("denoiser.blocks.*.tsa.*", "controlnet.blocks.*.tsa.*")
CONTROL_SPATIOTEMPORAL = ("controlnet.blocks.*.tsa.*", "controlnet.blocks.*.ssa.*")
# stage-3 selector sets, keyed by `StageSettings.tuning`
TUNING_SELECTORS: Dict[str, Tuple[str, ...]] = {
    "full": STAGE_SELECTORS[3],
    "freeze": TEMPORAL_SELECTORS,
    "freeze_control": CONTROL_SPATIOTEMPORAL,
    # the garment extractor has no temporal layers
    "freeze_control_garment": CONTROL_SPATIOTEMPORAL + ("garment_extractor.blocks.*.ssa.*",),
    # the denoiser stays frozen as a whole, garment fusion (SCA) included
    "control_garment": ("controlnet.*", "garment_extractor.*"),
}

NAMESPACES = ("denoiser", "garment_extractor", "controlnet")


@dataclass
class StageConfig:
    stage: int
    selectors: Tuple[str, ...]
    # "image" stages train on single frames, "video" stages on clips
    data_mode: str
    frames: int
    stride_range: Tuple[int, int]
    swap: bool
    k_max: Optional[int]
    steps: int
    learning_rate: float
    batch_size: int
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    use_controlnet: bool = True
    augment: bool = True
    contiguous_swap: bool = False
    max_rotation: float = 15.0
    scale_range: Tuple[float, float] = (0.8, 1.2)
    log_every: int = 50


def build_stage_configs(cfg: ExperimentConfig) -> List[StageConfig]:
    """Per-stage freeze maps, data modes and optimiser settings for one experiment."""
    data = cfg.data
    common = dict(
        k_max=data.k_max,
        augment=data.augment,
        contiguous_swap=data.swap_mode == "contiguous",
        max_rotation=data.max_rotation,
        scale_range=(data.scale_min, data.scale_max),
    )
    stages = []
    for stage_id in (1, 2, 3):
        settings_ = cfg.stage(stage_id)
        video = stage_id == 3
        selectors = TUNING_SELECTORS[settings_.tuning] if video else STAGE_SELECTORS[stage_id]
        stages.append(
            StageConfig(
                stage=stage_id,
                selectors=selectors,
                data_mode="video" if video else "image",
                frames=data.clip_frames if video else 1,
                stride_range=(data.stride_min, data.stride_max) if video else (1, 1),
                swap=video,
                steps=settings_.steps,
                learning_rate=settings_.learning_rate,
                batch_size=settings_.batch_size,
                weight_decay=settings_.weight_decay,
                grad_clip=settings_.grad_clip,
                use_controlnet=stage_id > 1,
                log_every=settings_.log_every,
                **common,  # type: ignore
            )
        )
    return stages


@dataclass
class ParameterPartition:
    trainable: Dict[str, nn.Parameter]
    frozen: Dict[str, nn.Parameter]

    def count(self, which: str = "trainable") -> int:
        return sum(p.numel() for p in getattr(self, which).values())


def select_parameters(names: Sequence[str], selectors: Sequence[str]) -> List[str]:
    """
    Resolve ordered glob selectors against dotted parameter names.

    A selector starting with "!" removes matches, any other adds them; later
    selectors win. Every selector must match at least one name.

    """
    chosen = dict.fromkeys(names, False)
    for selector in selectors:
        exclude = selector.startswith("!")
        pattern = selector[1:] if exclude else selector
        matched = [name for name in names if fnmatch.fnmatchcase(name, pattern)]
        if not matched:
            raise ConfigError(f"Selector {selector!r} matches no parameter")
        for name in matched:
            chosen[name] = not exclude
    return [name for name, keep in chosen.items() if keep]


def freeze_apply(model: nn.Module, selectors: Sequence[str]) -> ParameterPartition:
    """Set requires_grad from `selectors` and return the trainable / frozen split."""
    params = dict(model.named_parameters())
    trainable = set(select_parameters(list(params), selectors))
    partition = ParameterPartition(trainable={}, frozen={})
    for name, param in params.items():
        param.requires_grad_(name in trainable)
        target = partition.trainable if name in trainable else partition.frozen
        target[name] = param
    logger.debug(
        "Freeze map: %s trainable / %s frozen parameters",
        partition.count("trainable"),
        partition.count("frozen"),
    )
    return partition


@dataclass
class TrainingBatch:
    z0: Tensor  # (B, f, h, w, 4) clean latents, the diffusion target
    control: Optional[Tensor]  # (B, f, h, w, 9), built from the swapped tuple
    garment: Tensor  # (B, 1, h, w, 4)
    swapped: List[List[int]]
    # conditioning as sampled, before any swap (what the denoiser side sees)
    conditions: List[ConditioningTuple] = field(default_factory=list)


class ClipBatcher:
    """Draw training batches from rendered scenes with a numpy generator."""

    def __init__(
        self,
        scenes: Sequence[SceneRender],
        stage: StageConfig,
        codec: Codec,
        rng: np.random.Generator,
    ):
        if not scenes:
            raise DataError("No scenes to train on")
        self.scenes = list(scenes)
        self.stage = stage
        self.codec = codec
        self.rng = rng

    def sample(self) -> Tuple[Tensor, Optional[Tensor], Tensor, List[int], ConditioningTuple]:
        stage = self.stage
        scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        clip = sample_stride_clip(scene, stage.frames, stage.stride_range, self.rng)
        garment = clip.cond.c
        if stage.augment:
            garment = augment_garment(garment, self.rng, stage.max_rotation, stage.scale_range)
        z0 = self.codec.encode_tensor(clip.frames.data)
        g = self.codec.encode_tensor(garment)
        if not stage.use_controlnet:
            return z0, None, g, [], clip.cond
        swapped: List[int] = []
        cond = clip.cond
        if stage.swap:
            k = sample_swap_count(stage.frames, self.rng, stage.k_max)
            swapped = swap_indices(stage.frames, k, self.rng, stage.contiguous_swap)
            cond = apply_swap(clip.cond, clip.frames.data, swapped)
        control = build_control_input(cond, self.codec).data
        return z0, control, g, swapped, clip.cond

    def next_batch(self) -> TrainingBatch:
        items = [self.sample() for _ in range(self.stage.batch_size)]
        controls = [item[1] for item in items]
        return TrainingBatch(
            z0=torch.stack([item[0] for item in items]),
            control=None if controls[0] is None else torch.stack(controls),  # type: ignore
            garment=torch.stack([item[2] for item in items]),
            swapped=[item[3] for item in items],
            conditions=[item[4] for item in items],
        )


@dataclass
class Checkpoint:
    params: Dict[str, Tensor]
    stage: int
    step: int
    config_hash: str
    rng_state: Dict[str, Any] = field(default_factory=dict)
    optimizer: Dict[str, Tensor] = field(default_factory=dict)
    codec: Dict[str, Tensor] = field(default_factory=dict)
    history: List[Tuple[int, float]] = field(default_factory=list)
    config: Optional[Dict[str, Any]] = None

    def namespace(self, prefix: str) -> Dict[str, Tensor]:
        return {
            name[len(prefix) + 1 :]: value
            for name, value in self.params.items()
            if name.startswith(prefix + ".")
        }


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path], force: bool = True) -> Path:
    arrays: Dict[str, Any] = {}
    for name, value in ckpt.params.items():
        namespace, _, rest = name.partition(".")
        arrays[f"{namespace}/{rest}"] = value
    arrays.update({f"optimizer/{name}": value for name, value in ckpt.optimizer.items()})
    arrays.update({f"codec/{name}": value for name, value in ckpt.codec.items()})
    if "torch" in ckpt.rng_state:
        arrays["rng/torch"] = ckpt.rng_state["torch"]
    arrays["history/step"] = np.array([s for s, _ in ckpt.history], dtype=np.int64)
    arrays["history/loss"] = np.array([v for _, v in ckpt.history], dtype=np.float64)
    meta = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "numpy_rng": ckpt.rng_state.get("numpy"),
    }
    target = save_arrays(path, arrays, meta, force=force)
    logger.info("Saved stage %s checkpoint at step %s to %s", ckpt.stage, ckpt.step, target)
    return target


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    arrays, manifest = read_arrays(path)
    ckpt = Checkpoint(
        params={},
        stage=int(manifest["stage"]),
        step=int(manifest["step"]),
        config_hash=manifest["config_hash"],
        config=manifest.get("config"),
    )
    for name, value in arrays.items():
        namespace, _, rest = name.partition("/")
        tensor = torch.from_numpy(value)
        if namespace in NAMESPACES:
            ckpt.params[f"{namespace}.{rest}"] = tensor
        elif namespace == "optimizer":
            ckpt.optimizer[rest] = tensor
        elif namespace == "codec":
            ckpt.codec[rest] = tensor
    if "rng/torch" in arrays:
        ckpt.rng_state["torch"] = torch.from_numpy(arrays["rng/torch"])
    if manifest.get("numpy_rng") is not None:
        ckpt.rng_state["numpy"] = manifest["numpy_rng"]
    steps, losses = arrays.get("history/step", []), arrays.get("history/loss", [])
    ckpt.history = [(int(s), float(v)) for s, v in zip(steps, losses)]
    return ckpt


def apply_checkpoint(stack: TryOnStack, ckpt: Checkpoint) -> None:
    """Load parameters (and codec weights, if any) into `stack`."""
    try:
        missing, unexpected = stack.load_state_dict(ckpt.params, strict=False)
    except RuntimeError as ex:
        raise DataError(f"Checkpoint does not fit the model: {ex}") from ex
    if unexpected:
        raise DataError(f"Checkpoint holds unknown parameters, e.g. {unexpected[0]}")
    if missing:
        raise DataError(f"Checkpoint is missing {len(missing)} parameters, e.g. {missing[0]}")
    if ckpt.codec:
        stack.codec.load_state_dict(ckpt.codec)


def stage_generators(seed: int, stage: int) -> Tuple[np.random.Generator, torch.Generator]:
    """Data (numpy) and noise (torch) generators of one stage."""
    data_rng = np.random.default_rng([seed, stage])
    noise_rng = torch.Generator().manual_seed(seed * 1000 + stage)
    return data_rng, noise_rng


class Trainer:
    """Owns the optimiser and both generators of a single stage run."""

    def __init__(
        self,
        stack: TryOnStack,
        stage: StageConfig,
        sched: DiffusionSchedule,
        batcher: ClipBatcher,
        noise_rng: torch.Generator,
        config_hash: str = "",
        divergence_threshold: Optional[float] = None,
    ):
        self.stack = stack
        self.stage = stage
        self.sched = sched
        self.batcher = batcher
        self.noise_rng = noise_rng
        self.config_hash = config_hash
        self.divergence_threshold = (
            settings.TRYON_DIVERGENCE_THRESHOLD
            if divergence_threshold is None
            else divergence_threshold
        )
        stack.use_controlnet = stage.use_controlnet
        self.partition = freeze_apply(stack, stage.selectors)
        self.trainable_names = list(self.partition.trainable)
        self.optimizer: Optional[torch.optim.AdamW] = None
        if self.trainable_names:
            self.optimizer = torch.optim.AdamW(
                list(self.partition.trainable.values()),
                lr=stage.learning_rate,
                weight_decay=stage.weight_decay,
            )
        self.step = 0
        self.history: List[Tuple[int, float]] = []

    def batch_loss(self, batch: TrainingBatch) -> Tensor:
        return training_loss(
            self.stack, batch.z0, batch.control, batch.garment, self.noise_rng, self.sched
        )

    def train_step(self) -> float:
        batch = self.batcher.next_batch()
        self.stack.train()
        if self.optimizer is None:
            with torch.no_grad():
                loss = self.batch_loss(batch)
        else:
            self.optimizer.zero_grad(set_to_none=True)
            loss = self.batch_loss(batch)
        value = float(loss.detach())
        if not math.isfinite(value) or value > self.divergence_threshold:
            raise DivergenceError(
                f"Stage {self.stage.stage} diverged at step {self.step + 1}: loss {value}"
            )
        if self.optimizer is not None:
            loss.backward()
            if self.stage.grad_clip > 0:
                nn.utils.clip_grad_norm_(self.partition.trainable.values(), self.stage.grad_clip)
            self.optimizer.step()
        self.step += 1
        self.history.append((self.step, value))
        if self.stage.log_every and self.step % self.stage.log_every == 0:
            logger.info("stage %s step %s loss %.6f", self.stage.stage, self.step, value)
        else:
            logger.debug("stage %s step %s loss %.6f", self.stage.stage, self.step, value)
        return value

    def run(
        self, steps: Optional[int] = None, progress: Optional[bool] = None
    ) -> List[Tuple[int, float]]:
        """Train until `steps` (default: the stage step count) steps have been taken."""
        total = self.stage.steps if steps is None else steps
        show = settings.TRYON_PROGRESS_BAR if progress is None else progress
        remaining = range(self.step, total)
        for _ in tqdm(remaining, disable=not show, desc=f"stage {self.stage.stage}"):
            self.train_step()
        return self.history

    def optimizer_arrays(self) -> Dict[str, Tensor]:
        if self.optimizer is None:
            return {}
        state = self.optimizer.state_dict()["state"]
        arrays = {}
        for index, name in enumerate(self.trainable_names):
            for key, value in state.get(index, {}).items():
                arrays[f"{name}/{key}"] = torch.as_tensor(value).detach().clone()
        return arrays

    def load_optimizer_arrays(self, arrays: Dict[str, Tensor]) -> None:
        if self.optimizer is None or not arrays:
            return
        current = self.optimizer.state_dict()
        state: Dict[int, Dict[str, Tensor]] = {}
        for index, name in enumerate(self.trainable_names):
            entries = {
                key[len(name) + 1 :]: value
                for key, value in arrays.items()
                if key.startswith(name + "/")
            }
            if entries:
                state[index] = entries
        self.optimizer.load_state_dict({"state": state, "param_groups": current["param_groups"]})

    def checkpoint(self) -> Checkpoint:
        codec_state = {k: v.detach().clone() for k, v in self.stack.codec.state_dict().items()}
        return Checkpoint(
            params={k: v.detach().clone() for k, v in self.stack.state_dict().items()},
            stage=self.stage.stage,
            step=self.step,
            config_hash=self.config_hash,
            rng_state={
                "numpy": self.batcher.rng.bit_generator.state,
                "torch": self.noise_rng.get_state(),
            },
            optimizer=self.optimizer_arrays(),
            codec=codec_state,
            history=list(self.history),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Continue a stage from one of its own checkpoints."""
        if ckpt.stage != self.stage.stage:
            raise DataError(
                f"Cannot resume stage {self.stage.stage} from a stage {ckpt.stage} checkpoint"
            )
        apply_checkpoint(self.stack, ckpt)
        self.load_optimizer_arrays(ckpt.optimizer)
        if "numpy" in ckpt.rng_state:
            self.batcher.rng.bit_generator.state = ckpt.rng_state["numpy"]
        if "torch" in ckpt.rng_state:
            self.noise_rng.set_state(ckpt.rng_state["torch"])
        self.step = ckpt.step
        self.history = list(ckpt.history)


def train_stage(
    stage: StageConfig,
    scenes: Sequence[SceneRender],
    stack: TryOnStack,
    sched: DiffusionSchedule,
    seed: int = 0,
    config_hash: str = "",
    resume: Optional[Checkpoint] = None,
    progress: Optional[bool] = None,
) -> Checkpoint:
    """Run one stage end to end and return its final checkpoint."""
    data_rng, noise_rng = stage_generators(seed, stage.stage)
    batcher = ClipBatcher(scenes, stage, stack.codec, data_rng)
    trainer = Trainer(stack, stage, sched, batcher, noise_rng, config_hash)
    if resume is not None:
        trainer.restore(resume)
        logger.info("Resuming stage %s at step %s", stage.stage, trainer.step)
    logger.info(
        "Stage %s: %s steps, %s trainable parameters, %s mode",
        stage.stage,
        stage.steps,
        trainer.partition.count(),
        stage.data_mode,
    )
    trainer.run(progress=progress)
    if trainer.history:
        logger.info("Stage %s finished, last loss %.6f", stage.stage, trainer.history[-1][1])
    return trainer.checkpoint()
