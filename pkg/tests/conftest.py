from __future__ import annotations

from pathlib import Path
from typing import Any, Dict

import pytest
import torch
import yaml

from tryon.codec import CodecSpec, LinearTestCodec
from tryon.config import ExperimentConfig, merge_config
from tryon.diffusion import DiffusionSchedule, make_schedule
from tryon.dit import DenoiserConfig
from tryon.scenes import SceneRender, random_scene_spec, render_scene
from tryon.stack import TryOnStack, build_stack

TINY_MODEL: Dict[str, Any] = {
    "depth": 2,
    "patch_size": 2,
    "hidden_size": 16,
    "num_heads": 2,
    "mlp_ratio": 2.0,
    "max_frames": 8,
    "prompt_length": 4,
    "prompt_dim": 8,
}

TINY_EXPERIMENT: Dict[str, Any] = {
    "seed": 3,
    "model": TINY_MODEL,
    "diffusion": {"steps": 5},
    "data": {
        "scenes": 2,
        "scene_frames": 16,
        "height": 32,
        "width": 32,
        "clip_frames": 4,
        "stride_max": 2,
    },
    "stage1": {"steps": 3, "batch_size": 2, "log_every": 1},
    "stage2": {"steps": 3, "batch_size": 2, "log_every": 1},
    "stage3": {"steps": 3, "batch_size": 2, "log_every": 1},
    "inference": {"frames": 6, "window": 4, "overlap": 1, "subvideos": 2},
}


@pytest.fixture
def tiny_cfg() -> DenoiserConfig:
    return DenoiserConfig(**TINY_MODEL)


@pytest.fixture
def codec() -> LinearTestCodec:
    return LinearTestCodec(CodecSpec())


@pytest.fixture
def sched() -> DiffusionSchedule:
    return make_schedule(10)


@pytest.fixture
def stack(tiny_cfg: DenoiserConfig, codec: LinearTestCodec) -> TryOnStack:
    return build_stack(tiny_cfg, codec, prompt="test prompt", seed=0)


@pytest.fixture(scope="session")
def scene() -> SceneRender:
    return render_scene(random_scene_spec(3, height=32, width=32, frames=16))


@pytest.fixture
def experiment_cfg() -> ExperimentConfig:
    return merge_config(TINY_EXPERIMENT)


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_EXPERIMENT))
    return path


def randn(*shape: int, seed: int = 0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)
