from dataclasses import replace

import numpy as np
import pytest
import torch

from tryon.config import TUNING_MODES
from tryon.controlnet import MASK_CHANNEL
from tryon.exceptions import ConfigError, DataError, DivergenceError
from tryon.stack import build_stack
from tryon.training import (
    FROZEN_DENOISER,
    STAGE_SELECTORS,
    TUNING_SELECTORS,
    ClipBatcher,
    Trainer,
    apply_checkpoint,
    build_stage_configs,
    freeze_apply,
    load_checkpoint,
    save_checkpoint,
    select_parameters,
    stage_generators,
    train_stage,
)


@pytest.fixture
def stages(experiment_cfg):
    return {stage.stage: stage for stage in build_stage_configs(experiment_cfg)}


def make_trainer(stack, stage, sched, scenes, seed=0, **kwargs):
    data_rng, noise_rng = stage_generators(seed, stage.stage)
    batcher = ClipBatcher(scenes, stage, stack.codec, data_rng)
    return Trainer(stack, stage, sched, batcher, noise_rng, **kwargs)


def snapshot(params):
    return {name: p.detach().clone() for name, p in params.items()}


def in_blocks(name, *owners, layers=("tsa", "ssa")):
    return any(
        name.startswith(f"{owner}.blocks.") and f".{layer}." in name
        for owner in owners
        for layer in layers
    )


def denoiser_core(name):
    return in_blocks(name, "denoiser", layers=("ssa", "pca", "ff"))


# which parameters each stage-3 tuning mode leaves trainable
TUNING_OPENS = {
    "full": lambda name: not denoiser_core(name),
    "freeze": lambda name: in_blocks(name, "denoiser", "controlnet", layers=("tsa",)),
    "freeze_control": lambda name: in_blocks(name, "controlnet"),
    "freeze_control_garment": lambda name: (
        in_blocks(name, "controlnet") or in_blocks(name, "garment_extractor", layers=("ssa",))
    ),
    "control_garment": lambda name: name.startswith(("controlnet.", "garment_extractor.")),
}


class TestStageConfigs:
    def test_image_stages(self, stages) -> None:
        for stage_id in (1, 2):
            stage = stages[stage_id]
            assert stage.data_mode == "image"
            assert stage.frames == 1
            assert stage.stride_range == (1, 1)
            assert not stage.swap
        assert not stages[1].use_controlnet
        assert stages[2].use_controlnet

    def test_video_stage(self, stages) -> None:
        stage = stages[3]
        assert stage.data_mode == "video"
        assert stage.frames == 4
        assert stage.stride_range == (1, 2)
        assert stage.swap
        assert stage.selectors == STAGE_SELECTORS[3]

    def test_freeze_tuning(self, experiment_cfg) -> None:
        experiment_cfg.stage3.tuning = "freeze"
        stage = build_stage_configs(experiment_cfg)[2]
        assert all(".tsa." in s for s in stage.selectors)

    def test_weight_decay_default(self, stages) -> None:
        assert all(stage.weight_decay == 1e-2 for stage in stages.values())

    def test_every_tuning_mode_has_selectors(self) -> None:
        assert set(TUNING_SELECTORS) == set(TUNING_MODES)

    @pytest.mark.parametrize("tuning", TUNING_MODES)
    def test_tuning_only_changes_stage_three(self, experiment_cfg, tuning) -> None:
        experiment_cfg.stage3.tuning = tuning
        stages = build_stage_configs(experiment_cfg)
        assert stages[1].selectors == STAGE_SELECTORS[2]
        assert stages[2].selectors == TUNING_SELECTORS[tuning]


class TestSelectors:
    NAMES = ["a.x.w", "a.x.b", "a.y.w", "b.x.w"]

    def test_later_selectors_win(self) -> None:
        assert select_parameters(self.NAMES, ["*", "!a.*", "a.y.*"]) == ["a.y.w", "b.x.w"]

    def test_empty(self) -> None:
        assert select_parameters(self.NAMES, []) == []

    def test_unmatched_selector(self) -> None:
        with pytest.raises(ConfigError):
            select_parameters(self.NAMES, ["c.*"])

    def test_stage_one_opens_only_the_extractor(self, stack) -> None:
        partition = freeze_apply(stack, STAGE_SELECTORS[1])
        assert partition.trainable
        assert all(name.startswith("garment_extractor.") for name in partition.trainable)
        assert partition.count() == sum(p.numel() for p in stack.garment_extractor.parameters())
        assert all(not p.requires_grad for p in stack.denoiser.parameters())

    def test_later_stages_freeze_denoiser_core(self, stack) -> None:
        partition = freeze_apply(stack, STAGE_SELECTORS[3])
        frozen_parts = tuple(s.split("*")[1] for s in FROZEN_DENOISER)
        for name in stack.state_dict():
            core = name.startswith("denoiser.blocks.") and any(p in name for p in frozen_parts)
            assert (name in partition.frozen) == core, name
        assert any(".tsa." in name for name in partition.trainable)
        assert any(name.startswith("controlnet.") for name in partition.trainable)


class TestTrainer:
    @pytest.mark.parametrize("stage_id", [1, 2, 3])
    def test_frozen_parameters_never_move(self, stack, stages, sched, scene, stage_id) -> None:
        trainer = make_trainer(stack, stages[stage_id], sched, [scene])
        frozen = snapshot(trainer.partition.frozen)
        trainable = snapshot(trainer.partition.trainable)
        trainer.run(10)
        assert len(trainer.history) == 10
        for name, before in frozen.items():
            assert torch.equal(trainer.partition.frozen[name], before), name
        assert any(
            not torch.equal(trainer.partition.trainable[name], before)
            for name, before in trainable.items()
        )

    @pytest.mark.parametrize("tuning", TUNING_MODES)
    def test_tuning_modes_keep_frozen_parameters(
        self, experiment_cfg, stack, sched, scene, tuning
    ) -> None:
        experiment_cfg.stage3.tuning = tuning
        stage = build_stage_configs(experiment_cfg)[2]
        trainer = make_trainer(stack, stage, sched, [scene])
        opened = TUNING_OPENS[tuning]
        for name in dict(stack.named_parameters()):
            assert (name in trainer.partition.trainable) == opened(name), name
        frozen = snapshot(trainer.partition.frozen)
        trainer.run(10)
        assert len(trainer.history) == 10
        for name, before in frozen.items():
            assert torch.equal(trainer.partition.frozen[name], before), name

    def test_optimizer_weight_decay(self, stack, stages, sched, scene) -> None:
        trainer = make_trainer(stack, stages[3], sched, [scene])
        assert trainer.optimizer.param_groups[0]["weight_decay"] == 1e-2

    def test_nothing_selected(self, stack, stages, sched, scene) -> None:
        stage = replace(stages[3], selectors=())
        trainer = make_trainer(stack, stage, sched, [scene])
        assert trainer.optimizer is None
        before = snapshot(dict(stack.named_parameters()))
        trainer.run(2)
        assert all(torch.equal(p, before[n]) for n, p in stack.named_parameters())

    def test_constant_learning_rate(self, stack, stages, sched, scene) -> None:
        trainer = make_trainer(stack, stages[2], sched, [scene])
        trainer.run(3)
        assert trainer.optimizer.param_groups[0]["lr"] == stages[2].learning_rate

    def test_divergence(self, stack, stages, sched, scene) -> None:
        trainer = make_trainer(stack, stages[2], sched, [scene], divergence_threshold=1e-12)
        with pytest.raises(DivergenceError):
            trainer.train_step()

    def test_no_scenes(self, stack, stages) -> None:
        with pytest.raises(DataError):
            ClipBatcher([], stages[3], stack.codec, np.random.default_rng(0))

    def test_resume_continues_identically(
        self, tiny_cfg, codec, stages, sched, scene, tmp_path
    ) -> None:
        stage = replace(stages[3], steps=5)
        first = make_trainer(build_stack(tiny_cfg, codec, seed=0), stage, sched, [scene])
        first.run(3)
        path = save_checkpoint(first.checkpoint(), tmp_path / "stage3")
        first.run(5)

        resumed = make_trainer(build_stack(tiny_cfg, codec, seed=9), stage, sched, [scene])
        resumed.restore(load_checkpoint(path))
        assert resumed.step == 3
        resumed.run(5)
        assert resumed.history == first.history

    def test_restore_other_stage(self, stack, stages, sched, scene) -> None:
        ckpt = make_trainer(stack, stages[2], sched, [scene]).checkpoint()
        with pytest.raises(DataError):
            make_trainer(stack, stages[3], sched, [scene]).restore(ckpt)


class TestClipBatcher:
    def test_shapes(self, stack, stages, scene) -> None:
        batcher = ClipBatcher([scene], stages[3], stack.codec, np.random.default_rng(0))
        batch = batcher.next_batch()
        assert batch.z0.shape == (2, 4, 4, 4, 4)
        assert batch.control.shape == (2, 4, 4, 4, 9)
        assert batch.garment.shape == (2, 1, 4, 4, 4)

    def test_stage_one_has_no_control(self, stack, stages, scene) -> None:
        batch = ClipBatcher([scene], stages[1], stack.codec, np.random.default_rng(0)).next_batch()
        assert batch.control is None
        assert batch.z0.shape == (2, 1, 4, 4, 4)

    def test_swaps_only_reach_the_control_branch(self, stack, stages, scene) -> None:
        stage = replace(stages[3], frames=6, augment=False, batch_size=4)
        batcher = ClipBatcher([scene], stage, stack.codec, np.random.default_rng(0))
        seen = 0
        for _ in range(10):
            batch = batcher.next_batch()
            for b, indices in enumerate(batch.swapped):
                for i in indices:
                    seen += 1
                    control = batch.control[b, i]
                    assert torch.allclose(control[..., :4], batch.z0[b, i], atol=1e-6)
                    assert control[..., MASK_CHANNEL].sum() == 0
                    assert batch.conditions[b].m_c[i].sum() > 0
                kept = [i for i in range(6) if i not in indices]
                assert (batch.control[b, kept, ..., MASK_CHANNEL].flatten(1).sum(1) > 0).all()
        assert seen > 0


class TestCheckpoint:
    def test_roundtrip_reproduces_outputs(
        self, tiny_cfg, codec, stages, sched, scene, tmp_path
    ) -> None:
        source = build_stack(tiny_cfg, codec, seed=0)
        trainer = make_trainer(source, stages[3], sched, [scene])
        trainer.run(2)
        ckpt = load_checkpoint(save_checkpoint(trainer.checkpoint(), tmp_path / "ckpt"))
        assert ckpt.stage == 3
        assert ckpt.step == 2
        assert len(ckpt.history) == 2
        assert ckpt.optimizer

        target = build_stack(tiny_cfg, codec, seed=5)
        apply_checkpoint(target, ckpt)
        z = torch.randn(1, 2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
        garment = torch.randn(1, 1, 4, 4, 4, generator=torch.Generator().manual_seed(1))
        control = torch.zeros(1, 2, 4, 4, 9)
        t = torch.tensor([3])
        with torch.no_grad():
            assert torch.equal(source(z, t, control, garment), target(z, t, control, garment))

    def test_namespaces(self, stack, stages, sched, scene) -> None:
        ckpt = make_trainer(stack, stages[2], sched, [scene]).checkpoint()
        assert set(ckpt.namespace("controlnet")) == set(stack.controlnet.state_dict())

    def test_foreign_parameters(self, tiny_cfg, codec, stack, stages, sched, scene) -> None:
        ckpt = make_trainer(stack, stages[2], sched, [scene]).checkpoint()
        ckpt.params["denoiser.extra"] = torch.zeros(1)
        with pytest.raises(DataError):
            apply_checkpoint(build_stack(tiny_cfg, codec), ckpt)

    def test_wrong_shapes(self, codec, stack, stages, sched, scene) -> None:
        from tryon.dit import DenoiserConfig

        ckpt = make_trainer(stack, stages[2], sched, [scene]).checkpoint()
        other = build_stack(
            DenoiserConfig(depth=2, hidden_size=8, num_heads=2, prompt_length=4, prompt_dim=8),
            codec,
        )
        with pytest.raises(DataError):
            apply_checkpoint(other, ckpt)


def test_train_stage(stack, stages, sched, scene) -> None:
    ckpt = train_stage(stages[1], [scene], stack, sched, seed=1, config_hash="abc")
    assert ckpt.step == stages[1].steps
    assert ckpt.config_hash == "abc"
    assert [step for step, _ in ckpt.history] == [1, 2, 3]
