from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from tryon.config import (
    TUNING_MODES,
    ExperimentConfig,
    config_hash,
    load_config,
    merge_config,
    save_config,
    to_container,
)
from tryon.exceptions import ConfigError

from .conftest import TINY_EXPERIMENT


class TestMergeConfig:
    def test_defaults(self) -> None:
        cfg = merge_config()
        assert cfg == ExperimentConfig()
        assert cfg.inference.window == 12
        assert cfg.diffusion.beta_start == 1e-4

    def test_dict_source(self, experiment_cfg: ExperimentConfig) -> None:
        assert experiment_cfg.model.depth == 2
        assert experiment_cfg.data.height == 32
        assert experiment_cfg.stage3.steps == 3
        # untouched keys keep their defaults
        assert experiment_cfg.data.swap_mode == "scattered"

    def test_file_matches_dict(self, config_file: Path, experiment_cfg: ExperimentConfig) -> None:
        assert load_config(config_file) == experiment_cfg

    def test_dotlist_overrides(self, config_file: Path) -> None:
        cfg = load_config(config_file, ["inference.window=3", "stage3.tuning=freeze"])
        assert cfg.inference.window == 3
        assert cfg.stage3.tuning == "freeze"

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_unknown_key(self) -> None:
        with pytest.raises(ConfigError):
            merge_config({"model": {"width": 3}})

    def test_wrong_type(self) -> None:
        with pytest.raises(ConfigError):
            merge_config({"data": {"scenes": "many"}})

    def test_bad_override(self) -> None:
        with pytest.raises(ConfigError):
            merge_config(TINY_EXPERIMENT, ["inference.unknown=1"])

    def test_malformed_yaml(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.yaml"
        path.write_text("model: [depth\n")
        with pytest.raises(ConfigError):
            load_config(path)


class TestValidate:
    @pytest.mark.parametrize(
        "overrides",
        [
            ["model.depth=3"],
            ["model.hidden_size=18"],
            ["data.height=36"],
            ["data.stride_min=3", "data.stride_max=2"],
            ["data.clip_frames=9"],
            ["data.swap_mode=random"],
            ["data.scenes=0"],
            ["stage2.learning_rate=0"],
            ["stage3.tuning=partial"],
            ["inference.mode=loop"],
            ["inference.window=9"],
            ["diffusion.steps=0"],
            ["diffusion.sampler=ddim"],
        ],
    )
    def test_rejected(self, overrides: list) -> None:
        with pytest.raises(ConfigError):
            merge_config(TINY_EXPERIMENT, overrides)

    @pytest.mark.parametrize("tuning", TUNING_MODES)
    def test_tuning_modes_accepted(self, tuning: str) -> None:
        assert merge_config(TINY_EXPERIMENT, [f"stage3.tuning={tuning}"]).stage3.tuning == tuning

    def test_unknown_stage(self, experiment_cfg: ExperimentConfig) -> None:
        with pytest.raises(ConfigError):
            experiment_cfg.stage(4)

    def test_full_scale_is_consistent(self) -> None:
        cfg = ExperimentConfig.full_scale().validate()
        assert cfg.model.depth == 28
        assert cfg.model.hidden_size == 1152
        assert cfg.diffusion.steps == 1000
        assert cfg.stage3.learning_rate == 1e-5


class TestSerialization:
    def test_roundtrip_keeps_hash(self, experiment_cfg: ExperimentConfig, tmp_path: Path) -> None:
        path = save_config(experiment_cfg, tmp_path / "nested" / "config.yaml")
        reloaded = load_config(path)
        assert reloaded == experiment_cfg
        assert config_hash(reloaded) == config_hash(experiment_cfg)

    def test_saved_file_is_plain_yaml(
        self, experiment_cfg: ExperimentConfig, tmp_path: Path
    ) -> None:
        path = save_config(experiment_cfg, tmp_path / "config.yaml")
        assert yaml.safe_load(path.read_text()) == to_container(experiment_cfg)

    def test_hash_tracks_changes(self, experiment_cfg: ExperimentConfig) -> None:
        other = merge_config(TINY_EXPERIMENT, ["seed=4"])
        assert config_hash(other) != config_hash(experiment_cfg)
        assert config_hash(merge_config(TINY_EXPERIMENT)) == config_hash(experiment_cfg)
        assert len(config_hash(experiment_cfg)) == 64
