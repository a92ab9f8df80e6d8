from __future__ import annotations

import json
from io import StringIO
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
import yaml
from django.core.management import call_command
from django.core.management.base import CommandError

from tryon.config import config_hash, merge_config
from tryon.decorators import EXIT_CONFIG_ERROR, EXIT_DATA_ERROR
from tryon.experiment import Experiment
from tryon.iar import format_plan_table, plan
from tryon.storage import load_clips, read_loss_history, save_arrays
from tryon.training import load_checkpoint

from .conftest import TINY_EXPERIMENT


def run(name: str, *args: Any) -> str:
    out = StringIO()
    call_command(name, *[str(a) for a in args], stdout=out)
    return out.getvalue()


def tree(root: Path) -> Dict[str, bytes]:
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory: pytest.TempPathFactory) -> Path:
    path = tmp_path_factory.mktemp("config") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_EXPERIMENT))
    return path


@pytest.fixture(scope="module")
def trained(tiny_yaml: Path, tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Experiment directory after all three stages and one IAR sample set."""
    out = tmp_path_factory.mktemp("experiment")
    for stage in (1, 2, 3):
        run("train", "--config", tiny_yaml, "--stage", stage, "--out", out)
    run("infer", "--config", tiny_yaml, "--out", out, "--mode", "iar", "--scenes", 2)
    return out


class TestSynthData:
    def test_deterministic(self, config_file: Path, tmp_path: Path) -> None:
        output = run("synth_data", "--config", config_file, "--out", tmp_path / "a")
        run("synth_data", "--config", config_file, "--out", tmp_path / "b")
        assert "Wrote 2 scenes" in output
        first, second = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert first == second
        assert len((tmp_path / "a" / "index.jsonl").read_text().splitlines()) == 2

    def test_needs_force(self, config_file: Path, tmp_path: Path) -> None:
        run("synth_data", "--config", config_file, "--out", tmp_path / "a")
        with pytest.raises(CommandError) as excinfo:
            run("synth_data", "--config", config_file, "--out", tmp_path / "a")
        assert excinfo.value.returncode == EXIT_DATA_ERROR
        run("synth_data", "--config", config_file, "--out", tmp_path / "a", "--force")

    def test_invalid_config(self, config_file: Path, tmp_path: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("synth_data", "--config", config_file, "--set", "data.height=30", "--out", tmp_path)
        assert excinfo.value.returncode == EXIT_CONFIG_ERROR


class TestPlanIAR:
    def test_table(self) -> None:
        output = run(
            "plan_iar", "--frames", 36, "--window", 12, "--overlap", 3, "--subvideos", 4
        )
        assert output == format_plan_table(plan(36, 4, 12, 3))

    def test_config_defaults(self, config_file: Path) -> None:
        output = run("plan_iar", "--config", config_file)
        assert output.splitlines()[0] == "# f=6 n=2 L=4 j=1"

    def test_infeasible(self) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("plan_iar", "--frames", 36, "--subvideos", 37)
        assert excinfo.value.returncode == EXIT_DATA_ERROR

    def test_overlap_fills_window(self) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("plan_iar", "--frames", 24, "--window", 4, "--overlap", 4, "--subvideos", 2)
        assert excinfo.value.returncode == EXIT_DATA_ERROR


class TestTrain:
    def test_stage_order(self, config_file: Path, tmp_path: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("train", "--config", config_file, "--stage", 2, "--out", tmp_path)
        assert excinfo.value.returncode == EXIT_DATA_ERROR

    def test_checkpoints_and_loss_history(self, trained: Path, tiny_yaml: Path) -> None:
        cfg = merge_config(TINY_EXPERIMENT)
        experiment = Experiment(trained, cfg)
        for stage in (1, 2, 3):
            ckpt = load_checkpoint(experiment.checkpoint_path(stage))
            assert ckpt.stage == stage
            assert ckpt.config_hash == config_hash(cfg)
            history = read_loss_history(experiment.loss_history_path(stage))
            assert [step for step, _ in history] == [1, 2, 3]
            assert all(np.isfinite(loss) for _, loss in history)
        assert (trained / "config.yaml").exists()

    def test_config_mismatch(self, trained: Path, tiny_yaml: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("train", "--config", tiny_yaml, "--seed", 11, "--stage", 3, "--out", trained)
        assert excinfo.value.returncode == EXIT_CONFIG_ERROR


class TestInfer:
    def test_samples(self, trained: Path) -> None:
        root = trained / "samples" / "iar-f6"
        generated, hashes = load_clips(root / "generated")
        reference, _ = load_clips(root / "reference")
        assert len(generated) == len(reference) == 2
        assert generated[0].shape == reference[0].shape == (6, 32, 32, 3)
        assert set(hashes) == {config_hash(merge_config(TINY_EXPERIMENT))}
        assert (root / "generated" / "clip-000.gif").exists()
        assert (root / "plan.txt").read_text() == format_plan_table(plan(6, 2, 4, 1))

    def test_existing_sample_set(self, trained: Path, tiny_yaml: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("infer", "--config", tiny_yaml, "--out", trained, "--mode", "iar")
        assert excinfo.value.returncode == EXIT_DATA_ERROR

    def test_ar_mode(self, trained: Path, tiny_yaml: Path) -> None:
        output = run("infer", "--config", tiny_yaml, "--out", trained, "--mode", "ar")
        assert "ar sample(s) of 6 frames" in output
        assert not (trained / "samples" / "ar-f6" / "plan.txt").exists()

    def test_window_beyond_max_frames(self, trained: Path, tiny_yaml: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("infer", "--config", tiny_yaml, "--out", trained, "--window", 9, "--name", "wide")
        assert excinfo.value.returncode == EXIT_CONFIG_ERROR
        assert not (trained / "samples" / "wide").exists()

    def test_no_checkpoint(self, config_file: Path, tmp_path: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("infer", "--config", config_file, "--out", tmp_path)
        assert excinfo.value.returncode == EXIT_DATA_ERROR


class TestEval:
    def test_report(self, trained: Path, tmp_path: Path) -> None:
        root = trained / "samples" / "iar-f6"
        report_path = tmp_path / "report.json"
        output = run(
            "eval", "--real", root / "reference", "--gen", root / "generated", "--out", report_path
        )
        report = json.loads(output)
        assert report == json.loads(report_path.read_text())
        assert set(report["metrics"]) == {"ssim", "lpips", "vfid"}
        assert report["config_hash"] == config_hash(merge_config(TINY_EXPERIMENT))
        assert -1.0 <= report["metrics"]["ssim"] <= 1.0
        assert report["metrics"]["vfid"] >= 0.0

    def test_self_comparison(self, trained: Path) -> None:
        reference = trained / "samples" / "iar-f6" / "reference"
        report = json.loads(run("eval", "--real", reference, "--gen", reference))
        assert report["metrics"]["ssim"] == pytest.approx(1.0)
        assert report["metrics"]["lpips"] == 0.0

    def test_config_mismatch(self, trained: Path, tmp_path: Path) -> None:
        generated = trained / "samples" / "iar-f6" / "generated"
        for i in range(2):
            video = np.zeros((6, 32, 32, 3), dtype=np.float32)
            save_arrays(tmp_path / f"clip-{i}", {"video": video}, {"config_hash": "other"})
        with pytest.raises(CommandError) as excinfo:
            run("eval", "--real", tmp_path, "--gen", generated)
        assert excinfo.value.returncode == EXIT_CONFIG_ERROR
        report = json.loads(run("eval", "--real", tmp_path, "--gen", generated, "--allow-mismatch"))
        assert report["config_hash"] is None

    def test_missing_clips(self, tmp_path: Path) -> None:
        with pytest.raises(CommandError) as excinfo:
            run("eval", "--real", tmp_path, "--gen", tmp_path)
        assert excinfo.value.returncode == EXIT_DATA_ERROR
