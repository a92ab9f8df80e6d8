from __future__ import annotations

import logging
from argparse import ArgumentParser
from pathlib import Path
from typing import Any, Optional

import torch

from ...decorators import exit_on_error
from ...exceptions import ConfigError, DataError
from ...experiment import Experiment
from ...iar import MODES, format_plan_table, generate_long
from ...scenes import conditioning_for, random_scene_spec, render_scene
from ...storage import atomic_directory, export_gif, write_arrays
from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class Command(ExperimentCommand):

    help = "Generate try-on videos for synthetic scenes from a trained checkpoint."

    def add_arguments(self, parser: ArgumentParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--out", required=True, help="Experiment directory")
        parser.add_argument("--checkpoint", help="Checkpoint directory (default: latest stage)")
        parser.add_argument("--mode", choices=MODES)
        parser.add_argument("--frames", type=int)
        parser.add_argument("--window", type=int)
        parser.add_argument("--overlap", type=int)
        parser.add_argument("--subvideos", type=int)
        parser.add_argument("--scenes", type=int, default=1, help="Number of clips to generate")
        parser.add_argument("--name", help="Sample set name (default: <mode>-f<frames>)")
        parser.add_argument("--force", action="store_true", help="Replace an existing sample set")
        parser.add_argument(
            "--allow-mismatch",
            action="store_true",
            help="Accept a checkpoint written under a different config",
        )

    def latest_checkpoint(self, experiment: Experiment) -> Path:
        for stage in (3, 2, 1):
            path = experiment.checkpoint_path(stage)
            if path.exists():
                return path
        raise DataError(f"No checkpoint found under {experiment.path('checkpoints')}")

    @staticmethod
    def _pick(value: Optional[int], default: Any) -> Any:
        return default if value is None else value

    @exit_on_error
    def handle(self, *args: Any, **options: Any) -> None:
        cfg = self.experiment_config(options)
        inference = cfg.inference
        mode = options["mode"] or inference.mode
        frames = self._pick(options["frames"], inference.frames)
        window = self._pick(options["window"], inference.window)
        overlap = self._pick(options["overlap"], inference.overlap)
        subvideos = self._pick(options["subvideos"], inference.subvideos)
        if window > cfg.model.max_frames:
            raise ConfigError(
                f"Window of {window} frames exceeds max_frames={cfg.model.max_frames}"
            )

        experiment = Experiment(options["out"], cfg)
        experiment.prepare()
        if options["checkpoint"]:
            path = Path(options["checkpoint"])
        else:
            path = self.latest_checkpoint(experiment)
        ckpt = experiment.load_checkpoint(path, options["allow_mismatch"])
        stack = experiment.restored_stack(ckpt, use_controlnet=ckpt.stage > 1).eval()
        sched = experiment.schedule()

        data = cfg.data
        name = options["name"] or f"{mode}-f{frames}"
        target = experiment.path("samples") / name
        with atomic_directory(target, force=options["force"]) as scratch:
            plan_table = None
            for i in range(options["scenes"]):
                seed = cfg.seed * 10_000 + i
                spec = random_scene_spec(
                    seed, data.height, data.width, max(frames, data.scene_frames)
                )
                scene = render_scene(spec)
                cond = conditioning_for(scene, range(frames), garment_index=0)
                rng = torch.Generator().manual_seed(cfg.seed + i)
                result = generate_long(
                    mode,
                    frames,
                    stack,
                    cond,
                    sched,
                    rng,
                    window=window,
                    overlap=overlap,
                    subvideos=subvideos,
                    sampler=inference.sampler,
                )
                meta = {
                    "config_hash": experiment.hash,
                    "checkpoint": str(path),
                    "mode": mode,
                    "frames": frames,
                    "scene_seed": seed,
                }
                clip = f"clip-{i:03d}"
                write_arrays(
                    scratch / "generated" / clip,
                    {"video": result.video.data, "latents": result.latents},
                    meta,
                )
                write_arrays(
                    scratch / "reference" / clip, {"video": scene.video[:frames]}, meta
                )
                export_gif(result.video.data, scratch / "generated" / f"{clip}.gif")
                plan_table = format_plan_table(result.plan)
            if mode == "iar" and plan_table is not None:
                (scratch / "plan.txt").write_text(plan_table)
        self.stdout.write(
            f"Wrote {options['scenes']} {mode} sample(s) of {frames} frames to {target}"
        )
