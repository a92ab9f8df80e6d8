from __future__ import annotations

import logging
from argparse import ArgumentParser
from typing import Any

from ...config import to_container
from ...decorators import exit_on_error
from ...exceptions import DataError
from ...experiment import Experiment
from ...storage import write_loss_history
from ...training import build_stage_configs, save_checkpoint, train_stage
from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class Command(ExperimentCommand):

    help = "Run one of the three training stages inside an experiment directory."

    def add_arguments(self, parser: ArgumentParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
        parser.add_argument("--out", required=True, help="Experiment directory")
        parser.add_argument("--resume", help="Checkpoint of this stage to continue from")
        parser.add_argument(
            "--allow-mismatch",
            action="store_true",
            help="Accept checkpoints written under a different config",
        )

    @exit_on_error
    def handle(self, *args: Any, **options: Any) -> None:
        cfg = self.experiment_config(options)
        experiment = Experiment(options["out"], cfg)
        experiment.prepare()
        stage_id = options["stage"]
        stage = build_stage_configs(cfg)[stage_id - 1]
        allow = options["allow_mismatch"]

        scenes = experiment.scenes()
        if stage_id == 1:
            codec = experiment.codec(scenes)
            stack = experiment.stack(codec, use_controlnet=False)
        else:
            previous = experiment.checkpoint_path(stage_id - 1)
            if not previous.exists():
                raise DataError(
                    f"Stage {stage_id} needs the stage {stage_id - 1} checkpoint at {previous}"
                )
            prior = experiment.load_checkpoint(previous, allow)
            stack = experiment.restored_stack(prior)
            logger.info("Initialized stage %s from %s", stage_id, previous)

        resume = None
        if options["resume"]:
            resume = experiment.load_checkpoint(options["resume"], allow)

        ckpt = train_stage(
            stage,
            scenes,
            stack,
            experiment.schedule(),
            seed=cfg.seed,
            config_hash=experiment.hash,
            resume=resume,
        )
        ckpt.config = to_container(cfg)
        target = save_checkpoint(ckpt, experiment.checkpoint_path(stage_id))
        history = write_loss_history(experiment.loss_history_path(stage_id), ckpt.history)
        self.stdout.write(f"Stage {stage_id} checkpoint: {target}")
        self.stdout.write(f"Loss history: {history}")

