from __future__ import annotations

import logging
from argparse import ArgumentParser
from typing import Any

from ...config import config_hash
from ...decorators import exit_on_error
from ...experiment import render_scenes
from ...storage import write_dataset
from ..base import ExperimentCommand

logger = logging.getLogger(__name__)


class Command(ExperimentCommand):

    help = "Render the synthetic dancing-figure scenes of a config to a dataset folder."

    def add_arguments(self, parser: ArgumentParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--out", required=True, help="Dataset directory to write")
        parser.add_argument(
            "--force", action="store_true", help="Replace an existing dataset directory"
        )

    @exit_on_error
    def handle(self, *args: Any, **options: Any) -> None:
        cfg = self.experiment_config(options)
        scenes = render_scenes(cfg)
        target = write_dataset(options["out"], scenes, config_hash(cfg), force=options["force"])
        self.stdout.write(f"Wrote {len(scenes)} scenes to {target}")
