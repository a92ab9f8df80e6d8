from __future__ import annotations

from argparse import ArgumentParser
from typing import Any

from ...decorators import exit_on_error
from ...iar import format_plan_table, plan_for_mode
from ..base import ExperimentCommand


class Command(ExperimentCommand):

    help = "Print the window / condition-tag table of a long-video plan (dry run)."

    def add_arguments(self, parser: ArgumentParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--mode", choices=("ar", "iar"), default="iar")
        parser.add_argument("--frames", type=int)
        parser.add_argument("--window", type=int)
        parser.add_argument("--overlap", type=int)
        parser.add_argument("--subvideos", type=int)

    @exit_on_error
    def handle(self, *args: Any, **options: Any) -> None:
        inference = self.experiment_config(options).inference
        values = {
            key: getattr(inference, key) if options[key] is None else options[key]
            for key in ("frames", "window", "overlap", "subvideos")
        }
        plan_ = plan_for_mode(
            options["mode"],
            values["frames"],
            values["window"],
            values["overlap"],
            values["subvideos"],
        )
        self.stdout.write(format_plan_table(plan_), ending="")
