from __future__ import annotations

from argparse import ArgumentParser
from typing import Any

from django.core.management.base import BaseCommand

from ..config import ExperimentConfig
from ..experiment import resolve_config


class ExperimentCommand(BaseCommand):
    """Base class for commands driven by an experiment config."""

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        parser.add_argument("--seed", type=int, help="Override the config seed")
        parser.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="KEY=VALUE",
            help="Dotted config override, e.g. --set inference.window=8 (repeatable)",
        )

    def experiment_config(self, options: Any) -> ExperimentConfig:
        return resolve_config(options["config"], options["seed"], options["overrides"])
