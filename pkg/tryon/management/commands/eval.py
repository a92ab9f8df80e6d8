from __future__ import annotations

import json
import logging
from argparse import ArgumentParser
from typing import Any

from django.core.management.base import BaseCommand

from ...decorators import exit_on_error
from ...exceptions import ConfigError
from ...metrics import EXTRACTORS, METRICS, evaluate
from ...storage import load_clips, write_json

logger = logging.getLogger(__name__)


class Command(BaseCommand):

    help = "Compare generated clips with reference clips (SSIM, perceptual distance, VFID)."

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--real", required=True, help="Folder of reference clips")
        parser.add_argument("--gen", required=True, help="Folder of generated clips")
        parser.add_argument(
            "--metrics",
            default=",".join(METRICS),
            help=f"Comma separated subset of {', '.join(METRICS)}",
        )
        parser.add_argument(
            "--extractor", default="conv3d-random", choices=sorted(EXTRACTORS), help="VFID embedder"
        )
        parser.add_argument(
            "--image-extractor",
            default="conv2d-random",
            choices=sorted(EXTRACTORS),
            help="Perceptual distance embedder",
        )
        parser.add_argument("--seed", type=int, default=0, help="Extractor weight seed")
        parser.add_argument("--out", help="Write the JSON report to this file")
        parser.add_argument(
            "--allow-mismatch",
            action="store_true",
            help="Compare clips produced under different configs",
        )

    @exit_on_error
    def handle(self, *args: Any, **options: Any) -> None:
        metrics = [m.strip() for m in options["metrics"].split(",") if m.strip()]
        real, real_hashes = load_clips(options["real"])
        gen, gen_hashes = load_clips(options["gen"])
        hashes = set(real_hashes) | set(gen_hashes)
        if len(hashes) > 1:
            logger.warning("Clips come from %s different configs", len(hashes))
            if not options["allow_mismatch"]:
                raise ConfigError(
                    "Reference and generated clips were produced under different configs"
                )
        report = evaluate(
            real,
            gen,
            metrics,
            extractor=options["extractor"],
            image_extractor=options["image_extractor"],
            seed=options["seed"],
            config_hash=hashes.pop() if len(hashes) == 1 else None,
        )
        if options["out"]:
            write_json(options["out"], report)
            logger.info("Report written to %s", options["out"])
        self.stdout.write(json.dumps(report, indent=2, sort_keys=True))
