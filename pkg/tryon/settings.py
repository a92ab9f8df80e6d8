from __future__ import annotations

from typing import Any, Tuple

from django.conf import settings


def _setting(key: str, default: Any) -> Any:
    return getattr(settings, key, default)


# A training step whose loss exceeds this value aborts the stage with a
# DivergenceError (exit code 4 on the command line).
TRYON_DIVERGENCE_THRESHOLD: float = _setting("TRYON_DIVERGENCE_THRESHOLD", 1e3)

# per-stage delimited loss file, written to logs/ as stage<N>_<name>
TRYON_LOSS_HISTORY_FILENAME: str = _setting(
    "TRYON_LOSS_HISTORY_FILENAME", "loss_history.csv"
)

# Show a tqdm progress bar during training. Off by default so that logs stay
# readable when the commands run under a scheduler.
TRYON_PROGRESS_BAR: bool = _setting("TRYON_PROGRESS_BAR", False)

# The text prompt fed to the (stubbed) prompt encoder.
TRYON_DEFAULT_PROMPT: str = _setting("TRYON_DEFAULT_PROMPT", "a dancing person")

# Fixed layout of an experiment directory. Every command reads and writes
# under these names, relative to the --out directory.
TRYON_EXPERIMENT_DIRS: Tuple[str, ...] = _setting(
    "TRYON_EXPERIMENT_DIRS", ("checkpoints", "samples", "reports", "logs")
)

# file name of the config copy stored at the root of an experiment directory
TRYON_CONFIG_FILENAME: str = _setting("TRYON_CONFIG_FILENAME", "config.yaml")
