from __future__ import annotations

import functools
import logging
from typing import Any, Callable, Dict, Optional, Type

from django.core.management.base import CommandError

from .exceptions import (
    ConditionError,
    ConfigError,
    DataError,
    DivergenceError,
    MetricError,
    PlanError,
    ShapeError,
    TryOnError,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_DIVERGENCE = 4

# most specific first; the first matching class decides the exit code
EXIT_CODES: Dict[Type[TryOnError], int] = {
    ConfigError: EXIT_CONFIG_ERROR,
    ShapeError: EXIT_CONFIG_ERROR,
    ConditionError: EXIT_CONFIG_ERROR,
    DataError: EXIT_DATA_ERROR,
    PlanError: EXIT_DATA_ERROR,
    MetricError: EXIT_DATA_ERROR,
    DivergenceError: EXIT_DIVERGENCE,
}


def exit_code(error: TryOnError) -> int:
    for error_class, code in EXIT_CODES.items():
        if isinstance(error, error_class):
            return code
    return 1


def exit_on_error(
    handle_func: Optional[Callable] = None, exit_codes: Optional[Dict[Type[TryOnError], int]] = None
) -> Callable:
    """
    Decorate management command handlers to turn package errors into exit codes.

    A TryOnError raised by the handler is logged and re-raised as a
    CommandError carrying the mapped return code (2 config, 3 data or plan,
    4 numeric divergence). Other exceptions pass through untouched.

    """
    if handle_func is None:
        return functools.partial(exit_on_error, exit_codes=exit_codes)

    codes = exit_codes or EXIT_CODES
    func = handle_func

    @functools.wraps(func)
    def inner(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except TryOnError as ex:
            code = next(
                (code for cls, code in codes.items() if isinstance(ex, cls)), exit_code(ex)
            )
            logger.error("%s: %s", type(ex).__name__, ex)
            raise CommandError(f"{type(ex).__name__}: {ex}", returncode=code) from ex

    return inner
