from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler

# Diagnostics only; data output never goes through this console.
err_console = Console(stderr=True)

_LOGGER_NAME = "bestrq_desk"


def setup_logging(verbose: bool = False) -> logging.Logger:
    """Attach a rich stderr handler to the package logger (idempotent)."""
    logger = logging.getLogger(_LOGGER_NAME)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(console=err_console, show_path=False, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    return logger
