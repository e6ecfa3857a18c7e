from __future__ import annotations

import sys
from typing import Optional

from loguru import logger as _logger

from .config import get_settings


_configured_sig: tuple | None = None


def _configure_once() -> None:
    global _configured_sig
    settings = get_settings()
    sig = (settings.LOG_LEVEL, settings.LOG_SERIALIZE)
    if _configured_sig == sig:
        return
    _logger.remove()
    # stderr keeps stdout free for the CLI's report tables
    try:
        _logger.add(
            sys.stderr,
            level=settings.LOG_LEVEL,
            enqueue=True,
            backtrace=False,
            diagnose=False,
            serialize=settings.LOG_SERIALIZE,
        )
    except Exception:
        # Some restricted runtimes disallow semaphore creation required by enqueue=True.
        _logger.add(
            sys.stderr,
            level=settings.LOG_LEVEL,
            enqueue=False,
            backtrace=False,
            diagnose=False,
            serialize=settings.LOG_SERIALIZE,
        )
    _configured_sig = sig


def get_logger(name: Optional[str] = None):
    """Return a Loguru logger bound with app context and module name."""
    _configure_once()
    s = get_settings()
    return _logger.bind(
        logger=name or __name__,
        service=s.APP_NAME,
        env=s.APP_ENV,
        version=s.APP_VERSION,
    )
