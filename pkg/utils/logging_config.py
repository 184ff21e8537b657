"""Logging setup shared by the CLI and the certification service."""

import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

from utils.settings import get_settings

PLAIN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def configure_logging(level: Optional[str] = None, json_logs: Optional[bool] = None) -> None:
    """
    Install a single stderr handler on the root logger.

    Args:
        level: Log level name; defaults to the ``IBPCERT_LOG_LEVEL`` setting
        json_logs: Use python-json-logger records instead of plain text
    """
    settings = get_settings()
    level = (level or settings.log_level).upper()
    json_logs = settings.log_json if json_logs is None else json_logs

    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(PLAIN_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level)
