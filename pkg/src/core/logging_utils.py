"""
Logging System
Console and rotating-file logging for pipeline commands, JSON lines
tagged with the running command, and a JSONL epoch log for training.
"""
import json
import logging
import logging.handlers
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

PACKAGE_LOGGER = "src"
TEXT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class JSONFormatter(logging.Formatter):
    """
    One JSON object per record.

    ``context`` (e.g. command and config hash) is stamped on every line;
    per-call fields go in ``extra={"custom_fields": {...}}``.
    """

    def __init__(self, context: Optional[Mapping[str, Any]] = None):
        super().__init__()
        self.context = dict(context or {})

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        log_data.update(self.context)
        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)
        if hasattr(record, "custom_fields"):
            log_data.update(record.custom_fields)
        return json.dumps(log_data, default=str)


def _formatter(enable_json: bool, context: Optional[Mapping[str, Any]]) -> logging.Formatter:
    if enable_json:
        return JSONFormatter(context)
    fmt = TEXT_FORMAT
    if context and "command" in context:
        fmt = f"%(asctime)s - [{context['command']}] %(name)s - %(levelname)s - %(message)s"
    return logging.Formatter(fmt=fmt, datefmt='%Y-%m-%d %H:%M:%S')


def setup_logging(
    name: str = PACKAGE_LOGGER,
    log_file: Optional[str] = None,
    log_level: str = "INFO",
    enable_console: bool = True,
    enable_json: bool = False,
    context: Optional[Mapping[str, Any]] = None,
    max_bytes: int = 10 * 1024 * 1024,  # 10 MB
    backup_count: int = 5
) -> logging.Logger:
    """
    Configure the package logger.

    Module loggers are created with ``logging.getLogger(__name__)`` and
    live under the ``src`` namespace, so configuring that one logger
    configures all of them. Calling again replaces the handlers.

    Args:
        name: Logger name
        log_file: Rotating log file (None for console only)
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL
        enable_console: Log to stdout
        enable_json: JSON lines instead of text
        context: Fields stamped on every record (command, config hash)
        max_bytes: Max size per log file
        backup_count: Rotated files kept

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level.upper()))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = False
    formatter = _formatter(enable_json, context)

    if enable_console:
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(log_file, maxBytes=max_bytes,
                                                            backupCount=backup_count)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logger.debug(f"Logging initialized - Level: {log_level}, File: {log_file}")
    return logger


class EpochLogger:
    """JSONL training log: one record per completed epoch, cleared at the start of a run."""

    def __init__(self, log_file: str = "runs/epochs.jsonl"):
        self.log_file = Path(log_file)
        self.log_file.parent.mkdir(parents=True, exist_ok=True)

    def log_event(self, event_data: Dict[str, Any]) -> None:
        """Append one record; write failures are logged, not raised."""
        try:
            with open(self.log_file, 'a') as f:
                f.write(json.dumps(event_data, sort_keys=True) + '\n')
        except OSError as e:
            logging.getLogger(__name__).error(f"Failed to log epoch record: {e}")

    def read_events(self, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        """
        Read records back in order.

        Args:
            limit: Maximum number of records (None for all)

        Returns:
            Record dictionaries; unreadable lines are skipped
        """
        if not self.log_file.exists():
            return []
        events: List[Dict[str, Any]] = []
        with open(self.log_file, 'r') as f:
            for line in f:
                if limit is not None and len(events) >= limit:
                    break
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError:
                    continue
        return events

    def clear(self) -> None:
        if self.log_file.exists():
            self.log_file.unlink()
