"""
Logging configuration for the back-transcription toolkit.

Provides structured logging with different levels, formatters, and handlers
so long corpus runs can be followed and parsed afterwards.
"""

import functools
import inspect
import json
import logging
import logging.handlers
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

# Attributes every LogRecord carries; anything else arrived through extra=
_RECORD_ATTRS = frozenset(vars(logging.makeLogRecord({}))) | {"message", "asctime", "taskName"}

NOISY_LOGGERS = ("httpx", "httpcore", "asyncio", "hypercorn")

TEXT_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(funcName)s:%(lineno)d | %(message)s"


class StructuredFormatter(logging.Formatter):
    """
    Formatter that outputs one JSON object per record for later parsing
    and analysis of pipeline runs.
    """

    def __init__(self, include_timestamp: bool = True):
        super().__init__()
        self.include_timestamp = include_timestamp

    def format(self, record: logging.LogRecord) -> str:
        entry: dict[str, Any] = {
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if self.include_timestamp:
            entry["timestamp"] = datetime.fromtimestamp(record.created, timezone.utc).isoformat()

        if record.exc_info:
            exc_type, exc, _ = record.exc_info
            entry["exception"] = {
                "type": exc_type.__name__ if exc_type else None,
                "message": str(exc) if exc else None,
                "traceback": self.formatException(record.exc_info),
            }

        extra = {k: v for k, v in vars(record).items() if k not in _RECORD_ATTRS}
        if extra:
            entry["extra"] = extra

        entry["source"] = {
            "file": record.filename,
            "line": record.lineno,
            "function": record.funcName,
        }
        return json.dumps(entry, separators=(",", ":"), default=str)


class RunLogger:
    """
    Event logger for back-transcription runs and CLI invocations.
    """

    def __init__(self, logger_name: str = "bt_robustness.run"):
        self.logger = logging.getLogger(logger_name)

    def _event(self, level: int, message: str, event: str, **fields: Any) -> None:
        self.logger.log(level, message, extra={"event": event, **fields})

    def log_run_started(self, run_kind: str, samples: int, config: Dict[str, Any] | None = None):
        """Log the start of a corpus run"""
        self._event(
            logging.INFO,
            f"Run started: {run_kind} over {samples} samples",
            "run_started",
            run_kind=run_kind,
            samples=samples,
            config=config or {},
        )

    def log_run_finished(self, run_kind: str, completed: int, failed: int, elapsed_s: float):
        self._event(
            logging.INFO,
            f"Run finished: {run_kind}, {completed} completed, {failed} failed in {elapsed_s:.2f}s",
            "run_finished",
            run_kind=run_kind,
            completed=completed,
            failed=failed,
            elapsed_s=elapsed_s,
        )

    def log_sample_failed(self, sample_id: str, stage: str, error: Exception):
        self._event(
            logging.WARNING,
            f"Sample {sample_id} failed at {stage}: {error}",
            "sample_failed",
            sample_id=sample_id,
            stage=stage,
            error_type=type(error).__name__,
        )

    def log_adapter_retry(self, adapter: str, attempt: int, error: Exception):
        self._event(
            logging.INFO,
            f"Retrying {adapter} (attempt {attempt}): {error}",
            "adapter_retry",
            adapter=adapter,
            attempt=attempt,
            error_type=type(error).__name__,
        )

    def log_error(self, error: Exception, context: str = "unknown"):
        """Log command errors with context"""
        self._event(
            logging.ERROR,
            f"Error in {context}: {error}",
            "cli_error",
            error_type=type(error).__name__,
            context=context,
        )


def setup_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    structured: bool = False,
    max_file_size_mb: int = 10,
    backup_count: int = 5,
) -> logging.Logger:
    """
    Set up logging configuration for the toolkit.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Path to log file (if None, logs only to stderr)
        structured: Whether to use structured JSON logging
        max_file_size_mb: Maximum log file size in MB before rotation
        backup_count: Number of backup log files to keep

    Returns:
        logging.Logger: Configured root logger
    """
    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)

    numeric_level = getattr(logging, level.upper(), logging.INFO)
    root_logger.setLevel(numeric_level)

    formatter: logging.Formatter = (
        StructuredFormatter() if structured else logging.Formatter(TEXT_FORMAT, "%Y-%m-%d %H:%M:%S")
    )

    # Reports go to stdout, so logs stay on stderr
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                log_file, maxBytes=max_file_size_mb * 1024 * 1024, backupCount=backup_count
            )
        )
    for handler in handlers:
        handler.setFormatter(formatter)
        handler.setLevel(numeric_level)
        root_logger.addHandler(handler)

    for noisy in NOISY_LOGGERS:
        logging.getLogger(noisy).setLevel(logging.WARNING)

    logging.getLogger("bt_robustness").debug(f"Logging initialized at level {level}")
    return root_logger


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the given name."""
    return logging.getLogger(f"bt_robustness.{name}")


@contextmanager
def _timed_call(logger: logging.Logger, name: str) -> Iterator[None]:
    start = time.perf_counter()
    logger.debug(f"Calling {name}", extra={"event": "function_call", "function": name})
    try:
        yield
    except Exception as e:
        elapsed_ms = (time.perf_counter() - start) * 1000
        logger.error(
            f"Error in {name} after {elapsed_ms:.2f}ms: {e}",
            extra={
                "event": "function_error",
                "function": name,
                "execution_time_ms": elapsed_ms,
                "error_type": type(e).__name__,
            },
        )
        raise
    elapsed_ms = (time.perf_counter() - start) * 1000
    logger.debug(
        f"Completed {name} in {elapsed_ms:.2f}ms",
        extra={"event": "function_completed", "function": name, "execution_time_ms": elapsed_ms},
    )


def log_function_call(logger: logging.Logger):
    """
    Decorator to log calls of heavy operations with their execution time.
    Works on plain and async functions.
    """

    def decorator(func):
        if inspect.iscoroutinefunction(func):

            @functools.wraps(func)
            async def async_wrapper(*args, **kwargs):
                with _timed_call(logger, func.__name__):
                    return await func(*args, **kwargs)

            return async_wrapper

        @functools.wraps(func)
        def sync_wrapper(*args, **kwargs):
            with _timed_call(logger, func.__name__):
                return func(*args, **kwargs)

        return sync_wrapper

    return decorator
