from __future__ import annotations

import datetime
import json
import os
import sys
import threading
import traceback
from enum import IntEnum
from typing import List, Optional

from pee import utils
from pee.cli import COLOR

# Globals


def _get_main_directory() -> str:
    main_py = getattr(sys.modules["__main__"], "__file__", None)
    if main_py:
        return os.path.abspath(os.path.join(main_py, os.pardir))
    return os.getcwd()


MAIN_DIRECTORY = _get_main_directory()


# Setup types


class LogLevel(IntEnum):
    DEBUG = 10
    INFO = 20
    WARNING = 30
    ERROR = 40
    CRITICAL = 50
    NONE = 100


class LogScope(IntEnum):
    PIPELINE = 0
    GROUP = 1


LEVEL_COLORS = {
    LogLevel.DEBUG: "blue",
    LogLevel.INFO: "green",
    LogLevel.WARNING: "yellow",
    LogLevel.ERROR: "red",
    LogLevel.CRITICAL: "red",
}


class LogEntry:
    """Log entry."""

    def __init__(
        self,
        stack: List[traceback.FrameSummary],
        scope: LogScope,
        level: LogLevel,
        stage: Optional[str],
        group: Optional[int],
        message: str,
        *,
        exception: Optional[Exception] = None,
    ):
        self.timestamp = datetime.datetime.now()
        self.stack = stack
        self.scope = scope
        self.level = level
        self.stage = stage
        self.group = group
        self.message = message
        self.exception = exception

    def __str__(self):
        return (
            f"{utils.time.format_datetime(self.timestamp)} "
            f"{self.level.name} {self.function} ({self.stage or '?'}) {self.message}"
        )

    @property
    def function(self) -> str:
        if not self.stack:
            return "?"
        return self.stack[-1].name

    @property
    def lineno(self) -> Optional[int]:
        if not self.stack:
            return None
        return self.stack[-1].lineno

    @property
    def levelstr(self) -> str:
        return self.level.name

    @property
    def filename(self) -> str:
        if not self.stack:
            return "?"
        # Return path relative to the main script
        filename = self.stack[-1].filename
        if filename.startswith(MAIN_DIRECTORY):
            filename = filename[len(MAIN_DIRECTORY) :].lstrip(os.sep)
        if not len(filename):
            filename = "__main__"
        return filename

    def dump(self) -> dict:
        # The easiest way to include only one decimal is to cut the string
        formatted_timestamp: str = self.timestamp.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-5]
        result = {
            "timestamp": formatted_timestamp,
            "file": self.filename,
        }
        for attr in ("lineno", "function", "scope", "levelstr", "stage", "group"):
            result[attr] = getattr(self, attr)
        result["message"] = self.message
        if self.exception is not None:
            result["exception"] = repr(self.exception)
        return result

    def _format_as_string(self) -> str:
        """Format the event as string."""
        stubs: List[str] = []

        color: str = getattr(COLOR, LEVEL_COLORS.get(self.level, "none"))
        stubs.append(f"{color}{self.levelstr}{COLOR.none}")
        if self.stage is not None:
            stubs.append(f"[{self.stage}]")
        if self.group is not None:
            stubs.append(f"group {self.group}")

        message: str = " ".join(stubs) + f": {self.message}"

        if self.exception is not None:
            tb = "".join(
                traceback.format_exception(
                    type(self.exception),
                    self.exception,
                    self.exception.__traceback__,
                )
            )
            message += f"\n{tb}"

        return message

    def format_to_console(self) -> str:
        """Format the event so it can be printed to the console."""
        timestamp = utils.time.format_datetime(self.timestamp)
        return timestamp + " " + self._format_as_string()

    def format_to_file(self) -> str:
        """Format the event so it can be written to a log file."""
        return json.dumps(self.dump(), ensure_ascii=False)


def _level_from_env() -> LogLevel:
    name: str = os.getenv("PEEL_LOG_LEVEL", "INFO").upper()
    try:
        return LogLevel[name]
    except KeyError:
        return LogLevel.INFO


class AbstractLogger:
    scope = NotImplemented

    # Writes from worker threads (user groups, restarts) must not interleave
    _write_lock = threading.Lock()

    def __init__(self):
        raise NotImplementedError(
            f"Class {self.__class__.__name__} cannot be instantiated."
        )

    @staticmethod
    def logger():
        raise NotImplementedError("This function has to be subclassed.")

    def _log(
        self,
        level: LogLevel,
        stage: Optional[str],
        group: Optional[int],
        message: str,
        *,
        exception: Optional[Exception] = None,
    ):
        entry = LogEntry(
            stack=traceback.extract_stack()[:-2],
            scope=self.scope,
            level=level,
            stage=stage,
            group=group,
            message=message,
            exception=exception,
        )

        with AbstractLogger._write_lock:
            if level >= _level_from_env():
                print(entry.format_to_console(), file=sys.stderr, flush=True)

            directory: str = os.getenv("PEEL_LOG_DIR", "logs")
            filename: str = f"log_{entry.timestamp.strftime('%Y-%m-%d')}.log"
            os.makedirs(directory, exist_ok=True)
            with open(os.path.join(directory, filename), "a+") as handle:
                handle.write(entry.format_to_file())
                handle.write("\n")
        return entry


class Pipeline(AbstractLogger):
    """Logger for run-wide events."""

    __instance = None
    scope = LogScope.PIPELINE

    def __init__(self):
        if Pipeline.__instance is not None:
            raise Exception("Logger has to be a singleton, use '.logger()' instead.")
        Pipeline.__instance = self

    @staticmethod
    def logger() -> Pipeline:
        if Pipeline.__instance is None:
            Pipeline()
        return Pipeline.__instance

    def debug(self, stage: Optional[str], message: str, *, exception=None):
        return self._log(LogLevel.DEBUG, stage, None, message, exception=exception)

    def info(self, stage: Optional[str], message: str, *, exception=None):
        return self._log(LogLevel.INFO, stage, None, message, exception=exception)

    def warning(self, stage: Optional[str], message: str, *, exception=None):
        return self._log(LogLevel.WARNING, stage, None, message, exception=exception)

    def error(self, stage: Optional[str], message: str, *, exception=None):
        return self._log(LogLevel.ERROR, stage, None, message, exception=exception)

    def critical(self, stage: Optional[str], message: str, *, exception=None):
        return self._log(LogLevel.CRITICAL, stage, None, message, exception=exception)


class Group(AbstractLogger):
    """Logger for events of one user group's fine-tuning."""

    __instance = None
    scope = LogScope.GROUP

    def __init__(self):
        if Group.__instance is not None:
            raise Exception("Logger has to be a singleton, use '.logger()' instead.")
        Group.__instance = self

    @staticmethod
    def logger() -> Group:
        if Group.__instance is None:
            Group()
        return Group.__instance

    def debug(self, group: int, message: str, *, exception=None):
        return self._log(
            LogLevel.DEBUG, "finetune", group, message, exception=exception
        )

    def info(self, group: int, message: str, *, exception=None):
        return self._log(LogLevel.INFO, "finetune", group, message, exception=exception)

    def warning(self, group: int, message: str, *, exception=None):
        return self._log(
            LogLevel.WARNING, "finetune", group, message, exception=exception
        )

    def error(self, group: int, message: str, *, exception=None):
        return self._log(
            LogLevel.ERROR, "finetune", group, message, exception=exception
        )
