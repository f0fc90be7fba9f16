import datetime
import time

import dateutil.parser


def format_datetime(timestamp: datetime.datetime) -> str:
    """Convert timestamp to date and time."""
    return timestamp.strftime("%Y-%m-%d %H:%M:%S")


def format_seconds(time: float) -> str:
    """Convert seconds to human-readable time."""
    time = int(time)
    D = 3600 * 24
    H = 3600
    M = 60

    d = int((time - (time % D)) / D)
    h = int((time - (time % H)) / H) % 24
    m = int((time - (time % M)) / M) % 60
    s = time % 60

    if d > 0:
        return f"{d} d, {h:02}:{m:02}:{s:02}"
    if h > 0:
        return f"{h}:{m:02}:{s:02}"
    return f"{m}:{s:02}"


def parse_timestamp(string: str) -> float:
    """Parse interaction timestamp into epoch seconds.

    Numeric strings are taken as epoch seconds, everything else has to be
    ISO 8601.

    Raises:
        ValueError: When the string is neither a number nor ISO 8601 date.
    """
    try:
        return float(string)
    except ValueError:
        pass
    parsed = dateutil.parser.isoparse(string)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=datetime.timezone.utc)
    return parsed.timestamp()


class Stopwatch:
    """Wall-clock timer used for shrink and ranking latency."""

    def __init__(self):
        self._start: int = 0
        self.elapsed_ns: int = 0

    def start(self) -> "Stopwatch":
        self._start = time.perf_counter_ns()
        return self

    def stop(self) -> int:
        self.elapsed_ns = time.perf_counter_ns() - self._start
        return self.elapsed_ns

    def __enter__(self) -> "Stopwatch":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def micros(self) -> float:
        return self.elapsed_ns / 1000.0

    @property
    def seconds(self) -> float:
        return self.elapsed_ns / 1e9
