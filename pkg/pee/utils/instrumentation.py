import threading
from typing import Dict

_lock = threading.Lock()
_counters: Dict[str, int] = {}

OPTIMIZER_STEP = "optimizer_step"
PACKAGE_BUILD = "package_build"
TRAINING_SAMPLE = "training_sample"


def count(name: str, amount: int = 1) -> None:
    """Increase named counter."""
    with _lock:
        _counters[name] = _counters.get(name, 0) + amount


def get(name: str) -> int:
    with _lock:
        return _counters.get(name, 0)


def snapshot() -> Dict[str, int]:
    """Return copy of all counters."""
    with _lock:
        return dict(_counters)


def delta(before: Dict[str, int], name: str) -> int:
    """How many times was the counter hit since ``before`` was taken."""
    return get(name) - before.get(name, 0)
