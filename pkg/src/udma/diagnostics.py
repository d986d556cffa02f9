""" Run-wide counters.

    Every log() that hits its floor is counted here by name so training can
    report how often the 1e-12 clamps fired. Same set/get pattern as the
    other package-level state, small functions over module state.

    Counts are kept per thread: a graph built on one thread never adds to
    another thread's counts, and reset_clamp_counts() clears only the
    calling thread's.
"""
import logging
import threading
from collections import defaultdict

logger = logging.getLogger(__name__)

_local = threading.local()


def _counts() -> defaultdict:
    if not hasattr(_local, 'clamp_counts'):
        _local.clamp_counts = defaultdict(int)
    return _local.clamp_counts


def record_clamp(name, count):
    if count > 0:
        logger.debug(f"clamp {name} fired {count} times")
        _counts()[name] += int(count)


def get_clamp_counts() -> dict[str, int]:
    return dict(_counts())


def get_total_clamps() -> int:
    return sum(_counts().values())


def reset_clamp_counts():
    _counts().clear()
