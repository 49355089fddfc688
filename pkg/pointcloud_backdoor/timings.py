"""Stage timing instrumentation.

``StageTimer`` always records per-phase wall times for the run manifest.
Printing ``[TIMING]`` lines is enabled via the POINTCLOUD_BACKDOOR_DEBUG_TIMING
environment variable (``1``, ``true`` or ``yes``).
"""

import os
import time
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Union


def debug_timing_enabled() -> bool:
    return os.getenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", "").lower() in ("1", "true", "yes")


@contextmanager
def log_timing(
    phase: Union[str, Callable[[], str]],
    t_start: Optional[float] = None,
) -> Iterator[None]:
    """Print the duration of a phase when debug timing is on.

    Args:
        phase: Phase name, or a callable evaluated at the end for dynamic names
        t_start: Optional start of the enclosing run, to also print the total
    """
    if not debug_timing_enabled():
        yield
        return

    t_phase_start = time.time()
    try:
        yield
    finally:
        t_now = time.time()
        phase_name = phase() if callable(phase) else phase
        line = f"[TIMING] {phase_name:40s} {t_now - t_phase_start:8.3f}s"
        if t_start is not None:
            line += f" (total: {t_now - t_start:8.3f}s)"
        print(line, flush=True)


class StageTimer:
    """Collects phase durations of one stage."""

    def __init__(self, stage: str):
        self.stage = stage
        self.t_start = time.time()
        self.timings: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        t_phase = time.time()
        try:
            with log_timing(f"{self.stage}: {name}", self.t_start):
                yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.time() - t_phase

    def total(self) -> float:
        return time.time() - self.t_start


__all__ = ["StageTimer", "debug_timing_enabled", "log_timing"]
