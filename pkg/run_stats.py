"""
Per-run statistics: stage timings, event counts and sweep rejection tallies.
"""
import logging
import time
from collections import Counter, defaultdict
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Mapping, Optional

logger = logging.getLogger(__name__)


class RunStats:
    """Collects what happened during one CLI run."""

    def __init__(self):
        self.stage_times: Dict[str, float] = defaultdict(float)
        self.events: List[Dict[str, Any]] = []
        self.rejects: Counter = Counter()
        self.counts: Counter = Counter()

    def track_event(self, action: str, details: Optional[Dict[str, Any]] = None,
                    processing_time: Optional[float] = None) -> None:
        """Record a pipeline event; the event order is the call order."""
        try:
            self.events.append({"action": action, "details": dict(details or {}), "processing_time": processing_time})
            self.counts[action] += 1
            if processing_time is not None:
                self.stage_times[action] += processing_time
        except Exception as e:
            logger.error(f"Error tracking event '{action}': {e}")

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a pipeline stage and log its duration."""
        start = time.perf_counter()
        logger.info(f"Stage '{name}' started")
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.track_event(name, processing_time=elapsed)
            logger.info(f"Stage '{name}' finished in {elapsed:.2f} s")

    def record_rejects(self, rejects: Mapping[str, int]) -> None:
        self.rejects.update({reason: n for reason, n in rejects.items() if n})
        for reason, n in sorted(rejects.items()):
            if n:
                logger.warning(f"Rejected {n} sweep(s): {reason}")

    def reject_tallies(self, reasons: Optional[List[str]] = None) -> Dict[str, int]:
        """Tallies with every known reason present (zero if never seen), sorted by reason."""
        keys = set(self.rejects) | set(reasons or [])
        return {reason: int(self.rejects.get(reason, 0)) for reason in sorted(keys)}

    def summary(self) -> Dict[str, Any]:
        return {
            "stage_seconds": {k: round(v, 3) for k, v in sorted(self.stage_times.items())},
            "events": dict(sorted(self.counts.items())),
            "rejects": self.reject_tallies(),
        }

    def log_summary(self) -> None:
        for name, seconds in sorted(self.stage_times.items()):
            logger.info(f"{name}: {seconds:.2f} s")
        total = sum(self.rejects.values())
        if total:
            logger.info(f"Total rejected sweeps: {total} ({dict(sorted(self.rejects.items()))})")
