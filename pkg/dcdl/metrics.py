"""Process-wide solver and training counters."""

from collections import Counter
from threading import Lock


COUNTERS = (
    "sinkhorn_solves_total",
    "sinkhorn_nonconverged_total",
    "exact_ot_solves_total",
    "train_steps_total",
    "selftest_failures_total",
)


class Metrics:
    def __init__(self) -> None:
        self._lock = Lock()
        self._counters: Counter[str] = Counter()

    def inc(self, key: str, amount: int = 1) -> None:
        if key not in COUNTERS:
            raise KeyError(f"unknown counter {key!r}")
        with self._lock:
            self._counters[key] += amount

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {key: self._counters[key] for key in COUNTERS}

    def reset(self) -> None:
        with self._lock:
            self._counters.clear()

    def render(self) -> str:
        return "".join(f"{key} {value}\n" for key, value in self.snapshot().items())


metrics = Metrics()
