"""Per-phase wall-time accounting for training steps."""

from __future__ import annotations

import time
from contextlib import contextmanager


class PhaseTimer:
    """Accumulates monotonic wall time per named phase."""

    PHASES = ("forward", "zo_perturb", "zo_update", "bp_backward", "loss")

    def __init__(self):
        self.totals = {p: 0.0 for p in self.PHASES}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0

    def reset(self):
        for p in self.totals:
            self.totals[p] = 0.0


class NullTimer:
    """No-op stand-in so step functions need no branching."""

    @contextmanager
    def phase(self, name: str):
        yield
