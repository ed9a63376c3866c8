"""Data-cache channel: per-line hot/cold state with modeled reload latencies.

This is the one piece of microarchitectural state that survives a
transient squash, so it is the only way information escapes speculation.
Architectural and transient touches are indistinguishable here by design.
There is no capacity or eviction modeling; the optional noise knob exists
to reproduce lines falling out of the cache while a signal handler runs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field


@dataclass(slots=True)
class LatencyModel:
    """Observable reload timings plus the hot/cold decision threshold."""

    hit_cycles: int = 40
    miss_cycles: int = 200
    threshold_cycles: int = 120
    eviction_probability: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.hit_cycles < self.threshold_cycles < self.miss_cycles:
            raise ValueError("latency model needs hit < threshold < miss")
        if not 0.0 <= self.eviction_probability <= 1.0:
            raise ValueError("eviction probability outside [0, 1]")

    def classify_hit(self, latency: int) -> bool:
        return latency < self.threshold_cycles


@dataclass(slots=True)
class CacheState:
    line_size: int = 64
    latency: LatencyModel = field(default_factory=LatencyModel)
    hot: set[int] = field(default_factory=set)
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.latency.seed)

    def line_of(self, address: int) -> int:
        return address // self.line_size

    def flush(self, address: int) -> None:
        self.hot.discard(self.line_of(address))

    def touch(self, address: int) -> None:
        self.hot.add(self.line_of(address))

    def is_hot(self, address: int) -> bool:
        return self.line_of(address) in self.hot

    def probe(self, address: int) -> int:
        """Timed reload: returns the modeled latency, then leaves the line hot."""
        line = self.line_of(address)
        latency = self.latency.hit_cycles if line in self.hot else self.latency.miss_cycles
        self.hot.add(line)
        return latency

    def apply_eviction_noise(self) -> int:
        """Independently evict each hot line with the configured probability.

        Invoked once per signal delivery; iteration is sorted so the RNG
        stream (and therefore the whole simulation) is reproducible.
        Returns the number of lines evicted.
        """
        p = self.latency.eviction_probability
        if p <= 0.0 or not self.hot:
            return 0
        evicted = [line for line in sorted(self.hot) if self._rng.random() < p]
        for line in evicted:
            self.hot.discard(line)
        return len(evicted)
