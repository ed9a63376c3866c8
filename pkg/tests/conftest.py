from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from lazyfp import CacheState, LatencyModel, Machine


def make_machine(**kwargs) -> Machine:
    """Machine with the probe-array symbol bound, as scenarios set it up."""
    kwargs.setdefault("symbols", {"mem": 0x200000})
    kwargs.setdefault("cache", CacheState(latency=LatencyModel()))
    return Machine(**kwargs)
