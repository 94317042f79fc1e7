"""Per-server POST size histories and sliding triples."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .capture import PostEvent

DEFAULT_HISTORY_CAP = 1024


class Triple(NamedTuple):
    """Sizes of three consecutive POSTs to one server, oldest first."""

    s1: int
    s2: int
    s3: int


@dataclass
class ServerHistory:
    server_key: str
    sizes: deque
    flagged: bool = False
    total: int = 0

    @property
    def triples_seen(self) -> int:
        return max(0, self.total - 2)


def triples_of(sizes: Sequence[int]) -> list[Triple]:
    return [Triple(*sizes[i:i + 3]) for i in range(len(sizes) - 2)]


def triple_array(sizes: Sequence[int]) -> np.ndarray:
    """All stride-1 windows of width 3 as an (n-2, 3) float array."""
    arr = np.asarray(sizes, dtype=np.float64)
    if arr.size < 3:
        return np.empty((0, 3))
    return sliding_window_view(arr, 3)


class FeatureTracker:
    """Keeps the ordered size list for every server key seen."""

    def __init__(self, history_cap: int = DEFAULT_HISTORY_CAP):
        if history_cap < 3:
            raise ValueError("history_cap must be at least 3")
        self.history_cap = history_cap
        self.histories: dict[str, ServerHistory] = {}

    def observe(self, ev: PostEvent) -> Optional[Triple]:
        h = self.histories.get(ev.server_key)
        if h is None:
            h = self.histories[ev.server_key] = ServerHistory(ev.server_key, deque(maxlen=self.history_cap))
        h.sizes.append(ev.size)
        h.total += 1
        if len(h.sizes) >= 3:
            return Triple(h.sizes[-3], h.sizes[-2], h.sizes[-1])
        return None

    def flag(self, server_key: str) -> None:
        self.histories[server_key].flagged = True

    def is_flagged(self, server_key: str) -> bool:
        h = self.histories.get(server_key)
        return h is not None and h.flagged

    def __len__(self) -> int:
        return len(self.histories)


def group_sizes(events: Iterable[PostEvent]) -> dict[str, list[int]]:
    """Full size list per server key, in event order (no history cap)."""
    out: dict[str, list[int]] = {}
    for ev in events:
        out.setdefault(ev.server_key, []).append(ev.size)
    return out


def count_triples(events: Iterable[PostEvent]) -> int:
    return sum(max(0, len(s) - 2) for s in group_sizes(events).values())
