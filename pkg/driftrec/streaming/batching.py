"""
STEP BATCHING
Bucketing of a sorted rating stream into half-open granularity intervals (T−1, T]
"""

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Sequence

from driftrec.data.ratings import RatingEvent, ensure_sorted
from driftrec.errors import CausalityError, DataFormatError


@dataclass
class StepBatch:
    """All events of one interval, grouped per user and per item (positions into ``events``)"""
    step_index: int
    t_start: float
    t_end: float
    events: List[RatingEvent] = field(default_factory=list)
    by_user: Dict[Hashable, List[int]] = field(default_factory=dict)
    by_item: Dict[Hashable, List[int]] = field(default_factory=dict)

    @classmethod
    def from_events(cls, step_index: int, t_start: float, t_end: float,
                    events: Sequence[RatingEvent]) -> "StepBatch":
        by_user: Dict[Hashable, List[int]] = defaultdict(list)
        by_item: Dict[Hashable, List[int]] = defaultdict(list)
        for position, event in enumerate(events):
            if not t_start < event.timestamp <= t_end:
                raise CausalityError(
                    f"event at {event.timestamp} outside step {step_index} interval ({t_start}, {t_end}]"
                )
            by_user[event.user_id].append(position)
            by_item[event.item_id].append(position)
        return cls(step_index, t_start, t_end, list(events), dict(by_user), dict(by_item))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def is_empty(self) -> bool:
        return not self.events


def step_bounds(start_time: float, granularity: float, last_time: float) -> List[float]:
    """Edges start + k·g, k = 0..n, with the last edge at or after ``last_time``"""
    bounds = [start_time + k * granularity for k in range(math.ceil((last_time - start_time) / granularity) + 1)]
    while bounds[-1] < last_time:
        bounds.append(start_time + len(bounds) * granularity)
    return bounds[:bisect.bisect_left(bounds, last_time) + 1]


def bucketize(events: Sequence[RatingEvent], start_time: float, granularity: float,
              first_index: int = 1) -> List[StepBatch]:
    """Step T covers (start + (T−1)·g, start + T·g]; idle steps are emitted empty"""
    if granularity <= 0:
        raise DataFormatError(f"granularity must be positive, got {granularity}")
    ensure_sorted(events)
    if not events:
        return []
    if events[0].timestamp <= start_time:
        raise CausalityError(f"event at {events[0].timestamp} not after stream start {start_time}")

    # events are placed against the same edges the batches carry
    bounds = step_bounds(start_time, granularity, events[-1].timestamp)
    buckets: Dict[int, List[RatingEvent]] = defaultdict(list)
    for event in events:
        buckets[bisect.bisect_left(bounds, event.timestamp)].append(event)

    return [
        StepBatch.from_events(
            step_index=first_index + offset - 1,
            t_start=bounds[offset - 1],
            t_end=bounds[offset],
            events=buckets.get(offset, []),
        )
        for offset in range(1, len(bounds))
    ]


def merge_batches(batches: Sequence[StepBatch]) -> StepBatch:
    """One batch spanning consecutive steps; takes the last step's index"""
    if not batches:
        raise DataFormatError("nothing to merge")
    events = [event for batch in batches for event in batch.events]
    return StepBatch.from_events(batches[-1].step_index, batches[0].t_start, batches[-1].t_end, events)


def stream_start(events: Sequence[RatingEvent]) -> float:
    """A start time one second before the first event, so it lands in step 1"""
    if not events:
        raise DataFormatError("empty stream has no start")
    return events[0].timestamp - 1.0
