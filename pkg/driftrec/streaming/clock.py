"""
ENTITY CLOCKS
Per-entity last-interaction times and the elapsed interval Δτ they induce
"""

import math
from typing import Optional

import torch
from torch import Tensor

from driftrec.core.numerics import DTYPE
from driftrec.errors import CausalityError

NEVER = math.nan


class EntityClock:
    """Last event wall-clock time per entity row; NaN means the entity never interacted"""

    def __init__(self, capacity: int = 0):
        self.times = torch.full((capacity,), NEVER, dtype=DTYPE)

    def grow(self, capacity: int):
        if capacity > self.times.shape[0]:
            extra = torch.full((capacity - self.times.shape[0],), NEVER, dtype=DTYPE)
            self.times = torch.cat([self.times, extra])

    def last(self, row: int) -> Optional[float]:
        value = self.times[row].item()
        return None if math.isnan(value) else value

    def dtaus(self, rows: Tensor, event_times: Tensor) -> Tensor:
        """Vectorised ``entity_dtau``"""
        last = self.times[rows]
        never = torch.isnan(last)
        dtau = torch.where(never, torch.zeros_like(event_times), event_times - last)
        if (dtau < 0).any():
            pos = int((dtau < 0).nonzero()[0, 0])
            raise CausalityError(
                f"time regression for row {int(rows[pos])}: event at {event_times[pos].item()} "
                f"before recorded {last[pos].item()}"
            )
        return dtau

    def advance(self, rows: Tensor, event_times: Tensor):
        self.dtaus(rows, event_times)
        self.times[rows] = event_times.to(DTYPE)

    def reset(self):
        self.times.fill_(NEVER)


def entity_dtau(clock: EntityClock, row: int, event_time: float) -> float:
    """Elapsed seconds since the entity's previous interaction; 0 for a first event"""
    last = clock.last(row)
    if last is None:
        return 0.0
    if event_time < last:
        raise CausalityError(f"time regression for row {row}: {event_time} < {last}")
    return event_time - last
