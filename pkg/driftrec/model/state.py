"""
ENTITY STATE TABLES
Registry, stationary factors, embedding columns and recurrent state for users or items
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Hashable, List, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from driftrec.core.distributions import DiagGaussian
from driftrec.core.numerics import DTYPE, GRUCell, seeded_generator
from driftrec.errors import DuplicateEntityError, UnknownEntityError
from driftrec.streaming.clock import EntityClock

logger = logging.getLogger(__name__)

INIT_SCALE = 0.01


class EntityKind(Enum):
    USER = "user"
    ITEM = "item"

    @property
    def code(self) -> int:
        return 0 if self is EntityKind.USER else 1


@dataclass
class EntityState:
    """Streaming state of one user or item (a detached copy)"""
    entity_id: Hashable
    kind: EntityKind
    row: int
    stationary: Tensor
    prior: DiagGaussian
    hidden: Tensor
    last_event_time: Optional[float]
    is_new: bool


class EntityTable:
    """
    Dense row storage for one entity kind. Rows are assigned in order of first
    sight; capacity doubles when exhausted. ``stationary`` and ``embedding`` are
    trainable (row-sparse gradients); everything else is committed state.
    """

    def __init__(self, kind: EntityKind, stationary_dim: int, embedding_dim: int,
                 hidden_dim: int, dynamic_dim: int, seed: int = 0, capacity: int = 16):
        self.kind = kind
        self.seed = seed
        self.dims = {
            'stationary': stationary_dim,
            'embedding': embedding_dim,
            'hidden': hidden_dim,
            'dynamic': dynamic_dim,
            'input': embedding_dim + 2,
        }
        self.ids: List[Hashable] = []
        self.index: Dict[Hashable, int] = {}

        capacity = max(1, capacity)
        self.stationary = nn.Parameter(torch.zeros(capacity, stationary_dim, dtype=DTYPE))
        self.embedding = nn.Parameter(torch.zeros(capacity, embedding_dim, dtype=DTYPE))
        self.hidden = torch.zeros(capacity, hidden_dim, dtype=DTYPE)
        self.prior_mean = torch.zeros(capacity, dynamic_dim, dtype=DTYPE)
        self.prior_var = torch.ones(capacity, dynamic_dim, dtype=DTYPE)
        self.is_new = torch.ones(capacity, dtype=torch.bool)
        # GRU inputs of the last commit, replayed to route gradients into the cell
        self.link_hidden = torch.zeros(capacity, hidden_dim, dtype=DTYPE)
        self.link_input = torch.zeros(capacity, embedding_dim + 2, dtype=DTYPE)
        self.has_link = torch.zeros(capacity, dtype=torch.bool)
        self.clock = EntityClock(capacity)

    # ------------------------------------------------------------------
    # Registry
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, entity_id: Hashable) -> bool:
        return entity_id in self.index

    @property
    def capacity(self) -> int:
        return self.stationary.shape[0]

    def row(self, entity_id: Hashable) -> int:
        try:
            return self.index[entity_id]
        except KeyError:
            raise UnknownEntityError(self.kind.value, entity_id) from None

    def rows(self, entity_ids) -> Tensor:
        return torch.as_tensor([self.row(e) for e in entity_ids], dtype=torch.long)

    def register(self, entity_id: Hashable) -> EntityState:
        """Fresh row: N(0, 0.01²) stationary and embedding, zero hidden, N(0, I) prior"""
        if entity_id in self.index:
            raise DuplicateEntityError(f"{self.kind.value} '{entity_id}' already registered")
        row = len(self.ids)
        if row >= self.capacity:
            self._grow(2 * self.capacity)

        generator = seeded_generator(self.seed, self.kind.code, row)
        with torch.no_grad():
            self.stationary[row] = INIT_SCALE * torch.randn(
                self.dims['stationary'], generator=generator, dtype=DTYPE)
            self.embedding[row] = INIT_SCALE * torch.randn(
                self.dims['embedding'], generator=generator, dtype=DTYPE)
        self.ids.append(entity_id)
        self.index[entity_id] = row
        return self.state(entity_id)

    def _grow(self, capacity: int):
        old = self.capacity

        def pad(tensor: Tensor, fill: float = 0.0) -> Tensor:
            extra = torch.full((capacity - old,) + tuple(tensor.shape[1:]), fill, dtype=tensor.dtype)
            return torch.cat([tensor.detach(), extra])

        self.stationary = nn.Parameter(pad(self.stationary))
        self.embedding = nn.Parameter(pad(self.embedding))
        self.hidden = pad(self.hidden)
        self.prior_mean = pad(self.prior_mean)
        self.prior_var = pad(self.prior_var, 1.0)
        self.is_new = torch.cat([self.is_new, torch.ones(capacity - old, dtype=torch.bool)])
        self.link_hidden = pad(self.link_hidden)
        self.link_input = pad(self.link_input)
        self.has_link = torch.cat([self.has_link, torch.zeros(capacity - old, dtype=torch.bool)])
        self.clock.grow(capacity)
        logger.debug("%s table grown to %d rows", self.kind.value, capacity)

    def parameters(self) -> Dict[str, nn.Parameter]:
        prefix = f"{self.kind.value}s"
        return {f"{prefix}.stationary": self.stationary, f"{prefix}.embedding": self.embedding}

    # ------------------------------------------------------------------
    # Reads
    # ------------------------------------------------------------------

    def state(self, entity_id: Hashable) -> EntityState:
        row = self.row(entity_id)
        return EntityState(
            entity_id=entity_id,
            kind=self.kind,
            row=row,
            stationary=self.stationary[row].detach().clone(),
            prior=DiagGaussian(self.prior_mean[row].clone(), self.prior_var[row].clone()),
            hidden=self.hidden[row].clone(),
            last_event_time=self.clock.last(row),
            is_new=bool(self.is_new[row]),
        )

    def stationary_rows(self, rows: Tensor) -> Tensor:
        """Differentiable lookup with a row-sparse gradient"""
        return F.embedding(rows, self.stationary, sparse=True)

    def hidden_rows(self, rows: Tensor, gru: Optional[GRUCell] = None) -> Tensor:
        """Committed hidden states. With ``gru``, linked rows are recomputed as
        GRU(link_hidden, link_input) under the current cell parameters, which is
        one step of truncated backprop into the cell"""
        hidden = self.hidden[rows]
        if gru is None:
            return hidden
        linked = self.has_link[rows]
        if not linked.any():
            return hidden
        replay = gru(self.link_hidden[rows], self.link_input[rows])
        return torch.where(linked.unsqueeze(-1), replay, hidden)

    # ------------------------------------------------------------------
    # Writes
    # ------------------------------------------------------------------

    def commit(self, rows: Tensor, hidden: Tensor, link_hidden: Tensor, link_input: Tensor,
               prior: DiagGaussian, event_times: Tensor):
        """Advance the recurrent state of ``rows`` after a processed step"""
        self.clock.advance(rows, event_times)
        self.hidden[rows] = hidden.detach()
        self.link_hidden[rows] = link_hidden.detach()
        self.link_input[rows] = link_input.detach()
        self.has_link[rows] = True
        self.prior_mean[rows] = prior.mean.detach()
        self.prior_var[rows] = prior.var.detach()
        self.is_new[rows] = False

    def cut_links(self):
        self.has_link.zero_()

    def reset_streaming_state(self):
        """Forget recurrent state and clocks; registrations and learned rows stay"""
        self.hidden.zero_()
        self.prior_mean.zero_()
        self.prior_var.fill_(1.0)
        self.is_new.fill_(True)
        self.cut_links()
        self.clock.reset()

    # ------------------------------------------------------------------
    # Serialisation
    # ------------------------------------------------------------------

    def to_payload(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "dims": dict(self.dims),
            "ids": list(self.ids),
            "stationary": self.stationary.detach().clone(),
            "embedding": self.embedding.detach().clone(),
            "hidden": self.hidden.clone(),
            "prior_mean": self.prior_mean.clone(),
            "prior_var": self.prior_var.clone(),
            "is_new": self.is_new.clone(),
            "link_hidden": self.link_hidden.clone(),
            "link_input": self.link_input.clone(),
            "has_link": self.has_link.clone(),
            "clock": self.clock.times.clone(),
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "EntityTable":
        dims = payload["dims"]
        table = cls(EntityKind(payload["kind"]), dims['stationary'], dims['embedding'], dims['hidden'],
                    dims['dynamic'], seed=payload["seed"], capacity=payload["stationary"].shape[0])
        table.ids = list(payload["ids"])
        table.index = {entity_id: row for row, entity_id in enumerate(table.ids)}
        table.stationary = nn.Parameter(payload["stationary"].clone())
        table.embedding = nn.Parameter(payload["embedding"].clone())
        for name in ("hidden", "prior_mean", "prior_var", "is_new", "link_hidden", "link_input", "has_link"):
            setattr(table, name, payload[name].clone())
        table.clock.times = payload["clock"].clone()
        return table
