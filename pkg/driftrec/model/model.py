"""
COUPLED DRIFT MODEL
All trainable parameters of the streaming recommender: interaction heads, environmental
noise, the user and item recurrent chains, and the two entity tables
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, Hashable, Iterable, List, Optional

import torch
from torch import Tensor, nn

from driftrec.core.numerics import MLP
from driftrec.data.config import SECONDS_PER_WEEK, DecaySign, RunConfig
from driftrec.errors import ConfigurationError
from driftrec.model.networks import ChainNetworks, EnvNoiseNetwork, InteractionNetwork
from driftrec.model.state import EntityKind, EntityState, EntityTable

logger = logging.getLogger(__name__)


@dataclass
class ModelSettings:
    stationary_dim: int = 20
    dynamic_dim: int = 20
    hidden_dim: int = 20
    embedding_dim: int = 32
    mlp_width: int = 64
    decay_user: float = 1 * SECONDS_PER_WEEK
    decay_item: float = 4 * SECONDS_PER_WEEK
    decay_sign: DecaySign = DecaySign.NEGATIVE
    sigma_user: float = 1.0
    sigma_item: float = 1.0
    dynamics_off: bool = False
    stop_prior_grad: bool = False
    record_factors: bool = False

    @classmethod
    def from_config(cls, config: RunConfig) -> "ModelSettings":
        return cls(
            stationary_dim=config.stationary_dim,
            dynamic_dim=config.dynamic_dim,
            hidden_dim=config.hidden_dim,
            embedding_dim=config.embedding_dim,
            mlp_width=config.mlp_width,
            decay_user=config.decay_user_weeks * SECONDS_PER_WEEK,
            decay_item=config.decay_item_weeks * SECONDS_PER_WEEK,
            decay_sign=config.decay_sign,
            sigma_user=config.sigma_user,
            sigma_item=config.sigma_item,
            dynamics_off=config.dynamics_off,
            stop_prior_grad=config.stop_prior_grad,
            record_factors=config.record_factors,
        )

    def validate(self) -> "ModelSettings":
        for name in ("stationary_dim", "dynamic_dim", "hidden_dim", "embedding_dim", "mlp_width"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.dynamic_dim != self.stationary_dim:
            raise ConfigurationError(
                f"dynamic mean width {self.dynamic_dim} must equal stationary width {self.stationary_dim}"
            )
        if self.decay_user <= 0 or self.decay_item <= 0:
            raise ConfigurationError("decay rates λ must be positive")
        if self.sigma_user <= 0 or self.sigma_item <= 0:
            raise ConfigurationError("stationary prior scales must be positive")
        return self

    def to_payload(self) -> Dict:
        payload = asdict(self)
        payload["decay_sign"] = self.decay_sign.value
        return payload

    @classmethod
    def from_payload(cls, payload: Dict) -> "ModelSettings":
        payload = dict(payload)
        payload["decay_sign"] = DecaySign(payload["decay_sign"])
        return cls(**payload)


@dataclass
class FactorSnapshot:
    """Location (uˢ + μ*) and uncertainty (Σ*) factors of the entities committed at one step"""
    step_index: int
    t_end: float
    kind: EntityKind
    rows: Tensor
    location: Tensor
    uncertainty: Tensor

    def to_payload(self) -> Dict:
        return {
            "step_index": self.step_index,
            "t_end": self.t_end,
            "kind": self.kind.value,
            "rows": self.rows.clone(),
            "location": self.location.clone(),
            "uncertainty": self.uncertainty.clone(),
        }

    @classmethod
    def from_payload(cls, payload: Dict) -> "FactorSnapshot":
        return cls(
            step_index=payload["step_index"],
            t_end=payload["t_end"],
            kind=EntityKind(payload["kind"]),
            rows=payload["rows"],
            location=payload["location"],
            uncertainty=payload["uncertainty"],
        )


class DriftRecModel(nn.Module):
    """
    Deep probabilistic matrix factorization with Markov drift priors.
    ``named_parameters()`` covers the dense networks; the entity tables expose
    their row-sparse parameters through ``sparse_parameters()``.
    """

    def __init__(self, settings: Optional[ModelSettings] = None, seed: int = 0):
        super().__init__()
        self.settings = replace(settings or ModelSettings()).validate()
        self.seed = seed
        s = self.settings
        generator = torch.Generator().manual_seed(seed)

        self.interaction = InteractionNetwork(s.stationary_dim, s.mlp_width, generator)
        self.noise = EnvNoiseNetwork(s.hidden_dim, s.mlp_width, generator)
        self.user_chain = ChainNetworks(s.hidden_dim, s.embedding_dim, s.dynamic_dim, s.mlp_width, generator)
        self.item_chain = ChainNetworks(s.hidden_dim, s.embedding_dim, s.dynamic_dim, s.mlp_width, generator)

        self.users = EntityTable(EntityKind.USER, s.stationary_dim, s.embedding_dim, s.hidden_dim,
                                 s.dynamic_dim, seed=seed)
        self.items = EntityTable(EntityKind.ITEM, s.stationary_dim, s.embedding_dim, s.hidden_dim,
                                 s.dynamic_dim, seed=seed)

        self.clock_end: Optional[float] = None
        self.step_index = 0
        self.snapshots: List[FactorSnapshot] = []

    # ------------------------------------------------------------------
    # Lookups
    # ------------------------------------------------------------------

    def table(self, kind: EntityKind) -> EntityTable:
        return self.users if kind is EntityKind.USER else self.items

    def counterpart(self, kind: EntityKind) -> EntityTable:
        return self.items if kind is EntityKind.USER else self.users

    def chain(self, kind: EntityKind) -> ChainNetworks:
        return self.user_chain if kind is EntityKind.USER else self.item_chain

    def decay_rate(self, kind: EntityKind) -> float:
        return self.settings.decay_user if kind is EntityKind.USER else self.settings.decay_item

    def sigma(self, kind: EntityKind) -> float:
        return self.settings.sigma_user if kind is EntityKind.USER else self.settings.sigma_item

    def entity_state(self, kind: EntityKind, entity_id: Hashable) -> EntityState:
        return self.table(kind).state(entity_id)

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def dense_parameters(self) -> Dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def sparse_parameters(self) -> Dict[str, nn.Parameter]:
        return {**self.users.parameters(), **self.items.parameters()}

    def all_parameters(self) -> Dict[str, nn.Parameter]:
        return {**self.dense_parameters(), **self.sparse_parameters()}

    def set_global_bias(self, value: float):
        with torch.no_grad():
            self.interaction.global_bias.fill_(float(value))

    def zero_residuals_(self) -> "DriftRecModel":
        """Zero every MLP so f1 collapses to ⟨u, v⟩ + b₀"""
        for module in self.modules():
            if isinstance(module, MLP):
                module.zero_()
        return self

    # ------------------------------------------------------------------
    # Entities
    # ------------------------------------------------------------------

    def register_entity(self, entity_id: Hashable, kind: EntityKind) -> EntityState:
        return self.table(kind).register(entity_id)

    def register_missing(self, user_ids: Iterable[Hashable], item_ids: Iterable[Hashable]) -> Dict[str, list]:
        """Register unseen ids in order of first appearance"""
        added = {'users': [], 'items': []}
        for key, table, ids in (('users', self.users, user_ids), ('items', self.items, item_ids)):
            for entity_id in ids:
                if entity_id not in table:
                    table.register(entity_id)
                    added[key].append(entity_id)
        return added

    def reset_streaming_state(self):
        self.users.reset_streaming_state()
        self.items.reset_streaming_state()
        self.clock_end = None
        self.step_index = 0
        self.snapshots = []

    def cut_links(self):
        self.users.cut_links()
        self.items.cut_links()

    def close_timeline(self, last_event_time: float):
        """Pull the timeline end back to the last assimilated event, so a stream
        continuing right after it is not mistaken for an overlap"""
        if self.clock_end is None or last_event_time < self.clock_end:
            self.clock_end = float(last_event_time)
