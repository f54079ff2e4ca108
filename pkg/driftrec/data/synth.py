"""
SYNTHETIC DRIFT STREAMS
Runs the generative model forward: Gaussian stationary factors, Markov drift of
the dynamic factors, ratings drawn from the interaction networks
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from driftrec.core.distributions import DiagGaussian, sample_reparam
from driftrec.core.numerics import DTYPE, derive_seed, seeded_generator
from driftrec.data.config import DatasetFormat, RunConfig
from driftrec.data.ratings import RatingEvent, write_ratings
from driftrec.model.networks import DriftPriorNetwork, InteractionNetwork, drift_prior, interaction_mean, pair_features

logger = logging.getLogger(__name__)

SYNTH_EPOCH = 1_000_000_000.0


class SyntheticTruth(nn.Module):
    """Known networks of a synthetic stream: f1/f2 over composed factors and a drift kernel over Δ"""

    def __init__(self, config: RunConfig, seed: int):
        super().__init__()
        generator = seeded_generator(seed, 0)
        self.config = config
        self.interaction = InteractionNetwork(config.stationary_dim, config.mlp_width, generator)
        self.drift = DriftPriorNetwork(config.dynamic_dim, config.dynamic_dim, config.mlp_width, generator)
        with torch.no_grad():
            self.interaction.global_bias.fill_(config.synth_global_mean)

    def rating_distribution(self, u: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
        """Mean f1(u, v) and variance scale·softplus(MLP₂) + noise²"""
        mean = interaction_mean(u, v, self.interaction)
        raw = F.softplus(self.interaction.var_mlp(pair_features(u, v)).squeeze(-1))
        return mean, self.config.synth_variance_scale * raw + self.config.synth_noise ** 2

    def sample_ratings(self, u: Tensor, v: Tensor, n: int, generator: torch.Generator) -> Tensor:
        """``n`` unclipped draws for one (u, v) pair"""
        with torch.no_grad():
            mean, var = self.rating_distribution(u, v)
            return mean + var.sqrt() * torch.randn(n, generator=generator, dtype=DTYPE)

    def next_dynamic(self, state: Tensor, dtau: float, generator: torch.Generator) -> Tensor:
        """One Markov drift draw from the unscaled state"""
        with torch.no_grad():
            prior = drift_prior(state, torch.full(state.shape[:-1], dtau, dtype=DTYPE), self.drift)
            return sample_reparam(prior, torch.randn(state.shape, generator=generator, dtype=DTYPE))


@dataclass
class SyntheticStream:
    events: List[RatingEvent]
    truth: SyntheticTruth
    user_stationary: Tensor
    item_stationary: Tensor
    user_dynamic: List[Tensor] = field(default_factory=list)
    item_dynamic: List[Tensor] = field(default_factory=list)
    start_time: float = SYNTH_EPOCH

    def factors(self, step: int) -> Tuple[Tensor, Tensor]:
        """Composed user and item factors in force during ``step`` (1-based)"""
        return (self.user_stationary + self.user_dynamic[step - 1],
                self.item_stationary + self.item_dynamic[step - 1])

    def to_payload(self) -> Dict:
        return {
            "config": self.truth.config.to_text(),
            "start_time": self.start_time,
            "networks": {name: t.clone() for name, t in self.truth.state_dict().items()},
            "user_stationary": self.user_stationary.clone(),
            "item_stationary": self.item_stationary.clone(),
            "user_dynamic": torch.stack(self.user_dynamic),
            "item_dynamic": torch.stack(self.item_dynamic),
        }


def _pairs(n_users: int, n_items: int, count: int, cover: bool, rng: np.random.Generator) -> np.ndarray:
    """Random (user, item) pairs; with ``cover`` every user and item appears at least once"""
    pairs = [np.column_stack([rng.integers(0, n_users, count), rng.integers(0, n_items, count)])]
    if cover:
        span = max(n_users, n_items)
        k = np.arange(span)
        pairs.insert(0, np.column_stack([k % n_users, rng.permutation(span) % n_items]))
    return np.concatenate(pairs)


def generate_synthetic(config: RunConfig, seed: int) -> SyntheticStream:
    """
    Ratings for ``synth_steps`` steps. Step 1 covers every user and item, so no
    entity is new afterwards. Timestamps are whole seconds inside each step.
    """
    config.validate()
    truth = SyntheticTruth(config, seed)
    scale = config.synth_factor_scale
    n_users, n_items, d = config.synth_users, config.synth_items, config.stationary_dim
    g = config.granularity_seconds
    rng = np.random.default_rng(derive_seed(seed, 1))
    generator = seeded_generator(seed, 2)

    user_stationary = scale * torch.randn(n_users, d, generator=generator, dtype=DTYPE)
    item_stationary = scale * torch.randn(n_items, d, generator=generator, dtype=DTYPE)
    user_state = torch.randn(n_users, d, generator=generator, dtype=DTYPE)
    item_state = torch.randn(n_items, d, generator=generator, dtype=DTYPE)

    stream = SyntheticStream([], truth, user_stationary, item_stationary)
    low, high = config.rating_min, config.rating_max
    for step in range(1, config.synth_steps + 1):
        if step > 1:
            user_state = truth.next_dynamic(user_state, g, generator)
            item_state = truth.next_dynamic(item_state, g, generator)
        stream.user_dynamic.append(scale * user_state)
        stream.item_dynamic.append(scale * item_state)

        pairs = _pairs(n_users, n_items, config.synth_ratings_per_step, step == 1, rng)
        u, v = stream.factors(step)
        with torch.no_grad():
            mean, var = truth.rating_distribution(u[pairs[:, 0]], v[pairs[:, 1]])
            draws = mean + var.sqrt() * torch.randn(len(pairs), generator=generator, dtype=DTYPE)
        ratings = np.clip(draws.numpy(), low, high)
        offsets = rng.integers(1, int(g) + 1, len(pairs))
        times = SYNTH_EPOCH + (step - 1) * int(g) + offsets
        stream.events.extend(
            RatingEvent(user_id=int(a), item_id=int(b), rating=float(r), timestamp=float(t))
            for (a, b), r, t in zip(pairs, ratings, times)
        )

    stream.events.sort(key=lambda e: (e.timestamp, e.user_id, e.item_id))
    logger.info("✅ Generated %d synthetic ratings (%d users, %d items, %d steps)",
                len(stream.events), n_users, n_items, config.synth_steps)
    return stream


def write_synthetic(stream: SyntheticStream, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / "synthetic.dat"
    truth_path = out_dir / "truth.pt"
    write_ratings(stream.events, data_path, DatasetFormat.MOVIELENS_DAT)
    torch.save(stream.to_payload(), truth_path)
    return {"synthetic.dat": data_path, "truth.pt": truth_path}
