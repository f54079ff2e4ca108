"""
INTERACTION, DRIFT AND POSTERIOR NETWORKS
Deep probabilistic matrix factorization heads (f1/f2), environmental noise,
drift-prior kernels (f3/f4), posterior network (f5) and the input plumbing around them
"""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from driftrec.core.distributions import DiagGaussian
from driftrec.core.numerics import DTYPE, MLP, GRUCell, mlp_specs
from driftrec.data.config import SECONDS_PER_DAY, DecaySign
from driftrec.errors import ConfigurationError, UnknownEntityError

NOISE_FLOOR = 1e-4
DTAU_UNIT = SECONDS_PER_DAY


def _require_width(tensor: Tensor, width: int, what: str):
    if tensor.shape[-1] != width:
        raise ConfigurationError(f"{what}: width {tensor.shape[-1]} != expected {width}")


def dtau_feature(dtau: Tensor) -> Tensor:
    """log1p(Δτ / 1 day); defined at Δτ = 0 unlike log Δτ"""
    if (dtau < 0).any():
        raise ConfigurationError("elapsed interval Δτ must be non-negative")
    return torch.log1p(dtau / DTAU_UNIT)


def pair_features(u: Tensor, v: Tensor) -> Tensor:
    """[u; v; u⊙v]"""
    return torch.cat([u, v, u * v], dim=-1)


class InteractionNetwork(nn.Module):
    """f1 (rating location) and f2 (rating scale) over composed factors"""

    def __init__(self, factor_dim: int, width: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.factor_dim = factor_dim
        self.mean_mlp = MLP(mlp_specs(3 * factor_dim, width, 1), generator)
        self.var_mlp = MLP(mlp_specs(3 * factor_dim, width, 1), generator)
        self.global_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))


class EnvNoiseNetwork(nn.Module):
    """σ²_env as a function of the two previous hidden states"""

    def __init__(self, hidden_dim: int, width: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.mlp = MLP(mlp_specs(2 * hidden_dim, width, 1), generator)


class DriftPriorNetwork(nn.Module):
    """f4 (drift mean) and f3 (drift variance) conditioned on a state vector and Δτ"""

    def __init__(self, state_dim: int, dynamic_dim: int, width: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.state_dim = state_dim
        self.mean_mlp = MLP(mlp_specs(state_dim + 1, width, dynamic_dim), generator)
        self.var_mlp = MLP(mlp_specs(state_dim + 1, width, dynamic_dim), generator)


class PosteriorNetwork(nn.Module):
    """f5: one trunk, mean and variance heads, over [h; y]"""

    def __init__(self, hidden_dim: int, input_dim: int, dynamic_dim: int, width: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.input_dim = input_dim
        self.dynamic_dim = dynamic_dim
        self.mlp = MLP(mlp_specs(hidden_dim + input_dim, width, 2 * dynamic_dim), generator)


class ChainNetworks(nn.Module):
    """Everything one recurrent chain (users or items) owns"""

    def __init__(self, hidden_dim: int, embedding_dim: int, dynamic_dim: int, width: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        input_dim = embedding_dim + 2
        self.gru = GRUCell(input_dim, hidden_dim, generator)
        self.prior = DriftPriorNetwork(hidden_dim, dynamic_dim, width, generator)
        self.posterior = PosteriorNetwork(hidden_dim, input_dim, dynamic_dim, width, generator)


# ----------------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------------

def interaction_mean(u: Tensor, v: Tensor, net: InteractionNetwork) -> Tensor:
    """⟨u, v⟩ + b₀ + MLP₁([u; v; u⊙v])"""
    _require_width(u, net.factor_dim, "interaction_mean user factor")
    _require_width(v, net.factor_dim, "interaction_mean item factor")
    residual = net.mean_mlp(pair_features(u, v)).squeeze(-1)
    return (u * v).sum(-1) + net.global_bias + residual


def interaction_var(u: Tensor, v: Tensor, sigma2_env: Tensor, net: InteractionNetwork) -> Tensor:
    """softplus(MLP₂([u; v; u⊙v])) + σ²_env"""
    _require_width(u, net.factor_dim, "interaction_var user factor")
    _require_width(v, net.factor_dim, "interaction_var item factor")
    sigma2_env = torch.as_tensor(sigma2_env, dtype=DTYPE)
    if (sigma2_env <= 0).any():
        raise ConfigurationError("environmental noise must be positive")
    return F.softplus(net.var_mlp(pair_features(u, v)).squeeze(-1)) + sigma2_env


def env_noise(h_u: Tensor, h_v: Tensor, net: EnvNoiseNetwork) -> Tensor:
    """softplus(MLP_noise([h_u; h_v])) + 1e-4"""
    _require_width(h_u, net.hidden_dim, "env_noise user hidden")
    _require_width(h_v, net.hidden_dim, "env_noise item hidden")
    return F.softplus(net.mlp(torch.cat([h_u, h_v], dim=-1)).squeeze(-1)) + NOISE_FLOOR


def drift_prior(h_prev: Tensor, dtau: Tensor, net: DriftPriorNetwork) -> DiagGaussian:
    """Markov drift kernel N(f4([h; log1p Δτ]), softplus(f3([h; log1p Δτ])))"""
    _require_width(h_prev, net.state_dim, "drift_prior state")
    dtau = torch.as_tensor(dtau, dtype=DTYPE)
    features = torch.cat([h_prev, dtau_feature(dtau).unsqueeze(-1).expand(*h_prev.shape[:-1], 1)], dim=-1)
    return DiagGaussian(net.mean_mlp(features), F.softplus(net.var_mlp(features)))


def posterior(h_prev: Tensor, y: Tensor, net: PosteriorNetwork) -> DiagGaussian:
    """q(Δu | h, y) = N(μ*, Σ*) from f5([h; y])"""
    _require_width(h_prev, net.hidden_dim, "posterior hidden")
    _require_width(y, net.input_dim, "posterior input")
    heads = net.mlp(torch.cat([h_prev, y], dim=-1))
    mean, raw_var = heads.split(net.dynamic_dim, dim=-1)
    return DiagGaussian(mean, F.softplus(raw_var))


def build_inputs(counterparts: Sequence[Sequence[int]],
                 ratings: Sequence[Sequence[float]],
                 dtau: Tensor,
                 is_new: Tensor,
                 embedding: Tensor,
                 registered: int) -> Tensor:
    """Batched y = [W·x, log1p(Δτ), 1_new], one row per entity.

    ``counterparts[k]`` / ``ratings[k]`` are the rows of the other side's
    embedding table and the rating values of entity k's events this step.
    """
    offsets, flat_index, flat_rating = [], [], []
    for rows, values in zip(counterparts, ratings):
        offsets.append(len(flat_index))
        flat_index.extend(rows)
        flat_rating.extend(values)
    if any(row < 0 or row >= registered for row in flat_index):
        bad = next(row for row in flat_index if row < 0 or row >= registered)
        raise UnknownEntityError("counterpart", bad)

    index = torch.as_tensor(flat_index, dtype=torch.long)
    weights = torch.as_tensor(flat_rating, dtype=DTYPE)
    bag_offsets = torch.as_tensor(offsets, dtype=torch.long)
    embedded = F.embedding_bag(
        index, embedding, bag_offsets, mode="sum", per_sample_weights=weights, sparse=embedding.requires_grad
    )
    dtau = torch.as_tensor(dtau, dtype=DTYPE)
    flags = torch.as_tensor(is_new, dtype=DTYPE)
    return torch.cat([embedded, dtau_feature(dtau).unsqueeze(-1), flags.unsqueeze(-1)], dim=-1)


def build_input(events: Sequence[Tuple[int, float]], dtau: float, is_new: bool,
                embedding: Tensor, registered: Optional[int] = None) -> Tensor:
    """Single-entity y from (counterpart row, rating) pairs"""
    registered = embedding.shape[0] if registered is None else registered
    rows = [row for row, _ in events]
    values = [rating for _, rating in events]
    y = build_inputs([rows], [values], torch.tensor([float(dtau)], dtype=DTYPE),
                     torch.tensor([bool(is_new)]), embedding, registered)
    return y[0]


def decay_hidden(h: Tensor, dtau, lam: float, sign: DecaySign = DecaySign.NEGATIVE) -> Tensor:
    """h·exp(−Δτ/λ) (or the growing variant under ``DecaySign.POSITIVE``)"""
    if not lam > 0:
        raise ConfigurationError(f"decay rate λ must be positive, got {lam}")
    dtau = torch.as_tensor(dtau, dtype=DTYPE)
    if (dtau < 0).any():
        raise ConfigurationError("elapsed interval Δτ must be non-negative")
    exponent = -dtau / lam if sign == DecaySign.NEGATIVE else dtau / lam
    factor = torch.exp(exponent)
    if factor.dim() > 0:
        factor = factor.unsqueeze(-1)
    return h * factor


def compose_factor(stationary: Tensor, dynamic: Tensor) -> Tensor:
    """u = uˢ + Δu"""
    if stationary.shape[-1] != dynamic.shape[-1]:
        raise ConfigurationError(
            f"stationary width {stationary.shape[-1]} != dynamic width {dynamic.shape[-1]}"
        )
    return stationary + dynamic
