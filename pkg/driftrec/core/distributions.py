"""
DIAGONAL GAUSSIAN PRIMITIVES
REF: torch.distributions Normal / closed-form KL
Densities, KL divergence, reparameterized sampling and a Monte-Carlo KL oracle
"""

from dataclasses import dataclass

import torch
from torch import Tensor
from torch.distributions import Normal
from torch.distributions import kl_divergence as _normal_kl

from driftrec.core.numerics import DTYPE
from driftrec.errors import ConfigurationError

VARIANCE_FLOOR = 1e-8


@dataclass
class DiagGaussian:
    """Diagonal-covariance Gaussian; batched along leading dimensions, event dim last"""
    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ConfigurationError(
                f"mean shape {tuple(self.mean.shape)} != variance shape {tuple(self.var.shape)}"
            )
        self.var = self.var.clamp_min(VARIANCE_FLOOR)

    @classmethod
    def standard(cls, *shape: int) -> "DiagGaussian":
        return cls(torch.zeros(*shape, dtype=DTYPE), torch.ones(*shape, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> Tensor:
        return self.var.sqrt()

    def normal(self) -> Normal:
        return Normal(self.mean, self.std, validate_args=False)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())

    def __getitem__(self, index) -> "DiagGaussian":
        return DiagGaussian(self.mean[index], self.var[index])


def _same_dim(a: Tensor, b: Tensor, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise ConfigurationError(f"{what}: dimension {a.shape[-1]} != {b.shape[-1]}")


def log_density(g: DiagGaussian, x: Tensor) -> Tensor:
    """Σ_d [−½ log(2π var_d) − (x_d − mean_d)² / (2 var_d)]"""
    _same_dim(g.mean, x, "log_density")
    return g.normal().log_prob(x).sum(-1)


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q ‖ p) summed over the event dimension"""
    _same_dim(q.mean, p.mean, "kl_divergence")
    return _normal_kl(q.normal(), p.normal()).sum(-1)


def sample_reparam(g: DiagGaussian, noise: Tensor) -> Tensor:
    """mean + √var ⊙ noise"""
    _same_dim(g.mean, noise, "sample_reparam")
    return g.mean + g.std * noise


def mc_kl_samples(q: DiagGaussian, p: DiagGaussian, n: int, seed: int, chunk: int = 100_000) -> Tensor:
    """Per-draw integrand log q(s) − log p(s) for s ~ q"""
    if n < 1:
        raise ConfigurationError("Monte-Carlo draw count must be at least 1")
    _same_dim(q.mean, p.mean, "mc_kl_oracle")
    generator = torch.Generator().manual_seed(seed)
    pieces = []
    remaining = n
    while remaining > 0:
        size = min(chunk, remaining)
        noise = torch.randn((size,) + tuple(q.mean.shape), generator=generator, dtype=DTYPE)
        draws = sample_reparam(q, noise)
        pieces.append(log_density(q, draws) - log_density(p, draws))
        remaining -= size
    return torch.cat(pieces)


def mc_kl_oracle(q: DiagGaussian, p: DiagGaussian, n: int, seed: int) -> float:
    """Monte-Carlo estimate of KL(q ‖ p); test oracle for ``kl_divergence``"""
    return mc_kl_samples(q, p, n, seed).mean().item()
