"""
GRADIENT VERIFICATION SUITE
Central-difference checks of every network and of the full one-step ELBO on a
tiny seeded model
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import pandas as pd
import torch
from torch import Tensor

from driftrec.core.numerics import DTYPE, GRUCell, GradCheckReport, OptimizerSettings, grad_check, seeded_generator
from driftrec.data.ratings import RatingEvent
from driftrec.engine.inference import register_batch_entities, step_elbo, update_step
from driftrec.model.checkpoint import build_optimizer
from driftrec.model.model import DriftRecModel, ModelSettings
from driftrec.model.networks import (
    ChainNetworks,
    EnvNoiseNetwork,
    InteractionNetwork,
    build_inputs,
    drift_prior,
    env_noise,
    interaction_mean,
    interaction_var,
    posterior,
)
from driftrec.streaming.batching import StepBatch

logger = logging.getLogger(__name__)

GradTransform = Callable[[Dict[str, Tensor]], Dict[str, Tensor]]

TINY = ModelSettings(stationary_dim=2, dynamic_dim=2, hidden_dim=3, embedding_dim=2, mlp_width=4,
                     decay_user=3 * 86_400.0, decay_item=5 * 86_400.0)


@dataclass
class GradCheckSuiteReport:
    reports: Dict[str, GradCheckReport] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(report.passed for report in self.reports.values())

    @property
    def worst(self):
        """(check, parameter, relative error) of the largest error overall"""
        rows = [(name, *report.worst) for name, report in self.reports.items()]
        return max(rows, key=lambda row: row[2]) if rows else ("", "", 0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "check": name,
                "worst_parameter": report.worst[0],
                "max_relative_error": report.max_error,
                "passed": report.passed,
            }
            for name, report in self.reports.items()
        ])


def _leaf(generator: torch.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return (scale * torch.randn(*shape, generator=generator, dtype=DTYPE)).requires_grad_(True)


def _weights(generator: torch.Generator, *shape: int) -> Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


def _with_prefix(prefix: str, module: torch.nn.Module) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


def _network_checks(seed: int) -> Dict[str, tuple]:
    """name → (function, params) for each network taken in isolation"""
    s = TINY
    gen = seeded_generator(seed, 10)
    batch = 3
    checks = {}

    net = InteractionNetwork(s.stationary_dim, s.mlp_width, gen)
    u, v = _leaf(gen, batch, s.stationary_dim), _leaf(gen, batch, s.stationary_dim)
    env = torch.rand(batch, generator=gen, dtype=DTYPE) + 0.1
    w = _weights(gen, batch)
    checks["interaction_mean"] = (
        lambda p, net=net, u=u, v=v, w=w: (interaction_mean(u, v, net) * w).sum(),
        {**_with_prefix("f1", net), "u": u, "v": v},
    )
    checks["interaction_var"] = (
        lambda p, net=net, u=u, v=v, w=w, env=env: (interaction_var(u, v, env, net) * w).sum(),
        {**{k: t for k, t in _with_prefix("f2", net).items() if "var_mlp" in k}, "u": u, "v": v},
    )

    noise = EnvNoiseNetwork(s.hidden_dim, s.mlp_width, gen)
    h_u, h_v = _leaf(gen, batch, s.hidden_dim), _leaf(gen, batch, s.hidden_dim)
    checks["env_noise"] = (
        lambda p, noise=noise, h_u=h_u, h_v=h_v, w=w: (env_noise(h_u, h_v, noise) * w).sum(),
        {**_with_prefix("noise", noise), "h_u": h_u, "h_v": h_v},
    )

    chain = ChainNetworks(s.hidden_dim, s.embedding_dim, s.dynamic_dim, s.mlp_width, gen)
    h = _leaf(gen, batch, s.hidden_dim)
    dtau = torch.rand(batch, generator=gen, dtype=DTYPE) * 86_400.0 * 10
    a, b = _weights(gen, batch, s.dynamic_dim), _weights(gen, batch, s.dynamic_dim)

    def prior_objective(p, chain=chain, h=h, dtau=dtau, a=a, b=b):
        g = drift_prior(h, dtau, chain.prior)
        return (g.mean * a).sum() + (g.var * b).sum()

    checks["drift_prior"] = (prior_objective, {**_with_prefix("prior", chain.prior), "h": h})

    y = _leaf(gen, batch, s.embedding_dim + 2)

    def posterior_objective(p, chain=chain, h=h, y=y, a=a, b=b):
        g = posterior(h, y, chain.posterior)
        return (g.mean * a).sum() + (g.var * b).sum()

    checks["posterior"] = (posterior_objective, {**_with_prefix("posterior", chain.posterior), "h": h, "y": y})

    gru = GRUCell(s.embedding_dim + 2, s.hidden_dim, gen)
    h0 = _leaf(gen, batch, s.hidden_dim)
    xs = [_leaf(gen, batch, s.embedding_dim + 2) for _ in range(3)]

    def gru_objective(p, gru=gru, h0=h0, xs=xs):
        state = h0
        for x in xs:
            state = gru(state, x)
        return state.sum()

    checks["gru_cell"] = (gru_objective, {**_with_prefix("gru", gru), "h0": h0, **{f"x{k}": x for k, x in enumerate(xs)}})

    embedding = _leaf(gen, 4, s.embedding_dim)
    weights = _weights(gen, 2, s.embedding_dim + 2)

    def embedding_objective(p, embedding=embedding, weights=weights):
        y = build_inputs([[0, 2], [1, 2, 3]], [[4.0, 1.5], [2.0, 3.0, 5.0]],
                         torch.tensor([0.0, 86_400.0], dtype=DTYPE), torch.tensor([True, False]),
                         embedding, 4)
        return (y * weights).sum()

    checks["embeddings"] = (embedding_objective, {"W": embedding})
    return checks


def toy_elbo_setup(seed: int, settings: ModelSettings = TINY) -> tuple:
    """A tiny model with one committed step, so the recurrent link is live, and the next batch"""
    model = DriftRecModel(settings, seed=seed)
    optimizer = build_optimizer(model, OptimizerSettings())
    day = 86_400.0
    first = StepBatch.from_events(1, 0.0, 7 * day, [
        RatingEvent("a", "x", 4.0, 1 * day),
        RatingEvent("b", "x", 2.0, 2 * day),
        RatingEvent("a", "y", 3.5, 3 * day),
    ])
    second = StepBatch.from_events(2, 7 * day, 14 * day, [
        RatingEvent("a", "x", 4.5, 8 * day),
        RatingEvent("c", "y", 1.0, 9 * day),
        RatingEvent("b", "z", 3.0, 10 * day),
    ])
    register_batch_entities(model, optimizer, first)
    update_step(model, optimizer, first, 0, seed)
    register_batch_entities(model, optimizer, second)
    return model, second


def run_gradcheck(seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                  analytic_transform: Optional[GradTransform] = None) -> GradCheckSuiteReport:
    """
    Every network plus the full step ELBO. ``analytic_transform`` rewrites the
    autograd gradients before comparison (negative controls).
    """
    suite = GradCheckSuiteReport(tolerance=tol)
    checks = _network_checks(seed)

    model, batch = toy_elbo_setup(seed)
    elbo_params = model.all_parameters()
    checks["step_elbo"] = (lambda p: step_elbo(batch, model, seed, compute_gradients=False)[0], elbo_params)

    for name, (function, params) in checks.items():
        analytic = None
        if analytic_transform is not None:
            analytic = _transformed(function, params, analytic_transform)
        report = grad_check(function, params, step=step, tol=tol, analytic=analytic)
        suite.reports[name] = report
        worst_param, worst_error = report.worst
        level = logging.INFO if report.passed else logging.ERROR
        logger.log(level, "%s %s: max relative error %.3e (%s)",
                   "✅" if report.passed else "❌", name, worst_error, worst_param)
    return suite


def _transformed(function, params: Dict[str, Tensor], transform: GradTransform):
    def analytic(p: Dict[str, Tensor]) -> Dict[str, Tensor]:
        names: List[str] = list(p)
        value = function(p)
        grads = torch.autograd.grad(value, [p[n] for n in names], allow_unused=True)
        dense = {n: (torch.zeros_like(p[n]) if g is None else g.to_dense() if g.is_sparse else g)
                 for n, g in zip(names, grads)}
        return transform(dense)
    return analytic
