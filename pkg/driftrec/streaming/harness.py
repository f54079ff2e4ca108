"""
PREQUENTIAL STREAMING HARNESS
REF: predict-then-update evaluation over granularity steps
Read-only rating prediction and the test-then-train loop with per-step RMSE
"""

import asyncio
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import mean_squared_error
from torch import Tensor

from driftrec.core.numerics import DTYPE, StreamOptimizer, derive_seed
from driftrec.data.ratings import RatingEvent, ensure_sorted
from driftrec.engine.inference import register_batch_entities, update_step
from driftrec.errors import CausalityError, ColdEntityError
from driftrec.model.model import DriftRecModel
from driftrec.model.networks import (
    compose_factor,
    decay_hidden,
    drift_prior,
    env_noise,
    interaction_mean,
    interaction_var,
)
from driftrec.model.state import EntityKind
from driftrec.streaming.batching import StepBatch, bucketize, merge_batches, stream_start

logger = logging.getLogger(__name__)

PREDICTION_CHUNK = 4096
RMSE_COLUMNS = ["step_index", "interval_start_iso8601", "n_predicted", "n_cold_skipped", "rmse"]


@dataclass
class Prediction:
    mean: float
    variance: float


def expected_factors(model: DriftRecModel, kind: EntityKind, entity_ids: Sequence[Hashable],
                     at_times: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """E(u) = uˢ + prior mean (Δτ measured to ``at_times``) and the decayed hidden state,
    read through the same link replay the step bound uses"""
    table = model.table(kind)
    missing = next((e for e in entity_ids if e not in table), None)
    if missing is not None:
        raise ColdEntityError(kind.value, missing)
    rows = table.rows(entity_ids)
    if at_times is None:
        dtau = torch.zeros(len(rows), dtype=DTYPE)
    else:
        dtau = table.clock.dtaus(rows, at_times)

    chain = model.chain(kind)
    hidden = decay_hidden(table.hidden_rows(rows, chain.gru), dtau, model.decay_rate(kind), model.settings.decay_sign)
    stationary = table.stationary[rows].detach()
    if model.settings.dynamics_off:
        return stationary, hidden
    drift = drift_prior(hidden, dtau, chain.prior).mean
    mean = torch.where(table.is_new[rows].unsqueeze(-1), torch.zeros_like(drift), drift)
    return compose_factor(stationary, mean), hidden


def predict_many(model: DriftRecModel, user_ids: Sequence[Hashable], item_ids: Sequence[Hashable],
                 at_times: Optional[Sequence[float]] = None) -> Tuple[Tensor, Tensor]:
    """Predictive means and variances; reads committed state only"""
    times = None if at_times is None else torch.as_tensor(list(at_times), dtype=DTYPE)
    with torch.no_grad():
        u, h_u = expected_factors(model, EntityKind.USER, user_ids, times)
        v, h_v = expected_factors(model, EntityKind.ITEM, item_ids, times)
        mean = interaction_mean(u, v, model.interaction)
        variance = interaction_var(u, v, env_noise(h_u, h_v, model.noise), model.interaction)
    return mean, variance


def predict(model: DriftRecModel, user_id: Hashable, item_id: Hashable,
            at_time: Optional[float] = None) -> Prediction:
    mean, variance = predict_many(model, [user_id], [item_id], None if at_time is None else [at_time])
    return Prediction(mean=mean.item(), variance=variance.item())


@dataclass
class AuditEntry:
    action: str   # "predict" | "update"
    step_index: int
    timestamps: Tuple[float, ...]


@dataclass
class PrequentialResult:
    table: pd.DataFrame
    overall_rmse: Optional[float]
    n_predicted: int
    n_cold_skipped: int
    audit: List[AuditEntry] = field(default_factory=list)

    def to_csv(self) -> str:
        return self.table.to_csv(index=False, na_rep="", float_format="%.10g")


def _iso(seconds: float) -> str:
    return datetime.fromtimestamp(seconds, tz=timezone.utc).isoformat()


class StreamingEvaluator:
    """
    Test-then-train over a stream that starts where the model's timeline ends.
    Predictions of a step run concurrently in fixed-size chunks (read-only);
    updates run exclusively once every ``update_interval_steps`` steps.
    """

    def __init__(self, granularity: float, iterations_per_step: int, seed: int,
                 update_interval_steps: int = 1, chunk_size: int = PREDICTION_CHUNK):
        if granularity <= 0 or update_interval_steps <= 0 or chunk_size <= 0:
            raise ValueError("granularity, update interval and chunk size must be positive")
        self.granularity = granularity
        self.iterations_per_step = iterations_per_step
        self.seed = seed
        self.update_interval_steps = update_interval_steps
        self.chunk_size = chunk_size
        self.performance_metrics = {
            'steps': 0,
            'updates': 0,
            'predicted': 0,
            'cold_skipped': 0,
        }

    async def _predict_step(self, model: DriftRecModel, events: List[RatingEvent]) -> np.ndarray:
        chunks = [events[k:k + self.chunk_size] for k in range(0, len(events), self.chunk_size)]
        results = await asyncio.gather(*[
            asyncio.to_thread(
                predict_many, model,
                [e.user_id for e in chunk], [e.item_id for e in chunk], [e.timestamp for e in chunk],
            )
            for chunk in chunks
        ])
        if not results:
            return np.zeros(0)
        return torch.cat([mean for mean, _ in results]).numpy()

    def _update(self, model: DriftRecModel, optimizer: StreamOptimizer, pending: List[StepBatch],
                audit: List[AuditEntry]):
        merged = merge_batches(pending)
        update_step(model, optimizer, merged, self.iterations_per_step, derive_seed(self.seed, merged.step_index))
        audit.append(AuditEntry("update", merged.step_index, tuple(e.timestamp for e in merged.events)))
        self.performance_metrics['updates'] += 1

    async def evaluate(self, model: DriftRecModel, optimizer: StreamOptimizer,
                       events: Sequence[RatingEvent]) -> PrequentialResult:
        ensure_sorted(events)
        if not events:
            return PrequentialResult(pd.DataFrame(columns=RMSE_COLUMNS), None, 0, 0)
        if model.clock_end is not None and events[0].timestamp <= model.clock_end:
            raise CausalityError(
                f"test stream starts at {events[0].timestamp}, inside the trained timeline "
                f"ending at {model.clock_end} (no temporal overlapping)"
            )
        start = model.clock_end if model.clock_end is not None else stream_start(events)
        batches = bucketize(events, start, self.granularity, first_index=model.step_index + 1)

        rows, truths, preds, audit = [], [], [], []
        pending: List[StepBatch] = []
        n_cold_total = 0
        for batch in batches:
            known = [e for e in batch.events if e.user_id in model.users and e.item_id in model.items]
            n_cold = len(batch) - len(known)
            means = await self._predict_step(model, known)
            truth = np.array([e.rating for e in known], dtype=np.float64)
            rmse = math.sqrt(mean_squared_error(truth, means)) if len(known) else math.nan
            truths.append(truth)
            preds.append(means)
            audit.append(AuditEntry("predict", batch.step_index, tuple(e.timestamp for e in known)))
            rows.append({
                "step_index": batch.step_index,
                "interval_start_iso8601": _iso(batch.t_start),
                "n_predicted": len(known),
                "n_cold_skipped": n_cold,
                "rmse": rmse,
            })
            n_cold_total += n_cold
            self.performance_metrics['steps'] += 1
            self.performance_metrics['predicted'] += len(known)
            self.performance_metrics['cold_skipped'] += n_cold

            register_batch_entities(model, optimizer, batch)
            pending.append(batch)
            if len(pending) == self.update_interval_steps:
                self._update(model, optimizer, pending, audit)
                pending = []
            logger.debug("Step %d: %d predicted, %d cold, RMSE %s", batch.step_index, len(known), n_cold, rmse)
        if pending:
            self._update(model, optimizer, pending, audit)
        model.close_timeline(events[-1].timestamp)

        all_truth = np.concatenate(truths)
        all_pred = np.concatenate(preds)
        overall = math.sqrt(mean_squared_error(all_truth, all_pred)) if len(all_truth) else None
        table = pd.DataFrame(rows, columns=RMSE_COLUMNS)
        logger.info("📊 Prequential evaluation: %d steps, %d predicted, %d cold, RMSE %s",
                    len(batches), len(all_truth), n_cold_total,
                    "absent" if overall is None else f"{overall:.4f}")
        return PrequentialResult(table, overall, int(len(all_truth)), n_cold_total, audit)


def prequential_eval(model: DriftRecModel, optimizer: StreamOptimizer, events: Sequence[RatingEvent],
                     granularity: float, iterations_per_step: int, seed: int,
                     update_interval_steps: int = 1) -> PrequentialResult:
    evaluator = StreamingEvaluator(granularity, iterations_per_step, seed, update_interval_steps)
    return asyncio.run(evaluator.evaluate(model, optimizer, events))
