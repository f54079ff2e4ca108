"""
MODEL CHECKPOINTS
Versioned torch-serialised snapshot of parameters, entity registries, clocks,
optimizer moments and recorded factor snapshots

Layout (a dict saved with ``torch.save``):
    format          "driftrec-checkpoint"
    version         1
    seed            int
    settings        ModelSettings as plain values
    networks        DriftRecModel.state_dict() (dense float64 tensors)
    users, items    EntityTable payloads (ids, tables at full capacity, clocks)
    clock_end       float | None, end of the last committed interval
    step_index      int
    snapshots       list of FactorSnapshot payloads
    optimizer       {"settings": {...}, "state": StreamOptimizer.state_dict()}
"""

import logging
from pathlib import Path
from typing import Tuple, Union

import torch

from driftrec.core.numerics import OptimizerKind, OptimizerSettings, StreamOptimizer
from driftrec.errors import ConfigurationError
from driftrec.model.model import DriftRecModel, FactorSnapshot, ModelSettings
from driftrec.model.state import EntityTable

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "driftrec-checkpoint"
CHECKPOINT_VERSION = 1


def build_optimizer(model: DriftRecModel, settings: OptimizerSettings) -> StreamOptimizer:
    return StreamOptimizer(model.dense_parameters(), model.sparse_parameters(), settings)


def _optimizer_settings_payload(settings: OptimizerSettings) -> dict:
    return {
        "kind": settings.kind.value,
        "learning_rate": settings.learning_rate,
        "beta1": settings.beta1,
        "beta2": settings.beta2,
        "epsilon": settings.epsilon,
    }


def save_checkpoint(path: Union[str, Path], model: DriftRecModel, optimizer: StreamOptimizer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "settings": model.settings.to_payload(),
        "networks": {name: tensor.clone() for name, tensor in model.state_dict().items()},
        "users": model.users.to_payload(),
        "items": model.items.to_payload(),
        "clock_end": model.clock_end,
        "step_index": model.step_index,
        "snapshots": [snapshot.to_payload() for snapshot in model.snapshots],
        "optimizer": {
            "settings": _optimizer_settings_payload(optimizer.settings),
            "state": optimizer.state_dict(),
        },
    }
    torch.save(payload, path)
    logger.info("✅ Checkpoint written: %s (%d users, %d items, step %d)",
                path, len(model.users), len(model.items), model.step_index)


def load_checkpoint(path: Union[str, Path]) -> Tuple[DriftRecModel, StreamOptimizer]:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a driftrec checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")

    model = DriftRecModel(ModelSettings.from_payload(payload["settings"]), seed=payload["seed"])
    model.load_state_dict(payload["networks"])
    model.users = EntityTable.from_payload(payload["users"])
    model.items = EntityTable.from_payload(payload["items"])
    model.clock_end = payload["clock_end"]
    model.step_index = payload["step_index"]
    model.snapshots = [FactorSnapshot.from_payload(item) for item in payload["snapshots"]]

    raw = dict(payload["optimizer"]["settings"])
    raw["kind"] = OptimizerKind(raw["kind"])
    optimizer = build_optimizer(model, OptimizerSettings(**raw))
    optimizer.load_state_dict(payload["optimizer"]["state"])
    return model, optimizer
