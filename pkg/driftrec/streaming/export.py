"""
FACTOR DRIFT EXPORT
Per-step mean location and uncertainty factors from recorded snapshots, ready
for heatmap plotting
"""

import logging
from pathlib import Path
from typing import Dict, Hashable, Optional, Sequence, Union

import pandas as pd
import torch

from driftrec.errors import RecordingDisabledError
from driftrec.model.model import DriftRecModel
from driftrec.model.state import EntityKind

logger = logging.getLogger(__name__)

EXPORT_FILES = {
    (EntityKind.USER, "location"): "users_location.csv",
    (EntityKind.USER, "uncertainty"): "users_uncertainty.csv",
    (EntityKind.ITEM, "location"): "items_location.csv",
    (EntityKind.ITEM, "uncertainty"): "items_uncertainty.csv",
}


def _centered(frame: pd.DataFrame) -> pd.DataFrame:
    return frame - frame.mean(axis=0)


def _linf_normalized(frame: pd.DataFrame) -> pd.DataFrame:
    scale = frame.abs().max(axis=0)
    return frame.div(scale.where(scale > 0, 1.0), axis=1)


def factor_trajectory(model: DriftRecModel, kind: EntityKind,
                      entity_ids: Optional[Sequence[Hashable]] = None) -> Dict[str, pd.DataFrame]:
    """
    Mean factors over the requested entities, one row per committed step.
    An entity idle at a step contributes its last recorded value; entities not
    yet seen are left out of the mean.
    """
    table = model.table(kind)
    wanted = table.rows(entity_ids if entity_ids is not None else table.ids)
    snapshots = sorted((s for s in model.snapshots if s.kind is kind), key=lambda s: s.step_index)
    dim = model.settings.dynamic_dim

    location = torch.zeros(table.capacity, dim, dtype=torch.float64)
    uncertainty = torch.zeros(table.capacity, dim, dtype=torch.float64)
    seen = torch.zeros(table.capacity, dtype=torch.bool)
    steps, loc_rows, unc_rows = [], [], []
    for snapshot in snapshots:
        location[snapshot.rows] = snapshot.location
        uncertainty[snapshot.rows] = snapshot.uncertainty
        seen[snapshot.rows] = True
        present = wanted[seen[wanted]]
        if not len(present):
            continue
        steps.append(snapshot.step_index)
        loc_rows.append(location[present].mean(0).tolist())
        unc_rows.append(uncertainty[present].mean(0).tolist())

    columns = [f"dim_{k}" for k in range(dim)]
    index = pd.Index(steps, name="step_index")
    return {
        "location": _centered(pd.DataFrame(loc_rows, index=index, columns=columns)),
        "uncertainty": _linf_normalized(pd.DataFrame(unc_rows, index=index, columns=columns)),
    }


def export_factors(model: DriftRecModel, out_dir: Union[str, Path],
                   user_ids: Optional[Sequence[Hashable]] = None,
                   item_ids: Optional[Sequence[Hashable]] = None) -> Dict[str, Path]:
    """Write the four factor CSVs; location centred per column, uncertainty L∞-normalised"""
    if not model.settings.record_factors or not model.snapshots:
        raise RecordingDisabledError(
            "checkpoint holds no factor snapshots; rerun with record_factors = true and dynamics_off = false"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for kind, ids in ((EntityKind.USER, user_ids), (EntityKind.ITEM, item_ids)):
        frames = factor_trajectory(model, kind, ids)
        for part, frame in frames.items():
            path = out_dir / EXPORT_FILES[(kind, part)]
            frame.to_csv(path, float_format="%.10g")
            written[EXPORT_FILES[(kind, part)]] = path
    logger.info("✅ Factor trajectories written to %s", out_dir)
    return written
