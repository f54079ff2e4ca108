import pytest
import torch

from driftrec.core.numerics import OptimizerSettings
from driftrec.data.ratings import RatingEvent
from driftrec.model.checkpoint import build_optimizer
from driftrec.model.model import DriftRecModel, ModelSettings

DAY = 86_400.0


def events_from(rows):
    """(user, item, rating, day) tuples → events with timestamps in seconds"""
    return [RatingEvent(u, i, float(r), float(d * DAY)) for u, i, r, d in rows]


@pytest.fixture
def tiny_settings():
    return ModelSettings(stationary_dim=2, dynamic_dim=2, hidden_dim=3, embedding_dim=2, mlp_width=4,
                         decay_user=3 * DAY, decay_item=5 * DAY)


@pytest.fixture
def tiny_model(tiny_settings):
    return DriftRecModel(tiny_settings, seed=7)


@pytest.fixture
def tiny_optimizer(tiny_model):
    return build_optimizer(tiny_model, OptimizerSettings(learning_rate=1e-2))


@pytest.fixture
def toy_events():
    return events_from([
        (1, 10, 4.0, 1), (2, 10, 3.0, 1.5), (1, 11, 5.0, 2),
        (3, 12, 2.0, 8), (2, 11, 3.5, 9), (1, 10, 4.5, 10),
        (3, 10, 1.0, 15), (2, 12, 2.5, 16), (1, 12, 4.0, 17),
    ])


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)
