import pytest
import torch

from driftrec.data.config import SECONDS_PER_WEEK, RunConfig
from driftrec.errors import ConfigurationError
from driftrec.model.model import DriftRecModel, ModelSettings
from driftrec.model.state import EntityKind
from driftrec.streaming.harness import predict


def test_settings_from_config():
    config = RunConfig(stationary_dim=4, dynamic_dim=4, decay_user_weeks=2.0)
    settings = ModelSettings.from_config(config)
    assert settings.stationary_dim == 4
    assert settings.decay_user == 2 * SECONDS_PER_WEEK


@pytest.mark.parametrize("overrides", [
    {"stationary_dim": 3, "dynamic_dim": 4},
    {"hidden_dim": 0},
    {"decay_item": 0.0},
    {"sigma_user": -1.0},
])
def test_invalid_settings(overrides):
    with pytest.raises(ConfigurationError):
        DriftRecModel(ModelSettings(**overrides))


def test_parameter_groups(tiny_model):
    dense = tiny_model.dense_parameters()
    sparse = tiny_model.sparse_parameters()
    assert set(sparse) == {"users.stationary", "users.embedding", "items.stationary", "items.embedding"}
    assert "interaction.global_bias" in dense
    assert any(name.startswith("user_chain.gru") for name in dense)
    assert not set(dense) & set(sparse)


def test_same_seed_same_networks(tiny_settings):
    a = DriftRecModel(tiny_settings, seed=3).state_dict()
    b = DriftRecModel(tiny_settings, seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_register_missing_in_first_seen_order(tiny_model):
    tiny_model.register_entity(2, EntityKind.USER)
    added = tiny_model.register_missing([5, 2, 9, 5], ["b", "a"])
    assert added == {'users': [5, 9], 'items': ["b", "a"]}
    assert tiny_model.users.ids == [2, 5, 9]


def test_zero_residuals_collapse_to_pmf(tiny_model):
    tiny_model.zero_residuals_()
    tiny_model.set_global_bias(3.25)
    tiny_model.register_entity("u", EntityKind.USER)
    tiny_model.register_entity("i", EntityKind.ITEM)
    u = tiny_model.users.state("u").stationary
    v = tiny_model.items.state("i").stationary
    prediction = predict(tiny_model, "u", "i")
    assert prediction.mean == pytest.approx((u * v).sum().item() + 3.25, abs=1e-15)
    assert prediction.variance > 0


def test_close_timeline_only_moves_back(tiny_model):
    tiny_model.close_timeline(100.0)
    assert tiny_model.clock_end == 100.0
    tiny_model.clock_end = 150.0
    tiny_model.close_timeline(120.0)
    assert tiny_model.clock_end == 120.0
    tiny_model.close_timeline(130.0)
    assert tiny_model.clock_end == 120.0


def test_reset_streaming_state(tiny_model):
    tiny_model.register_entity(1, EntityKind.USER)
    tiny_model.clock_end = 10.0
    tiny_model.step_index = 4
    tiny_model.reset_streaming_state()
    assert tiny_model.clock_end is None and tiny_model.step_index == 0
    assert 1 in tiny_model.users
