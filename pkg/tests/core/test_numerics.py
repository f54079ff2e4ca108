import math

import pytest
import torch

from driftrec.core.numerics import (
    DTYPE,
    GRUCell,
    LayerKind,
    LayerSpec,
    MLP,
    OptimizerKind,
    OptimizerSettings,
    StreamOptimizer,
    derive_seed,
    grad_check,
    gru_cell_step,
    init_layer_params,
    mlp_apply,
    mlp_specs,
    relative_error,
)
from driftrec.errors import ConfigurationError, GradCheckError


def _params(specs, generator):
    return [{k: v.requires_grad_(True) for k, v in init_layer_params(s, generator).items()} for s in specs]


def _zero_gru(hidden, width):
    params = init_layer_params(LayerSpec(LayerKind.GRU_CELL, width, hidden))
    return {k: torch.zeros_like(v) for k, v in params.items()}


# ----------------------------------------------------------------------------
# mlp_apply
# ----------------------------------------------------------------------------

def test_zero_affine_maps_to_zero():
    spec = [LayerSpec(LayerKind.AFFINE, 3, 4)]
    params = [{"weight": torch.zeros(4, 3, dtype=DTYPE), "bias": torch.zeros(4, dtype=DTYPE)}]
    out, _ = mlp_apply(spec, params, torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
    assert torch.equal(out, torch.zeros(4, dtype=DTYPE))


def test_tanh_of_zero():
    out, _ = mlp_apply([LayerSpec(LayerKind.TANH, 2, 2)], [{}], torch.zeros(2, dtype=DTYPE))
    assert torch.equal(out, torch.zeros(2, dtype=DTYPE))


def test_two_layer_net_matches_scalar_loop(generator):
    specs = mlp_specs(3, 4, 2)
    params = init_layer_params(specs[0], generator), {}, init_layer_params(specs[2], generator)
    params[0]["bias"] = torch.randn(4, generator=generator, dtype=DTYPE)
    x = torch.randn(3, generator=generator, dtype=DTYPE)
    out, _ = mlp_apply(specs, list(params), x)

    w1, b1, w2, b2 = params[0]["weight"], params[0]["bias"], params[2]["weight"], params[2]["bias"]
    hidden = [math.tanh(sum(w1[j, k].item() * x[k].item() for k in range(3)) + b1[j].item()) for j in range(4)]
    expected = [sum(w2[i, j].item() * hidden[j] for j in range(4)) + b2[i].item() for i in range(2)]
    assert out.tolist() == pytest.approx(expected, abs=1e-12)


def test_shape_mismatch_names_layer():
    specs = mlp_specs(3, 4, 2)
    params = [init_layer_params(s) for s in specs]
    with pytest.raises(ConfigurationError, match="layer 0"):
        mlp_apply(specs, params, torch.zeros(5, dtype=DTYPE))


def test_mlp_apply_is_deterministic(generator):
    specs = mlp_specs(5, 7, 3)
    params = [init_layer_params(s, generator) for s in specs]
    x = torch.randn(6, 5, generator=generator, dtype=DTYPE)
    first, _ = mlp_apply(specs, params, x)
    second, _ = mlp_apply(specs, params, x)
    assert torch.equal(first, second)


def test_tape_gradients_cover_params_and_input(generator):
    specs = mlp_specs(3, 4, 1)
    params = _params(specs, generator)
    x = torch.randn(3, generator=generator, dtype=DTYPE)
    out, tape = mlp_apply(specs, params, x)
    grads = tape.gradients()
    assert set(grads) == {"input", "0.weight", "0.bias", "2.weight", "2.bias"}
    assert grads["0.weight"].shape == (4, 3)


def test_concat_and_product_layers():
    a = torch.tensor([1.0, 2.0], dtype=DTYPE)
    b = torch.tensor([3.0, 4.0], dtype=DTYPE)
    cat, _ = mlp_apply([LayerSpec(LayerKind.CONCAT, 4, 4)], [{}], (a, b))
    prod, _ = mlp_apply([LayerSpec(LayerKind.PRODUCT, 4, 2)], [{}], (a, b))
    assert cat.tolist() == [1.0, 2.0, 3.0, 4.0]
    assert prod.tolist() == [3.0, 8.0]


def test_layer_spec_validates_widths():
    with pytest.raises(ConfigurationError):
        LayerSpec(LayerKind.TANH, 3, 4)
    with pytest.raises(ConfigurationError):
        LayerSpec(LayerKind.AFFINE, 0, 4)


def test_mlp_module_matches_functional(generator):
    net = MLP(mlp_specs(3, 5, 2), generator)
    x = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    functional, _ = net.apply_with_tape(x)
    assert torch.equal(net(x), functional)


@pytest.mark.parametrize("kind", [LayerKind.TANH, LayerKind.SIGMOID, LayerKind.SOFTPLUS])
def test_activation_gradients_match_finite_differences(kind):
    for seed in range(100):
        gen = torch.Generator().manual_seed(seed)
        specs = [LayerSpec(LayerKind.AFFINE, 3, 4), LayerSpec(kind, 4, 4), LayerSpec(LayerKind.AFFINE, 4, 1)]
        params = _params(specs, gen)
        x = torch.randn(2, 3, generator=gen, dtype=DTYPE)
        flat = {f"{i}.{k}": v for i, layer in enumerate(params) for k, v in layer.items()}
        report = grad_check(lambda p: mlp_apply(specs, params, x)[0].sum(), flat)
        assert report.passed, (seed, report.worst)


# ----------------------------------------------------------------------------
# GRU cell
# ----------------------------------------------------------------------------

def test_gru_zero_params_halves_state():
    h = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
    out = gru_cell_step(_zero_gru(3, 2), h, torch.tensor([0.5, 0.7], dtype=DTYPE))
    assert torch.equal(out, 0.5 * h)


def test_gru_zero_everything_is_zero():
    out = gru_cell_step(_zero_gru(3, 2), torch.zeros(3, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
    assert torch.equal(out, torch.zeros(3, dtype=DTYPE))


def test_gru_closed_update_gate_keeps_state(generator):
    params = init_layer_params(LayerSpec(LayerKind.GRU_CELL, 2, 3), generator)
    params["b_z"] = torch.full((3,), -60.0, dtype=DTYPE)
    h = torch.randn(3, generator=generator, dtype=DTYPE)
    out = gru_cell_step(params, h, torch.randn(2, generator=generator, dtype=DTYPE))
    assert torch.allclose(out, h, atol=1e-6)


def test_gru_three_steps_gradcheck(generator):
    cell = GRUCell(2, 3, generator)
    h0 = torch.randn(3, generator=generator, dtype=DTYPE).requires_grad_(True)
    xs = [torch.randn(2, generator=generator, dtype=DTYPE) for _ in range(3)]

    def chained(_):
        h = h0
        for x in xs:
            h = cell(h, x)
        return h.sum()

    report = grad_check(chained, {**dict(cell.named_parameters()), "h0": h0})
    assert report.max_error < 1e-4


def test_gru_width_mismatch():
    with pytest.raises(ConfigurationError):
        gru_cell_step(_zero_gru(3, 2), torch.zeros(4, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))


# ----------------------------------------------------------------------------
# grad_check
# ----------------------------------------------------------------------------

def test_grad_check_quadratic():
    p = torch.tensor(3.0, dtype=DTYPE, requires_grad=True)
    report = grad_check(lambda params: params["p"] ** 2, {"p": p})
    assert report.errors["p"] < 1e-8
    assert p.item() == 3.0


def test_grad_check_restores_parameters(generator):
    w = torch.randn(3, 3, generator=generator, dtype=DTYPE).requires_grad_(True)
    before = w.detach().clone()
    grad_check(lambda p: torch.tanh(p["w"]).sum(), {"w": w})
    assert torch.equal(w.detach(), before)


def test_grad_check_detects_wrong_gradient():
    p = torch.tensor([1.0, 2.0], dtype=DTYPE, requires_grad=True)
    report = grad_check(lambda params: (params["p"] ** 2).sum(), {"p": p},
                        analytic=lambda params: {"p": 3.0 * params["p"].detach()})
    assert not report.passed
    assert report.worst[0] == "p"


def test_grad_check_non_finite_names_parameter():
    p = torch.tensor([1.0], dtype=DTYPE, requires_grad=True)
    with pytest.raises(GradCheckError) as info:
        grad_check(lambda params: torch.log(params["p"] - 1.0).sum(), {"p": p})
    assert info.value.parameter == "<base>"

    q = torch.tensor([0.0], dtype=DTYPE, requires_grad=True)
    with pytest.raises(GradCheckError) as info:
        grad_check(lambda params: torch.sqrt(params["q"]).sum(), {"q": q},
                   analytic=lambda params: {"q": torch.zeros(1, dtype=DTYPE)})
    assert info.value.parameter == "q"


def test_relative_error_scale():
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-9)
    assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------

def test_descent_mode_step():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    opt = StreamOptimizer({"p": p}, {}, OptimizerSettings(kind=OptimizerKind.SGD, learning_rate=0.1))
    opt.step({"p": torch.tensor([2.0], dtype=DTYPE)})
    assert p.item() == pytest.approx(0.8)


def test_zero_gradient_leaves_parameters_and_counts_step():
    p = torch.nn.Parameter(torch.tensor([1.0, -1.0], dtype=DTYPE))
    opt = StreamOptimizer({"p": p}, {}, OptimizerSettings(learning_rate=0.01))
    opt.step({"p": torch.zeros(2, dtype=DTYPE)})
    assert p.tolist() == [1.0, -1.0]
    assert opt.step_count == 1


def test_adam_first_step_is_learning_rate_sized():
    p = torch.nn.Parameter(torch.tensor([0.0, 0.0], dtype=DTYPE))
    opt = StreamOptimizer({"p": p}, {}, OptimizerSettings(learning_rate=0.01))
    opt.step({"p": torch.tensor([3.0, 0.5], dtype=DTYPE)})
    assert p.tolist() == pytest.approx([-0.01, -0.01], rel=1e-6)


def test_non_finite_gradient_is_skipped():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    opt = StreamOptimizer({"p": p}, {}, OptimizerSettings(kind=OptimizerKind.SGD, learning_rate=0.1))
    assert opt.step({"p": torch.tensor([math.nan], dtype=DTYPE)}) is False
    assert p.item() == 1.0
    assert opt.performance_metrics['skipped_updates'] == 1


def test_sparse_rows_without_gradient_stay_bitwise():
    table = torch.nn.Parameter(torch.randn(4, 3, dtype=DTYPE))
    before = table.detach().clone()
    opt = StreamOptimizer({}, {"t": table}, OptimizerSettings(learning_rate=0.1))
    grad = torch.zeros(4, 3, dtype=DTYPE)
    grad[1] = 1.0
    opt.step({"t": grad.to_sparse(1)})
    assert torch.equal(table.detach()[[0, 2, 3]], before[[0, 2, 3]])
    assert not torch.equal(table.detach()[1], before[1])


def test_snapshot_moments_mirror_shapes():
    dense = torch.nn.Parameter(torch.zeros(2, 5, dtype=DTYPE))
    opt = StreamOptimizer({"w": dense}, {}, OptimizerSettings())
    opt.step({"w": torch.ones(2, 5, dtype=DTYPE)})
    state = opt.snapshot()
    assert state.first_moments["w"].shape == dense.shape
    assert state.second_moments["w"].shape == dense.shape


def test_replace_parameter_pads_moments():
    table = torch.nn.Parameter(torch.zeros(2, 3, dtype=DTYPE))
    opt = StreamOptimizer({}, {"t": table}, OptimizerSettings())
    opt.step({"t": torch.ones(2, 3, dtype=DTYPE).to_sparse(1)})
    grown = torch.nn.Parameter(torch.cat([table.detach(), torch.zeros(2, 3, dtype=DTYPE)]))
    opt.sync({"t": grown})
    assert opt.snapshot().first_moments["t"].shape == (4, 3)


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        OptimizerSettings(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        OptimizerSettings(beta1=1.0)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
    assert len({derive_seed(3, step, it) for step in range(5) for it in range(5)}) == 25
    assert 0 <= derive_seed(0) < 2 ** 32
