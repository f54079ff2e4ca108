"""
NUMERIC CORE
REF: torch autograd in float64 + Glorot-uniform initialisation
Dense layers, GRU cell, finite-difference gradient checking and first-order optimizers
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from driftrec.errors import ConfigurationError, GradCheckError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

LayerInput = Union[Tensor, Tuple[Tensor, ...]]


class LayerKind(Enum):
    AFFINE = "affine"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    CONCAT = "concat"
    PRODUCT = "elementwise-product"
    GRU_CELL = "gru-cell"


ACTIVATIONS: Dict[LayerKind, Callable[[Tensor], Tensor]] = {
    LayerKind.TANH: torch.tanh,
    LayerKind.SIGMOID: torch.sigmoid,
    LayerKind.SOFTPLUS: F.softplus,
}

GRU_PARAM_NAMES = ("W_z", "W_r", "W_h", "b_z", "b_r", "b_h")


@dataclass(frozen=True)
class LayerSpec:
    """One building block of a network.

    For ``CONCAT`` and ``PRODUCT`` the input is a tuple of tensors and
    ``in_width`` is the total width of the parts. For ``GRU_CELL`` the input is
    the pair ``(h_prev, x)``; ``in_width`` is the width of ``x`` and
    ``out_width`` the hidden width.
    """
    kind: LayerKind
    in_width: int
    out_width: int

    def __post_init__(self):
        if self.in_width <= 0 or self.out_width <= 0:
            raise ConfigurationError(f"{self.kind.value} layer widths must be positive")
        if self.kind in ACTIVATIONS or self.kind == LayerKind.CONCAT:
            if self.in_width != self.out_width:
                raise ConfigurationError(f"{self.kind.value} layer must preserve width")
        if self.kind == LayerKind.PRODUCT and self.in_width != 2 * self.out_width:
            raise ConfigurationError("elementwise-product layer takes two inputs of the output width")


def glorot_uniform_(weight: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))"""
    return nn.init.xavier_uniform_(weight, gain=1.0, generator=generator)


def init_layer_params(spec: LayerSpec, generator: Optional[torch.Generator] = None) -> Dict[str, Tensor]:
    """Fresh parameters for one layer: Glorot weights, zero biases"""
    if spec.kind == LayerKind.AFFINE:
        weight = glorot_uniform_(torch.empty(spec.out_width, spec.in_width, dtype=DTYPE), generator)
        return {"weight": weight, "bias": torch.zeros(spec.out_width, dtype=DTYPE)}
    if spec.kind == LayerKind.GRU_CELL:
        hidden, stacked = spec.out_width, spec.out_width + spec.in_width
        params = {}
        for gate in ("z", "r", "h"):
            params[f"W_{gate}"] = glorot_uniform_(torch.empty(hidden, stacked, dtype=DTYPE), generator)
            params[f"b_{gate}"] = torch.zeros(hidden, dtype=DTYPE)
        return params
    return {}


@dataclass
class Tape:
    """Backprop record of one forward pass"""
    output: Tensor
    leaves: Dict[str, Tensor] = field(default_factory=dict)

    def gradients(self, scalar: Optional[Tensor] = None) -> Dict[str, Tensor]:
        """Exact gradients of ``scalar`` (default: sum of the output) w.r.t. every leaf"""
        target = self.output.sum() if scalar is None else scalar
        names = [name for name, leaf in self.leaves.items() if leaf.requires_grad]
        grads = torch.autograd.grad(
            target, [self.leaves[n] for n in names], retain_graph=True, allow_unused=True
        )
        result = {}
        for name, grad in zip(names, grads):
            leaf = self.leaves[name]
            if grad is None:
                grad = torch.zeros_like(leaf)
            elif grad.is_sparse:
                grad = grad.to_dense()
            result[name] = grad
        return result


def _width(value: LayerInput) -> int:
    if isinstance(value, tuple):
        return sum(part.shape[-1] for part in value)
    return value.shape[-1]


def _check(condition: bool, index: int, spec: LayerSpec, message: str):
    if not condition:
        raise ConfigurationError(f"layer {index} ({spec.kind.value}): {message}")


def gru_cell_step(params: Mapping[str, Tensor], h_prev: Tensor, x: Tensor) -> Tensor:
    """One GRU transition.

    z = σ(W_z[h,x] + b_z), r = σ(W_r[h,x] + b_r),
    h̃ = tanh(W_h[r⊙h, x] + b_h), h_next = (1 − z)⊙h_prev + z⊙h̃
    """
    missing = [name for name in GRU_PARAM_NAMES if name not in params]
    if missing:
        raise ConfigurationError(f"gru-cell: missing parameters {missing}")
    hidden = params["b_z"].shape[-1]
    if h_prev.shape[-1] != hidden or params["W_z"].shape[-1] != hidden + x.shape[-1]:
        raise ConfigurationError(
            f"gru-cell: hidden {h_prev.shape[-1]} / input {x.shape[-1]} "
            f"incompatible with gates of shape {tuple(params['W_z'].shape)}"
        )
    stacked = torch.cat([h_prev, x], dim=-1)
    z = torch.sigmoid(F.linear(stacked, params["W_z"], params["b_z"]))
    r = torch.sigmoid(F.linear(stacked, params["W_r"], params["b_r"]))
    candidate = torch.tanh(F.linear(torch.cat([r * h_prev, x], dim=-1), params["W_h"], params["b_h"]))
    return (1.0 - z) * h_prev + z * candidate


def _apply_layer(index: int, spec: LayerSpec, params: Mapping[str, Tensor], value: LayerInput) -> Tensor:
    kind = spec.kind
    if kind == LayerKind.GRU_CELL:
        _check(isinstance(value, tuple) and len(value) == 2, index, spec, "expects (h_prev, x)")
        h_prev, x = value
        _check(h_prev.shape[-1] == spec.out_width, index, spec,
               f"hidden width {h_prev.shape[-1]} != {spec.out_width}")
        _check(x.shape[-1] == spec.in_width, index, spec, f"input width {x.shape[-1]} != {spec.in_width}")
        return gru_cell_step(params, h_prev, x)

    _check(_width(value) == spec.in_width, index, spec,
           f"input width {_width(value)} != {spec.in_width}")
    if kind == LayerKind.CONCAT:
        return torch.cat(value, dim=-1) if isinstance(value, tuple) else value
    if kind == LayerKind.PRODUCT:
        _check(isinstance(value, tuple) and len(value) == 2, index, spec, "expects a pair of inputs")
        return value[0] * value[1]
    _check(isinstance(value, Tensor), index, spec, "expects a single tensor")
    if kind == LayerKind.AFFINE:
        weight, bias = params.get("weight"), params.get("bias")
        _check(weight is not None and bias is not None, index, spec, "missing weight/bias")
        _check(tuple(weight.shape) == (spec.out_width, spec.in_width) and bias.shape[-1] == spec.out_width,
               index, spec, f"weight shape {tuple(weight.shape)} does not match spec")
        return F.linear(value, weight, bias)
    return ACTIVATIONS[kind](value)


def mlp_apply(specs: Sequence[LayerSpec],
              params: Sequence[Mapping[str, Tensor]],
              inputs: LayerInput) -> Tuple[Tensor, Tape]:
    """Run ``inputs`` through the layer stack and return the output plus its tape"""
    if len(params) != len(specs):
        raise ConfigurationError(f"{len(specs)} layers but {len(params)} parameter sets")

    leaves: Dict[str, Tensor] = {}
    if torch.is_grad_enabled():
        parts = inputs if isinstance(inputs, tuple) else (inputs,)
        tracked = []
        for k, part in enumerate(parts):
            if part.is_leaf and not part.requires_grad:
                part = part.detach().requires_grad_(True)
            leaves["input" if len(parts) == 1 else f"input.{k}"] = part
            tracked.append(part)
        inputs = tuple(tracked) if isinstance(inputs, tuple) else tracked[0]
    for index, layer_params in enumerate(params):
        for name, tensor in layer_params.items():
            leaves[f"{index}.{name}"] = tensor

    value: LayerInput = inputs
    for index, (spec, layer_params) in enumerate(zip(specs, params)):
        value = _apply_layer(index, spec, layer_params, value)
    return value, Tape(output=value, leaves=leaves)


def mlp_specs(in_width: int, hidden_width: int, out_width: int,
              activation: LayerKind = LayerKind.TANH) -> List[LayerSpec]:
    """affine → activation → affine"""
    return [
        LayerSpec(LayerKind.AFFINE, in_width, hidden_width),
        LayerSpec(activation, hidden_width, hidden_width),
        LayerSpec(LayerKind.AFFINE, hidden_width, out_width),
    ]


class MLP(nn.Module):
    """Parameter container around ``mlp_apply``"""

    def __init__(self, specs: Sequence[LayerSpec], generator: Optional[torch.Generator] = None):
        super().__init__()
        self.specs = list(specs)
        self.layers = nn.ModuleList()
        for spec in self.specs:
            holder = nn.Module()
            for name, tensor in init_layer_params(spec, generator).items():
                holder.register_parameter(name, nn.Parameter(tensor))
            self.layers.append(holder)

    @property
    def in_width(self) -> int:
        return self.specs[0].in_width

    @property
    def out_width(self) -> int:
        return self.specs[-1].out_width

    def layer_params(self) -> List[Dict[str, Tensor]]:
        return [dict(layer.named_parameters()) for layer in self.layers]

    def forward(self, inputs: LayerInput) -> Tensor:
        value: LayerInput = inputs
        for index, (spec, layer) in enumerate(zip(self.specs, self.layers)):
            value = _apply_layer(index, spec, dict(layer.named_parameters()), value)
        return value

    def apply_with_tape(self, inputs: LayerInput) -> Tuple[Tensor, Tape]:
        return mlp_apply(self.specs, self.layer_params(), inputs)

    def zero_(self) -> "MLP":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


class GRUCell(nn.Module):
    """Gated recurrent unit with the (1 − z)·h + z·h̃ update convention"""

    def __init__(self, input_width: int, hidden_width: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = LayerSpec(LayerKind.GRU_CELL, input_width, hidden_width)
        for name, tensor in init_layer_params(self.spec, generator).items():
            self.register_parameter(name, nn.Parameter(tensor))

    def gate_params(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in GRU_PARAM_NAMES}

    def forward(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return gru_cell_step(self.gate_params(), h_prev, x)


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float) -> float:
    """|a − n| scaled by max(|a|, |n|, 1)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and central-difference gradients"""
    errors: Dict[str, float]
    tolerance: float
    step: float

    @property
    def worst(self) -> Tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def max_error(self) -> float:
        return self.worst[1]

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"parameter": list(self.errors), "max_relative_error": list(self.errors.values())}
        )


def _dense(grad: Optional[Tensor], like: Tensor) -> Tensor:
    if grad is None:
        return torch.zeros_like(like)
    return grad.to_dense() if grad.is_sparse else grad


def grad_check(function: Callable[[Dict[str, Tensor]], Tensor],
               params: Dict[str, Tensor],
               step: float = 1e-5,
               tol: float = 1e-4,
               analytic: Optional[Callable[[Dict[str, Tensor]], Dict[str, Tensor]]] = None) -> GradCheckReport:
    """Compare analytic gradients against (f(p+ε) − f(p−ε)) / 2ε entry by entry.

    ``params`` must be leaf tensors requiring grad; they are perturbed in place
    and restored bit-exactly. ``analytic`` overrides the autograd gradient.
    """
    if step <= 0 or tol <= 0:
        raise ConfigurationError("grad_check step and tolerance must be positive")

    names = list(params)
    value = function(params)
    if not torch.isfinite(value).all():
        raise GradCheckError("function value is not finite at the base point", parameter="<base>")
    if analytic is None:
        grads = torch.autograd.grad(value, [params[n] for n in names], allow_unused=True)
        gradients = {n: _dense(g, params[n]) for n, g in zip(names, grads)}
    else:
        gradients = {n: _dense(g, params[n]) for n, g in analytic(params).items()}

    errors: Dict[str, float] = {}
    with torch.no_grad():
        for name in names:
            flat = params[name].view(-1)
            expected = gradients.get(name, torch.zeros_like(params[name])).reshape(-1)
            worst = 0.0
            for k in range(flat.numel()):
                original = flat[k].item()
                flat[k] = original + step
                f_plus = float(function(params))
                flat[k] = original - step
                f_minus = float(function(params))
                flat[k] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise GradCheckError(f"non-finite function value at entry {k}", parameter=name)
                numeric = (f_plus - f_minus) / (2.0 * step)
                worst = max(worst, relative_error(expected[k].item(), numeric))
            errors[name] = worst
    return GradCheckReport(errors=errors, tolerance=tol, step=step)


# ----------------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------------

class OptimizerKind(Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass
class OptimizerSettings:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigurationError("learning rate and epsilon must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("moment decay rates must lie in [0, 1)")


@dataclass
class OptimizerState:
    """Snapshot of the moment accumulators, mirroring parameter shapes"""
    step_count: int
    first_moments: Dict[str, Tensor]
    second_moments: Dict[str, Tensor]
    settings: OptimizerSettings


def _pad_rows(tensor: Tensor, rows: int) -> Tensor:
    padded = torch.zeros((rows,) + tuple(tensor.shape[1:]), dtype=tensor.dtype)
    padded[: tensor.shape[0]] = tensor
    return padded


class StreamOptimizer:
    """
    First-order optimizer over dense network parameters and row-sparse entity tables.
    Adaptive-moment mode pairs torch Adam (dense) with SparseAdam (tables) so rows
    without gradient are left bitwise untouched; descent mode is plain SGD.
    """

    def __init__(self,
                 dense: Mapping[str, nn.Parameter],
                 sparse: Mapping[str, nn.Parameter],
                 settings: Optional[OptimizerSettings] = None):
        self.settings = settings or OptimizerSettings()
        self.dense = dict(dense)
        self.sparse = dict(sparse)
        self.step_count = 0
        self.performance_metrics = {
            'steps': 0,
            'skipped_updates': 0,
        }
        self._optimizers = self._build()

    def _build(self) -> List[torch.optim.Optimizer]:
        s = self.settings
        if s.kind == OptimizerKind.SGD:
            params = list(self.dense.values()) + list(self.sparse.values())
            return [torch.optim.SGD(params, lr=s.learning_rate)] if params else []
        optimizers: List[torch.optim.Optimizer] = []
        if self.dense:
            optimizers.append(torch.optim.Adam(
                list(self.dense.values()), lr=s.learning_rate, betas=(s.beta1, s.beta2), eps=s.epsilon
            ))
        if self.sparse:
            optimizers.append(torch.optim.SparseAdam(
                list(self.sparse.values()), lr=s.learning_rate, betas=(s.beta1, s.beta2), eps=s.epsilon
            ))
        return optimizers

    @property
    def parameters(self) -> Dict[str, nn.Parameter]:
        return {**self.dense, **self.sparse}

    def step(self, grads: Mapping[str, Tensor]) -> bool:
        """Move parameters against ``grads``; returns False when the update was skipped"""
        self.step_count += 1
        self.performance_metrics['steps'] += 1
        params = self.parameters

        for name, grad in grads.items():
            if name not in params:
                raise ConfigurationError(f"gradient for unknown parameter '{name}'")
            values = grad.coalesce().values() if grad.is_sparse else grad
            if not torch.isfinite(values).all():
                self.performance_metrics['skipped_updates'] += 1
                logger.warning("⚠️ Non-finite gradient for %s, update %d skipped", name, self.step_count)
                return False

        for name, param in params.items():
            grad = grads.get(name)
            if grad is None and name in self.dense:
                grad = torch.zeros_like(param)
            if grad is not None and not grad.is_sparse and name in self.sparse \
                    and self.settings.kind == OptimizerKind.ADAM:
                grad = grad.to_sparse(1)
            param.grad = grad
        for optimizer in self._optimizers:
            optimizer.step()
        for param in params.values():
            param.grad = None
        return True

    def replace_parameter(self, name: str, new_param: nn.Parameter):
        """Swap a grown table in, carrying its optimizer moments over (zero-padded)"""
        old = self.parameters[name]
        target = self.sparse if name in self.sparse else self.dense
        target[name] = new_param
        for optimizer in self._optimizers:
            for group in optimizer.param_groups:
                for i, param in enumerate(group["params"]):
                    if param is old:
                        group["params"][i] = new_param
            state = optimizer.state.pop(old, None)
            if state:
                optimizer.state[new_param] = {
                    key: _pad_rows(value, new_param.shape[0])
                    if torch.is_tensor(value) and value.dim() > 0 and value.shape == old.shape else value
                    for key, value in state.items()
                }

    def sync(self, params: Mapping[str, nn.Parameter]):
        """Adopt parameters that were reallocated since the last call"""
        current = self.parameters
        for name, param in params.items():
            if current[name] is not param:
                self.replace_parameter(name, param)

    def snapshot(self) -> OptimizerState:
        first, second = {}, {}
        for name, param in self.parameters.items():
            for optimizer in self._optimizers:
                state = optimizer.state.get(param)
                if state and "exp_avg" in state:
                    first[name] = state["exp_avg"].clone()
                    second[name] = state["exp_avg_sq"].clone()
        return OptimizerState(self.step_count, first, second, self.settings)

    def state_dict(self) -> Dict:
        return {
            "step_count": self.step_count,
            "skipped_updates": self.performance_metrics['skipped_updates'],
            "names": list(self.parameters),
            "optimizers": [optimizer.state_dict() for optimizer in self._optimizers],
        }

    def load_state_dict(self, state: Dict):
        if state["names"] != list(self.parameters):
            raise ConfigurationError("optimizer state does not match the parameter layout")
        self.step_count = int(state["step_count"])
        self.performance_metrics['steps'] = self.step_count
        self.performance_metrics['skipped_updates'] = int(state["skipped_updates"])
        for optimizer, optimizer_state in zip(self._optimizers, state["optimizers"]):
            optimizer.load_state_dict(optimizer_state)


def derive_seed(root: int, *keys: int) -> int:
    """Child seed of the root → per-step → per-iteration hierarchy"""
    return int(np.random.SeedSequence([int(root), *[int(k) for k in keys]]).generate_state(1)[0])


def seeded_generator(root: int, *keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, *keys))
