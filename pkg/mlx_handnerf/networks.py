"""
Multilayer perceptrons, named parameter stores, tape-based gradients and the
Adam update, all on top of MLX.

Training differentiates whole models with ``nn.value_and_grad``. The
explicit-tape pair ``mlp_forward`` / ``backward`` is the public interface for
callers that drive a single MLP over a ``ParameterStore`` themselves and need
vector-Jacobian products with accumulation; the gradient tests use it as an
oracle. ``ParameterStore`` also guards checkpoint loading, where it checks
names, shapes and finiteness before weights reach a model.
"""
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import mlx.core as mx
import mlx.nn as nn
import mlx.optimizers as optim
import numpy as np
from loguru import logger
from mlx.utils import tree_flatten, tree_map, tree_unflatten

from .common.config import OptimizerConfig
from .common.errors import NonFiniteError, ShapeMismatchError

ACTIVATIONS: Dict[str, Callable[[mx.array], mx.array]] = {
    "identity": lambda x: x,
    "relu": nn.relu,
    "silu": nn.silu,
    "softplus": nn.softplus,
    "sigmoid": mx.sigmoid,
}


@dataclass(frozen=True)
class MlpSpec:
    """
    Layer layout of a fully connected network.

    ``widths`` lists the output size of every layer, the last entry being the
    network output. A layer index in ``skips`` receives the original input
    concatenated to its incoming activations.
    """

    input_dim: int
    widths: Tuple[int, ...]
    activation: str = "silu"
    output_activation: str = "identity"
    skips: Tuple[int, ...] = ()
    init: str = "fan_in"

    def __post_init__(self):
        if self.input_dim < 1 or not self.widths or min(self.widths) < 1:
            raise ShapeMismatchError(f"invalid widths in {self}")
        if any(s < 1 or s >= len(self.widths) for s in self.skips):
            raise ShapeMismatchError(
                f"skip indices {self.skips} must lie in [1, {len(self.widths)})"
            )
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        if self.init not in ("fan_in", "zero_last"):
            raise ValueError(f"unknown init scheme {self.init!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def layer_input_dims(self) -> List[int]:
        dims = []
        for i in range(self.n_layers):
            d = self.input_dim if i == 0 else self.widths[i - 1]
            if i in self.skips:
                d += self.input_dim
            dims.append(d)
        return dims

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for i, (d_in, d_out) in enumerate(zip(self.layer_input_dims(), self.widths)):
            shapes[f"layers.{i}.weight"] = (d_out, d_in)
            shapes[f"layers.{i}.bias"] = (d_out,)
        return shapes


def init_parameters(
    spec: MlpSpec, rng: np.random.Generator, dtype: mx.Dtype = mx.float32
) -> Dict[str, mx.array]:
    """He-normal weights with zero biases; ``zero_last`` zeroes the output layer."""
    params = {}
    last = spec.n_layers - 1
    for name, shape in spec.parameter_shapes().items():
        if name.endswith("bias") or (spec.init == "zero_last" and name.startswith(f"layers.{last}.")):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
        params[name] = mx.array(value, dtype=dtype)
    return params


def apply_mlp(
    spec: MlpSpec, layers: Sequence[Mapping[str, mx.array]], x: mx.array
) -> Tuple[mx.array, mx.array]:
    """Functional forward pass; returns (output, last hidden activation)."""
    h = x
    hidden = x
    act = ACTIVATIONS[spec.activation]
    for i, layer in enumerate(layers):
        if i in spec.skips:
            h = mx.concatenate([h, x], axis=-1)
        h = h @ layer["weight"].T + layer["bias"]
        if i < spec.n_layers - 1:
            h = act(h)
            hidden = h
    return ACTIVATIONS[spec.output_activation](h), hidden


class Mlp(nn.Module):
    def __init__(
        self,
        spec: MlpSpec,
        rng: Optional[np.random.Generator] = None,
        dtype: mx.Dtype = mx.float32,
    ):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        params = init_parameters(spec, rng, dtype)
        self.layers = []
        for i, (d_in, d_out) in enumerate(zip(spec.layer_input_dims(), spec.widths)):
            layer = nn.Linear(d_in, d_out)
            layer.weight = params[f"layers.{i}.weight"]
            layer.bias = params[f"layers.{i}.bias"]
            self.layers.append(layer)

    def __call__(self, x: mx.array, return_hidden: bool = False):
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeMismatchError(
                f"expected input width {self.spec.input_dim}, got {x.shape[-1]}"
            )
        out, hidden = apply_mlp(self.spec, self.layers, x)
        return (out, hidden) if return_hidden else out


class ParameterStore(nn.Module):
    """
    Named dense arrays with shapes fixed at construction.

    The store is an ``nn.Module`` so MLX optimizers and ``nn.value_and_grad``
    operate on it directly.
    """

    def __init__(self, arrays: Mapping[str, Union[mx.array, np.ndarray]], dtype=None):
        super().__init__()
        shapes = {}
        for name, value in arrays.items():
            if isinstance(value, mx.array):
                value = value if dtype is None else value.astype(dtype)
            else:
                value = mx.array(np.asarray(value), dtype=dtype or mx.float32)
            self[name] = value
            shapes[name] = tuple(value.shape)
        self.shapes = MappingProxyType(shapes)
        self.check_finite()

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        return cls(dict(tree_flatten(module.parameters())))

    def names(self) -> List[str]:
        return list(self.shapes)

    def arrays(self) -> Dict[str, mx.array]:
        return {name: self[name] for name in self.shapes}

    def assign(self, arrays: Mapping[str, mx.array]) -> None:
        for name, value in arrays.items():
            if name not in self.shapes:
                raise ShapeMismatchError(f"unknown parameter {name!r}")
            if tuple(value.shape) != self.shapes[name]:
                raise ShapeMismatchError(
                    f"{name}: shape {tuple(value.shape)} != {self.shapes[name]}"
                )
        self.update(dict(arrays))
        self.check_finite()

    def check_finite(self) -> None:
        bad = find_non_finite(self.arrays())
        if bad:
            raise NonFiniteError("parameter store holds non-finite values", bad)

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {name: np.array(value) for name, value in self.arrays().items()}

    def layers(self, spec: MlpSpec) -> List[Dict[str, mx.array]]:
        """View the store as the per-layer dictionaries ``apply_mlp`` consumes."""
        expected = spec.parameter_shapes()
        if dict(self.shapes) != expected:
            raise ShapeMismatchError("parameter store does not match the MLP spec")
        return [
            {"weight": self[f"layers.{i}.weight"], "bias": self[f"layers.{i}.bias"]}
            for i in range(spec.n_layers)
        ]


@dataclass
class Tape:
    """What a forward pass recorded: enough to replay it under ``mx.vjp``."""

    spec: MlpSpec
    names: Tuple[str, ...]
    primals: List[mx.array]
    output: mx.array


@dataclass
class GradientAccumulator:
    grads: Dict[str, mx.array] = field(default_factory=dict)
    input_grad: Optional[mx.array] = None

    def add(self, name: str, value: mx.array) -> None:
        prev = self.grads.get(name)
        self.grads[name] = value if prev is None else prev + value

    def tree(self):
        return tree_unflatten(list(self.grads.items()))


def mlp_forward(
    spec: MlpSpec, params: ParameterStore, x: mx.array
) -> Tuple[mx.array, Tape]:
    if x.shape[-1] != spec.input_dim:
        raise ShapeMismatchError(
            f"expected input width {spec.input_dim}, got {x.shape[-1]}"
        )
    layers = params.layers(spec)
    out, _ = apply_mlp(spec, layers, x)
    names = tuple(spec.parameter_shapes())
    primals = [params[n] for n in names] + [x]
    return out, Tape(spec, names, primals, out)


def backward(
    tape: Tape,
    upstream: mx.array,
    accumulator: Optional[GradientAccumulator] = None,
) -> GradientAccumulator:
    """Accumulate d(upstream · output)/d(params) and d/d(input) into ``accumulator``."""
    if tuple(upstream.shape) != tuple(tape.output.shape):
        raise ShapeMismatchError(
            f"upstream shape {tuple(upstream.shape)} != output {tuple(tape.output.shape)}"
        )
    if len(tape.primals) != len(tape.names) + 1:
        raise ShapeMismatchError("tape does not match its parameter list")
    accumulator = accumulator if accumulator is not None else GradientAccumulator()
    n = tape.spec.n_layers

    def replay(*arrays):
        layers = [{"weight": arrays[2 * i], "bias": arrays[2 * i + 1]} for i in range(n)]
        return apply_mlp(tape.spec, layers, arrays[-1])[0]

    _, vjps = mx.vjp(replay, tape.primals, [upstream])
    for name, grad in zip(tape.names, vjps[:-1]):
        accumulator.add(name, grad)
    g_in = vjps[-1]
    accumulator.input_grad = (
        g_in if accumulator.input_grad is None else accumulator.input_grad + g_in
    )
    return accumulator


def cast_module(module: nn.Module, dtype: mx.Dtype) -> nn.Module:
    module.update(tree_map(lambda p: p.astype(dtype), module.parameters()))
    return module


def find_non_finite(tree) -> Dict[str, int]:
    """Map of parameter name to the count of NaN/inf entries."""
    bad = {}
    for name, value in tree_flatten(tree):
        if not isinstance(value, mx.array):
            continue
        count = int(np.count_nonzero(~np.isfinite(np.array(value))))
        if count:
            bad[name] = count
    return bad


def make_optimizer(config: OptimizerConfig, total_steps: int) -> optim.Adam:
    """Adam with exponential decay from ``learning_rate`` to ``final_learning_rate``."""
    lr = config.learning_rate
    if total_steps > 0 and lr > 0 and config.final_learning_rate > 0:
        decay = (config.final_learning_rate / lr) ** (1.0 / total_steps)
        schedule = optim.exponential_decay(lr, decay)
    else:
        schedule = lr
    return optim.Adam(learning_rate=schedule, betas=list(config.betas), eps=config.eps)


def optimizer_step(target: nn.Module, grads, optimizer: optim.Optimizer) -> nn.Module:
    """
    Apply one Adam update to ``target``.

    Gradients with NaN/inf entries reject the step and leave parameters and
    optimizer state untouched.
    """
    bad = find_non_finite(grads)
    if bad:
        logger.error(f"Rejecting optimizer step, non-finite gradients in {sorted(bad)}")
        raise NonFiniteError("non-finite gradient entries", bad)
    optimizer.update(target, grads)
    return target
