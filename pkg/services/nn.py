"""Parameter containers and the layers the codec is assembled from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from services.errors import FormatError
from services.nn_ops import conv1d, conv2d, conv_transpose1d, embedding_lookup, layer_norm
from services.tensor import Tensor, get_default_dtype, matmul


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=get_default_dtype(), name=name)


class Module:
    """Base class: parameters and submodules are discovered from attributes.

    Lists of modules are supported; discovery order follows attribute
    assignment order, so parameter names are stable across runs.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise FormatError(f"Checkpoint is missing parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise FormatError(f"Parameter {name} has shape {value.shape} in checkpoint, expected {param.shape}")
            param.data = value.astype(param.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel_size
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, output_padding: int = 0):
        fan_in = in_channels * kernel_size // max(stride, 1)
        self.weight = Parameter(_uniform(rng, (in_channels, out_channels, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.standard_normal((num_embeddings, dim)))

    def forward(self, ids) -> Tensor:
        return embedding_lookup(self.table, ids)
