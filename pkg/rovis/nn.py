"""Module containers and the small layer zoo the segmenter is built from."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from .errors import FormatError, ShapeError
from .rng import Rng
from .tensor import Parameter, Tensor, broadcast_to, conv2d, gelu, layernorm, matmul


class Module:
    """Base class. Parameters are discovered from instance attributes in
    assignment order, recursing into sub-modules and lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise FormatError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"load_state_dict: {name} expects {p.shape}, got {value.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform(rng: Rng, bound: float, shape) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, shape))


class Linear(Module):
    """y = x @ W + b for x of shape (N, in)."""

    def __init__(self, in_features: int, out_features: int, rng: Rng):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _uniform(rng, bound, (in_features, out_features))
        self.bias = _uniform(rng, bound, (out_features,))

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + broadcast_to(self.bias, y.shape)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: Rng, stride: int = 1, padding: int = 0):
        bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
        self.weight = _uniform(rng, bound, (out_channels, in_channels, kernel_size, kernel_size))
        self.bias = _uniform(rng, bound, (out_channels,))
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.weight, self.bias, self._eps)


class MLP(Module):
    """Stack of Linear layers with GELU between them."""

    def __init__(self, in_features: int, hidden: int, out_features: int, num_layers: int, rng: Rng):
        dims = [in_features] + [hidden] * (num_layers - 1) + [out_features]
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(num_layers)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
