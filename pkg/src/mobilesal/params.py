"""Named parameter storage and the small layer bundles built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import Tensor, default_dtype


class ParamStore:
    """Ordered name -> Tensor map.

    Learnable tensors have ``requires_grad=True``; BN running statistics are
    stored alongside as non-trainable buffers so checkpoints capture them.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=trainable, name=name)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def parameters(self, prefix: str | None = None) -> list[Tensor]:
        return [t for n, t in self._tensors.items()
                if self._trainable[n] and (prefix is None or n.startswith(prefix))]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> "ParamStore":
        """Cast every tensor in place (used to enter float64 grad-check mode)."""
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def remove(self, prefix: str) -> None:
        for name in [n for n in self._tensors if n.startswith(prefix)]:
            del self._tensors[name]
            del self._trainable[name]


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ConvParams:
    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, mode)


@dataclass
class FCParams:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


def make_conv(store: ParamStore, name: str, spec: ConvSpec, rng: np.random.Generator) -> ConvParams:
    fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
    w = store.add(f"{name}.weight", he_normal(rng, spec.weight_shape, fan_in))
    b = store.add(f"{name}.bias", np.zeros(spec.out_channels)) if spec.has_bias else None
    return ConvParams(spec, w, b)


def make_bn(store: ParamStore, name: str, channels: int) -> BNParams:
    return BNParams(
        store.add(f"{name}.gamma", np.ones(channels)),
        store.add(f"{name}.beta", np.zeros(channels)),
        store.add(f"{name}.running_mean", np.zeros(channels), trainable=False),
        store.add(f"{name}.running_var", np.ones(channels), trainable=False),
    )


def make_fc(store: ParamStore, name: str, c_in: int, c_out: int, rng: np.random.Generator) -> FCParams:
    return FCParams(store.add(f"{name}.weight", he_normal(rng, (c_out, c_in), c_in)),
                    store.add(f"{name}.bias", np.zeros(c_out)))


def is_bn_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")
