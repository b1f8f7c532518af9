"""Parameter containers and the two learned layers the networks are built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops
from .errors import ValidationError
from .rng import SplitMix64

GROUPS = ("fusion", "segmentation")


class Parameter(Tensor):
    """Trainable leaf tensor. ``group`` selects the optimizer learning rate."""

    __slots__ = ("group",)

    def __init__(self, data, group: str = "fusion", name: str | None = None):
        if group not in GROUPS:
            raise ValidationError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.group = group


class Module:
    """Attribute-walking parameter registry in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValidationError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if p.data.shape != tuple(state[name].shape):
                raise ValidationError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)  # relu gain
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, *, rng: SplitMix64,
                 group: str = "fusion", zero_init: bool = False, bias: bool = True, dtype=np.float64):
        self.stride = stride
        self.padding = kernel // 2
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape, dtype) if zero_init else kaiming_uniform(rng, shape, cin * kernel * kernel, dtype)
        self.weight = Parameter(w, group)
        self.bias = Parameter(np.zeros(cout, dtype), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, *, rng: SplitMix64, group: str = "fusion", dtype=np.float64):
        bound = 1.0 / math.sqrt(din)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(din, dout)).astype(dtype), group)
        self.bias = Parameter(np.zeros(dout, dtype), group)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias
