"""Parameterized layers and a minimal module container."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor, parameter


class Module:
    """Holds named parameters and child modules in declaration order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        p = parameter(np.asarray(data), name)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for k, p in self._params.items():
            out[prefix + k] = p
        for k, m in self._children.items():
            out.update(m.named_parameters(prefix + k + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of every parameter array, so snapshots survive later updates."""
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state: dict, strict: bool = True):
        params = self.named_parameters()
        missing = [k for k in params if k not in state]
        if strict and (missing or set(state) - set(params)):
            raise KeyError(f"state mismatch: missing {missing}, unexpected {sorted(set(state) - set(params))}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"parameter {k}: shape {arr.shape} does not match {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _gauss(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, std: float = 0.01,
                 stride: int = 1, pad: int | None = None):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = self.add_param("weight", _gauss(rng, (k, k, cin, cout), std))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, std: float = 0.01,
                 stride: int = 1, pad: int | None = None):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = self.add_param("weight", _gauss(rng, (k, k, k, cin, cout), std))
        self.bias = self.add_param("bias", np.zeros(cout, dtype=DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None, std: float = 0.01):
        super().__init__()
        w = _gauss(rng, (din, dout), std) if rng is not None else np.zeros((din, dout), DEFAULT_DTYPE)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(dout, dtype=DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
