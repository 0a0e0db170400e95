"""Small module system: parameter containers with deterministic ordering."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Base for anything holding Parameters or sub-Modules.

    Attributes are walked in assignment order, which fixes the parameter
    order used by optimizers and checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def get_submodule(self, path: str) -> "Module":
        mod = self
        for part in path.split("."):
            mod = mod[int(part)] if isinstance(mod, (list, tuple)) else getattr(mod, part)
        if not isinstance(mod, Module):
            raise KeyError(f"{path!r} is not a module")
        return mod

    def set_submodule(self, path: str, new: "Module") -> None:
        *head, last = path.split(".")
        parent = self.get_submodule(".".join(head)) if head else self
        if isinstance(parent, ModuleList):
            parent[int(last)] = new
        else:
            setattr(parent, last, new)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                yield full, val
                yield from val.named_modules(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{full}.{i}", item
                        yield from item.named_modules(f"{full}.{i}.")


class ModuleList(Module, list):
    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_modules(self, prefix: str = ""):
        for i, m in enumerate(self):
            yield f"{prefix}{i}", m
            yield from m.named_modules(f"{prefix}{i}.")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, pad: int = 0, stride: int = 1, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)))
        self.bias = Parameter(np.zeros(cout))
        self.pad = pad
        self.stride = stride

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = Parameter(rng.uniform(-bound, bound, (fin, fout)))
        self.bias = Parameter(rng.uniform(-bound, bound, fout)) if bias else None

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)
