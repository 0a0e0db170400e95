"""Weight-Filtering layers: per-class sigmoid gates over frozen conv/projection weights."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .layers import Conv2d, Linear, Module

CONV = "conv-out-channel"
PROJECTION = "projection-out-feature"

ALPHA_INIT = 3.0
CLIP = 3.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class AlphaMatrix:
    """Raw (pre-sigmoid) gate parameters, one row per class."""

    raw: Parameter
    granularity: str
    clip_lo: float = -CLIP
    clip_hi: float = CLIP

    @property
    def n_classes(self) -> int:
        return self.raw.shape[0]

    @property
    def k(self) -> int:
        return self.raw.shape[1]

    def _check_row(self, row: int) -> None:
        if not 0 <= row < self.n_classes:
            raise IndexError(f"selector row {row} outside [0, {self.n_classes})")

    def mask(self, row: int) -> np.ndarray:
        self._check_row(row)
        return _sigmoid(self.raw.data[row])

    def mask_tensor(self, row: int) -> Tensor:
        self._check_row(row)
        return ad.sigmoid(ad.getitem(self.raw, row))

    def clip(self) -> None:
        np.clip(self.raw.data, self.clip_lo, self.clip_hi, out=self.raw.data)


def effective_mask(a: AlphaMatrix, row: int) -> np.ndarray:
    """sigmoid(raw[row]); pure."""
    return a.mask(row)


class WFLayer(Module):
    """Wraps a frozen Conv2d or Linear with class-indexed gates on its outputs.

    Conv gates scale whole output kernels (Cin x kH x kW slabs); projection
    gates scale weight columns. Biases get their own gate matrix.
    """

    def __init__(self, inner: Conv2d | Linear, n_classes: int, init: float = ALPHA_INIT, clip: float = CLIP):
        if isinstance(inner, Conv2d):
            self.granularity = CONV
        elif isinstance(inner, Linear):
            self.granularity = PROJECTION
        else:
            raise TypeError(f"cannot wrap layer of kind {type(inner).__name__}")
        self.inner = inner
        k = inner.out_features
        kb = 0 if inner.bias is None else k
        self.gate_weights = AlphaMatrix(Parameter(np.full((n_classes, k), init)), self.granularity, -clip, clip)
        self.gate_biases = AlphaMatrix(Parameter(np.full((n_classes, kb), init)), self.granularity, -clip, clip)
        self.masking_enabled = True

    # AlphaMatrix is a dataclass, not a Module; expose its raw tensors for checkpoints
    def named_parameters(self, prefix: str = ""):
        yield from self.inner.named_parameters(prefix + "inner.")
        yield prefix + "gate_weights", self.gate_weights.raw
        yield prefix + "gate_biases", self.gate_biases.raw

    @property
    def gates(self) -> tuple[AlphaMatrix, AlphaMatrix]:
        return self.gate_weights, self.gate_biases

    def _masked(self, x: Tensor, row: int) -> Tensor:
        inner = self.inner
        mw = self.gate_weights.mask_tensor(row)
        if self.granularity == CONV:
            w = ad.scale_axis(inner.weight, mw, axis=0)
            b = ad.mul(inner.bias, self.gate_biases.mask_tensor(row))
            return ad.conv2d(x, w, b, stride=inner.stride, pad=inner.pad)
        w = ad.scale_axis(inner.weight, mw, axis=1)
        b = None if inner.bias is None else ad.mul(inner.bias, self.gate_biases.mask_tensor(row))
        return ad.linear(x, w, b)

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        if not self.masking_enabled or rows is None:
            return self.inner(x)
        if np.isscalar(rows) or np.ndim(rows) == 0:
            return self._masked(x, int(rows))
        rows = np.asarray(rows, dtype=np.intp)
        if rows.shape != (x.shape[0],):
            raise ValueError(f"got {rows.shape[0]} selector rows for a batch of {x.shape[0]}")
        uniq = np.unique(rows)
        if uniq.size == 1:
            return self._masked(x, int(uniq[0]))
        outs, order = [], []
        for r in uniq:
            idx = np.flatnonzero(rows == r)
            outs.append(self._masked(ad.take(x, idx), int(r)))
            order.append(idx)
        inv = np.argsort(np.concatenate(order), kind="stable")
        return ad.take(ad.concat(outs, axis=0), inv)


def wf_conv_forward(layer: WFLayer, x: Tensor, row: int) -> Tensor:
    if layer.granularity != CONV:
        raise TypeError(f"wf_conv_forward needs a conv-granularity layer, got {layer.granularity}")
    return layer(x, row)


def wf_projection_forward(layer: WFLayer, x: Tensor, row: int) -> Tensor:
    if layer.granularity != PROJECTION:
        raise TypeError(f"wf_projection_forward needs a projection-granularity layer, got {layer.granularity}")
    return layer(x, row)


class WFModel:
    """A base classifier with some inner layers replaced by WFLayers.

    ``forward(x, rows)`` threads the same selector through every WF layer;
    ``rows`` is one class index or one index per sample.
    """

    def __init__(self, net: Module, n_classes: int, wf_names: Sequence[str]):
        self.net = net
        self.n_classes = n_classes
        self.wf_names = list(wf_names)

    @property
    def layers(self) -> list[tuple[str, WFLayer]]:
        return [(n, self.net.get_submodule(n)) for n in self.wf_names]

    @property
    def arch(self) -> str:
        return self.net.arch

    def forward(self, x: Tensor, rows=None) -> Tensor:
        if rows is not None:
            r = np.asarray(rows)
            if r.size and (r.min() < 0 or r.max() >= self.n_classes):
                raise IndexError(f"selector rows must lie in [0, {self.n_classes})")
        return self.net(x, rows)

    __call__ = forward

    @property
    def masking_enabled(self) -> bool:
        return all(l.masking_enabled for _, l in self.layers)

    @masking_enabled.setter
    def masking_enabled(self, flag: bool) -> None:
        for _, l in self.layers:
            l.masking_enabled = flag

    def alphas(self) -> list[AlphaMatrix]:
        out = []
        for _, l in self.layers:
            out.extend(l.gates)
        return out

    def alpha_parameters(self) -> list[Parameter]:
        return [a.raw for a in self.alphas()]

    def base_parameters(self) -> list[Parameter]:
        alpha_ids = {id(p) for p in self.alpha_parameters()}
        return [p for p in self.net.parameters() if id(p) not in alpha_ids]

    def named_parameters(self):
        return self.net.named_parameters()

    def clip_alphas(self) -> None:
        clip_alphas(self)

    def get_alpha_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.alpha_parameters()]

    def set_alpha_state(self, state: Iterable[np.ndarray]) -> None:
        for p, v in zip(self.alpha_parameters(), state):
            p.data[...] = v

    def copy(self) -> "WFModel":
        return copy.deepcopy(self)


def clip_alphas(model: WFModel) -> None:
    for a in model.alphas():
        a.clip()


def wf_wrap(base: Module, n_classes: int | None = None, layers: Sequence[str] | None = None,
            init: float = ALPHA_INIT, clip: float = CLIP) -> WFModel:
    """Copy ``base``, freeze it, and replace the selected layers with WFLayers.

    ``layers`` defaults to the architecture's maskable layers (all convs for
    a CNN, every attention QKV projection for a ViT). The classification head
    is never wrappable.
    """
    n_classes = n_classes if n_classes is not None else base.n_classes
    names = list(layers) if layers is not None else list(base.maskable_layers())
    allowed = set(base.maskable_layers())
    net = copy.deepcopy(base)
    for p in net.parameters():
        p.trainable = False
        p.zero_grad()
    for name in names:
        if name not in allowed:
            kind = type(net.get_submodule(name)).__name__ if _has(net, name) else "missing"
            raise ValueError(f"layer {name!r} ({kind}) is not a maskable conv or QKV projection")
        net.set_submodule(name, WFLayer(net.get_submodule(name), n_classes, init=init, clip=clip))
    return WFModel(net, n_classes, names)


def _has(net: Module, name: str) -> bool:
    try:
        net.get_submodule(name)
        return True
    except (AttributeError, KeyError, IndexError, ValueError):
        return False
