"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients. Calling
:func:`backward` on a scalar linearizes the recorded graph into a
:class:`Tape` and replays it in reverse.

Broadcasting is deliberately absent: elementwise ops require equal shapes,
and the only implicit expansion is a bias added over leading (batch) axes.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_inputs", "_backward", "op")

    def __init__(self, data, *, requires_grad: bool = False, _inputs=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._inputs: tuple[Tensor, ...] = tuple(_inputs)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A leaf tensor with a gradient accumulator.

    ``trainable=False`` freezes it: no op records it, so backward never
    touches ``grad`` and optimizers skip it.
    """

    __slots__ = ("grad", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _inputs=inputs, _backward=backward, op=op)
    return Tensor(data, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# Tape


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Tape:
    """Topologically ordered view of the graph below a loss node.

    Node ids are positions in ``nodes``; every entry's inputs have smaller
    ids than its output. The last node is the loss.
    """

    nodes: list[Tensor] = field(default_factory=list)
    entries: list[TapeEntry] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
        ids = {id(n): i for i, n in enumerate(order)}
        entries = [
            TapeEntry(n.op, tuple(ids[id(i)] for i in n._inputs if id(i) in ids), ids[id(n)])
            for n in order
            if n._backward is not None
        ]
        return cls(order, entries)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(value) into every trainable Parameter below ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([loss], [])
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {len(tape.nodes) - 1: np.ones_like(loss.data)}
    ids = {id(n): i for i, n in enumerate(tape.nodes)}
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        g = grads.pop(i, None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for inp, gi in zip(node._inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            j = ids[id(inp)]
            grads[j] = grads[j] + gi if j in grads else gi
    return tape


# ---------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record(a.data + c, (a,), lambda g: (g,), "add_scalar")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b matches the trailing axes of x (bias over batch)."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def scale_axis(w: Tensor, m: Tensor, axis: int) -> Tensor:
    """Scale every slice of ``w`` along ``axis`` by the matching entry of ``m``."""
    axis = axis % w.ndim
    if m.ndim != 1 or m.shape[0] != w.shape[axis]:
        raise ShapeError(f"scale_axis: scale of shape {m.shape} does not match axis {axis} of {w.shape}")
    view = [1] * w.ndim
    view[axis] = -1
    mv = m.data.reshape(view)
    others = tuple(i for i in range(w.ndim) if i != axis)
    wd = w.data

    def bw(g):
        return g * mv, (g * wd).sum(axis=others)

    return _record(wd * mv, (w, m), bw, "scale_axis")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
    return _record(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),), "gelu")


# ---------------------------------------------------------------------------
# Reductions and shape ops


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g),), "sum")
    axis = axis % x.ndim
    return _record(x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul_scalar(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), bw, "getitem")


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape
    unique = np.unique(idx).size == idx.size

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        if unique:
            moved[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def expand_batch(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    return _record(
        np.broadcast_to(x.data, (n, *x.shape)).copy(), (x,), lambda g: (g.sum(axis=0),), "expand_batch"
    )


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading axes: [..., n, k] @ [..., k, m]."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
        "matmul",
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis of x; any number of leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} do not match weight rows {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output features {w.shape[1]}")
    xd, wd = x.data, w.data
    fin, fout = wd.shape
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, fout)
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, fin).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bw, "linear")


# ---------------------------------------------------------------------------
# Convolution and pooling


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with k[Cout,Cin,kH,kW], plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [B,Cin,H,W], got {x.shape}")
    if k.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be [Cout,Cin,kH,kW], got {k.shape}")
    nb, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: Cin mismatch, input has {cin} channels, kernels expect {kcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias length {b.shape} does not match Cout={cout}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad:
        raise ShapeError(f"conv2d: kH={kh} exceeds padded height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kW={kw} exceeds padded width {w + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows are (b, ho, wo), columns are (cin, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(nb * ho * wo, cin * kh * kw)
    kmat = k.data.reshape(cout, -1)
    out = cols @ kmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(nb, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(nb, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk, gb

    inputs = (x, k) if b is None else (x, k, b)
    return _record(out, inputs, bw, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    nb, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(nb, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, ho, wo, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(nb, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h, w)
        return (gx,)

    return _record(out, (x,), bw, "maxpool2d")


# ---------------------------------------------------------------------------
# Normalization, softmax, losses


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def _softmax(d: np.ndarray) -> np.ndarray:
    z = d - d.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = _softmax(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B,C], got {logits.shape}")
    nb, nc = logits.shape
    if labels.shape != (nb,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {nb}")
    if nb and (labels.min() < 0 or labels.max() >= nc):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {nc}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(nb)
    loss = (logz - z[rows, labels]).mean()

    def bw(g):
        p = np.exp(z - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / nb),)

    return _record(np.array(loss), (logits,), bw, "softmax_cross_entropy")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over [..., T, d] inputs."""
    d = q.shape[-1]
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = mul_scalar(matmul(q, transpose(k, axes)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-6,
    n_samples: int | None = 20,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar output from the current parameter values.
    At most ``n_samples`` coordinates per parameter are probed (all when
    None). Relative error is |a - n| / max(|a|, |n|, floor), where the floor
    is 1e-3 of the parameter's largest analytic gradient (at least 1e-8):
    central differences carry ~1e-10 of round-off, which would otherwise
    dominate coordinates whose true gradient is many orders below the rest.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad.copy()
            floor = max(1e-8, 1e-3 * float(np.abs(analytic).max(initial=0.0)))
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if n_samples is not None and flat.size > n_samples:
                coords = rng.choice(flat.size, size=n_samples, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            p.zero_grad()
    return worst
