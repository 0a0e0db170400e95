"""Finite-difference checks over every differentiable op kind and through WF gates."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, grad_check

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    op: str
    max_rel_error: float
    passed: bool
    seconds: float


def _proj(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    # random projection to a scalar so every output element carries gradient
    w = Tensor(rng.normal(size=out.shape))
    return lambda t: ad.sum(ad.mul(t, w))


def _case(fn, *params):
    """Wrap ``fn(*params) -> Tensor`` into a scalar objective."""
    rng = np.random.default_rng(len(params))
    with ad.no_grad():
        proj = _proj(rng, fn(*params))
    return (lambda: proj(fn(*params))), list(params)


def _p(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return Parameter(x)


def _wf_case(kind: str, rng):
    from .layers import Conv2d, Linear
    from .wf import WFLayer

    if kind == "conv":
        layer = WFLayer(Conv2d(2, 3, 3, pad=1, rng=rng), 3)
        x = Tensor(rng.normal(size=(4, 2, 5, 5)))
    else:
        layer = WFLayer(Linear(4, 6, rng=rng), 3)
        x = Tensor(rng.normal(size=(4, 3, 4)))
    for g in layer.gates:
        g.raw.data[:] = rng.uniform(-3, 3, g.raw.shape)
    rows = np.array([0, 2, 2, 1])
    return _case(lambda *_: layer(x, rows), *(g.raw for g in layer.gates))


def cases(seed: int = 0) -> dict[str, Callable[[], tuple]]:
    rng = np.random.default_rng(seed)
    labels = np.array([0, 2, 1, 2])
    return {
        "add": lambda: _case(ad.add, _p(rng, 3, 4), _p(rng, 3, 4)),
        "sub": lambda: _case(ad.sub, _p(rng, 3, 4), _p(rng, 3, 4)),
        "mul": lambda: _case(ad.mul, _p(rng, 3, 4), _p(rng, 3, 4)),
        "mul_scalar": lambda: _case(lambda a: ad.mul_scalar(a, -1.7), _p(rng, 5)),
        "add_scalar": lambda: _case(lambda a: ad.add_scalar(a, 0.3), _p(rng, 5)),
        "reciprocal": lambda: _case(ad.reciprocal, _p(rng, 4, lo=0.5)),
        "add_bias": lambda: _case(ad.add_bias, _p(rng, 3, 2, 4), _p(rng, 4)),
        "scale_axis": lambda: _case(lambda w, m: ad.scale_axis(w, m, 1), _p(rng, 2, 3, 4), _p(rng, 3)),
        "sigmoid": lambda: _case(ad.sigmoid, _p(rng, 3, 4)),
        "relu": lambda: _case(ad.relu, _p(rng, 3, 4)),
        "gelu": lambda: _case(ad.gelu, _p(rng, 3, 4)),
        "sum": lambda: _case(lambda a: ad.sum(a, axis=1), _p(rng, 3, 4)),
        "mean": lambda: _case(lambda a: ad.mean(a, axis=0), _p(rng, 3, 4)),
        "reshape": lambda: _case(lambda a: ad.reshape(a, (4, 3)), _p(rng, 3, 4)),
        "transpose": lambda: _case(lambda a: ad.transpose(a, (2, 0, 1)), _p(rng, 2, 3, 4)),
        "getitem": lambda: _case(lambda a: ad.getitem(a, (slice(1, None), [0, 2, 2])), _p(rng, 3, 4)),
        "take": lambda: _case(lambda a: ad.take(a, np.array([2, 0, 2]), axis=1), _p(rng, 2, 3)),
        "concat": lambda: _case(lambda a, b: ad.concat([a, b], axis=1), _p(rng, 2, 3), _p(rng, 2, 2)),
        "expand_batch": lambda: _case(lambda a: ad.expand_batch(a, 3), _p(rng, 4)),
        "matmul": lambda: _case(ad.matmul, _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)),
        "linear": lambda: _case(ad.linear, _p(rng, 2, 3, 4), _p(rng, 4, 5), _p(rng, 5)),
        "conv2d": lambda: _case(lambda x, k, b: ad.conv2d(x, k, b, stride=2, pad=1), _p(rng, 2, 2, 6, 6),
                                _p(rng, 3, 2, 3, 3), _p(rng, 3)),
        "maxpool2d": lambda: _case(ad.maxpool2d, _p(rng, 2, 2, 4, 4)),
        "layer_norm": lambda: _case(ad.layer_norm, _p(rng, 3, 5), _p(rng, 5), _p(rng, 5)),
        "softmax": lambda: _case(ad.softmax, _p(rng, 3, 4)),
        "softmax_cross_entropy": lambda: _case(lambda z: ad.softmax_cross_entropy(z, labels), _p(rng, 4, 3)),
        "attention": lambda: _case(ad.scaled_dot_product_attention, _p(rng, 2, 3, 4), _p(rng, 2, 3, 4),
                                   _p(rng, 2, 3, 4)),
        "wf_conv_gates": lambda: _wf_case("conv", rng),
        "wf_projection_gates": lambda: _wf_case("projection", rng),
    }


def run_gradcheck(seed: int = 0, tol: float = TOLERANCE) -> list[CheckRow]:
    rows = []
    for name, build in cases(seed).items():
        t = time.perf_counter()
        f, params = build()
        err = grad_check(f, params, n_samples=None)
        rows.append(CheckRow(name, err, err < tol, time.perf_counter() - t))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    w = max(len(r.op) for r in rows)
    lines = [f"{'op'.ljust(w)}  max_rel_error  status"]
    lines += [f"{r.op.ljust(w)}  {r.max_rel_error:13.3e}  {'pass' if r.passed else 'FAIL'}" for r in rows]
    return "\n".join(lines) + "\n"
