"""Desk-scale classifiers and their (leave-one-class-out) training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import Dataset, batches
from .layers import Conv2d, LayerNorm, Linear, Module, ModuleList

log = logging.getLogger(__name__)


class SmallCNN(Module):
    arch = "small_cnn"

    def __init__(self, n_classes: int, hw: int = 16, seed: int = 0):
        if hw % 4:
            raise ValueError(f"SmallCNN needs H=W divisible by 4, got {hw}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.hw = hw
        self.conv1 = Conv2d(1, 8, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(8, 16, 3, pad=1, rng=rng)
        self.fc = Linear(16 * (hw // 4) ** 2, n_classes, rng=rng)

    def maskable_layers(self) -> list[str]:
        return ["conv1", "conv2"]

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        h = ad.maxpool2d(ad.relu(self.conv1(x, rows)), 2)
        h = ad.maxpool2d(ad.relu(self.conv2(h, rows)), 2)
        h = ad.reshape(h, (h.shape[0], -1))
        return self.fc(h)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng=rng)
        self.proj = Linear(d, d, rng=rng)

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        nb, t, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x, rows)
        # [B, T, 3, heads, dh] -> [3, B, heads, T, dh]
        qkv = ad.transpose(ad.reshape(qkv, (nb, t, 3, self.heads, dh)), (2, 0, 3, 1, 4))
        out = ad.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (nb, t, d))
        return self.proj(out)


class Block(Module):
    def __init__(self, d: int, heads: int, mlp: int, rng):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp, rng=rng)
        self.fc2 = Linear(mlp, d, rng=rng)

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        x = x + self.attn(self.ln1(x), rows)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class TinyViT(Module):
    arch = "tiny_vit"

    def __init__(self, n_classes: int, hw: int = 16, seed: int = 0, patch: int = 4, d: int = 32,
                 heads: int = 2, depth: int = 2, mlp: int = 64):
        if hw % patch:
            raise ValueError(f"image size {hw} not divisible by patch {patch}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.hw = hw
        self.patch = patch
        n_tok = 1 + (hw // patch) ** 2
        self.embed = Linear(patch * patch, d, rng=rng)
        self.cls_token = ad.Parameter(rng.normal(0.0, 0.02, d))
        self.pos = ad.Parameter(rng.normal(0.0, 0.02, (n_tok, d)))
        self.blocks = ModuleList(Block(d, heads, mlp, rng) for _ in range(depth))
        self.ln = LayerNorm(d)
        self.head = Linear(d, n_classes, rng=rng)

    def maskable_layers(self) -> list[str]:
        return [f"blocks.{i}.attn.qkv" for i in range(len(self.blocks))]

    def patchify(self, x: Tensor) -> Tensor:
        nb, c, h, w = x.shape
        p = self.patch
        t = ad.reshape(x, (nb, c, h // p, p, w // p, p))
        t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
        return ad.reshape(t, (nb, (h // p) * (w // p), c * p * p))

    def __call__(self, x: Tensor, rows=None) -> Tensor:
        nb = x.shape[0]
        tok = self.embed(self.patchify(x))
        cls = ad.reshape(ad.expand_batch(self.cls_token, nb), (nb, 1, -1))
        h = ad.add_bias(ad.concat([cls, tok], axis=1), self.pos)
        for blk in self.blocks:
            h = blk(h, rows)
        h = self.ln(h)
        return self.head(h[:, 0])


ARCHS = {"small_cnn": SmallCNN, "tiny_vit": TinyViT}


def build_model(arch: str, n_classes: int, hw: int = 16, seed: int = 0) -> Module:
    try:
        cls = ARCHS[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}") from None
    return cls(n_classes, hw=hw, seed=seed)


def count_parameters(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even and >= 2, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class SGD:
    def __init__(self, params, lr: float):
        self.params = [p for p in params if p.trainable]
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Module
    val_accuracy: float
    history: list[dict] = field(default_factory=list)


def predict(model, images: np.ndarray, rows=None, batch_size: int = 512) -> np.ndarray:
    """Logits for ``images`` in fixed-size chunks, without graph recording."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            r = rows if rows is None or np.ndim(rows) == 0 else rows[i : i + batch_size]
            out.append(model(Tensor(images[i : i + batch_size]), r).data)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def evaluate_accuracy(model, ds: Dataset, rows=None) -> float:
    if len(ds) == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    return float((predict(model, ds.images, rows).argmax(axis=1) == ds.labels).mean())


def _val_metrics(model, ds: Dataset) -> tuple[float, float]:
    logits = predict(model, ds.images)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float((logits.argmax(axis=1) == ds.labels).mean()), float(-logp[np.arange(len(ds)), ds.labels].mean())


def train_baseline(arch: str | Module, train: Dataset, val: Dataset, cfg: TrainConfig | None = None,
                   hw: int | None = None) -> TrainResult:
    """Train from scratch; stop once validation accuracy has not improved for ``patience`` epochs.

    The parameters at termination are returned, not a restored best epoch.
    """
    cfg = cfg or TrainConfig()
    for split, ds in (("train", train), ("val", val)):
        counts = np.bincount(ds.labels, minlength=ds.n_classes)
        present = counts[counts > 0]
        if present.size == 0 or present.min() < 2:
            raise ValueError(f"{split} split needs at least 2 examples per present class")
    model = arch if isinstance(arch, Module) else build_model(arch, train.n_classes, hw or train.hw, cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    best_acc, stale, acc = -1.0, 0, 0.0
    history = []
    for epoch in range(cfg.max_epochs):
        losses = []
        for bi, (xb, yb) in enumerate(batches(train, cfg.batch_size, seed=cfg.seed + epoch)):
            opt.zero_grad()
            loss = ad.softmax_cross_entropy(model(Tensor(xb)), yb)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {bi}")
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        acc, val_loss = _val_metrics(model, val)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                        "val_acc": acc, "val_loss": val_loss})
        log.info("epoch %d loss %.4f val_acc %.4f val_loss %.4f", epoch, history[-1]["loss"], acc, val_loss)
        if acc > best_acc:
            best_acc, stale = acc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(model, acc, history)


def retrain_without_class(arch: str, train: Dataset, val: Dataset, excluded: int,
                          cfg: TrainConfig | None = None, hw: int | None = None) -> TrainResult:
    """Leave-one-class-out oracle: ``excluded`` is removed from train and val, the head keeps all logits."""
    if not 0 <= excluded < train.n_classes:
        raise ValueError(f"excluded class {excluded} outside [0, {train.n_classes})")
    if train.n_classes - 1 < 2:
        raise ValueError("need at least 2 classes left after exclusion")
    return train_baseline(arch, train.without_class(excluded), val.without_class(excluded), cfg, hw)
