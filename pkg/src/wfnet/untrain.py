"""Single-round multi-class untraining of the gate matrices with label expansion."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import Dataset, batches
from .wf import WFModel

log = logging.getLogger(__name__)

LOSS_MODES = ("reciprocal", "difference", "logit_target")


@dataclass
class UntrainConfig:
    lambdas: tuple[float, float, float] = (1.0, 10.0, 1.0)
    chi: int = 3
    learning_rate: float = 100.0
    batch_size: int = 128
    accumulation_steps: int = 16
    patience: int = 10
    validations_per_epoch: int = 5
    max_epochs: int = 100
    seed: int = 0
    val_seed: int = 1234
    loss_mode: str = "reciprocal"
    epsilon_guard: float = 1e-8

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError(f"lambdas must be three nonnegative numbers, got {self.lambdas}")
        if self.chi < 1:
            raise ValueError("label expansion factor must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even, got {self.batch_size}")
        for name in ("accumulation_steps", "patience", "validations_per_epoch", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epsilon_guard <= 0:
            raise ValueError("epsilon_guard must be positive")

    @classmethod
    def for_arch(cls, arch: str, **overrides) -> "UntrainConfig":
        """Defaults with lambda_1 = 100 for attention models, 10 for CNNs."""
        lambdas = (1.0, 100.0, 1.0) if arch == "tiny_vit" else (1.0, 10.0, 1.0)
        return cls(**{"lambdas": lambdas, **overrides})


@dataclass
class LossReport:
    S_r: float
    S_u: float
    R: float
    L: float


class UntrainDiverged(RuntimeError):
    pass


def split_batch(x, y):
    """First half unlearns, second half retains."""
    n = len(y)
    if n % 2:
        raise ValueError(f"batch of {n} samples cannot be split into halves")
    h = n // 2
    return (x[:h], y[:h]), (x[h:], y[h:])


def forget_loss(model: WFModel, x, y) -> Tensor:
    """Cross-entropy with each sample's own label as selector row."""
    y = np.asarray(y)
    return ad.softmax_cross_entropy(model(_t(x), y), y)


def random_rows(rng: np.random.Generator, n_classes: int, n: int) -> np.ndarray:
    # uniform over all rows; a sample may draw its own class
    return rng.integers(0, n_classes, n)


def retain_loss(model: WFModel, x, y, chi: int, rng: np.random.Generator) -> Tensor:
    """Mean cross-entropy over ``chi`` replicas of the half-batch, each with fresh random rows."""
    if chi < 1:
        raise ValueError("chi must be >= 1")
    y = np.asarray(y)
    per_replica = [
        ad.softmax_cross_entropy(model(_t(x), random_rows(rng, model.n_classes, len(y))), y) for _ in range(chi)
    ]
    return ad.mean(ad.concat([ad.reshape(s, (1,)) for s in per_replica]))


def _fused_losses(model: WFModel, unlearn, retain, chi: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """forget_loss and retain_loss from one forward over the stacked half-batches.

    Draws selectors in the same order as retain_loss, so the values agree
    with the separate functions up to floating-point summation order.
    """
    (xu, yu), (xr, yr) = unlearn, retain
    yu, yr = np.asarray(yu), np.asarray(yr)
    h = len(yu)
    sel = [random_rows(rng, model.n_classes, len(yr)) for _ in range(chi)]
    xs = np.concatenate([xu] + [xr] * chi)
    logits = model(Tensor(xs), np.concatenate([yu] + sel))
    S_u = ad.softmax_cross_entropy(logits[:h], yu)
    S_r = ad.softmax_cross_entropy(logits[h:], np.tile(yr, chi))
    return S_u, S_r


def regularizer(model: WFModel) -> Tensor:
    """Mean over WF layers of the mean inverted gate 1 - sigmoid(raw), weights and biases pooled."""
    per_layer = []
    for _, layer in model.layers:
        inv = [ad.reshape(ad.add_scalar(-ad.sigmoid(a.raw), 1.0), (-1,)) for a in layer.gates if a.raw.data.size]
        per_layer.append(ad.reshape(ad.mean(ad.concat(inv)), (1,)))
    return ad.mean(ad.concat(per_layer))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(*vals) -> None:
    for v in vals:
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise UntrainDiverged(f"non-finite loss component {v}")


def composite_loss(S_r, S_u, R, cfg: UntrainConfig) -> Tensor:
    """lambda0 * S_r + lambda1 / (S_u + eps) + lambda2 * R."""
    S_r, S_u, R = _t(S_r), _t(S_u), _t(R)
    _check_finite(S_r, S_u, R)
    l0, l1, l2 = cfg.lambdas
    forget = ad.mul_scalar(ad.reciprocal(ad.add_scalar(S_u, cfg.epsilon_guard)), l1)
    return ad.add(ad.add(ad.mul_scalar(S_r, l0), forget), ad.mul_scalar(R, l2))


def difference_loss(S_r, S_u, R, cfg: UntrainConfig) -> Tensor:
    """lambda0 * S_r - lambda1 * S_u + lambda2 * R; unbounded below."""
    S_r, S_u, R = _t(S_r), _t(S_u), _t(R)
    _check_finite(S_r, S_u, R)
    l0, l1, l2 = cfg.lambdas
    return ad.add(ad.sub(ad.mul_scalar(S_r, l0), ad.mul_scalar(S_u, l1)), ad.mul_scalar(R, l2))


def _sq_dist(a: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(a, Tensor(target))
    return ad.mul_scalar(ad.sum(ad.mul(diff, diff)), 1.0 / a.shape[0])


def original_logits(model: WFModel, x) -> np.ndarray:
    """Logits of the unwrapped network (all gates bypassed)."""
    prev = [l.masking_enabled for _, l in model.layers]
    model.masking_enabled = False
    try:
        with no_grad():
            return model(_t(x)).data
    finally:
        for (_, l), flag in zip(model.layers, prev):
            l.masking_enabled = flag


def logit_target_loss(model: WFModel, unlearn_half, retain_half, cfg: UntrainConfig,
                      rng: np.random.Generator, original=None) -> tuple[Tensor, LossReport]:
    """Ablation: squared-l2 logit distance to the original model replaces cross-entropy.

    Retain term is the mean squared distance under random rows (chi replicas),
    forget term the guarded reciprocal of that distance under ground-truth rows.
    """
    (xu, yu), (xr, yr) = unlearn_half, retain_half
    ref = (lambda x: original(_t(x)).data) if original is not None else (lambda x: original_logits(model, x))
    with no_grad():
        ref_u, ref_r = ref(xu), ref(xr)
    d_u = _sq_dist(model(_t(xu), np.asarray(yu)), ref_u)
    reps = [_sq_dist(model(_t(xr), random_rows(rng, model.n_classes, len(yr))), ref_r) for _ in range(cfg.chi)]
    d_r = ad.mean(ad.concat([ad.reshape(s, (1,)) for s in reps]))
    R = regularizer(model)
    L = composite_loss(d_r, d_u, R, cfg)
    return L, LossReport(d_r.item(), d_u.item(), R.item(), L.item())


def batch_loss(model: WFModel, x, y, cfg: UntrainConfig, rng: np.random.Generator) -> tuple[Tensor, LossReport]:
    """Loss of one mini-batch under ``cfg.loss_mode``."""
    unlearn, retain = split_batch(x, y)
    if cfg.loss_mode == "logit_target":
        return logit_target_loss(model, unlearn, retain, cfg, rng)
    S_u, S_r = _fused_losses(model, unlearn, retain, cfg.chi, rng)
    R = regularizer(model)
    combine = composite_loss if cfg.loss_mode == "reciprocal" else difference_loss
    L = combine(S_r, S_u, R, cfg)
    return L, LossReport(S_r.item(), S_u.item(), R.item(), L.item())


def validation_loss(model: WFModel, val: Dataset, cfg: UntrainConfig) -> float:
    """Mean batch loss over the held-out split with a fixed selector seed."""
    rng = np.random.default_rng(cfg.val_seed)
    bs = min(cfg.batch_size, len(val) - len(val) % 2)
    vals = []
    with no_grad():
        for xb, yb in batches(val, bs, seed=cfg.val_seed):
            L, _ = batch_loss(model, xb, yb, cfg, rng)
            vals.append(L.item())
    return float(np.mean(vals))


@dataclass
class UntrainResult:
    model: WFModel
    history: list[dict] = field(default_factory=list)
    best_val_loss: float = float("inf")
    steps: int = 0
    optimization_loops: int = 0

    def history_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.history)


def alpha_step(model: WFModel, lr: float, scale: float = 1.0) -> None:
    """Plain gradient descent on raw gates, then clip; gradients are reset."""
    for p in model.alpha_parameters():
        p.data -= lr * scale * p.grad
        p.zero_grad()
    model.clip_alphas()


def untrain(model: WFModel, train: Dataset, val: Dataset, cfg: UntrainConfig | None = None) -> UntrainResult:
    """Untrain every class at once; return the gate state with the best validation loss.

    ``model`` is updated in place (only its gate matrices change).
    """
    cfg = cfg or UntrainConfig.for_arch(model.arch)
    for p in model.base_parameters():
        if p.trainable:
            raise ValueError("base parameters must be frozen before untraining")
    alphas = model.alpha_parameters()
    for p in alphas:
        p.trainable = True
        p.zero_grad()
    rng = np.random.default_rng(cfg.seed)
    n_batches = len(train) // cfg.batch_size
    if n_batches == 0:
        raise ValueError(f"untraining stream of {len(train)} samples is shorter than one batch")
    vpe = min(cfg.validations_per_epoch, n_batches)
    eval_after = {int(round((i + 1) * n_batches / vpe)) for i in range(vpe)}

    result = UntrainResult(model, optimization_loops=1)
    best_state = model.get_alpha_state()
    result.best_val_loss = validation_loss(model, val, cfg)
    result.history.append({"step": 0, "S_r": None, "S_u": None, "R": None, "L": None, "val_L": result.best_val_loss})
    stale, seen, window, evaluated_at = 0, 0, [], 0
    for epoch in range(cfg.max_epochs):
        for bi, (xb, yb) in enumerate(batches(train, cfg.batch_size, seed=cfg.seed * 100003 + epoch)):
            L, rep = batch_loss(model, xb, yb, cfg, rng)
            if not np.isfinite(rep.L):
                raise UntrainDiverged(f"non-finite loss at batch {seen} (epoch {epoch}, index {bi})")
            ad.backward(L)
            window.append(rep)
            seen += 1
            if seen % cfg.accumulation_steps == 0:
                alpha_step(model, cfg.learning_rate, 1.0 / cfg.accumulation_steps)
                result.steps += 1
            # an evaluation with no gate step since the last one would repeat the same loss
            if bi + 1 not in eval_after or result.steps == evaluated_at:
                continue
            evaluated_at = result.steps
            val_L = validation_loss(model, val, cfg)
            rec = {"step": result.steps, "val_L": val_L}
            for k in ("S_r", "S_u", "R", "L"):
                rec[k] = float(np.mean([getattr(r, k) for r in window]))
            window = []
            result.history.append(rec)
            log.info("epoch %d step %d L %.4f S_u %.4f val_L %.4f", epoch, result.steps, rec["L"], rec["S_u"], val_L)
            if val_L < result.best_val_loss:
                result.best_val_loss, best_state, stale = val_L, model.get_alpha_state(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        else:
            continue
        break
    model.set_alpha_state(best_state)
    for p in alphas:
        p.zero_grad()
    return result


def config_dict(cfg: UntrainConfig) -> dict:
    d = asdict(cfg)
    d["lambdas"] = list(cfg.lambdas)
    return d
