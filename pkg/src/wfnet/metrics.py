"""Unlearning and explainability metrics: accuracies, distances to oracles, ZRF, insertion/deletion."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .models import predict
from .wf import ALPHA_INIT, WFModel

log = logging.getLogger(__name__)

CONF_CLAMP = (0.0, 10.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _rows_for(model, selector):
    if isinstance(model, WFModel) and model.masking_enabled:
        if selector is None:
            raise ValueError("a WF model needs a selector row")
        return selector
    return None


def probs(model, images: np.ndarray, selector: int | None = None) -> np.ndarray:
    return _softmax(predict(model, images, _rows_for(model, selector)))


def accuracy(model, ds: Dataset, selector: int | None = None) -> float:
    if len(ds) == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    pred = predict(model, ds.images, _rows_for(model, selector)).argmax(axis=1)
    return float((pred == ds.labels).mean())


def forget_accuracy(model, test: Dataset, c: int) -> float:
    """Accuracy on class-c test images with selector c."""
    return accuracy(model, test.of_class(c), c)


def retain_accuracy(model, test: Dataset, c: int) -> float:
    """Accuracy on test images of every other class, still with selector c."""
    return accuracy(model, test.without_class(c), c)


def _check_prob(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{name} is not normalized")


def _kl2(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p / m), 0.0)
    return terms.sum(axis=-1)


def js_divergence(p, q) -> np.ndarray | float:
    """Base-2 Jensen-Shannon divergence, row-wise over the last axis; lies in [0, 1]."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    _check_prob(p, "p")
    _check_prob(q, "q")
    m = 0.5 * (p + q)
    js = np.clip(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0, 1.0)
    return float(js) if js.ndim == 0 else js


def activation_distance(unlearned, oracle, forget: Dataset, c: int) -> float:
    """Mean l2 distance between output distributions on the forget set."""
    if oracle is None:
        raise ValueError(f"no retrained oracle supplied for class {c}")
    if len(forget) == 0:
        raise ValueError("empty forget set")
    d = probs(unlearned, forget.images, c) - probs(oracle, forget.images, c)
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def mean_js(model_a, model_b, forget: Dataset, c: int) -> float:
    if model_b is None:
        raise ValueError(f"no reference model supplied for class {c}")
    if len(forget) == 0:
        raise ValueError("empty forget set")
    return float(np.mean(js_divergence(probs(model_a, forget.images, c), probs(model_b, forget.images, c))))


def zrf(model, random_model, forget: Dataset, c: int) -> float:
    """1 - mean JS between the model (selector c) and a randomly initialized twin."""
    if len(forget) == 0:
        raise ValueError("ZRF needs a non-empty forget set")
    return 1.0 - mean_js(model, random_model, forget, c)


# ---------------------------------------------------------------------------
# Insertion / deletion over gate elements


@dataclass
class Curve:
    fractions: np.ndarray
    values: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.values, self.fractions))

    def to_csv(self) -> str:
        lines = ["fraction,normalized_confidence"]
        lines += [f"{f:.6f},{v:.10f}" for f, v in zip(self.fractions, self.values)]
        return "\n".join(lines) + "\n"


def relevance_order(model: WFModel, c: int) -> list[tuple[int, int, int]]:
    """Row-c gate elements pooled over layers and weight/bias gates, most suppressed first.

    Each entry is (layer index, gate index 0=weights 1=biases, element index).
    Ties fall back to ascending (layer index, pooled element index).
    """
    keys = []
    for li, (_, layer) in enumerate(model.layers):
        offset = 0
        for gi, gate in enumerate(layer.gates):
            for k, v in enumerate(gate.mask(c)):
                keys.append((v, li, offset + k, gi, k))
            offset += gate.k
    keys.sort(key=lambda t: (t[0], t[1], t[2]))
    return [(li, gi, k) for _, li, _, gi, k in keys]


def _set_elements(model: WFModel, c: int, elems, value: float) -> None:
    layers = model.layers
    for li, gi, k in elems:
        layers[li][1].gates[gi].raw.data[c, k] = value


def _counts(n: int, step_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    steps = int(round(1.0 / step_fraction))
    fr = np.minimum(np.arange(steps + 1) * step_fraction, 1.0)
    fr[-1] = 1.0
    return fr, np.round(fr * n).astype(int)


def _normalized(num: float, den: float, what: str) -> float:
    v = num / den if den > 0 else CONF_CLAMP[1]
    if not CONF_CLAMP[0] <= v <= CONF_CLAMP[1]:
        log.warning("%s: normalized confidence %.4g clamped into %s", what, v, CONF_CLAMP)
        v = float(np.clip(v, *CONF_CLAMP))
    return v


def _class_conf(model, ds: Dataset, selector, target: np.ndarray) -> float:
    p = probs(model, ds.images, selector)
    return float(p[np.arange(len(ds)), target].mean())


def _baseline(model: WFModel, baseline):
    if baseline is not None:
        return baseline
    bypass = model.copy()
    bypass.masking_enabled = False
    return bypass


def _sweep(model: WFModel, baseline, c: int, images: Dataset, target: np.ndarray, mode: str,
           step_fraction: float, selector=None) -> Curve:
    if len(images) == 0:
        raise ValueError("no images to score")
    order = relevance_order(model, c)
    work = model.copy()
    work.masking_enabled = True
    if mode == "deletion":
        # deletion starts from a WF model that has not been untrained at all
        for a in work.alphas():
            a.raw.data[:] = ALPHA_INIT
        value = -_clip_hi(model)
    elif mode == "insertion":
        value = _clip_hi(model)
    else:
        raise ValueError(f"mode must be 'insertion' or 'deletion', got {mode!r}")
    ref = _class_conf(_baseline(model, baseline), images, None, target)
    fractions, counts = _counts(len(order), step_fraction)
    values, done = [], 0
    for n in counts:
        _set_elements(work, c, order[done:n], value)
        done = n
        rows = c if selector is None else selector
        values.append(_normalized(_class_conf(work, images, rows, target), ref, f"{mode} class {c}"))
    return Curve(fractions, np.array(values))


def _clip_hi(model: WFModel) -> float:
    return model.alphas()[0].clip_hi


def insertion_curve(model: WFModel, baseline, test: Dataset, c: int, step_fraction: float = 0.05) -> Curve:
    """Reactivate row-c gates (most suppressed first) from the untrained state; class-c confidence."""
    forget = test.of_class(c)
    return _sweep(model, baseline, c, forget, forget.labels, "insertion", step_fraction)


def deletion_curve(model: WFModel, baseline, test: Dataset, c: int, step_fraction: float = 0.05) -> Curve:
    """Suppress row-c gates in untrained relevance order starting from the initial gates."""
    forget = test.of_class(c)
    return _sweep(model, baseline, c, forget, forget.labels, "deletion", step_fraction)


def insertion_score(model, baseline, test, c, step_fraction: float = 0.05) -> float:
    return insertion_curve(model, baseline, test, c, step_fraction).auc


def deletion_score(model, baseline, test, c, step_fraction: float = 0.05) -> float:
    return deletion_curve(model, baseline, test, c, step_fraction).auc


def other_rows(labels: np.ndarray, c: int, n_classes: int) -> np.ndarray:
    """A selector per image that is neither the manipulated row c nor the image's own class."""
    rows = np.full(len(labels), (c + 1) % n_classes)
    clash = rows == labels
    rows[clash] = (c + 2) % n_classes
    return rows


def other_class_curve(model: WFModel, baseline, test: Dataset, c: int, step_fraction: float = 0.05,
                      mode: str = "deletion") -> Curve:
    """Same row-c manipulation; true-class confidence on images of the other classes.

    Those images are read through a row other than c (and other than their own
    class), so the curve shows whether row-c gates matter for anything but class c.
    """
    if model.n_classes < 3:
        raise ValueError("the other-class curve needs at least 3 classes")
    others = test.without_class(c)
    rows = other_rows(others.labels, c, model.n_classes)
    return _sweep(model, baseline, c, others, others.labels, mode, step_fraction, rows)


# ---------------------------------------------------------------------------
# Report


@dataclass
class ClassMetrics:
    acc_retain: float
    acc_forget: float
    zrf: float
    zrf_original: float
    insertion_auc: float
    deletion_auc: float
    activation_distance: float | None = None
    js_divergence: float | None = None
    activation_distance_original: float | None = None
    js_divergence_original: float | None = None


@dataclass
class MetricsReport:
    arch: str
    dataset: str
    seeds: dict
    baseline_accuracy: float
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    def averages(self) -> dict:
        out = {}
        for key in ClassMetrics.__dataclass_fields__:
            vals = [getattr(m, key) for m in self.per_class.values()]
            vals = [v for v in vals if v is not None]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "dataset": self.dataset,
            "seeds": self.seeds,
            "baseline_accuracy": self.baseline_accuracy,
            "per_class": {str(c): {k: v for k, v in asdict(m).items() if v is not None}
                          for c, m in sorted(self.per_class.items())},
            "average": self.averages(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rep = cls(d["arch"], d["dataset"], d["seeds"], d["baseline_accuracy"])
        for c, m in d["per_class"].items():
            rep.per_class[int(c)] = ClassMetrics(**m)
        return rep

    def table(self) -> str:
        cols = ["acc_retain", "acc_forget", "activation_distance", "js_divergence", "zrf", "insertion_auc", "deletion_auc"]
        head = ["class"] + [c for c in cols if any(getattr(m, c) is not None for m in self.per_class.values())]
        rows = [head]
        for c, m in sorted(self.per_class.items()):
            rows.append([str(c)] + [f"{getattr(m, k):.4f}" for k in head[1:]])
        avg = self.averages()
        rows.append(["avg"] + [f"{avg[k]:.4f}" for k in head[1:]])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows) + "\n"


def evaluate(model: WFModel, base, test: Dataset, random_model, classes=None, oracles: dict | None = None,
             step_fraction: float = 0.05, dataset_id: str = "", seeds: dict | None = None) -> MetricsReport:
    """Per-class metrics for an untrained WF model; oracle distances only where oracles are given."""
    classes = range(model.n_classes) if classes is None else classes
    rep = MetricsReport(model.arch, dataset_id, seeds or {}, accuracy(base, test))
    for c in classes:
        forget = test.of_class(c)
        m = ClassMetrics(
            acc_retain=retain_accuracy(model, test, c),
            acc_forget=forget_accuracy(model, test, c),
            zrf=zrf(model, random_model, forget, c),
            zrf_original=zrf(base, random_model, forget, c),
            insertion_auc=insertion_score(model, base, test, c, step_fraction),
            deletion_auc=deletion_score(model, base, test, c, step_fraction),
        )
        oracle = (oracles or {}).get(c)
        if oracle is not None:
            m.activation_distance = activation_distance(model, oracle, forget, c)
            m.js_divergence = mean_js(model, oracle, forget, c)
            m.activation_distance_original = activation_distance(base, oracle, forget, c)
            m.js_divergence_original = mean_js(base, oracle, forget, c)
        rep.per_class[c] = m
    return rep
