"""Filter-to-class associations read off the trained gate matrices."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .wf import WFModel


@dataclass(frozen=True)
class FilterRelevance:
    layer: str
    values: np.ndarray  # [N_c, K], 1 - sigmoid(raw)


@dataclass(frozen=True)
class AssociationGraph:
    layer: str
    k: int
    r: int
    edges: list[tuple[int, int, float]]  # (class, filter, relevance)

    @property
    def filters(self) -> list[int]:
        return sorted({f for _, f, _ in self.edges})

    @property
    def classes(self) -> list[int]:
        return sorted({c for c, _, _ in self.edges})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "class", "filter_index", "relevance"])
        for c, f, v in self.edges:
            w.writerow([self.layer, c, f, repr(v)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "k": self.k,
            "min_classes": self.r,
            "nodes": {
                "classes": self.classes,
                "filters": [{"layer": self.layer, "index": f} for f in self.filters],
            },
            "edges": [{"class": c, "filter": f, "relevance": v} for c, f, v in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def resolve_layer(model: WFModel, layer) -> str:
    """Accept a WF layer name or its position among the WF layers."""
    names = model.wf_names
    if isinstance(layer, str) and layer.lstrip("-").isdigit():
        layer = int(layer)
    if isinstance(layer, int):
        if not -len(names) <= layer < len(names):
            raise ValueError(f"layer index {layer} out of range for {len(names)} WF layers")
        return names[layer]
    if layer not in names:
        raise ValueError(f"{layer!r} is not a WF layer; WF layers are {names}")
    return layer


def filter_relevance(model: WFModel, layer) -> FilterRelevance:
    """Inverted weight gates: higher means more responsible for the class."""
    name = resolve_layer(model, layer)
    wl = model.net.get_submodule(name)
    raw = wl.gate_weights.raw.data
    return FilterRelevance(name, 1.0 / (1.0 + np.exp(raw)))


def top_filters(rel: FilterRelevance, k: int) -> list[list[tuple[int, float]]]:
    """Per class, the k most relevant filters, descending, ties by ascending index."""
    n_k = rel.values.shape[1]
    if not 1 <= k <= n_k:
        raise ValueError(f"top-k must lie in [1, {n_k}], got {k}")
    out = []
    for row in rel.values:
        order = np.lexsort((np.arange(n_k), -row))[:k]
        out.append([(int(i), float(row[i])) for i in order])
    return out


def shared_filter_graph(topk: list[list[tuple[int, float]]], r: int, layer: str = "", k: int | None = None) -> AssociationGraph:
    """Keep only filters that appear in at least r classes' top-k lists."""
    if r < 1:
        raise ValueError(f"min-classes must be >= 1, got {r}")
    counts: dict[int, int] = {}
    for lst in topk:
        for f, _ in lst:
            counts[f] = counts.get(f, 0) + 1
    edges = [(c, f, v) for c, lst in enumerate(topk) for f, v in lst if counts[f] >= r]
    return AssociationGraph(layer, k if k is not None else max((len(l) for l in topk), default=0), r, edges)


def association_graph(model: WFModel, layer, k: int = 10, r: int = 2) -> AssociationGraph:
    rel = filter_relevance(model, layer)
    return shared_filter_graph(top_filters(rel, k), r, rel.layer, k)
