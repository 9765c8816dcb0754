"""Spatial graph over prescription text boxes and the GraphSAGE pseudo-classifier.

Boxes are linked to their horizontally and vertically nearest neighbors; the
resulting graph feeds a small GraphSAGE stack whose final embeddings drive a
sigmoid head scoring each box as a pill-name box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, Tensor

__all__ = [
    "TextBox", "LayoutGraph", "SageParams",
    "build_layout_graph", "sage_forward", "pseudo_classify",
    "weight_text_embeddings", "mean_aggregation_matrix",
]


@dataclass(frozen=True)
class TextBox:
    """One prescription text region: geometry, tokens, and pill-name label.

    The bbox is (x_min, y_min, x_max, y_max) in abstract layout units with y
    growing downward. pill_class must be present exactly when the box is a
    pill-name box.
    """

    box_id: int
    bbox: tuple[float, float, float, float]
    tokens: tuple[int, ...] = ()
    is_pill_name: bool = False
    pill_class: int | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"text box {self.box_id}: degenerate bbox {self.bbox}")
        if self.is_pill_name != (self.pill_class is not None):
            raise ValueError(
                f"text box {self.box_id}: pill_class must be set iff the box is a pill-name box")

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass(frozen=True)
class LayoutGraph:
    """Undirected graph over box indices; edges stored as (i, j) with i < j."""

    num_nodes: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        for i, j in self.edges:
            if not (0 <= i < j < self.num_nodes):
                raise ValueError(f"layout graph: invalid edge ({i}, {j})")

    def adjacency(self) -> list[list[int]]:
        neigh: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in sorted(self.edges):
            neigh[i].append(j)
            neigh[j].append(i)
        return [sorted(n) for n in neigh]

    def degrees(self) -> list[int]:
        return [len(n) for n in self.adjacency()]


def _axis_nearest(idx: int, centers: np.ndarray, gaps: np.ndarray,
                  overlap: np.ndarray) -> int:
    """Nearest neighbor of box idx along one axis.

    Candidates are boxes whose interval on the *other* axis overlaps box idx;
    when no candidate overlaps, every other box qualifies. Ties resolve to the
    lowest box id (argmin keeps the first minimum).
    """
    n = centers.shape[0]
    mask = overlap[idx].copy()
    mask[idx] = False
    if not mask.any():
        mask = np.ones(n, dtype=bool)
        mask[idx] = False
    cand = np.where(mask)[0]
    return int(cand[np.argmin(gaps[idx, cand])])


def build_layout_graph(boxes) -> LayoutGraph:
    """Link each box to its horizontally- and vertically-nearest neighbor.

    Horizontal nearest: among boxes whose vertical [y_min, y_max] intervals
    intersect box i's, the one minimizing the x-center gap; vertical nearest
    symmetrically. With no interval-overlapping candidate on an axis, the
    nearest center on that axis over all boxes is used instead. The edge set
    is the symmetric closure of both choices. Accepts anything exposing a
    4-tuple .bbox attribute.
    """
    if not boxes:
        raise ValueError("build_layout_graph: empty box list")
    n = len(boxes)
    if n == 1:
        return LayoutGraph(1, frozenset())

    bb = np.array([b.bbox for b in boxes], dtype=np.float64)
    if not np.all((bb[:, 0] < bb[:, 2]) & (bb[:, 1] < bb[:, 3])):
        raise ValueError("build_layout_graph: degenerate bbox")
    cx = (bb[:, 0] + bb[:, 2]) / 2.0
    cy = (bb[:, 1] + bb[:, 3]) / 2.0
    dx = np.abs(cx[:, None] - cx[None, :])
    dy = np.abs(cy[:, None] - cy[None, :])
    # Closed-interval intersection tests, per axis.
    y_overlap = (np.maximum.outer(bb[:, 1], bb[:, 1])
                 <= np.minimum.outer(bb[:, 3], bb[:, 3]))
    x_overlap = (np.maximum.outer(bb[:, 0], bb[:, 0])
                 <= np.minimum.outer(bb[:, 2], bb[:, 2]))

    edges = set()
    for i in range(n):
        h = _axis_nearest(i, cx, dx, y_overlap)
        v = _axis_nearest(i, cy, dy, x_overlap)
        edges.add((min(i, h), max(i, h)))
        edges.add((min(i, v), max(i, v)))
    return LayoutGraph(n, frozenset(edges))


@dataclass
class SageParams:
    """Per-layer weight matrices of shape (d_out, 2*d_in) plus the sigmoid head."""

    layers: list[Tensor]
    classifier_weight: Tensor
    classifier_bias: Tensor

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("SageParams: need at least one layer")
        for k in range(1, len(self.layers)):
            d_prev = self.layers[k - 1].shape[0]
            if self.layers[k].shape[1] != 2 * d_prev:
                raise ShapeMismatch(
                    f"SageParams: layer {k} expects input width {self.layers[k].shape[1] // 2}, "
                    f"layer {k - 1} outputs {d_prev}")
        d_last = self.layers[-1].shape[0]
        if self.classifier_weight.shape != (d_last, 1):
            raise ShapeMismatch(
                f"SageParams: classifier weight {self.classifier_weight.shape} "
                f"does not match final width {d_last}")
        if self.classifier_bias.shape != (1, 1):
            raise ShapeMismatch(
                f"SageParams: classifier bias must be (1, 1), got {self.classifier_bias.shape}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def mean_aggregation_matrix(graph: LayoutGraph) -> np.ndarray:
    """Row-stochastic neighbor-averaging matrix; isolated nodes get zero rows."""
    n = graph.num_nodes
    agg = np.zeros((n, n), dtype=np.float64)
    adjacency = graph.adjacency()
    for v, neigh in enumerate(adjacency):
        if neigh:
            agg[v, neigh] = 1.0 / len(neigh)
    return agg


def sage_forward(graph: LayoutGraph, h0: Tensor, params: SageParams) -> Tensor:
    """Run all layers: h_v <- relu(W @ concat(h_v, mean of neighbor h_u)).

    The full neighborhood is always used (no sampling); an isolated node
    aggregates the zero vector.
    """
    if h0.data.ndim != 2 or h0.shape[0] != graph.num_nodes:
        raise ShapeMismatch(
            f"sage_forward: features {h0.shape} do not match {graph.num_nodes} nodes")
    agg = Tensor(mean_aggregation_matrix(graph))
    h = h0
    for k, w in enumerate(params.layers):
        if w.shape[1] != 2 * h.shape[1]:
            raise ShapeMismatch(
                f"sage_forward: layer {k} weight {w.shape} does not accept width {h.shape[1]}")
        neighborhood = nm.matmul(agg, h)
        h = nm.relu(nm.matmul(nm.concat_cols([h, neighborhood]), nm.transpose(w)))
    return h


def pseudo_classify(embeddings: Tensor, params: SageParams) -> Tensor:
    """Per-box pill-name probabilities: sigmoid(w . h_i + b), shape (n, 1)."""
    if embeddings.data.ndim != 2 or embeddings.shape[1] != params.classifier_weight.shape[0]:
        raise ShapeMismatch(
            f"pseudo_classify: embeddings {embeddings.shape} do not match "
            f"classifier weight {params.classifier_weight.shape}")
    logits = nm.add(nm.matmul(embeddings, params.classifier_weight), params.classifier_bias)
    return nm.sigmoid(logits)


def weight_text_embeddings(tp: Tensor, g: Tensor) -> Tensor:
    """Scale text-projection row j by probability g_j (TP' of the pipeline)."""
    rows = tp.shape[0] if tp.data.ndim == 2 else -1
    if g.data.size != rows:
        raise ShapeMismatch(
            f"weight_text_embeddings: {g.data.size} probabilities for {rows} rows")
    return nm.scale_rows(tp, g)
