"""Cross-modal similarity, training losses, and the matching decision rule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ShapeMismatch, Tensor

__all__ = [
    "LossConfig", "MatchDecision",
    "cosine_similarity", "similarity_matrix",
    "matching_loss", "clip_style_loss", "classification_loss", "total_loss",
    "decide_matches", "validate_correspondence",
]

logger = logging.getLogger(__name__)

_PROB_FLOOR = 1e-12  # probabilities are clamped into [floor, 1 - floor] before log


@dataclass(frozen=True)
class LossConfig:
    """Loss and decision hyperparameters.

    margin is the hinge radius for matched pairs, balance weighs the
    classification term in the total loss, cosine_eps guards the cosine
    denominator, and threshold is the minimum similarity for declaring a
    pill matched rather than not-in-prescription.
    """

    margin: float = 1.0
    balance: float = 1.0
    cosine_eps: float = 1e-8
    threshold: float = 0.8

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"LossConfig: margin must be positive, got {self.margin}")
        if not self.balance >= 0:
            raise ValueError(f"LossConfig: balance must be >= 0, got {self.balance}")
        if not self.cosine_eps > 0:
            raise ValueError(f"LossConfig: cosine_eps must be positive, got {self.cosine_eps}")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"LossConfig: threshold must be in (0, 1], got {self.threshold}")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Scalar cosine similarity a.b / max(|a||b|, eps) between two vectors."""
    if a.data.size != b.data.size:
        raise ShapeMismatch(f"cosine_similarity: widths {a.shape} vs {b.shape}")
    row_a = nm.reshape(a, (1, a.data.size))
    row_b = nm.reshape(b, (1, b.data.size))
    return nm.reshape(nm.cosine_similarity_matrix(row_a, row_b, eps), ())


def similarity_matrix(ip: Tensor, tpw: Tensor, eps: float = 1e-8) -> Tensor:
    """(M, N) cosine similarities between pill rows and weighted text rows."""
    if ip.data.ndim != 2 or tpw.data.ndim != 2 or ip.shape[1] != tpw.shape[1]:
        raise ShapeMismatch(f"similarity_matrix: shapes {ip.shape} vs {tpw.shape}")
    return nm.cosine_similarity_matrix(ip, tpw, eps)


def validate_correspondence(correspondence, num_pills: int, num_boxes: int,
                            require_nonempty: bool = True) -> list[frozenset[int]]:
    """Check P_i for every pill: box ids in range, optionally nonempty."""
    if len(correspondence) != num_pills:
        raise ValueError(
            f"correspondence: {len(correspondence)} sets for {num_pills} pills")
    sets = []
    for i, p in enumerate(correspondence):
        s = frozenset(int(j) for j in p)
        if any(j < 0 or j >= num_boxes for j in s):
            raise ValueError(f"correspondence: pill {i} references a box outside [0, {num_boxes})")
        if require_nonempty and not s:
            raise ValueError(f"correspondence: pill {i} has no pill-name box")
        sets.append(s)
    return sets


def _masks(correspondence: list[frozenset[int]], m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    matched = np.zeros((m, n), dtype=np.float64)
    for i, p in enumerate(correspondence):
        for j in p:
            matched[i, j] = 1.0
    return matched, 1.0 - matched


def matching_loss(s: Tensor, correspondence, margin: float = 1.0) -> Tensor:
    """Contrastive matching loss over the similarity matrix.

    Mismatched pairs are penalized by squared similarity, matched pairs by the
    squared hinge shortfall below the margin; terms are averaged over pills.
    """
    if s.data.ndim != 2:
        raise ShapeMismatch(f"matching_loss: expected a matrix, got {s.shape}")
    m, n = s.shape
    sets = validate_correspondence(correspondence, m, n)
    matched, mismatched = _masks(sets, m, n)
    shortfall = nm.hinge(nm.add(Tensor(np.full((m, n), float(margin))), nm.smul(s, -1.0)))
    hinge_term = nm.square(nm.mul(shortfall, Tensor(matched)))
    mismatch_term = nm.square(nm.mul(s, Tensor(mismatched)))
    return nm.smul(nm.sum_all(nm.add(mismatch_term, hinge_term)), 1.0 / (2.0 * m))


def clip_style_loss(s: Tensor, correspondence, margin: float = 1.0) -> Tensor:
    """Matched-pairs-only ablation of the matching loss.

    Leaves mismatched similarities unpenalized, which is exactly the failure
    mode the full loss exists to fix; kept as a comparison baseline.
    """
    if s.data.ndim != 2:
        raise ShapeMismatch(f"clip_style_loss: expected a matrix, got {s.shape}")
    m, n = s.shape
    sets = validate_correspondence(correspondence, m, n)
    matched, _ = _masks(sets, m, n)
    shortfall = nm.hinge(nm.add(Tensor(np.full((m, n), float(margin))), nm.smul(s, -1.0)))
    hinge_term = nm.square(nm.mul(shortfall, Tensor(matched)))
    return nm.smul(nm.sum_all(hinge_term), 1.0 / (2.0 * m))


def classification_loss(g: Tensor, labels) -> Tensor:
    """Class-balanced binary cross-entropy on the pseudo-classifier output.

    Pill-name boxes are weighted by the fraction of non-name boxes and vice
    versa; probabilities are clamped away from {0, 1} before the logs.
    """
    y = np.asarray(labels, dtype=bool).reshape(-1)
    n = y.size
    if g.data.size != n:
        raise ShapeMismatch(f"classification_loss: {g.data.size} probabilities for {n} labels")
    n1 = int(y.sum())
    if n1 == 0 or n1 == n:
        logger.warning("classification_loss: degenerate labels (n1=%d of %d)", n1, n)
    ratio = n1 / n
    weights = np.where(y, 1.0 - ratio, ratio).reshape(-1, 1)

    g_col = nm.reshape(g, (n, 1))
    g_safe = nm.clamp(g_col, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    log_g = nm.log(g_safe)
    log_not_g = nm.log(nm.add(Tensor(np.ones((n, 1))), nm.smul(g_safe, -1.0)))
    y_col = Tensor(y.astype(np.float64).reshape(-1, 1))
    not_y_col = Tensor((~y).astype(np.float64).reshape(-1, 1))
    per_box = nm.add(nm.mul(log_g, y_col), nm.mul(log_not_g, not_y_col))
    return nm.smul(nm.sum_all(nm.mul(per_box, Tensor(weights))), -1.0 / n)


def total_loss(matching: Tensor, classification: Tensor, balance: float = 1.0) -> Tensor:
    """Matching term plus balance * classification term."""
    return nm.add(matching, nm.smul(classification, float(balance)))


@dataclass(frozen=True)
class MatchDecision:
    """Decision for one pill: chosen box id, or None for not-in-prescription."""

    pill_index: int
    box: int | None
    similarity: float | None

    @property
    def matched(self) -> bool:
        return self.box is not None


def decide_matches(s, g, alpha: float = 0.8) -> list[MatchDecision]:
    """Assign each pill the argmax box among candidates with g >= 0.5.

    If no box clears the probability filter every box is a candidate; ties go
    to the lowest box id. A pill whose best similarity is below alpha is
    flagged not-in-prescription. With zero boxes every pill is flagged.
    """
    sim = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    probs = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    probs = probs.reshape(-1)
    if sim.ndim != 2:
        raise ShapeMismatch(f"decide_matches: expected a similarity matrix, got {sim.shape}")
    m, n = sim.shape
    if probs.size != n:
        raise ShapeMismatch(f"decide_matches: {probs.size} probabilities for {n} boxes")

    decisions = []
    if n == 0:
        return [MatchDecision(i, None, None) for i in range(m)]
    candidates = np.where(probs >= 0.5)[0]
    if candidates.size == 0:
        candidates = np.arange(n)
    for i in range(m):
        row = sim[i, candidates]
        best = candidates[int(np.argmax(row))]  # first max -> lowest box id
        best_sim = float(sim[i, best])
        decisions.append(MatchDecision(i, int(best) if best_sim >= alpha else None, best_sim))
    return decisions
