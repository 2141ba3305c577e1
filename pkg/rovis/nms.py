"""Mask non-maximum suppression: matrix (soft) and plain (greedy) variants."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

NMS_MODES = ("matrix", "plain", "none")


@dataclass
class Proposal:
    """A candidate instance for one frame. key identifies the source row or track."""

    origin: str
    key: int
    mask: np.ndarray
    score: float
    category: object


def mask_iou_matrix(masks: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, H, W) binary masks; empty unions give 0."""
    flat = np.asarray(masks, dtype=np.float64).reshape(len(masks), -1)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def _order(scores: np.ndarray, priority: Optional[np.ndarray]) -> np.ndarray:
    """Descending score; ties go to lower priority value, then lower index."""
    priority = np.zeros(len(scores)) if priority is None else np.asarray(priority)
    return np.lexsort((np.arange(len(scores)), priority, -scores))


def matrix_nms(masks, scores, categories, sigma: float = 2.0, priority=None) -> np.ndarray:
    """Gaussian-decayed scores, returned in input order."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return scores.copy()
    order = _order(scores, priority)
    cats = np.asarray(categories, dtype=object)[order]
    iou = mask_iou_matrix(np.asarray(masks)[order])
    same = np.array([[cats[i] == cats[j] for j in range(n)] for i in range(n)], dtype=bool)
    above = np.triu(np.ones((n, n), dtype=bool), k=1) & same
    iou = np.where(above, iou, 0.0)
    compensate = iou.max(axis=0)
    ratio = np.exp(-(iou ** 2) / sigma) / np.exp(-(compensate[:, None] ** 2) / sigma)
    decay = np.where(above, ratio, np.inf).min(axis=0)
    decay = np.where(np.isinf(decay), 1.0, decay)
    out = np.empty(n)
    out[order] = scores[order] * decay
    return out


def plain_nms(masks, scores, iou_threshold: float = 0.6, priority=None) -> List[int]:
    """Indices kept by greedy suppression, highest score first."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return []
    iou = mask_iou_matrix(np.asarray(masks))
    kept: List[int] = []
    for i in _order(scores, priority):
        if all(iou[i, k] < iou_threshold for k in kept):
            kept.append(int(i))
    return kept


def suppress(
    proposals: Sequence[Proposal],
    mode: str,
    sigma: float,
    iou_threshold: float,
    score_threshold: float,
    category_agnostic: bool = False,
) -> List[Proposal]:
    """One NMS stage. Matrix mode drops every proposal whose decayed score is below score_threshold."""
    proposals = list(proposals)
    if mode not in NMS_MODES:
        raise ValueError(f"unknown nms mode {mode!r}; expected one of {NMS_MODES}")
    if mode == "none" or not proposals:
        return proposals
    masks = np.stack([p.mask for p in proposals])
    scores = np.array([p.score for p in proposals])
    priority = np.array([0 if p.origin == "track" else 1 for p in proposals])
    if mode == "plain":
        return [proposals[i] for i in sorted(plain_nms(masks, scores, iou_threshold, priority))]
    categories = [0] * len(proposals) if category_agnostic else [p.category for p in proposals]
    decayed = matrix_nms(masks, scores, categories, sigma, priority)
    return [replace(p, score=float(s)) for p, s in zip(proposals, decayed) if s >= score_threshold]


def nms_two_stage(
    track_proposals: Sequence[Proposal],
    static_proposals: Sequence[Proposal],
    mode: str = "matrix",
    sigma: float = 2.0,
    iou_threshold: float = 0.6,
    score_threshold: float = 0.5,
    category_agnostic: bool = False,
) -> List[Proposal]:
    """Suppress among track proposals first, then jointly with static proposals."""
    stage1 = suppress(track_proposals, mode, sigma, iou_threshold, score_threshold, category_agnostic)
    return suppress(list(stage1) + list(static_proposals), mode, sigma, iou_threshold, score_threshold, category_agnostic)
