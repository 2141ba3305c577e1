"""Prediction-to-instance assignment: cost matrices, Hungarian and greedy matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError
from .losses import PROB_FLOOR, LossWeights, dice_loss, focal_loss, point_indices
from .rng import Rng
from .tensor import Tensor, no_grad, sigmoid


@dataclass
class Assignment:
    """pairs are (prediction_index, ground_truth_index)."""

    pairs: List[Tuple[int, int]]
    unmatched_predictions: List[int]
    unmatched_targets: List[int] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def deficit(self) -> int:
        return len(self.unmatched_targets)

    def target_of(self) -> Dict[int, int]:
        return dict(self.pairs)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def match_cost_matrix(
    class_probs,
    mask_logits,
    gt_classes,
    gt_masks,
    weights: LossWeights,
    rng: Optional[Rng] = None,
    points: Optional[np.ndarray] = None,
    dense: bool = False,
) -> np.ndarray:
    """(P, G) matrix of lambda_cls * CE + lambda_mask * (focal + dice).

    All cells share one set of sampled points. Nothing here records graph edges.
    """
    class_probs = _array(class_probs)
    mask_logits = _array(mask_logits)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    gt_masks = np.asarray(gt_masks)
    n_pred, n_gt = class_probs.shape[0], gt_classes.shape[0]
    if n_gt == 0:
        return np.zeros((n_pred, 0))
    if gt_masks.shape[0] != n_gt or gt_masks.shape[1:] != mask_logits.shape[1:]:
        raise ShapeError(f"match_cost_matrix: masks {mask_logits.shape} vs ground truth {gt_masks.shape}")
    h, w = mask_logits.shape[1:]
    if points is None:
        points = point_indices(h, w, weights.num_point_samples, rng, exhaustive=dense or weights.exhaustive_points)
    pred_pts = mask_logits.reshape(n_pred, h * w)[:, points]
    gt_pts = gt_masks.reshape(n_gt, h * w)[:, points].astype(np.float64)

    with no_grad():
        logits = Tensor(np.repeat(pred_pts, n_gt, axis=0))
        targets = np.tile(gt_pts, (n_pred, 1))
        focal = focal_loss(logits, targets, weights.focal_gamma, weights.focal_alpha, reduction="none").data
        dice = dice_loss(sigmoid(logits), targets, weights.dice_eps, reduction="none").data
    cls = -np.log(np.clip(class_probs[:, gt_classes], PROB_FLOOR, 1.0))
    return weights.lambda_cls * cls + weights.lambda_mask * (focal + dice).reshape(n_pred, n_gt)


def match_cost(class_dist, mask_logit, gt_class: int, gt_mask, weights: LossWeights, rng: Optional[Rng] = None, points=None, dense: bool = False) -> float:
    """Cost of matching one prediction row to one instance."""
    matrix = match_cost_matrix(
        _array(class_dist)[None], _array(mask_logit)[None], [gt_class], np.asarray(gt_mask)[None], weights, rng, points, dense
    )
    return float(matrix[0, 0])


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _optimal_cost(cost: np.ndarray, rows: List[int], cols: List[int]) -> float:
    if not rows or not cols:
        return 0.0
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def _lexicographic_optimum(cost: np.ndarray, optimum: float) -> List[Tuple[int, int]]:
    """Among optimal matchings, the one whose sorted pairs are lexicographically smallest.

    Rows are fixed in order: row r takes the lowest free column that still
    completes to an optimal matching, or stays unmatched if none does.
    """
    n_pred, n_gt = cost.shape
    size = min(n_pred, n_gt)
    tol = 1e-9 * max(1.0, abs(optimum))
    pairs: List[Tuple[int, int]] = []
    fixed = 0.0
    free_cols = list(range(n_gt))
    for r in range(n_pred):
        if len(pairs) == size:
            break
        later_rows = list(range(r + 1, n_pred))
        need = size - len(pairs) - 1
        for c in free_cols:
            rest_cols = [k for k in free_cols if k != c]
            if min(len(later_rows), len(rest_cols)) < need:
                continue
            if fixed + cost[r, c] + _optimal_cost(cost, later_rows, rest_cols) <= optimum + tol:
                pairs.append((r, c))
                fixed += float(cost[r, c])
                free_cols = rest_cols
                break
    return pairs


def hungarian(cost) -> Assignment:
    """Minimum-cost matching of size min(P, G) on a (P, G) matrix.

    Equal-cost optima resolve to the lowest (row, col) pairs in lexicographic order.
    """
    cost = _validate(cost)
    n_pred, n_gt = cost.shape
    if n_pred < 1:
        raise ValueError("hungarian needs at least one prediction")
    if n_gt == 0:
        return Assignment([], list(range(n_pred)), [], 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = _lexicographic_optimum(cost, float(cost[rows, cols].sum()))
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_predictions=[p for p in range(n_pred) if p not in matched_p],
        unmatched_targets=[g for g in range(n_gt) if g not in matched_g],
        total_cost=float(sum(cost[p, g] for p, g in pairs)),
    )


def greedy_assign(cost) -> Assignment:
    """Repeatedly take the global minimum cell of a (new instances x predictions) matrix.

    Ties resolve to the lowest (row, col). Returned pairs are (prediction, instance).
    """
    cost = _validate(cost)
    n_gt, n_pred = cost.shape
    live_rows = np.ones(n_gt, dtype=bool)
    live_cols = np.ones(n_pred, dtype=bool)
    pairs, total = [], 0.0
    while live_rows.any() and live_cols.any():
        masked = np.where(live_rows[:, None] & live_cols[None, :], cost, np.inf)
        row, col = np.unravel_index(int(np.argmin(masked)), cost.shape)
        pairs.append((int(col), int(row)))
        total += float(cost[row, col])
        live_rows[row] = False
        live_cols[col] = False
    unmatched = [int(r) for r in np.flatnonzero(live_rows)]
    if unmatched:
        logger.warning(f"Greedy assignment left {len(unmatched)} new instance(s) without a static prediction")
    return Assignment(
        pairs=sorted(pairs),
        unmatched_predictions=[int(c) for c in np.flatnonzero(live_cols)],
        unmatched_targets=unmatched,
        total_cost=total,
    )
