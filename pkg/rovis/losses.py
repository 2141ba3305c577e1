"""Classification and point-sampled mask losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, clip, gather, log, reduce_mean, reduce_sum, reshape, sigmoid

PROB_FLOOR = 1e-12
Scalar = Union[Tensor, float]


@dataclass
class LossWeights:
    lambda_cls: float = 2.0
    lambda_mask: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    num_point_samples: int = 1024
    dice_eps: float = 1.0
    background_weight: float = 0.1
    exhaustive_points: bool = False

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_mask", "focal_gamma", "focal_alpha", "num_point_samples", "dice_eps", "background_weight"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.focal_alpha < 1:
            raise ConfigError(f"focal_alpha must be below 1, got {self.focal_alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


def zero() -> Tensor:
    return Tensor(0.0)


def cross_entropy(class_dist: Tensor, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean (or weighted mean) of -log p[target] over rows of an (N, C+1) distribution."""
    probs = class_dist if class_dist.ndim == 2 else reshape(class_dist, (1, class_dist.shape[0]))
    n, k = probs.shape
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but targets of shape {targets.shape}")
    if n == 0:
        return zero()
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"cross_entropy: target outside [0, {k - 1}]")
    picked = gather(reshape(probs, (n * k,)), np.arange(n) * k + targets)
    nll = -log(clip(picked, PROB_FLOOR, 1.0))
    if weights is None:
        return reduce_mean(nll)
    weights = np.asarray(weights, dtype=np.float64)
    return reduce_sum(nll * Tensor(weights)) * (1.0 / float(weights.sum()))


def focal_loss(logits: Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25, reduction: str = "mean") -> Tensor:
    """Sigmoid focal loss. reduction='none' keeps one value per row of a 2-D input."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"focal_loss: shape mismatch {logits.shape} vs {targets.shape}")
    t = Tensor(targets)
    p = clip(sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
    p_t = p * t + (1.0 - p) * Tensor(1.0 - targets)
    alpha_t = Tensor(alpha * targets + (1.0 - alpha) * (1.0 - targets))
    per_point = -log(p_t) * ((1.0 - p_t) ** gamma) * alpha_t
    if reduction == "none":
        return reduce_mean(per_point, axis=-1)
    return reduce_mean(per_point)


def dice_loss(probs: Tensor, targets: np.ndarray, eps: float = 1.0, reduction: str = "mean") -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per row for 2-D inputs."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise ShapeError(f"dice_loss: shape mismatch {probs.shape} vs {targets.shape}")
    numerator = reduce_sum(probs * Tensor(targets), axis=-1) * 2.0 + eps
    denominator = reduce_sum(probs, axis=-1) + Tensor(targets.sum(axis=-1) + eps)
    per_row = 1.0 - numerator / denominator
    if reduction == "none" or per_row.ndim == 0:
        return per_row
    return reduce_mean(per_row)


def point_indices(height: int, width: int, k: int, rng: Optional[Rng], exhaustive: bool = False) -> np.ndarray:
    """Flat pixel indices shared by prediction and target."""
    total = height * width
    if exhaustive:
        return np.arange(total)
    if rng is None:
        raise ValueError("point sampling needs an Rng unless exhaustive")
    if k <= total:
        return np.sort(rng.choice(total, size=k, replace=False))
    return rng.integers(0, total, size=k)


def sample_points(
    mask_logits: Tensor,
    gt_masks: np.ndarray,
    k: int,
    rng: Optional[Rng],
    exhaustive: bool = False,
) -> Tuple[Tensor, np.ndarray]:
    """Sample the same K locations from (N, H, W) logits and targets."""
    gt_masks = np.asarray(gt_masks)
    if mask_logits.shape != gt_masks.shape or mask_logits.ndim not in (2, 3):
        raise ShapeError(f"sample_points: shape mismatch {mask_logits.shape} vs {gt_masks.shape}")
    h, w = mask_logits.shape[-2:]
    idx = point_indices(h, w, k, rng, exhaustive)
    if mask_logits.ndim == 2:
        return gather(reshape(mask_logits, (h * w,)), idx), gt_masks.reshape(h * w)[idx].astype(np.float64)
    n = mask_logits.shape[0]
    points = gather(reshape(mask_logits, (n, h * w)), idx, axis=1)
    return points, gt_masks.reshape(n, h * w)[:, idx].astype(np.float64)


def mask_loss(logits_at_points: Tensor, targets_at_points: np.ndarray, weights: LossWeights) -> Tensor:
    """Focal + dice averaged over matched rows."""
    if logits_at_points.shape[0] == 0:
        return zero()
    focal = focal_loss(logits_at_points, targets_at_points, weights.focal_gamma, weights.focal_alpha)
    dice = dice_loss(sigmoid(logits_at_points), targets_at_points, weights.dice_eps)
    return focal + dice


def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def combined_loss(
    cls_x0: Scalar,
    cls_track: Scalar,
    cls_x1: Scalar,
    mask_x0: Scalar,
    mask_track: Scalar,
    mask_x1: Scalar,
    weights: LossWeights,
) -> Scalar:
    """lambda_cls * (sum of cls terms) + lambda_mask * (sum of mask terms)."""
    for name, part in zip(
        ("cls_x0", "cls_track", "cls_x1", "mask_x0", "mask_track", "mask_x1"),
        (cls_x0, cls_track, cls_x1, mask_x0, mask_track, mask_x1),
    ):
        if _value(part) < 0:
            raise ValueError(f"combined_loss: {name} is negative ({_value(part)})")
    return (cls_x0 + cls_track + cls_x1) * weights.lambda_cls + (mask_x0 + mask_track + mask_x1) * weights.lambda_mask


def class_weights(targets: Sequence[int], background: int, background_weight: float) -> Optional[np.ndarray]:
    """Per-row weights for cross_entropy; None (a plain mean) when background is not down-weighted."""
    if background_weight == 1.0:
        return None
    targets = np.asarray(targets, dtype=np.int64)
    return np.where(targets == background, background_weight, 1.0)
