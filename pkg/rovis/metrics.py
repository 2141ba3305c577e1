"""Video instance segmentation metrics: volumetric IoU, AP and AR."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from loguru import logger
from PIL import Image, ImageDraw

from .errors import FormatError, ShapeError
from .tracks import AGNOSTIC_CATEGORY, TrackResult

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = (1, 10, 100)


def _volume(track: TrackResult, frames: Sequence[int], shape) -> np.ndarray:
    out = np.zeros((len(frames),) + tuple(shape), dtype=bool)
    for i, t in enumerate(frames):
        mask = track.masks.get(t)
        if mask is not None:
            if mask.shape != tuple(shape):
                raise ShapeError(f"track {track.track_id}: frame {t} mask {mask.shape} vs {tuple(shape)}")
            out[i] = mask
    return out.reshape(-1)


def _frame_shape(tracks: Sequence[TrackResult]):
    for track in tracks:
        for mask in track.masks.values():
            return mask.shape
    return None


def volumetric_iou(track_a: TrackResult, track_b: TrackResult, video_length: Optional[int] = None) -> float:
    """Spatio-temporal IoU; frames missing from a track count as empty masks."""
    frames = sorted(set(track_a.masks) | set(track_b.masks))
    if video_length is not None:
        frames = [t for t in frames if t < video_length]
    shape = _frame_shape([track_a, track_b])
    if shape is None:
        raise ValueError("volumetric_iou needs at least one non-empty mask")
    a = _volume(track_a, frames, shape)
    b = _volume(track_b, frames, shape)
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("volumetric_iou needs at least one non-empty mask")
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(predictions: Sequence[TrackResult], ground_truth: Sequence[TrackResult]) -> np.ndarray:
    if not predictions or not ground_truth:
        return np.zeros((len(predictions), len(ground_truth)))
    frames = sorted(set().union(*(t.masks for t in list(predictions) + list(ground_truth))))
    shape = _frame_shape(ground_truth) or _frame_shape(predictions)
    pred = np.stack([_volume(t, frames, shape) for t in predictions]).astype(np.float64)
    gt = np.stack([_volume(t, frames, shape) for t in ground_truth]).astype(np.float64)
    inter = pred @ gt.T
    union = pred.sum(1)[:, None] + gt.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_category_ap: Dict[str, float]
    thresholds: List[float]
    ap_per_threshold: List[float]
    precision_curves: Dict[str, List[float]] = field(default_factory=dict)
    num_videos: int = 0
    num_predictions: int = 0
    num_ground_truth: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)

    def summary_row(self) -> Dict[str, float]:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AR@1": self.ar1, "AR@10": self.ar10}


def _category_key(category) -> str:
    return str(category)


def _match_video(dts, gts, ious, thresholds):
    """Greedy score-ordered matching per threshold. Returns (T, D) matched flags."""
    matched = np.zeros((len(thresholds), len(dts)), dtype=bool)
    for ti, thr in enumerate(thresholds):
        taken = np.zeros(len(gts), dtype=bool)
        for d in range(len(dts)):
            candidates = np.where(~taken & (ious[d] >= thr), ious[d], -1.0)
            if len(gts) and candidates.max() >= 0.0:
                g = int(np.argmax(candidates))
                taken[g] = True
                matched[ti, d] = True
    return matched


def _precision_recall(scores, matches, num_gt):
    """101-point interpolated precision and final recall for one (category, threshold)."""
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(matches[order]).astype(np.float64)
    fp = np.cumsum(~matches[order]).astype(np.float64)
    if len(tp) == 0:
        return np.zeros(len(RECALL_POINTS)), 0.0
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return q, float(recall[-1])


def evaluate(
    predictions: Mapping[str, Sequence[TrackResult]],
    ground_truth: Mapping[str, Sequence[TrackResult]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    category_agnostic: bool = False,
    category_names: Optional[Sequence[str]] = None,
) -> EvalReport:
    """COCO-style AP/AR over volumetric IoU. Categories without ground truth are skipped."""
    unknown = sorted(set(predictions) - set(ground_truth))
    if unknown:
        raise FormatError(f"predictions for unknown video id(s): {unknown}")
    thresholds = [float(t) for t in thresholds]

    def relabel(track: TrackResult) -> TrackResult:
        if not category_agnostic:
            return track
        return TrackResult(track.track_id, AGNOSTIC_CATEGORY, track.masks, track.scores, track.source_slot)

    def display(category) -> str:
        if category_names is not None and isinstance(category, (int, np.integer)) and 0 <= category < len(category_names):
            return category_names[category]
        return _category_key(category)

    categories = sorted({relabel(t).category for tracks in ground_truth.values() for t in tracks}, key=_category_key)
    per_cat: Dict[str, Dict[str, list]] = {
        _category_key(c): {"scores": [], "matches": [], "ranks": [], "num_gt": 0} for c in categories
    }
    num_predictions = 0
    for video_id in sorted(ground_truth):
        preds = [relabel(t) for t in predictions.get(video_id, [])]
        ids = [t.track_id for t in preds]
        if len(ids) != len(set(ids)):
            raise ValueError(f"video {video_id}: duplicate predicted track ids")
        num_predictions += len(preds)
        gts = [relabel(t) for t in ground_truth[video_id]]
        ranked = sorted(preds, key=lambda t: (-t.score, t.track_id))
        video_rank = {t.track_id: r for r, t in enumerate(ranked)}
        for category in categories:
            key = _category_key(category)
            cat_gts = sorted((g for g in gts if g.category == category), key=lambda g: g.track_id)
            cat_dts = [t for t in ranked if t.category == category]
            per_cat[key]["num_gt"] += len(cat_gts)
            if not cat_dts:
                continue
            matched = _match_video(cat_dts, cat_gts, iou_matrix(cat_dts, cat_gts), thresholds)
            per_cat[key]["scores"].extend(t.score for t in cat_dts)
            per_cat[key]["matches"].append(matched)
            per_cat[key]["ranks"].extend(video_rank[t.track_id] for t in cat_dts)

    n_t = len(thresholds)
    ap = np.full((n_t, len(categories)), np.nan)
    recall = np.full((n_t, len(categories), len(MAX_DETS)), np.nan)
    curves = np.zeros((n_t, len(categories), len(RECALL_POINTS)))
    for k, category in enumerate(categories):
        data = per_cat[_category_key(category)]
        if data["num_gt"] == 0:
            continue
        scores = np.asarray(data["scores"], dtype=np.float64)
        ranks = np.asarray(data["ranks"], dtype=np.int64)
        matches = np.concatenate(data["matches"], axis=1) if data["matches"] else np.zeros((n_t, 0), dtype=bool)
        for m, max_det in enumerate(MAX_DETS):
            keep = ranks < max_det
            for ti in range(n_t):
                q, r = _precision_recall(scores[keep], matches[ti][keep], data["num_gt"])
                recall[ti, k, m] = r
                if max_det == MAX_DETS[-1]:
                    curves[ti, k] = q
                    ap[ti, k] = float(q.mean())

    def mean_valid(values: np.ndarray) -> float:
        values = values[~np.isnan(values)]
        return float(values.mean()) if values.size else 0.0

    ap_per_threshold = [mean_valid(ap[ti]) for ti in range(n_t)]
    per_category = {display(c): mean_valid(ap[:, k]) for k, c in enumerate(categories) if per_cat[_category_key(c)]["num_gt"]}

    def at(threshold: float) -> float:
        for ti, thr in enumerate(thresholds):
            if abs(thr - threshold) < 1e-9:
                return ap_per_threshold[ti]
        return float("nan")

    valid_cats = [k for k, c in enumerate(categories) if per_cat[_category_key(c)]["num_gt"]]
    precision_curves = {
        f"{thr:.2f}": (curves[ti, valid_cats].mean(axis=0) if valid_cats else np.zeros(len(RECALL_POINTS))).tolist()
        for ti, thr in enumerate(thresholds)
    }
    report = EvalReport(
        ap=mean_valid(np.array(ap_per_threshold)),
        ap50=at(0.5),
        ap75=at(0.75),
        ar1=mean_valid(np.array([mean_valid(recall[ti, :, 0]) for ti in range(n_t)])),
        ar10=mean_valid(np.array([mean_valid(recall[ti, :, 1]) for ti in range(n_t)])),
        per_category_ap=per_category,
        thresholds=thresholds,
        ap_per_threshold=ap_per_threshold,
        precision_curves=precision_curves,
        num_videos=len(ground_truth),
        num_predictions=num_predictions,
        num_ground_truth=sum(len(v) for v in ground_truth.values()),
    )
    if num_predictions == 0:
        logger.warning("No predicted tracks: every metric is 0")
    return report


def format_table(report: EvalReport) -> str:
    row = report.summary_row()
    header = "  ".join(f"{name:>8}" for name in row)
    values = "  ".join(f"{value:>8.4f}" for value in row.values())
    lines = ["=" * 60, "EVALUATION REPORT", "=" * 60, header, values]
    if report.per_category_ap:
        lines.append("-" * 60)
        for name, value in sorted(report.per_category_ap.items()):
            lines.append(f"{name:<20} AP {value:.4f}")
    lines.append("=" * 60)
    return "\n".join(lines)


def save_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    logger.success(f"Saved report: {path}")
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"report not found: {path}")
    return EvalReport.from_dict(json.loads(path.read_text()))


def plot_pr_curves(report: EvalReport, out_dir: Union[str, Path], size=(360, 280)) -> List[Path]:
    """Raster precision/recall curves, one PNG per IoU threshold plus an overlay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width, height = size
    margin = 36
    palette = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
               (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207)]

    def canvas(title: str):
        img = Image.new("RGB", size, "white")
        draw = ImageDraw.Draw(img)
        draw.rectangle([margin, margin // 2, width - margin // 2, height - margin], outline="black")
        draw.text((margin, 4), title, fill="black")
        draw.text((margin - 8, height - margin + 4), "0", fill="black")
        draw.text((width - margin, height - margin + 4), "recall 1", fill="black")
        draw.text((2, margin // 2), "1", fill="black")
        return img, draw

    def points(curve):
        x0, x1 = margin, width - margin // 2
        y0, y1 = height - margin, margin // 2
        return [(x0 + (x1 - x0) * r, y0 + (y1 - y0) * p) for r, p in zip(RECALL_POINTS, curve)]

    written = []
    overlay, overlay_draw = canvas("precision / recall")
    for i, (name, curve) in enumerate(sorted(report.precision_curves.items())):
        color = palette[i % len(palette)]
        img, draw = canvas(f"IoU {name}")
        draw.line(points(curve), fill=color, width=2)
        overlay_draw.line(points(curve), fill=color, width=1)
        path = out_dir / f"pr_iou_{name}.png"
        img.save(path)
        written.append(path)
    overlay_path = out_dir / "pr_all.png"
    overlay.save(overlay_path)
    written.append(overlay_path)
    logger.success(f"Saved {len(written)} PR plots: {out_dir}")
    return written
