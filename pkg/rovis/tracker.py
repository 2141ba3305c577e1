"""Online video tracking with track queries, plus the IoU-linking baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from loguru import logger

from .errors import ConfigError
from .nms import NMS_MODES, Proposal, mask_iou, nms_two_stage, suppress
from .segmenter import FramePrediction, QuerySet, QueryState
from .tensor import Tensor, no_grad
from .tracks import AGNOSTIC_CATEGORY, TrackResult


@dataclass
class TrackerConfig:
    delta_t: int = 9
    spawn_score_threshold: float = 0.5
    nms_mode: str = "matrix"
    matrix_nms_sigma: float = 2.0
    plain_nms_iou_threshold: float = 0.6
    category_agnostic: bool = False

    def __post_init__(self):
        if self.delta_t < 0:
            raise ConfigError(f"delta_t must be >= 0, got {self.delta_t}")
        for name in ("spawn_score_threshold", "plain_nms_iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.nms_mode not in NMS_MODES:
            raise ConfigError(f"nms_mode must be one of {NMS_MODES}, got {self.nms_mode!r}")
        if self.matrix_nms_sigma <= 0:
            raise ConfigError(f"matrix_nms_sigma must be positive, got {self.matrix_nms_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


class FrameModel(Protocol):
    """What the tracker needs from a segmenter."""

    def query_set(self, tracks: Sequence[QueryState] = ()) -> QuerySet: ...

    def forward_frame(self, image: np.ndarray, queries: QuerySet) -> FramePrediction: ...


@dataclass
class Detection:
    mask: np.ndarray
    score: float
    category: object
    slot: int


def _row_summary(probs: np.ndarray, row: int):
    """(is_foreground, score, label) for one prediction row."""
    background = probs.shape[1] - 1
    label = int(np.argmax(probs[row]))
    return label != background, float(probs[row, :background].max()), label


class OnlineTracker:
    """Frame-by-frame tracker state. Feed frames in order with step()."""

    def __init__(self, model: FrameModel, config: TrackerConfig):
        self.model = model
        self.config = config
        self.entries: List[QueryState] = []
        self.results: Dict[int, TrackResult] = {}
        self.frame_index = 0
        self._next_id = 0

    def _nms(self, tracks: List[Proposal], statics: List[Proposal]) -> List[Proposal]:
        cfg = self.config
        return nms_two_stage(
            tracks,
            statics,
            mode=cfg.nms_mode,
            sigma=cfg.matrix_nms_sigma,
            iou_threshold=cfg.plain_nms_iou_threshold,
            score_threshold=cfg.spawn_score_threshold,
            category_agnostic=cfg.category_agnostic,
        )

    def step(self, image: np.ndarray) -> List[int]:
        """Process one frame. Returns the ids of tracks with a mask on this frame."""
        t = self.frame_index
        with no_grad():
            pred = self.model.forward_frame(image, self.model.query_set(self.entries))
        probs = pred.class_probs.data
        masks = pred.mask_logits.data >= 0.0
        embeddings = pred.embeddings.data
        num_static = pred.num_static

        track_props = []
        for k, entry in enumerate(self.entries):
            row = num_static + k
            foreground, score, _ = _row_summary(probs, row)
            # an empty mask counts as a miss
            if foreground and masks[row].any():
                track_props.append(Proposal("track", k, masks[row], score, entry.category))
        static_props = []
        for row in range(num_static):
            foreground, score, label = _row_summary(probs, row)
            if foreground and score >= self.config.spawn_score_threshold and masks[row].any():
                category = AGNOSTIC_CATEGORY if self.config.category_agnostic else label
                static_props.append(Proposal("static", row, masks[row], score, category))

        survivors = self._nms(track_props, static_props)
        continued = {p.key: p for p in survivors if p.origin == "track"}
        spawned = sorted((p for p in survivors if p.origin == "static"), key=lambda p: p.key)

        active_ids = []
        kept: List[QueryState] = []
        for k, entry in enumerate(self.entries):
            entry.embedding = Tensor(embeddings[num_static + k])
            hit = continued.get(k)
            if hit is not None:
                entry.inactive_frames = 0
                entry.last_score = hit.score
                self.results[entry.track_id].add(t, hit.mask, hit.score)
                active_ids.append(entry.track_id)
            else:
                entry.inactive_frames += 1
                if entry.inactive_frames > self.config.delta_t:
                    logger.debug(f"Frame {t}: track {entry.track_id} removed after {entry.inactive_frames} misses")
                    continue
            kept.append(entry)

        for proposal in spawned:
            track_id = self._next_id
            self._next_id += 1
            kept.append(
                QueryState(
                    track_id=track_id,
                    embedding=Tensor(embeddings[proposal.key]),
                    slot=proposal.key,
                    last_score=proposal.score,
                    category=proposal.category,
                )
            )
            result = TrackResult(track_id, proposal.category, source_slot=proposal.key)
            result.add(t, proposal.mask, proposal.score)
            self.results[track_id] = result
            active_ids.append(track_id)

        self.entries = kept
        self.frame_index += 1
        return active_ids

    def finish(self) -> List[TrackResult]:
        return [self.results[k] for k in sorted(self.results)]


def track_video(model: FrameModel, frames: Sequence[np.ndarray], config: TrackerConfig) -> List[TrackResult]:
    if len(frames) == 0:
        raise ValueError("track_video needs at least one frame")
    tracker = OnlineTracker(model, config)
    for frame in frames:
        tracker.step(frame)
    results = tracker.finish()
    logger.debug(f"Tracked {len(frames)} frames: {len(results)} tracks")
    return results


def detect_frames(model: FrameModel, frames: Sequence[np.ndarray], config: TrackerConfig) -> List[List[Detection]]:
    """Per-frame detections from static queries alone, with single-stage NMS."""
    out = []
    for image in frames:
        with no_grad():
            pred = model.forward_frame(image, model.query_set())
        probs = pred.class_probs.data
        masks = pred.mask_logits.data >= 0.0
        proposals = []
        for row in range(pred.num_static):
            foreground, score, label = _row_summary(probs, row)
            if foreground and score >= config.spawn_score_threshold and masks[row].any():
                category = AGNOSTIC_CATEGORY if config.category_agnostic else label
                proposals.append(Proposal("static", row, masks[row], score, category))
        kept = suppress(
            proposals,
            config.nms_mode,
            config.matrix_nms_sigma,
            config.plain_nms_iou_threshold,
            config.spawn_score_threshold,
            config.category_agnostic,
        )
        out.append([Detection(p.mask, p.score, p.category, p.key) for p in kept])
    return out


def iou_link_baseline(per_frame_detections: Sequence[Sequence[Detection]]) -> List[TrackResult]:
    """Link each detection to the previous frame's detection with the highest mask IoU."""
    results: Dict[int, TrackResult] = {}
    previous: List[tuple] = []
    next_id = 0
    for t, detections in enumerate(per_frame_detections):
        current = []
        claimed = set()
        for det in sorted(detections, key=lambda d: -d.score):
            best_id, best_iou = None, 0.0
            for track_id, mask in previous:
                if track_id in claimed:
                    continue
                iou = mask_iou(det.mask, mask)
                if iou > best_iou:
                    best_id, best_iou = track_id, iou
            if best_id is None:
                best_id = next_id
                next_id += 1
                results[best_id] = TrackResult(best_id, det.category, source_slot=det.slot)
            claimed.add(best_id)
            results[best_id].add(t, det.mask, det.score)
            current.append((best_id, det.mask))
        previous = current
    return [results[k] for k in sorted(results)]


def track_video_iou_link(model: FrameModel, frames: Sequence[np.ndarray], config: TrackerConfig) -> List[TrackResult]:
    if len(frames) == 0:
        raise ValueError("track_video_iou_link needs at least one frame")
    return iou_link_baseline(detect_frames(model, frames, config))
