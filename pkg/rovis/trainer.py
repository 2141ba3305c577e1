"""Two-frame training with track queries.

Each step runs the segmenter on x0 with static queries only, carries the
matched object queries into x1 as track queries (after FN/FP augmentation),
and supervises new x1 instances through greedily matched static queries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from loguru import logger

from .checkpoint import save_checkpoint
from .errors import ConfigError, TrainingError
from .losses import LossWeights, class_weights, combined_loss, cross_entropy, mask_loss, point_indices, zero
from .matching import greedy_assign, hungarian, match_cost_matrix
from .optim import AdamW, ParamGroup
from .rng import Rng
from .segmenter import FramePrediction, ModelConfig, QueryState, Segmenter, extract_track_queries
from .synthdata import FrameSample, VideoSample
from .tensor import Tensor, backward, gather, reshape

LOSS_LOG_NAME = "loss_log.jsonl"


@dataclass
class TrainConfig:
    pair_range: int = 5
    p_fn: float = 0.2
    p_fp: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 0.05
    backbone_lr_multiplier: float = 0.1
    query_lr_multiplier: float = 1.0
    no_decay_param_names: List[str] = field(
        default_factory=lambda: ["static_embeddings", "static_pos_embeddings", "class_head"]
    )
    epochs: int = 3
    pairs_per_video: int = 8
    batch_size: int = 1
    warmup_steps: int = 50
    deep_supervision: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.pair_range < 1:
            raise ConfigError(f"pair_range must be >= 1, got {self.pair_range}")
        for name in ("p_fn", "p_fp"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        for name in ("epochs", "pairs_per_video", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("lr must be positive; weight_decay and warmup_steps non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainStepRecord:
    iteration: int
    cls_x0: float
    cls_track: float
    cls_x1: float
    mask_x0: float
    mask_track: float
    mask_x1: float
    total: float
    gt_x0: int
    gt_x1: int
    tracks_carried: int
    fn_dropped: int
    fp_injected: int
    track_background: int
    new_instances: int
    unassigned_instances: int
    frames: Tuple[int, int] = (0, 0)
    video_id: str = ""

    def to_dict(self) -> dict:
        data = asdict(self)
        data["frames"] = list(self.frames)
        return data


@dataclass
class TrackAugmentation:
    """Track queries for x1. targets[i] is the instance id query i is trained on (None: background)."""

    queries: List[QueryState]
    targets: List[Optional[int]]
    rerouted: List[int]
    dropped: int
    injected: int


def sample_pair(video_length: int, pair_range: int, rng: Rng) -> Tuple[int, int]:
    """x0 uniform over frames, x1 uniform over [x0-R, x0+R] minus x0, clipped to the video."""
    if video_length < 2:
        raise ValueError(f"need at least 2 frames to sample a pair, got {video_length}")
    t0 = rng.integers(0, video_length)
    candidates = [t for t in range(max(0, t0 - pair_range), min(video_length - 1, t0 + pair_range) + 1) if t != t0]
    return t0, candidates[rng.integers(0, len(candidates))]


def augment_tracks(
    track_queries: Sequence[QueryState],
    gt_ids_in_x1: Set[int],
    background_queries: Sequence[QueryState],
    p_fn: float,
    p_fp: float,
    rng: Rng,
) -> TrackAugmentation:
    """Drop each track with p_fn, then inject each background query with p_fp.

    Injection happens after dropping, so injected queries are never dropped.
    """
    drop = rng.random(len(track_queries)) < p_fn
    inject = rng.random(len(background_queries)) < p_fp
    queries, targets, rerouted = [], [], []
    for query, dropped in zip(track_queries, drop):
        if dropped:
            if query.track_id in gt_ids_in_x1:
                rerouted.append(query.track_id)
            continue
        queries.append(query)
        targets.append(query.track_id if query.track_id in gt_ids_in_x1 else None)
    for query, chosen in zip(background_queries, inject):
        if chosen:
            queries.append(query)
            targets.append(None)
    return TrackAugmentation(queries, targets, rerouted, int(drop.sum()), int(inject.sum()))


def _ground_truth(frame: FrameSample):
    if frame.instances is None:
        raise TrainingError(f"frame {frame.index} has no annotation")
    ids = [inst.instance_id for inst in frame.instances]
    classes = np.array([inst.category for inst in frame.instances], dtype=np.int64)
    h, w = frame.image.shape[:2]
    masks = np.stack([inst.mask for inst in frame.instances]) if frame.instances else np.zeros((0, h, w), dtype=bool)
    return ids, classes, masks


def build_optimizer(model: Segmenter, config: TrainConfig) -> AdamW:
    """Backbone / query / other groups, each split by weight-decay eligibility."""
    buckets: Dict[Tuple[str, bool], List] = {}
    for name, param in model.named_parameters():
        if name.startswith("backbone."):
            kind = "backbone"
        elif name.startswith("static_"):
            kind = "queries"
        else:
            kind = "other"
        decay = not any(key in name for key in config.no_decay_param_names)
        buckets.setdefault((kind, decay), []).append(param)
    multipliers = {"backbone": config.backbone_lr_multiplier, "queries": config.query_lr_multiplier, "other": 1.0}
    groups = [
        ParamGroup(f"{kind}{'' if decay else '/no_decay'}", params, multipliers[kind], decay)
        for (kind, decay), params in buckets.items()
    ]
    return AdamW(groups, lr=config.lr, weight_decay=config.weight_decay)


class Trainer:
    def __init__(self, model: Segmenter, config: TrainConfig):
        self.model = model
        self.config = config
        self.weights = config.loss
        self.optimizer = build_optimizer(model, config)
        self.iteration = 0
        self.pending = 0

    def current_lr(self) -> float:
        warmup = self.config.warmup_steps
        updates = self.optimizer.step_count + 1
        if warmup and updates <= warmup:
            return self.config.lr * updates / warmup
        return self.config.lr

    def _supervise(
        self,
        pred: FramePrediction,
        rows: Sequence[int],
        class_targets: Sequence[int],
        mask_pairs: Sequence[Tuple[int, np.ndarray]],
        rng: Rng,
    ) -> Tuple[Tensor, Tensor]:
        """Classification over `rows` and mask loss over `mask_pairs`, summed over supervised layers."""
        if not rows:
            return zero(), zero()
        layers = pred.layers if self.config.deep_supervision else pred.layers[-1:]
        background = pred.background_index
        weights = class_weights(class_targets, background, self.weights.background_weight)
        points = None
        if mask_pairs:
            h, w = pred.mask_logits.shape[-2:]
            points = point_indices(h, w, self.weights.num_point_samples, rng, self.weights.exhaustive_points)
            mask_rows = [r for r, _ in mask_pairs]
            targets = np.stack([m for _, m in mask_pairs]).reshape(len(mask_pairs), h * w)[:, points].astype(np.float64)
        cls_total, mask_total = zero(), zero()
        for layer in layers:
            cls_total = cls_total + cross_entropy(gather(layer.class_probs, rows, axis=0), class_targets, weights)
            if points is not None:
                h, w = layer.mask_logits.shape[-2:]
                flat = reshape(gather(layer.mask_logits, mask_rows, axis=0), (len(mask_rows), h * w))
                mask_total = mask_total + mask_loss(gather(flat, points, axis=1), targets, self.weights)
        return cls_total, mask_total

    def compute_losses(self, frame0: FrameSample, frame1: FrameSample, rng: Rng) -> Tuple[TrainStepRecord, Tensor]:
        model, weights = self.model, self.weights
        match_rng0, loss_rng0, aug_rng, track_rng, match_rng1, loss_rng1 = rng.split(6)
        ids0, classes0, masks0 = _ground_truth(frame0)
        ids1, classes1, masks1 = _ground_truth(frame1)
        index1 = {iid: g for g, iid in enumerate(ids1)}

        # step 1: static queries on x0
        pred0 = model.forward_frame(frame0.image, model.query_set())
        num_static = pred0.num_static
        background = pred0.background_index
        cost0 = match_cost_matrix(pred0.class_probs, pred0.mask_logits, classes0, masks0, weights, match_rng0)
        assign0 = hungarian(cost0)
        targets0 = [background] * num_static
        for p, g in assign0.pairs:
            targets0[p] = int(classes0[g])
        cls0, msk0 = self._supervise(
            pred0, list(range(num_static)), targets0, [(p, masks0[g]) for p, g in assign0.pairs], loss_rng0
        )

        # step 2: id-locked track queries on x1
        matched = extract_track_queries(
            pred0,
            [p for p, _ in assign0.pairs],
            [ids0[g] for _, g in assign0.pairs],
            [int(classes0[g]) for _, g in assign0.pairs],
        )
        spare = extract_track_queries(
            pred0,
            assign0.unmatched_predictions,
            [-(k + 1) for k in range(len(assign0.unmatched_predictions))],
        )
        aug = augment_tracks(matched, set(ids1), spare, self.config.p_fn, self.config.p_fp, aug_rng)
        pred1 = model.forward_frame(frame1.image, model.query_set(aug.queries))
        track_rows = [num_static + k for k in range(len(aug.queries))]
        track_classes = [int(classes1[index1[t]]) if t is not None else background for t in aug.targets]
        track_masks = [(num_static + k, masks1[index1[t]]) for k, t in enumerate(aug.targets) if t is not None]
        cls_tr, msk_tr = self._supervise(pred1, track_rows, track_classes, track_masks, track_rng)

        # step 3: remaining x1 instances go to the static queries
        covered = {t for t in aug.targets if t is not None}
        new = [g for g, iid in enumerate(ids1) if iid not in covered]
        targets1 = [background] * num_static
        mask_pairs1: List[Tuple[int, np.ndarray]] = []
        unassigned = 0
        if new:
            static_probs = pred1.class_probs.data[:num_static]
            static_masks = pred1.mask_logits.data[:num_static]
            cost1 = match_cost_matrix(static_probs, static_masks, classes1[new], masks1[new], weights, match_rng1)
            assign1 = greedy_assign(cost1.T)
            for p, r in assign1.pairs:
                targets1[p] = int(classes1[new[r]])
                mask_pairs1.append((p, masks1[new[r]]))
            unassigned = assign1.deficit
        cls1, msk1 = self._supervise(pred1, list(range(num_static)), targets1, mask_pairs1, loss_rng1)

        parts = [cls0, cls_tr, cls1, msk0, msk_tr, msk1]
        values = [p.item() for p in parts]
        record = TrainStepRecord(
            iteration=self.iteration,
            cls_x0=values[0],
            cls_track=values[1],
            cls_x1=values[2],
            mask_x0=values[3],
            mask_track=values[4],
            mask_x1=values[5],
            total=float(combined_loss(*values, weights)) if all(np.isfinite(values)) else float("nan"),
            gt_x0=len(ids0),
            gt_x1=len(ids1),
            tracks_carried=len(aug.queries) - aug.injected,
            fn_dropped=aug.dropped,
            fp_injected=aug.injected,
            track_background=sum(t is None for t in aug.targets),
            new_instances=len(new),
            unassigned_instances=unassigned,
            frames=(frame0.index, frame1.index),
        )
        if not all(np.isfinite(values)):
            return record, None
        return record, combined_loss(*parts, weights)

    def train_step(self, frame0: FrameSample, frame1: FrameSample, rng: Rng) -> TrainStepRecord:
        record, loss = self.compute_losses(frame0, frame1, rng)
        if loss is None:
            raise TrainingError(f"non-finite loss at iteration {record.iteration}", record)
        backward(loss * (1.0 / self.config.batch_size))
        self.iteration += 1
        self.pending += 1
        if self.pending == self.config.batch_size:
            self._apply()
        return record

    def flush(self) -> bool:
        """Apply gradients left over from a partial batch. Returns whether a step was taken."""
        if not self.pending:
            return False
        logger.debug(f"Applying a partial batch of {self.pending}/{self.config.batch_size} pairs")
        self._apply()
        return True

    def _apply(self):
        self.optimizer.step(self.current_lr())
        self.optimizer.zero_grad()
        self.pending = 0


@dataclass
class TrainResult:
    model: Segmenter
    records: List[TrainStepRecord]
    checkpoints: List[Path]


def train(
    videos: Sequence[VideoSample],
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    model: Optional[Segmenter] = None,
) -> TrainResult:
    """Run the full loop. Writes loss_log.jsonl and one checkpoint per epoch when out_dir is set."""
    if not videos:
        raise ValueError("cannot train on an empty dataset")
    root = Rng(config.seed)
    model = model if model is not None else Segmenter(config.model, root.fold(0))
    trainer = Trainer(model, config)
    logger.info(
        f"Training {model.parameter_count():,} parameters on {len(videos)} videos "
        f"({config.epochs} epochs x {config.pairs_per_video} pairs/video)"
    )

    log_file = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / LOSS_LOG_NAME).open("w")

    records: List[TrainStepRecord] = []
    checkpoints: List[Path] = []
    try:
        step = 0
        for epoch in range(config.epochs):
            epoch_rng = root.fold(1).fold(epoch)
            order = epoch_rng.fold(0).permutation(len(videos))
            epoch_losses = []
            for _ in range(config.pairs_per_video):
                for vi in order:
                    video = videos[int(vi)]
                    pair_rng, step_rng = root.fold(2).fold(step).split(2)
                    t0, t1 = sample_pair(video.length, config.pair_range, pair_rng)
                    try:
                        record = trainer.train_step(video.frame(t0), video.frame(t1), step_rng)
                    except TrainingError as exc:
                        if exc.record is not None:
                            exc.record.video_id = video.video_id
                        logger.error(f"{exc} (video {video.video_id}, frames {t0}->{t1})")
                        raise
                    record.video_id = video.video_id
                    records.append(record)
                    epoch_losses.append(record.total)
                    if log_file is not None:
                        log_file.write(json.dumps(record.to_dict()) + "\n")
                    step += 1
            trainer.flush()
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {np.mean(epoch_losses):.4f}")
            if out is not None:
                log_file.flush()
                checkpoints.append(save_checkpoint(model, out / "checkpoints" / f"epoch_{epoch + 1:03d}.rvis"))
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, records, checkpoints)
