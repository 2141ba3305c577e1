"""Synthetic moving-shapes videos with scripted occlusion, gaps and crowding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .rng import Rng
from .tracks import AGNOSTIC_CATEGORY, TrackResult

SHAPES = ("disc", "rectangle", "blob")
CATEGORY_NAMES = list(SHAPES)
BENCHMARKS = ("occlusion", "crowding", "reappear", "mixed")
DATASET_VERSION = 1


@dataclass
class Keyframe:
    t: float
    x: float
    y: float
    size: float


@dataclass
class ObjectScript:
    """One object's trajectory. size is the radius (half-height for rectangles)."""

    instance_id: int
    shape: str
    keyframes: List[Keyframe]
    depth: int
    visible: List[Tuple[int, int]]
    color: Tuple[float, float, float]
    category: Optional[int] = None
    aspect: float = 1.0
    deform: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.category is None:
            self.category = SHAPES.index(self.shape)
        if not self.keyframes:
            raise ValueError(f"object {self.instance_id} has no keyframes")
        self.keyframes = sorted(self.keyframes, key=lambda k: k.t)

    def state_at(self, t: float) -> Tuple[float, float, float]:
        ts = [k.t for k in self.keyframes]
        return (
            float(np.interp(t, ts, [k.x for k in self.keyframes])),
            float(np.interp(t, ts, [k.y for k in self.keyframes])),
            float(np.interp(t, ts, [k.size for k in self.keyframes])),
        )

    def visible_at(self, t: int) -> bool:
        return any(start <= t < end for start, end in self.visible)

    def extent(self) -> float:
        """Largest half-extent the object can reach."""
        size = max(k.size for k in self.keyframes)
        if self.shape == "rectangle":
            return size * max(1.0, self.aspect * (1.0 + self.deform))
        if self.shape == "blob":
            return size * (1.2 + self.deform)
        return size


@dataclass
class SceneScript:
    length: int
    height: int
    width: int
    objects: List[ObjectScript]
    background: Tuple[float, float, float] = (0.45, 0.45, 0.5)
    color_jitter: float = 0.03
    texture: float = 0.02
    kind: str = "custom"

    def __post_init__(self):
        if self.length < 2:
            raise ValueError(f"video length must be >= 2, got {self.length}")
        if self.height < 32 or self.width < 32:
            raise ValueError(f"canvas must be at least 32x32, got {self.height}x{self.width}")
        ids = [o.instance_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate instance ids: {ids}")
        for obj in self.objects:
            spans = sorted(obj.visible)
            for start, end in spans:
                if not 0 <= start < end <= self.length:
                    raise ValueError(f"object {obj.instance_id}: interval [{start}, {end}) outside [0, {self.length})")
            for (_, end), (start, _) in zip(spans, spans[1:]):
                if start < end:
                    raise ValueError(f"object {obj.instance_id}: overlapping visibility intervals")
            if 2 * obj.extent() > min(self.height, self.width):
                raise ValueError(f"object {obj.instance_id} is larger than the {self.height}x{self.width} canvas")


@dataclass
class Instance:
    instance_id: int
    category: int
    mask: np.ndarray


@dataclass
class FrameSample:
    index: int
    image: np.ndarray
    instances: Optional[List[Instance]]


@dataclass
class VideoSample:
    video_id: str
    frames: List[np.ndarray]
    annotations: List[List[Instance]]
    kind: str = "custom"
    amodal: List[Dict[int, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    def frame(self, t: int) -> FrameSample:
        annotations = self.annotations[t] if t < len(self.annotations) else None
        return FrameSample(t, self.frames[t], annotations)

    def truncated(self, length: int) -> "VideoSample":
        return VideoSample(self.video_id, self.frames[:length], self.annotations[:length], self.kind, self.amodal[:length])

    def gt_tracks(self, category_agnostic: bool = False) -> List[TrackResult]:
        tracks: Dict[int, TrackResult] = {}
        for t, instances in enumerate(self.annotations):
            for inst in instances:
                if inst.instance_id not in tracks:
                    category = AGNOSTIC_CATEGORY if category_agnostic else inst.category
                    tracks[inst.instance_id] = TrackResult(inst.instance_id, category)
                tracks[inst.instance_id].add(t, inst.mask, 1.0)
        return [tracks[k] for k in sorted(tracks)]


@dataclass
class Dataset:
    name: str
    videos: List[VideoSample]
    splits: Dict[str, List[str]] = field(default_factory=dict)
    categories: List[str] = field(default_factory=lambda: list(CATEGORY_NAMES))
    version: int = DATASET_VERSION

    def by_id(self) -> Dict[str, VideoSample]:
        return {v.video_id: v for v in self.videos}

    def split(self, name: str) -> List[VideoSample]:
        if name == "all":
            return list(self.videos)
        if name not in self.splits:
            raise KeyError(f"dataset {self.name!r} has no split {name!r}; available: {sorted(self.splits)}")
        lookup = self.by_id()
        return [lookup[v] for v in self.splits[name]]


def rasterize(obj: ObjectScript, t: int, height: int, width: int) -> np.ndarray:
    """Amodal mask of obj at frame t."""
    x, y, size = obj.state_at(t)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    dx, dy = xx - x, yy - y
    wobble = np.sin(0.7 * t + obj.phase)
    if obj.shape == "disc":
        return dx * dx + dy * dy <= size * size
    if obj.shape == "rectangle":
        half_w = size * obj.aspect * (1.0 + obj.deform * wobble)
        return (np.abs(dx) <= half_w) & (np.abs(dy) <= size)
    angle = np.arctan2(dy, dx)
    radius = size * (1.0 + (0.2 + obj.deform * wobble) * np.sin(3.0 * angle + obj.phase))
    return dx * dx + dy * dy <= radius * radius


def generate(script: SceneScript, rng: Rng, video_id: str = "video") -> VideoSample:
    """Render modal masks and frames; deeper objects (higher depth) are drawn in front."""
    h, w = script.height, script.width
    texture = rng.normal(0.0, script.texture, (h, w, 3))
    order = sorted(script.objects, key=lambda o: (o.depth, o.instance_id))
    frames, annotations, amodal = [], [], []
    for t in range(script.length):
        owner = np.full((h, w), -1, dtype=np.int64)
        amodal_t = {}
        for obj in order:
            if obj.visible_at(t):
                mask = rasterize(obj, t, h, w)
                amodal_t[obj.instance_id] = mask
                owner[mask] = obj.instance_id
        image = np.asarray(script.background, dtype=np.float64)[None, None, :] + texture
        instances = []
        for obj in sorted(script.objects, key=lambda o: o.instance_id):
            jitter = rng.normal(0.0, script.color_jitter, 3)
            modal = owner == obj.instance_id
            if modal.any():
                image[modal] = np.clip(np.asarray(obj.color) + jitter, 0.0, 1.0)
                instances.append(Instance(obj.instance_id, int(obj.category), modal))
        frames.append(np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0)
        annotations.append(instances)
        amodal.append(amodal_t)
    return VideoSample(video_id, frames, annotations, script.kind, amodal)


def _color(rng: Rng) -> Tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))


def _shape(rng: Rng) -> str:
    return SHAPES[rng.integers(0, len(SHAPES))]


def _occlusion_script(rng: Rng, length: int, height: int, width: int) -> List[ObjectScript]:
    pairs = rng.integers(1, 3)
    objects = []
    for p in range(pairs):
        y = height * (p + 1) / (pairs + 1) + rng.uniform(-2.0, 2.0)
        margin = 10.0
        for side in range(2):
            size = rng.uniform(5.0, 8.0)
            start, end = (margin, width - margin) if side == 0 else (width - margin, margin)
            objects.append(
                ObjectScript(
                    instance_id=len(objects) + 1,
                    shape=_shape(rng),
                    keyframes=[
                        Keyframe(0, start, y + rng.uniform(-1.5, 1.5), size),
                        Keyframe(length - 1, end, y + rng.uniform(-1.5, 1.5), size),
                    ],
                    depth=side + 2 * p,
                    visible=[(0, length)],
                    color=_color(rng),
                    aspect=rng.uniform(0.8, 1.2),
                    deform=rng.uniform(0.0, 0.1),
                    phase=rng.uniform(0.0, 2 * np.pi),
                )
            )
    return objects


def _reappear_script(rng: Rng, length: int, height: int, width: int) -> List[ObjectScript]:
    count = rng.integers(2, 4)
    objects = []
    for i in range(count):
        size = rng.uniform(5.0, 7.5)
        lo, hi = size + 3.0, min(height, width) - size - 3.0
        visible = [(0, length)]
        if i == 0:
            gap = rng.integers(2, 9)
            gap = min(gap, length - 2)
            start = rng.integers(1, length - gap)
            visible = [(0, start), (start + gap, length)]
        objects.append(
            ObjectScript(
                instance_id=i + 1,
                shape=_shape(rng),
                keyframes=[
                    Keyframe(0, rng.uniform(lo, hi), rng.uniform(lo, hi), size),
                    Keyframe(length - 1, rng.uniform(lo, hi), rng.uniform(lo, hi), size),
                ],
                # the gapped object is frontmost so it is never fully occluded
                depth=count - i,
                visible=visible,
                color=_color(rng),
                aspect=rng.uniform(0.8, 1.2),
                deform=rng.uniform(0.0, 0.1),
                phase=rng.uniform(0.0, 2 * np.pi),
            )
        )
    return objects


def _crowding_script(rng: Rng, length: int, height: int, width: int) -> List[ObjectScript]:
    cell = 16.0
    rows, cols = int(height // cell), int(width // cell)
    count = min(rng.integers(6, 13), rows * cols)
    cells = rng.choice(rows * cols, size=count, replace=False)
    objects = []
    for i, c in enumerate(cells):
        cy, cx = (int(c) // cols + 0.5) * cell, (int(c) % cols + 0.5) * cell
        size = rng.uniform(3.0, 4.5)
        shape = _shape(rng)
        objects.append(
            ObjectScript(
                instance_id=i + 1,
                shape=shape,
                keyframes=[
                    Keyframe(0, cx + rng.uniform(-2, 2), cy + rng.uniform(-2, 2), size),
                    Keyframe(length - 1, cx + rng.uniform(-2, 2), cy + rng.uniform(-2, 2), size),
                ],
                depth=i,
                visible=[(0, length)],
                color=_color(rng),
                aspect=rng.uniform(0.9, 1.2) if shape == "rectangle" else 1.0,
                deform=0.0,
                phase=rng.uniform(0.0, 2 * np.pi),
            )
        )
    return objects


_SCRIPTS = {
    "occlusion": _occlusion_script,
    "reappear": _reappear_script,
    "crowding": _crowding_script,
}


def random_script(kind: str, rng: Rng, length: int = 16, height: int = 64, width: int = 64) -> SceneScript:
    if kind not in _SCRIPTS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {sorted(_SCRIPTS)}")
    objects = _SCRIPTS[kind](rng, length, height, width)
    return SceneScript(length, height, width, objects, kind=kind)


def make_benchmark(
    name: str,
    seed: int,
    size: int,
    length: int = 16,
    height: int = 64,
    width: int = 64,
    val_fraction: float = 0.2,
) -> Dataset:
    """Deterministic benchmark suite; the last val_fraction of videos form the val split."""
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {BENCHMARKS}")
    if size < 0:
        raise ValueError(f"size must be >= 0, got {size}")
    root = Rng(seed)
    kinds = ("occlusion", "reappear", "crowding")
    videos = []
    for i in range(size):
        kind = kinds[i % len(kinds)] if name == "mixed" else name
        script_rng, render_rng = root.fold(i).split(2)
        script = random_script(kind, script_rng, length, height, width)
        videos.append(generate(script, render_rng, video_id=f"{name}_{i:04d}"))
    n_val = int(round(size * val_fraction))
    ids = [v.video_id for v in videos]
    splits = {"train": ids[: size - n_val], "val": ids[size - n_val:]}
    logger.info(f"Generated benchmark '{name}' (seed {seed}): {size} videos, {n_val} in val")
    return Dataset(name, videos, splits)
