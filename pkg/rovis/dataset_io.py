"""Dataset directories: manifest.json, PPM frames and RLE annotations.

    <root>/manifest.json
    <root>/videos/<video_id>/frame_0000.ppm ...
    <root>/videos/<video_id>/annotations.json
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np
from loguru import logger
from PIL import Image

from .errors import FormatError
from .rle import rle_decode, rle_encode
from .synthdata import DATASET_VERSION, Dataset, Instance, VideoSample

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.json"


def frame_name(t: int) -> str:
    return f"frame_{t:04d}.ppm"


def write_ppm(image: np.ndarray, path: Path) -> None:
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_ppm(path: Path) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing frame file: {path}")
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise FormatError(f"unreadable frame file: {path} ({exc})") from exc
    return pixels.astype(np.float64) / 255.0


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise FormatError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON in {path}: {exc}") from exc


def save_video(video: VideoSample, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video.frames):
        write_ppm(frame, directory / frame_name(t))
    payload = {
        "video_id": video.video_id,
        "kind": video.kind,
        "length": video.length,
        "height": video.height,
        "width": video.width,
        "frames": [
            [
                {"instance_id": int(i.instance_id), "category": int(i.category), "counts": rle_encode(i.mask)}
                for i in instances
            ]
            for instances in video.annotations
        ],
    }
    (directory / ANNOTATIONS_NAME).write_text(json.dumps(payload))


def load_video(directory: Path) -> VideoSample:
    meta = _read_json(directory / ANNOTATIONS_NAME)
    try:
        h, w, length = int(meta["height"]), int(meta["width"]), int(meta["length"])
        frames = [read_ppm(directory / frame_name(t)) for t in range(length)]
        annotations = [
            [Instance(int(a["instance_id"]), int(a["category"]), rle_decode(a["counts"], h, w)) for a in entries]
            for entries in meta["frames"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed annotations in {directory / ANNOTATIONS_NAME}: {exc}") from exc
    for t, frame in enumerate(frames):
        if frame.shape != (h, w, 3):
            raise FormatError(f"{directory / frame_name(t)}: size {frame.shape[:2]} != {(h, w)}")
    return VideoSample(meta["video_id"], frames, annotations, meta.get("kind", "custom"))


def save_dataset(dataset: Dataset, root: Union[str, Path]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for video in dataset.videos:
        rel = f"videos/{video.video_id}"
        save_video(video, root / rel)
        entries.append(
            {"video_id": video.video_id, "path": rel, "length": video.length, "height": video.height, "width": video.width}
        )
    manifest = {
        "version": dataset.version,
        "name": dataset.name,
        "categories": list(dataset.categories),
        "splits": dataset.splits,
        "videos": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    logger.success(f"Saved dataset '{dataset.name}' ({len(dataset.videos)} videos): {root}")
    return root


def load_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    manifest = _read_json(manifest_path)
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise FormatError(f"{manifest_path}: dataset version {version!r}, expected {DATASET_VERSION}")
    try:
        videos = [load_video(root / entry["path"]) for entry in manifest["videos"]]
        dataset = Dataset(
            name=manifest["name"],
            videos=videos,
            splits={k: list(v) for k, v in manifest.get("splits", {}).items()},
            categories=list(manifest["categories"]),
            version=version,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    logger.info(f"Loaded dataset '{dataset.name}' ({len(videos)} videos) from {root}")
    return dataset
