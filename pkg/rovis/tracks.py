"""Track results and their per-video JSON files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import FormatError
from .rle import rle_decode, rle_encode

RESULTS_VERSION = 1
AGNOSTIC_CATEGORY = "object"

Category = Union[int, str]


@dataclass
class TrackResult:
    track_id: int
    category: Category
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    scores: Dict[int, float] = field(default_factory=dict)
    source_slot: Optional[int] = None

    def add(self, frame: int, mask: np.ndarray, score: float = 1.0) -> None:
        if self.masks and frame <= max(self.masks):
            raise ValueError(f"track {self.track_id}: frame {frame} is not after {max(self.masks)}")
        self.masks[frame] = np.asarray(mask, dtype=bool)
        self.scores[frame] = float(score)

    @property
    def frames(self) -> List[int]:
        return sorted(self.masks)

    @property
    def score(self) -> float:
        if not self.scores:
            return 0.0
        return float(np.mean([self.scores[t] for t in self.frames]))

    def restricted(self, last_frame: int) -> Optional["TrackResult"]:
        """Entries up to and including last_frame, or None if nothing remains."""
        kept = [t for t in self.frames if t <= last_frame]
        if not kept:
            return None
        return TrackResult(
            self.track_id,
            self.category,
            {t: self.masks[t] for t in kept},
            {t: self.scores[t] for t in kept},
            self.source_slot,
        )

    def to_json(self) -> dict:
        return {
            "track_id": int(self.track_id),
            "category": self.category,
            "score": self.score,
            "source_slot": self.source_slot,
            "frames": [
                {"frame": int(t), "score": float(self.scores[t]), "counts": rle_encode(self.masks[t])}
                for t in self.frames
            ],
        }

    @classmethod
    def from_json(cls, data: dict, height: int, width: int) -> "TrackResult":
        track = cls(int(data["track_id"]), data["category"], source_slot=data.get("source_slot"))
        for entry in data["frames"]:
            track.add(int(entry["frame"]), rle_decode(entry["counts"], height, width), float(entry["score"]))
        return track


@dataclass
class VideoResults:
    video_id: str
    height: int
    width: int
    length: int
    tracks: List[TrackResult]

    def to_json(self) -> dict:
        return {
            "version": RESULTS_VERSION,
            "video_id": self.video_id,
            "height": self.height,
            "width": self.width,
            "length": self.length,
            "tracks": [t.to_json() for t in sorted(self.tracks, key=lambda t: t.track_id)],
        }


def save_results(results: VideoResults, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results.to_json(), indent=1))
    return path


def load_results(path: Union[str, Path]) -> VideoResults:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"results file not found: {path}")
    try:
        data = json.loads(path.read_text())
        if data.get("version") != RESULTS_VERSION:
            raise FormatError(f"{path}: results version {data.get('version')}, expected {RESULTS_VERSION}")
        h, w = int(data["height"]), int(data["width"])
        tracks = [TrackResult.from_json(t, h, w) for t in data["tracks"]]
        return VideoResults(data["video_id"], h, w, int(data["length"]), tracks)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed results file ({exc})") from exc


def results_dir_entries(directory: Union[str, Path]) -> List[Tuple[str, Path]]:
    """(video_id, path) for every results file under directory, sorted by video id."""
    directory = Path(directory)
    if (directory / "results").is_dir():
        directory = directory / "results"
    if not directory.is_dir():
        raise FormatError(f"prediction directory not found: {directory}")
    skip = {"run_manifest.json", "eval_report.json", "query_firing.json"}
    return sorted((p.stem, p) for p in directory.glob("*.json") if p.name not in skip)
