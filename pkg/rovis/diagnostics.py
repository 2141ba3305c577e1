"""Which static query slots spawn tracks, and what they spawn."""

from typing import Dict, Mapping, Sequence

import numpy as np

from .tracks import TrackResult


def query_firing_stats(results: Mapping[str, Sequence[TrackResult]]) -> Dict[str, dict]:
    """Per static slot: spawn count, per-category counts, mean spawn centroid (y, x in [0,1]) and area."""
    stats: Dict[int, dict] = {}
    for video_id in sorted(results):
        for track in results[video_id]:
            if track.source_slot is None or not track.masks:
                continue
            first = track.masks[track.frames[0]]
            ys, xs = np.nonzero(first)
            h, w = first.shape
            entry = stats.setdefault(track.source_slot, {"spawned": 0, "categories": {}, "_centroids": [], "_areas": []})
            entry["spawned"] += 1
            key = str(track.category)
            entry["categories"][key] = entry["categories"].get(key, 0) + 1
            if ys.size:
                entry["_centroids"].append(((ys.mean() + 0.5) / h, (xs.mean() + 0.5) / w))
            entry["_areas"].append(float(first.sum()) / (h * w))

    out = {}
    for slot in sorted(stats):
        entry = stats[slot]
        centroids = np.array(entry["_centroids"]) if entry["_centroids"] else np.zeros((0, 2))
        out[str(slot)] = {
            "spawned": entry["spawned"],
            "categories": dict(sorted(entry["categories"].items())),
            "mean_centroid": centroids.mean(axis=0).tolist() if len(centroids) else None,
            "mean_area": float(np.mean(entry["_areas"])),
        }
    return out
