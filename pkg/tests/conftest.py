"""Shared fixtures: tiny models, scripted stubs and finite differences."""

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from rovis.rng import Rng
from rovis.segmenter import FramePrediction, LayerPrediction, ModelConfig, QuerySet, QueryState, Segmenter
from rovis.tensor import Tensor, backward


def tiny_config(**overrides) -> ModelConfig:
    params = dict(
        num_static_queries=4,
        embed_dim=8,
        num_decoder_layers=2,
        num_attention_heads=2,
        num_classes=3,
        backbone_channels=[4, 8, 8, 8],
        ffn_dim=16,
        mask_head_layers=2,
    )
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def tiny_model() -> Segmenter:
    return Segmenter(tiny_config(), Rng(3))


@pytest.fixture
def image32() -> np.ndarray:
    return np.round(Rng(11).random((32, 32, 3)) * 255) / 255


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar fn at x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = fn(x)
        x[idx] = old - eps
        minus = fn(x)
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(build, *arrays, tol: float = 1e-4):
    """build(*tensors) -> scalar Tensor. Compares autodiff against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*tensors))
    for i, (a, t) in enumerate(zip(arrays, tensors)):
        def fn(x, i=i):
            args = [Tensor(arr) for arr in arrays]
            args[i] = Tensor(x)
            return build(*args).item()

        expected = numeric_grad(fn, a.copy())
        scale = np.maximum(np.abs(expected), 1.0)
        assert np.max(np.abs(t.grad - expected) / scale) < tol, f"input {i}"


@dataclass
class ScriptedObject:
    """instance id -> frames in which the detector sees it."""

    instance_id: int
    visible: Sequence[int]
    category: int = 0


class StubModel:
    """A detector that reads the frame index from the image and reports scripted objects.

    Object k occupies a fixed row band. Embedding column 0 carries the instance id,
    so a track query keeps firing exactly while its instance is visible. Static slot
    k fires for object k only when no track query is following it.
    """

    def __init__(self, objects: List[ScriptedObject], num_static: int = 4, num_classes: int = 3, size: int = 32):
        self.objects = objects
        self.num_static = num_static
        self.num_classes = num_classes
        self.size = size
        self.static = Tensor(np.zeros((num_static, 4)))

    @staticmethod
    def frame(t: int, size: int = 32) -> np.ndarray:
        image = np.zeros((size, size, 3))
        image[0, 0, 0] = t / 255.0
        return image

    def mask_for(self, k: int) -> np.ndarray:
        mask = np.zeros((self.size, self.size), dtype=bool)
        mask[4 * k:4 * k + 3, 2:10] = True
        return mask

    def query_set(self, tracks=()) -> QuerySet:
        return QuerySet(self.static, self.static, list(tracks))

    def forward_frame(self, image: np.ndarray, queries: QuerySet) -> FramePrediction:
        t = int(round(image[0, 0, 0] * 255))
        n = queries.num_static + len(queries.track_entries)
        bg = self.num_classes
        probs = np.full((n, bg + 1), 0.0)
        probs[:, bg] = 1.0
        logits = np.full((n, self.size, self.size), -5.0)
        emb = np.zeros((n, 4))
        followed = {int(e.embedding.data[0]) for e in queries.track_entries}
        by_id: Dict[int, int] = {o.instance_id: k for k, o in enumerate(self.objects)}

        def fire(row, k):
            obj = self.objects[k]
            probs[row] = 0.0
            probs[row, obj.category] = 0.9
            probs[row, bg] = 0.1
            logits[row][self.mask_for(k)] = 5.0
            emb[row, 0] = obj.instance_id

        for j, entry in enumerate(queries.track_entries):
            row = queries.num_static + j
            iid = int(entry.embedding.data[0])
            emb[row, 0] = iid
            if iid in by_id and t in self.objects[by_id[iid]].visible:
                fire(row, by_id[iid])
        for k, obj in enumerate(self.objects[: queries.num_static]):
            if t in obj.visible and obj.instance_id not in followed:
                fire(k, k)
        layer = LayerPrediction(Tensor(probs), Tensor(logits))
        return FramePrediction(
            class_probs=layer.class_probs,
            mask_logits=layer.mask_logits,
            embeddings=Tensor(emb),
            num_static=queries.num_static,
            slots=list(range(queries.num_static)) + [e.slot for e in queries.track_entries],
            track_ids=[None] * queries.num_static + [e.track_id for e in queries.track_entries],
            layers=[layer],
        )


@pytest.fixture
def stub_factory():
    return StubModel


def rect(top: int, bottom: int, size: int = 32) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    mask[top:bottom, 2:10] = True
    return mask


class ScriptedRowsModel:
    """Replays fixed output rows frame by frame.

    script[t] maps ("static", slot) or ("track", track_id) to (mask, score, category).
    The rest of the probability mass is spread evenly over the other columns.
    Rows without an entry predict background with an empty mask.
    """

    def __init__(self, script: Dict[int, Dict[tuple, tuple]], num_static: int = 4, num_classes: int = 3, size: int = 32):
        self.script = script
        self.num_classes = num_classes
        self.size = size
        self.static = Tensor(np.zeros((num_static, 4)))

    def query_set(self, tracks=()) -> QuerySet:
        return QuerySet(self.static, self.static, list(tracks))

    def forward_frame(self, image: np.ndarray, queries: QuerySet) -> FramePrediction:
        t = int(round(image[0, 0, 0] * 255))
        rows = self.script.get(t, {})
        keys = [("static", k) for k in range(queries.num_static)] + [("track", e.track_id) for e in queries.track_entries]
        bg = self.num_classes
        probs = np.zeros((len(keys), bg + 1))
        probs[:, bg] = 1.0
        logits = np.full((len(keys), self.size, self.size), -5.0)
        for row, key in enumerate(keys):
            if key in rows:
                mask, score, category = rows[key]
                probs[row] = (1.0 - score) / bg
                probs[row, category] = score
                logits[row][mask] = 5.0
        layer = LayerPrediction(Tensor(probs), Tensor(logits))
        return FramePrediction(
            class_probs=layer.class_probs,
            mask_logits=layer.mask_logits,
            embeddings=Tensor(np.zeros((len(keys), 4))),
            num_static=queries.num_static,
            slots=list(range(queries.num_static)) + [e.slot for e in queries.track_entries],
            track_ids=[None] * queries.num_static + [e.track_id for e in queries.track_entries],
            layers=[layer],
        )
