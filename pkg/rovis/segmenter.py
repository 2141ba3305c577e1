"""The miniature query-based video segmenter.

Pipeline per frame: conv backbone -> top-down pixel decoder -> transformer
decoder over [static queries ; track queries] with masked cross-attention ->
per-layer class and mask heads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import MLP, Conv2d, LayerNorm, Linear, Module
from .rng import Rng
from .tensor import (
    Parameter,
    Tensor,
    bilinear_resize,
    broadcast_to,
    concat,
    gather,
    gelu,
    masked_fill,
    matmul,
    reshape,
    resize_array,
    softmax,
    transpose,
)

MIN_FRAME_SIDE = 32


@dataclass
class ModelConfig:
    num_static_queries: int = 32
    embed_dim: int = 32
    num_decoder_layers: int = 3
    num_attention_heads: int = 4
    num_classes: int = 3
    pixel_decoder_levels: int = 3
    mask_feature_stride: int = 4
    input_resize_shorter_side: Optional[int] = None
    backbone_channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32])
    ffn_dim: int = 64
    mask_head_layers: int = 3

    def __post_init__(self):
        if self.num_static_queries < 1:
            raise ConfigError(f"num_static_queries must be >= 1, got {self.num_static_queries}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.embed_dim < 1 or self.num_attention_heads < 1 or self.embed_dim % self.num_attention_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_attention_heads {self.num_attention_heads}"
            )
        if self.num_decoder_layers < 1:
            raise ConfigError(f"num_decoder_layers must be >= 1, got {self.num_decoder_layers}")
        blocks = len(self.backbone_channels)
        if not 1 <= self.pixel_decoder_levels <= blocks:
            raise ConfigError(f"pixel_decoder_levels must be in [1, {blocks}], got {self.pixel_decoder_levels}")
        finest = 2 ** (blocks - self.pixel_decoder_levels + 1)
        if self.mask_feature_stride != finest:
            raise ConfigError(
                f"mask_feature_stride {self.mask_feature_stride} does not match the finest decoder level (stride {finest})"
            )
        if self.input_resize_shorter_side is not None and self.input_resize_shorter_side < MIN_FRAME_SIDE:
            raise ConfigError(f"input_resize_shorter_side must be >= {MIN_FRAME_SIDE}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"Unknown model config keys: {unknown}")
        return cls(**data)


@dataclass
class QueryState:
    """A track carried between frames. slot is the static query that spawned it."""

    track_id: int
    embedding: Tensor
    slot: int
    inactive_frames: int = 0
    last_score: float = 0.0
    category: Optional[object] = None


@dataclass
class QuerySet:
    static_embeddings: Tensor
    static_pos_embeddings: Tensor
    track_entries: List[QueryState] = field(default_factory=list)

    def __post_init__(self):
        ids = [entry.track_id for entry in self.track_entries]
        if len(ids) != len(set(ids)):
            raise ValueError(f"track entries carry duplicate ids: {ids}")

    @property
    def num_static(self) -> int:
        return self.static_embeddings.shape[0]

    def __len__(self) -> int:
        return self.num_static + len(self.track_entries)


@dataclass
class LayerPrediction:
    class_probs: Tensor
    mask_logits: Tensor


@dataclass
class FramePrediction:
    """Rows 0..num_static-1 are static queries, the rest follow track_entries order."""

    class_probs: Tensor
    mask_logits: Tensor
    embeddings: Tensor
    num_static: int
    slots: List[int]
    track_ids: List[Optional[int]]
    layers: List[LayerPrediction]

    @property
    def num_rows(self) -> int:
        return self.class_probs.shape[0]

    @property
    def background_index(self) -> int:
        return self.class_probs.shape[1] - 1


@lru_cache(maxsize=32)
def sine_position_encoding(height: int, width: int, dim: int) -> np.ndarray:
    """Normalised 2-D sine/cosine encoding, shape (height*width, dim)."""
    half = dim // 2
    y = (np.arange(1, height + 1) / (height + 1e-6)) * 2 * np.pi
    x = (np.arange(1, width + 1) / (width + 1e-6)) * 2 * np.pi
    freqs = 10000.0 ** (2 * (np.arange(half) // 2) / half)

    def encode(coord):
        scaled = coord[:, None] / freqs
        out = np.empty_like(scaled)
        out[:, 0::2] = np.sin(scaled[:, 0::2])
        out[:, 1::2] = np.cos(scaled[:, 1::2])
        return out

    pos_y = np.repeat(encode(y), width, axis=0)
    pos_x = np.tile(encode(x), (height, 1))
    enc = np.zeros((height * width, dim))
    enc[:, :half] = pos_y
    enc[:, half:2 * half] = pos_x
    enc.setflags(write=False)
    return enc


def with_empty_fallback(attn_mask: np.ndarray) -> np.ndarray:
    """Rows that admit no location attend everywhere instead."""
    allowed = np.asarray(attn_mask, dtype=bool).copy()
    allowed[~allowed.any(axis=-1)] = True
    return allowed


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention on (N, D) projections."""
    nq, dim = q.shape
    nk = k.shape[0]
    if k.shape != (nk, dim) or v.shape != (nk, dim):
        raise ShapeError(f"attend: shape mismatch q={q.shape} k={k.shape} v={v.shape}")
    head_dim = dim // num_heads
    qh = transpose(reshape(q, (nq, num_heads, head_dim)), (1, 0, 2))
    kh = transpose(reshape(k, (nk, num_heads, head_dim)), (1, 2, 0))
    vh = transpose(reshape(v, (nk, num_heads, head_dim)), (1, 0, 2))
    scores = matmul(qh, kh) * (1.0 / np.sqrt(head_dim))
    if allowed is not None:
        if allowed.shape != (nq, nk):
            raise ShapeError(f"attend: mask shape {allowed.shape} vs scores {(nq, nk)}")
        scores = masked_fill(scores, np.broadcast_to(~allowed, scores.shape), -np.inf)
    weights = softmax(scores, axis=-1)
    return reshape(transpose(matmul(weights, vh), (1, 0, 2)), (nq, dim))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self._num_heads = num_heads

    def forward(self, query: Tensor, key: Tensor, value: Tensor, allowed: Optional[np.ndarray] = None) -> Tensor:
        return self.out_proj(attend(self.q_proj(query), self.k_proj(key), self.v_proj(value), self._num_heads, allowed))


def masked_cross_attention(
    attention: MultiHeadAttention,
    queries: Tensor,
    features: Tensor,
    attn_mask: Optional[np.ndarray],
    query_pos: Optional[Tensor] = None,
    feature_pos: Optional[Tensor] = None,
) -> Tensor:
    """Cross-attention of queries (Q, D) over features (HW, D), restricted to attn_mask (Q, HW)."""
    allowed = None if attn_mask is None else with_empty_fallback(attn_mask)
    q = queries if query_pos is None else queries + query_pos
    k = features if feature_pos is None else features + feature_pos
    return attention(q, k, features, allowed)


class CrossAttentionLayer(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm = LayerNorm(dim)

    def forward(self, tgt, memory, attn_mask, memory_pos, query_pos):
        return self.norm(tgt + masked_cross_attention(self.attn, tgt, memory, attn_mask, query_pos, memory_pos))


class SelfAttentionLayer(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm = LayerNorm(dim)

    def forward(self, tgt: Tensor, query_pos: Tensor) -> Tensor:
        qk = tgt + query_pos
        return self.norm(tgt + self.attn(qk, qk, tgt))


class FFNLayer(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.linear1 = Linear(dim, hidden, rng)
        self.linear2 = Linear(hidden, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, tgt: Tensor) -> Tensor:
        return self.norm(tgt + self.linear2(gelu(self.linear1(tgt))))


class PredictionHead(Module):
    """Class distribution and low-resolution mask logits from query embeddings."""

    def __init__(self, dim: int, num_classes: int, mask_layers: int, rng: Rng):
        self.norm = LayerNorm(dim)
        self.class_head = Linear(dim, num_classes + 1, rng)
        self.mask_embed = MLP(dim, dim, dim, mask_layers, rng)

    def forward(self, queries: Tensor, mask_features: Tensor, feature_size) -> LayerPrediction:
        decoded = self.norm(queries)
        probs = softmax(self.class_head(decoded), axis=-1)
        logits = mask_logits_from_embedding(self.mask_embed(decoded), mask_features)
        return LayerPrediction(probs, reshape(logits, (queries.shape[0],) + tuple(feature_size)))


def mask_logits_from_embedding(mask_embedding: Tensor, mask_features: Tensor) -> Tensor:
    """Pixel-wise dot product of (Q, D) embeddings with (D, HW) features."""
    return matmul(mask_embedding, mask_features)


class Backbone(Module):
    """Stride-2 3x3 conv blocks; returns every block's output."""

    def __init__(self, channels: Sequence[int], rng: Rng):
        dims = [3] + list(channels)
        self.blocks = [Conv2d(dims[i], dims[i + 1], 3, rng, stride=2, padding=1) for i in range(len(channels))]

    def forward(self, x: Tensor) -> List[Tensor]:
        outs = []
        for block in self.blocks:
            x = gelu(block(x))
            outs.append(x)
        return outs


class PixelDecoder(Module):
    """Lateral 1x1 convs with top-down bilinear upsampling."""

    def __init__(self, in_channels: Sequence[int], dim: int, rng: Rng):
        self.lateral = [Conv2d(c, dim, 1, rng) for c in in_channels]
        self.output = [Conv2d(dim, dim, 3, rng, padding=1) for _ in in_channels]
        self.mask_proj = Conv2d(dim, dim, 1, rng)

    def forward(self, features: Sequence[Tensor]):
        """features ordered fine to coarse. Returns (levels coarse to fine, mask features)."""
        levels = []
        top = None
        for i in reversed(range(len(features))):
            lat = self.lateral[i](features[i])
            if top is not None:
                lat = lat + bilinear_resize(top, lat.shape[-2:])
            top = lat
            levels.append(gelu(self.output[i](lat)))
        return levels, self.mask_proj(levels[-1])


def _flatten(feature: Tensor) -> Tensor:
    """(1, D, h, w) -> (h*w, D)."""
    _, dim, h, w = feature.shape
    return transpose(reshape(feature, (dim, h * w)), (1, 0))


class Segmenter(Module):
    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        dim = config.embed_dim
        self.backbone = Backbone(config.backbone_channels, rng)
        used = config.backbone_channels[-config.pixel_decoder_levels:]
        self.pixel_decoder = PixelDecoder(used, dim, rng)
        self.level_embed = Parameter(rng.normal(0.0, 0.02, (config.pixel_decoder_levels, dim)))
        self.static_embeddings = Parameter(rng.normal(0.0, 1.0, (config.num_static_queries, dim)))
        self.static_pos_embeddings = Parameter(rng.normal(0.0, 1.0, (config.num_static_queries, dim)))
        self.cross_layers = [CrossAttentionLayer(dim, config.num_attention_heads, rng) for _ in range(config.num_decoder_layers)]
        self.self_layers = [SelfAttentionLayer(dim, config.num_attention_heads, rng) for _ in range(config.num_decoder_layers)]
        self.ffn_layers = [FFNLayer(dim, config.ffn_dim, rng) for _ in range(config.num_decoder_layers)]
        self.heads = [
            PredictionHead(dim, config.num_classes, config.mask_head_layers, rng)
            for _ in range(config.num_decoder_layers + 1)
        ]

    def query_set(self, tracks: Sequence[QueryState] = ()) -> QuerySet:
        return QuerySet(self.static_embeddings, self.static_pos_embeddings, list(tracks))

    def _prepare_image(self, image: np.ndarray) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"forward_frame: expected an H x W x 3 image, got {image.shape}")
        h, w = image.shape[:2]
        if h < MIN_FRAME_SIDE or w < MIN_FRAME_SIDE:
            raise ShapeError(f"forward_frame: image {h}x{w} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")
        x = Tensor(image.transpose(2, 0, 1)[None])
        target = self.config.input_resize_shorter_side
        if target is not None and min(h, w) != target:
            scale = target / min(h, w)
            x = bilinear_resize(x, (max(MIN_FRAME_SIDE, round(h * scale)), max(MIN_FRAME_SIDE, round(w * scale))))
        return x

    def _decoder_inputs(self, queries: QuerySet):
        dim = self.config.embed_dim
        if queries.static_embeddings.shape != queries.static_pos_embeddings.shape or (
            queries.num_static and queries.static_embeddings.shape[1] != dim
        ):
            raise ShapeError(
                f"forward_frame: static query shape {queries.static_embeddings.shape} does not match embed_dim {dim}"
            )
        rows = [queries.static_embeddings]
        pos = [queries.static_pos_embeddings]
        for entry in queries.track_entries:
            if entry.embedding.shape not in ((dim,), (1, dim)):
                raise ShapeError(
                    f"forward_frame: track {entry.track_id} embedding shape {entry.embedding.shape} vs embed_dim {dim}"
                )
            rows.append(reshape(entry.embedding, (1, dim)))
        if queries.track_entries:
            pos.append(gather(self.static_pos_embeddings, [e.slot for e in queries.track_entries], axis=0))
        if len(queries) == 0:
            raise ShapeError("forward_frame: no queries given")
        return concat(rows, axis=0), concat(pos, axis=0)

    def forward_frame(self, image: np.ndarray, queries: QuerySet) -> FramePrediction:
        height, width = np.asarray(image).shape[:2]
        x = self._prepare_image(image)
        tgt, query_pos = self._decoder_inputs(queries)
        dim = self.config.embed_dim

        levels, mask_map = self.pixel_decoder(self.backbone(x)[-self.config.pixel_decoder_levels:])
        memories, memory_pos, level_sizes = [], [], []
        for i, level in enumerate(levels):
            h, w = level.shape[-2:]
            level_bias = broadcast_to(gather(self.level_embed, [i], axis=0), (h * w, dim))
            memories.append(_flatten(level) + level_bias)
            memory_pos.append(Tensor(sine_position_encoding(h, w, dim)))
            level_sizes.append((h, w))
        feature_size = mask_map.shape[-2:]
        mask_features = reshape(mask_map, (dim, feature_size[0] * feature_size[1]))

        def attention_mask(pred: LayerPrediction, level: int) -> np.ndarray:
            h, w = level_sizes[level]
            resized = resize_array(pred.mask_logits.data, (h, w))
            return resized.reshape(resized.shape[0], h * w) >= 0.0

        layer_preds = [self.heads[0](tgt, mask_features, feature_size)]
        for i in range(self.config.num_decoder_layers):
            level = i % len(levels)
            mask = attention_mask(layer_preds[-1], level)
            tgt = self.cross_layers[i](tgt, memories[level], mask, memory_pos[level], query_pos)
            tgt = self.self_layers[i](tgt, query_pos)
            tgt = self.ffn_layers[i](tgt)
            layer_preds.append(self.heads[i + 1](tgt, mask_features, feature_size))

        layers = [LayerPrediction(p.class_probs, bilinear_resize(p.mask_logits, (height, width))) for p in layer_preds]
        num_static = queries.num_static
        return FramePrediction(
            class_probs=layers[-1].class_probs,
            mask_logits=layers[-1].mask_logits,
            embeddings=tgt,
            num_static=num_static,
            slots=list(range(num_static)) + [e.slot for e in queries.track_entries],
            track_ids=[None] * num_static + [e.track_id for e in queries.track_entries],
            layers=layers,
        )

    def forward(self, image: np.ndarray, queries: Optional[QuerySet] = None) -> FramePrediction:
        return self.forward_frame(image, queries if queries is not None else self.query_set())


def extract_track_queries(
    pred: FramePrediction,
    selection: Sequence[int],
    track_ids: Sequence[int],
    categories: Optional[Sequence[object]] = None,
) -> List[QueryState]:
    """Turn selected output rows into track queries for the next frame."""
    selection = [int(i) for i in selection]
    if len(selection) != len(set(selection)):
        raise ValueError(f"duplicate query indices in selection: {selection}")
    if len(track_ids) != len(selection):
        raise ValueError(f"{len(selection)} rows selected but {len(track_ids)} track ids given")
    for i in selection:
        if not 0 <= i < pred.num_rows:
            raise IndexError(f"query index {i} out of range for {pred.num_rows} rows")
    probs = pred.class_probs.data
    background = pred.background_index
    out = []
    for k, (row, track_id) in enumerate(zip(selection, track_ids)):
        embedding = reshape(gather(pred.embeddings, [row], axis=0), (pred.embeddings.shape[1],))
        category = categories[k] if categories is not None else int(np.argmax(probs[row, :background]))
        out.append(
            QueryState(
                track_id=int(track_id),
                embedding=embedding,
                slot=pred.slots[row],
                last_score=float(probs[row, :background].max()),
                category=category,
            )
        )
    return out


def parameter_groups(model: Segmenter) -> Dict[str, List[str]]:
    """Parameter names bucketed into backbone / queries / rest."""
    groups: Dict[str, List[str]] = {"backbone": [], "queries": [], "other": []}
    for name, _ in model.named_parameters():
        if name.startswith("backbone."):
            groups["backbone"].append(name)
        elif name.startswith("static_"):
            groups["queries"].append(name)
        else:
            groups["other"].append(name)
    return groups
