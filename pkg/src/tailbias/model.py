"""Relation classifiers over detected object proposals.

Two models share one interface. The dual-stack encoder builds object tokens
from box geometry, visual features, and a learned label embedding, runs them
through a stack of encoder layers, classifies objects, fuses ordered pairs
with their union-box features, runs a second encoder stack over the pair
tokens, and classifies relations. Every stage has a hand-written backward
pass, so the whole network is certifiable by finite differences. The linear
model is a single affine relation head over the raw fused pair features.

Task modes: ``predcls`` looks up label embeddings with the annotated object
labels; ``sgcls`` uses the argmax of the detector scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numerics import (
    EncoderLayerParams,
    encoder_layer,
    encoder_layer_backward,
    init_encoder_layer_params,
    row_softmax,
    zeros_like_tree,
)
from .stats import LabelSpace

__all__ = [
    "MODES",
    "ObjectProposal",
    "DualEncoderConfig",
    "DualEncoderParams",
    "LinearParams",
    "ModelOutput",
    "box_features",
    "embed_objects",
    "encode_objects",
    "classify_objects",
    "fuse_pairs",
    "encode_relations_and_classify",
    "forward",
    "backward",
    "init_dual_encoder",
    "init_linear",
    "linear_forward",
    "linear_backward",
    "all_ordered_pairs",
]

MODES = ("predcls", "sgcls")


@dataclass(frozen=True)
class ObjectProposal:
    """One detected object: box, visual feature, label, and detector scores."""

    box: tuple[float, float, float, float]
    feature: np.ndarray
    label: int
    scores: np.ndarray

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"degenerate or unnormalized box {self.box}")
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if abs(float(self.scores.sum()) - 1.0) > 1e-6:
            raise ValueError("detector scores must sum to 1")


@dataclass(frozen=True)
class DualEncoderConfig:
    label_space: LabelSpace
    d_model: int = 32
    d_v: int = 16
    d_e: int = 16
    d_pos: int = 16
    n_h: int = 2
    n_o: int = 2
    n_r: int = 1
    d_ff: int = 64

    def __post_init__(self) -> None:
        if self.d_model % self.n_h != 0:
            raise ValueError("d_model must be divisible by n_h")
        if self.n_o < 1 or self.n_r < 1:
            raise ValueError("encoder stacks need at least one layer")

    def to_dict(self) -> dict:
        d = {
            "d_model": self.d_model,
            "d_v": self.d_v,
            "d_e": self.d_e,
            "d_pos": self.d_pos,
            "n_h": self.n_h,
            "n_o": self.n_o,
            "n_r": self.n_r,
            "d_ff": self.d_ff,
        }
        return d

    @classmethod
    def from_dict(cls, label_space: LabelSpace, d: Mapping) -> "DualEncoderConfig":
        return cls(label_space=label_space, **{k: int(v) for k, v in d.items()})


@dataclass
class DualEncoderParams:
    w_pos: np.ndarray
    embed: np.ndarray
    w_in: np.ndarray
    obj_layers: list[EncoderLayerParams]
    w_clf_obj: np.ndarray
    w_fuse: np.ndarray
    rel_layers: list[EncoderLayerParams]
    w_clf_rel: np.ndarray


@dataclass
class LinearParams:
    w: np.ndarray
    b: np.ndarray


@dataclass
class ModelOutput:
    object_logits: np.ndarray | None
    object_probs: np.ndarray
    relation_logits: np.ndarray
    pairs: list[tuple[int, int]]
    cache: tuple = field(repr=False, default=())


def init_dual_encoder(
    config: DualEncoderConfig, rng: np.random.Generator
) -> DualEncoderParams:
    ls = config.label_space
    d_in = config.d_pos + config.d_v + config.d_e
    d_fuse = config.d_v + 2 * config.d_model
    return DualEncoderParams(
        w_pos=rng.normal(0.0, 1.0 / np.sqrt(8), (8, config.d_pos)),
        embed=rng.normal(0.0, 0.02, (ls.num_object_classes, config.d_e)),
        w_in=rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, config.d_model)),
        obj_layers=[
            init_encoder_layer_params(config.d_model, config.d_ff, rng)
            for _ in range(config.n_o)
        ],
        w_clf_obj=rng.normal(
            0.0, 1.0 / np.sqrt(config.d_model), (config.d_model, ls.num_object_classes)
        ),
        w_fuse=rng.normal(0.0, 1.0 / np.sqrt(d_fuse), (d_fuse, config.d_model)),
        rel_layers=[
            init_encoder_layer_params(config.d_model, config.d_ff, rng)
            for _ in range(config.n_r)
        ],
        w_clf_rel=rng.normal(
            0.0, 1.0 / np.sqrt(config.d_model), (config.d_model, ls.num_relations + 1)
        ),
    )


def init_linear(d_in: int, num_relations: int, rng: np.random.Generator) -> LinearParams:
    return LinearParams(
        w=rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, num_relations + 1)),
        b=np.zeros(num_relations + 1),
    )


def box_features(box: tuple[float, float, float, float]) -> np.ndarray:
    """Eight geometry features: corners, width, height, center."""
    x1, y1, x2, y2 = box
    w = x2 - x1
    h = y2 - y1
    return np.array([x1, y1, x2, y2, w, h, (x1 + x2) / 2, (y1 + y2) / 2])


def _embed_labels(proposals: Sequence[ObjectProposal], mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "predcls":
        return np.array([p.label for p in proposals], dtype=np.int64)
    return np.array([int(np.argmax(p.scores)) for p in proposals], dtype=np.int64)


def embed_objects(
    proposals: Sequence[ObjectProposal],
    params: DualEncoderParams,
    mode: str = "predcls",
) -> tuple[np.ndarray, tuple]:
    """Fuse box geometry, visual feature, and label embedding into one token per object."""
    if not proposals:
        raise ValueError("no proposals to embed")
    boxes = np.stack([box_features(p.box) for p in proposals])
    feats = np.stack([p.feature for p in proposals])
    labels = _embed_labels(proposals, mode)
    pos = boxes @ params.w_pos
    concat = np.concatenate([pos, feats, params.embed[labels]], axis=1)
    tokens = concat @ params.w_in
    return tokens, (boxes, concat, labels, pos.shape[1], feats.shape[1])


def embed_objects_backward(
    g: np.ndarray, params: DualEncoderParams, cache: tuple, grads: DualEncoderParams
) -> None:
    boxes, concat, labels, d_pos, d_v = cache
    grads.w_in += concat.T @ g
    dconcat = g @ params.w_in.T
    grads.w_pos += boxes.T @ dconcat[:, :d_pos]
    np.add.at(grads.embed, labels, dconcat[:, d_pos + d_v :])


def encode_objects(
    tokens: np.ndarray, params: DualEncoderParams, n_h: int
) -> tuple[np.ndarray, list]:
    caches = []
    x = tokens
    for layer in params.obj_layers:
        x, cache = encoder_layer(x, layer, n_h)
        caches.append(cache)
    return x, caches


def classify_objects(e_final: np.ndarray, params: DualEncoderParams) -> np.ndarray:
    """Row-stochastic object class probabilities."""
    return row_softmax(e_final @ params.w_clf_obj)


def fuse_pairs(
    e_final: np.ndarray,
    union_features: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    params: DualEncoderParams,
) -> tuple[np.ndarray, tuple]:
    """One token per ordered pair: ``[union, subject, object] @ w_fuse``."""
    n = e_final.shape[0]
    for s, o in pairs:
        if s == o:
            raise ValueError(f"pair ({s}, {o}) relates an object to itself")
        if not (0 <= s < n and 0 <= o < n):
            raise ValueError(f"pair ({s}, {o}) out of range for {n} objects")
    if len(pairs) != union_features.shape[0]:
        raise ValueError("one union feature row is required per pair")
    s_idx = np.array([p[0] for p in pairs], dtype=np.int64)
    o_idx = np.array([p[1] for p in pairs], dtype=np.int64)
    concat = np.concatenate([union_features, e_final[s_idx], e_final[o_idx]], axis=1)
    return concat @ params.w_fuse, (concat, s_idx, o_idx, union_features.shape[1], n)


def fuse_pairs_backward(
    g: np.ndarray, params: DualEncoderParams, cache: tuple, grads: DualEncoderParams
) -> np.ndarray:
    concat, s_idx, o_idx, d_u, n = cache
    grads.w_fuse += concat.T @ g
    dconcat = g @ params.w_fuse.T
    d_model = (dconcat.shape[1] - d_u) // 2
    de = np.zeros((n, d_model))
    np.add.at(de, s_idx, dconcat[:, d_u : d_u + d_model])
    np.add.at(de, o_idx, dconcat[:, d_u + d_model :])
    return de


def encode_relations_and_classify(
    pair_tokens: np.ndarray, params: DualEncoderParams, n_h: int
) -> tuple[np.ndarray, list]:
    caches = []
    x = pair_tokens
    for layer in params.rel_layers:
        x, cache = encoder_layer(x, layer, n_h)
        caches.append(cache)
    logits = x @ params.w_clf_rel
    return logits, [caches, x]


def all_ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def forward(
    proposals: Sequence[ObjectProposal],
    union_features: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    params: DualEncoderParams,
    config: DualEncoderConfig,
    mode: str = "predcls",
) -> ModelOutput:
    """Full pipeline: object encoding, object head, pair fusion, relation head."""
    if len(proposals) < 2:
        raise ValueError("no pairs: need at least two objects")
    tokens, embed_cache = embed_objects(proposals, params, mode)
    e_final, obj_caches = encode_objects(tokens, params, config.n_h)
    object_logits = e_final @ params.w_clf_obj
    pair_tokens, fuse_cache = fuse_pairs(e_final, union_features, pairs, params)
    relation_logits, rel_cache = encode_relations_and_classify(
        pair_tokens, params, config.n_h
    )
    return ModelOutput(
        object_logits=object_logits,
        object_probs=row_softmax(object_logits),
        relation_logits=relation_logits,
        pairs=list(pairs),
        cache=(embed_cache, obj_caches, e_final, fuse_cache, rel_cache),
    )


def backward(
    d_object_logits: np.ndarray | None,
    d_relation_logits: np.ndarray,
    output: ModelOutput,
    params: DualEncoderParams,
    config: DualEncoderConfig,
    grads: DualEncoderParams | None = None,
) -> DualEncoderParams:
    """Accumulate exact parameter gradients for one forward pass.

    ``d_object_logits``/``d_relation_logits`` are the loss gradients at the two
    classifier outputs. Pass an existing ``grads`` tree to accumulate across
    images.
    """
    if grads is None:
        grads = zeros_like_tree(params)
    embed_cache, obj_caches, e_final, fuse_cache, rel_cache = output.cache
    rel_layer_caches, rel_final = rel_cache

    grads.w_clf_rel += rel_final.T @ d_relation_logits
    dx = d_relation_logits @ params.w_clf_rel.T
    for layer_grads_idx in range(config.n_r - 1, -1, -1):
        dx, layer_grads = encoder_layer_backward(dx, rel_layer_caches[layer_grads_idx])
        _accumulate_layer(grads.rel_layers[layer_grads_idx], layer_grads)
    de_final = fuse_pairs_backward(dx, params, fuse_cache, grads)

    if d_object_logits is not None:
        grads.w_clf_obj += e_final.T @ d_object_logits
        de_final = de_final + d_object_logits @ params.w_clf_obj.T

    dx = de_final
    for layer_grads_idx in range(config.n_o - 1, -1, -1):
        dx, layer_grads = encoder_layer_backward(dx, obj_caches[layer_grads_idx])
        _accumulate_layer(grads.obj_layers[layer_grads_idx], layer_grads)
    embed_objects_backward(dx, params, embed_cache, grads)
    return grads


def _accumulate_layer(dst: EncoderLayerParams, src: EncoderLayerParams) -> None:
    dst.attn.wq += src.attn.wq
    dst.attn.wk += src.attn.wk
    dst.attn.wv += src.attn.wv
    dst.attn.wo += src.attn.wo
    dst.ln1_gain += src.ln1_gain
    dst.ln1_bias += src.ln1_bias
    dst.ln2_gain += src.ln2_gain
    dst.ln2_bias += src.ln2_bias
    dst.w1 += src.w1
    dst.b1 += src.b1
    dst.w2 += src.w2
    dst.b2 += src.b2


def linear_forward(
    proposals: Sequence[ObjectProposal],
    union_features: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    params: LinearParams,
) -> ModelOutput:
    """Affine relation head over ``[union, subject feature, object feature]``."""
    if len(proposals) < 2:
        raise ValueError("no pairs: need at least two objects")
    feats = np.stack([p.feature for p in proposals])
    s_idx = np.array([p[0] for p in pairs], dtype=np.int64)
    o_idx = np.array([p[1] for p in pairs], dtype=np.int64)
    x = np.concatenate([union_features, feats[s_idx], feats[o_idx]], axis=1)
    logits = x @ params.w + params.b
    scores = np.stack([p.scores for p in proposals])
    return ModelOutput(
        object_logits=None,
        object_probs=scores,
        relation_logits=logits,
        pairs=list(pairs),
        cache=(x,),
    )


def linear_backward(
    d_relation_logits: np.ndarray,
    output: ModelOutput,
    grads: LinearParams | None = None,
) -> LinearParams:
    (x,) = output.cache
    if grads is None:
        grads = LinearParams(
            w=np.zeros((x.shape[1], d_relation_logits.shape[1])),
            b=np.zeros(d_relation_logits.shape[1]),
        )
    grads.w += x.T @ d_relation_logits
    grads.b += d_relation_logits.sum(axis=0)
    return grads
