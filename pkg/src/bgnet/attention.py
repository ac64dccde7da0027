"""Mask-aware attention maps for the image-graph, question-graph and SDP ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilinear import BilinearLogitParams, logits_from_projections, project_key, project_query

JOINT = "joint"
PER_ROW = "per-row"


@dataclass
class AttentionMap:
    """Normalized weights and raw logits, one (..., m, n) tensor per glimpse."""

    weights: list[Tensor]
    logits: list[Tensor]
    row_mask: np.ndarray
    col_mask: np.ndarray
    mode: str
    glimpse_ids: list[int] = field(default_factory=list)

    def summed(self) -> np.ndarray:
        return np.sum([w.data for w in self.weights], axis=0)

    def empty_domains(self) -> list[np.ndarray]:
        return [w.meta["empty"] for w in self.weights]


def pair_mask(row_mask: np.ndarray, col_mask: np.ndarray) -> np.ndarray:
    """Outer AND of a row validity vector and a column validity vector."""
    row_mask = np.asarray(row_mask, dtype=bool)
    col_mask = np.asarray(col_mask, dtype=bool)
    return row_mask[..., :, None] & col_mask[..., None, :]


def _full_mask(X: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(X.shape[:-2] + X.shape[-1:], dtype=bool)
    return np.asarray(mask, dtype=bool)


def image_graph_map(
    Q_like: Tensor,
    V: Tensor,
    params: BilinearLogitParams,
    q_mask=None,
    v_mask=None,
    glimpses: Sequence[int] | None = None,
    key_projection: Tensor | None = None,
) -> AttentionMap:
    """Joint-softmax word/object maps, one per requested glimpse.

    Padded words (rows) and padded objects (columns) are excluded from the
    normalization and come out exactly zero.
    """
    Q_like, V = ad.as_tensor(Q_like), ad.as_tensor(V)
    q_mask, v_mask = _full_mask(Q_like, q_mask), _full_mask(V, v_mask)
    glimpses = list(range(params.glimpses)) if glimpses is None else list(glimpses)
    qa = project_query(Q_like, params)
    vb = project_key(V, params) if key_projection is None else key_projection
    mask = pair_mask(q_mask, v_mask)
    weights, logits = [], []
    for j in glimpses:
        raw = logits_from_projections(qa, vb, params.p[j])
        logits.append(raw)
        weights.append(ad.masked_softmax(raw, mask, mode="joint"))
    return AttentionMap(weights, logits, q_mask, v_mask, JOINT, glimpses)


def question_graph_map(H: Tensor, params: BilinearLogitParams, q_mask=None) -> AttentionMap:
    """Word-to-word maps over H with per-row normalization.

    Padded columns are masked before the softmax; padded rows are all-zero.
    """
    H = ad.as_tensor(H)
    q_mask = _full_mask(H, q_mask)
    qa = project_query(H, params)
    vb = project_key(H, params)
    mask = pair_mask(q_mask, q_mask)
    weights, logits = [], []
    for j in range(params.glimpses):
        raw = logits_from_projections(qa, vb, params.p[j])
        logits.append(raw)
        weights.append(ad.masked_softmax(raw, mask, mode="row"))
    return AttentionMap(weights, logits, q_mask, q_mask, PER_ROW, list(range(params.glimpses)))


def sdp_map(H: Tensor, Wq: Tensor, Wk: Tensor, q_mask=None, q_bias=None, k_bias=None) -> AttentionMap:
    """Scaled dot-product self-attention over the columns of H.

    Wq, Wk are (C, K'); logits are (Wq^T H)^T (Wk^T H) / sqrt(K').
    """
    H = ad.as_tensor(H)
    q_mask = _full_mask(H, q_mask)
    queries = ad.linear(H, ad.transpose(Wq), q_bias)
    keys = ad.linear(H, ad.transpose(Wk), k_bias)
    raw = ad.scale(ad.matmul(ad.transpose(queries), keys), 1.0 / math.sqrt(Wq.shape[-1]))
    weights = ad.masked_softmax(raw, pair_mask(q_mask, q_mask), mode="row")
    return AttentionMap([weights], [raw], q_mask, q_mask, PER_ROW, [0])
