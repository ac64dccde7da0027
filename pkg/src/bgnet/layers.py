"""Residual multi-glimpse graph layers and their L-layer stacks.

All node matrices use the column-per-node layout with optional leading batch
axes. ``dropout`` arguments are callables (identity when None) so the same code
path serves training and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionMap, image_graph_map, question_graph_map, sdp_map
from .autodiff import ShapeError, Tensor
from .bilinear import (
    BgnValueParams,
    BilinearLogitParams,
    bgn_update,
    decompose_map,
    project_key,
    summarize,
)

Dropout = Callable[[Tensor], Tensor]


@dataclass
class GraphLayerParams:
    """Weights of one image-graph or question-graph.

    residual_proj[j] is the (C, K) map W_j taking glimpse j's joint embedding
    back to node dimension C.
    """

    logit_params: BilinearLogitParams
    value_params: list[BgnValueParams]
    residual_proj: list[Tensor]
    residual_bias: list[Tensor | None] | None = None

    def __post_init__(self):
        g = self.logit_params.glimpses
        if len(self.value_params) != g or len(self.residual_proj) != g:
            raise ShapeError(
                f"{g} glimpses but {len(self.value_params)} value and "
                f"{len(self.residual_proj)} residual parameter sets"
            )
        if self.residual_bias is None:
            self.residual_bias = [None] * g

    @property
    def glimpses(self) -> int:
        return self.logit_params.glimpses


@dataclass
class SdpLayerParams:
    """Scaled dot-product question step: per glimpse Wq, Wk (C, K'), Wv (C, K), W (C, K)."""

    Wq: list[Tensor]
    Wk: list[Tensor]
    Wv: list[Tensor]
    residual_proj: list[Tensor]
    biases: dict[str, list[Tensor | None]] = field(default_factory=dict)

    @property
    def glimpses(self) -> int:
        return len(self.Wq)

    def bias(self, name: str, j: int) -> Tensor | None:
        values = self.biases.get(name)
        return None if values is None else values[j]


@dataclass
class LayerTrace:
    """Per-layer attention maps and node matrices collected during a forward pass."""

    layers: list[dict] = field(default_factory=list)

    def graph_maps(self, graph: str) -> list[AttentionMap]:
        return [layer[graph] for layer in self.layers if layer.get(graph) is not None]


def _identity(x: Tensor) -> Tensor:
    return x


def _mask_columns(X: Tensor, mask) -> Tensor:
    if mask is None:
        return X
    return ad.hadamard(X, np.asarray(mask, dtype=float)[..., None, :])


def _residual_step(prev: Tensor, joint: Tensor, W: Tensor, b: Tensor | None, dropout: Dropout, mask) -> Tensor:
    if W.shape[-1] != joint.shape[-2] or W.shape[-2] != prev.shape[-2]:
        raise ShapeError(f"residual projection {W.shape} cannot map {joint.shape} onto {prev.shape}")
    step = dropout(ad.linear(joint, W, b))
    return _mask_columns(ad.add(prev, step), mask)


def _merge_maps(parts: Sequence[AttentionMap]) -> AttentionMap:
    first = parts[0]
    return AttentionMap(
        [w for part in parts for w in part.weights],
        [lg for part in parts for lg in part.logits],
        first.row_mask,
        first.col_mask,
        first.mode,
        [j for part in parts for j in part.glimpse_ids],
    )


def image_graph_forward(
    Q_in: Tensor,
    V: Tensor,
    params: GraphLayerParams,
    q_mask=None,
    v_mask=None,
    dropout: Dropout | None = None,
    glimpses: int | None = None,
) -> tuple[Tensor, dict]:
    """Run glimpses 1..g, recomputing each map from the running query H'_{j-1}.

    Returns H = H'_g and a trace dict holding the merged AttentionMap and the
    per-glimpse node matrices. ``glimpses`` truncates the iteration (the BAN
    baseline uses this to stop before its readout glimpse).
    """
    dropout = dropout or _identity
    V = ad.as_tensor(V)
    H = _mask_columns(ad.as_tensor(Q_in), q_mask)
    key = project_key(V, params.logit_params)
    maps, nodes = [], [H]
    count = params.glimpses if glimpses is None else glimpses
    for j in range(count):
        amap = image_graph_map(H, V, params.logit_params, q_mask, v_mask, glimpses=[j], key_projection=key)
        joint = bgn_update(H, V, amap.weights[0], params.value_params[j], dropout)
        H = _residual_step(H, joint, params.residual_proj[j], params.residual_bias[j], dropout, q_mask)
        maps.append(amap)
        nodes.append(H)
    trace = {"map": _merge_maps(maps) if maps else None, "nodes": nodes, "key": key}
    return H, trace


def question_graph_forward(
    H: Tensor,
    params: GraphLayerParams,
    q_mask=None,
    dropout: Dropout | None = None,
) -> tuple[Tensor, dict]:
    """Word-to-word residual glimpses; maps and values both come from H."""
    dropout = dropout or _identity
    H = ad.as_tensor(H)
    amap = question_graph_map(H, params.logit_params, q_mask)
    O = H
    nodes = [O]
    for j in range(params.glimpses):
        joint = bgn_update(O, H, amap.weights[j], params.value_params[j], dropout)
        O = _residual_step(O, joint, params.residual_proj[j], params.residual_bias[j], dropout, q_mask)
        nodes.append(O)
    return O, {"map": amap, "nodes": nodes}


def sdp_question_forward(
    H: Tensor,
    params: SdpLayerParams,
    q_mask=None,
    dropout: Dropout | None = None,
) -> tuple[Tensor, dict]:
    """Question step of the SDP ablation: softmax(QK^T) V with linear values."""
    dropout = dropout or _identity
    H = ad.as_tensor(H)
    O = H
    maps, nodes = [], [O]
    for j in range(params.glimpses):
        amap = sdp_map(H, params.Wq[j], params.Wk[j], q_mask, params.bias("q", j), params.bias("k", j))
        values = dropout(ad.linear(H, ad.transpose(params.Wv[j]), params.bias("v", j)))
        mixed = ad.matmul(values, ad.transpose(amap.weights[0]))
        O = _residual_step(O, mixed, params.residual_proj[j], params.bias("out", j), dropout, q_mask)
        amap.glimpse_ids = [j]
        maps.append(amap)
        nodes.append(O)
    return O, {"map": _merge_maps(maps), "nodes": nodes}


def stack_forward(
    Q: Tensor,
    V: Tensor,
    layers: Sequence[tuple[GraphLayerParams, GraphLayerParams | SdpLayerParams]],
    q_mask=None,
    v_mask=None,
    dropout: Dropout | None = None,
) -> tuple[Tensor, LayerTrace]:
    """Alternate image-graph and question-graph L times; O_{i-1} queries layer i."""
    if not layers:
        raise ValueError("stack_forward needs at least one layer")
    trace = LayerTrace()
    O = ad.as_tensor(Q)
    for image_params, question_params in layers:
        H, itrace = image_graph_forward(O, V, image_params, q_mask, v_mask, dropout)
        if isinstance(question_params, SdpLayerParams):
            O, qtrace = sdp_question_forward(H, question_params, q_mask, dropout)
        else:
            O, qtrace = question_graph_forward(H, question_params, q_mask, dropout)
        trace.layers.append({"image": itrace["map"], "question": qtrace["map"], "H": H, "O": O})
    return O, trace


def sdp_variant_forward(Q, V, layers, q_mask=None, v_mask=None, dropout=None) -> tuple[Tensor, LayerTrace]:
    """stack_forward with SdpLayerParams in every question slot."""
    for _, qp in layers:
        if not isinstance(qp, SdpLayerParams):
            raise TypeError("sdp_variant_forward needs SdpLayerParams for the question step")
    return stack_forward(Q, V, layers, q_mask, v_mask, dropout)


def ban_baseline_forward(
    Q: Tensor,
    V: Tensor,
    layers: Sequence[GraphLayerParams],
    q_mask=None,
    v_mask=None,
    dropout: Dropout | None = None,
) -> tuple[Tensor, LayerTrace]:
    """Image-graph-only stack ending in the summarized readout z = Z' G_b.

    Layers 1..L-1 run all glimpses residually. The last layer runs glimpses
    1..g-1 residually; its final glimpse map G is split into (G_a, G_b) and
    z = summarize(bgn_update(H'_{g-1}, V, G_a), G_b). The trace keeps
    H'_{g-1} under "H" so a classifier can add it back residually.
    """
    if not layers:
        raise ValueError("ban_baseline_forward needs at least one layer")
    dropout = dropout or _identity
    trace = LayerTrace()
    H = ad.as_tensor(Q)
    for params in layers[:-1]:
        H, itrace = image_graph_forward(H, V, params, q_mask, v_mask, dropout)
        trace.layers.append({"image": itrace["map"], "question": None, "H": H, "O": None})
    last = layers[-1]
    g = last.glimpses
    H, itrace = image_graph_forward(H, V, last, q_mask, v_mask, dropout, glimpses=g - 1)
    final = image_graph_map(H, V, last.logit_params, q_mask, v_mask, glimpses=[g - 1], key_projection=itrace["key"])
    G_a, G_b = decompose_map(final.weights[0])
    z = summarize(bgn_update(H, V, G_a, last.value_params[g - 1], dropout), G_b)
    amap = _merge_maps([itrace["map"], final]) if itrace["map"] is not None else final
    trace.layers.append({"image": amap, "question": None, "H": H, "O": None, "z": z})
    return z, trace
