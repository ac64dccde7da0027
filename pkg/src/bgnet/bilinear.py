"""Low-rank bilinear logits and the node-wise bilinear graph update.

Feature matrices keep the column-per-node layout: a question is C x m, an
image D x n, with any number of leading batch axes. Projection weights are
stored input-major (C x K), so ``relu(U^T q)`` is the projected node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class BilinearLogitParams:
    """Attention-logit weights shared by all glimpses of one graph.

    U_prime: (d, C, K') and V_prime: (d, D, K') hold the d rank slices.
    p: (g, K') holds one pooling vector per glimpse. Biases, when given, are
    (d, K') and added before the ReLU.
    """

    U_prime: Tensor
    V_prime: Tensor
    p: Tensor
    u_bias: Tensor | None = None
    v_bias: Tensor | None = None

    @property
    def rank(self) -> int:
        return self.U_prime.shape[0]

    @property
    def glimpses(self) -> int:
        return self.p.shape[0]

    def slice_rank(self, r: int) -> "BilinearLogitParams":
        """Single-slice view (d=1) used to check rank additivity."""
        return BilinearLogitParams(
            self.U_prime[r : r + 1],
            self.V_prime[r : r + 1],
            self.p,
            None if self.u_bias is None else self.u_bias[r : r + 1],
            None if self.v_bias is None else self.v_bias[r : r + 1],
        )


@dataclass
class BgnValueParams:
    """Value weights U: (C, K) for the query side and V: (D, K) for the key side."""

    U: Tensor
    V: Tensor
    u_bias: Tensor | None = None
    v_bias: Tensor | None = None

    def __post_init__(self):
        if self.U.shape[-1] != self.V.shape[-1]:
            raise ShapeError(f"value params disagree on K: {self.U.shape} vs {self.V.shape}")


def _rank_projection(X: Tensor, W: Tensor, bias: Tensor | None) -> Tensor:
    """relu(W_r^T X + b_r) for every rank slice: (..., C, m) -> (..., d, K', m)."""
    if X.shape[-2] != W.shape[-2]:
        raise ShapeError(f"feature dim {X.shape[-2]} does not match projection {W.shape}")
    y = ad.matmul(ad.transpose(W), ad.unsqueeze(X, -3))
    if bias is not None:
        y = ad.add(y, ad.unsqueeze(bias, -1))
    return ad.relu(y)


def project_query(Q: Tensor, params: BilinearLogitParams) -> Tensor:
    return _rank_projection(ad.as_tensor(Q), params.U_prime, params.u_bias)


def project_key(V: Tensor, params: BilinearLogitParams) -> Tensor:
    return _rank_projection(ad.as_tensor(V), params.V_prime, params.v_bias)


def logits_from_projections(qa: Tensor, vb: Tensor, p_row: Tensor) -> Tensor:
    """Sum over rank slices of (p o qa_i)^T vb_j; qa (..., d, K', m), vb (..., d, K', n)."""
    weighted = ad.hadamard(qa, ad.unsqueeze(p_row, -1))
    per_rank = ad.matmul(ad.transpose(weighted), vb)
    return ad.sum(per_rank, axis=-3)


def bilinear_logits(
    Q: Tensor,
    V: Tensor,
    params: BilinearLogitParams,
    glimpse: int,
    key_projection: Tensor | None = None,
) -> Tensor:
    """Unnormalized m x n logits for one glimpse.

    logit(i, j) = sum_r p_glimpse^T (relu(U'_r^T q_i) o relu(V'_r^T v_j)).
    ``key_projection`` lets callers reuse ``project_key(V)`` across glimpses.
    """
    if not 0 <= glimpse < params.glimpses:
        raise IndexError(f"glimpse {glimpse} out of range for {params.glimpses} glimpses")
    qa = project_query(Q, params)
    vb = project_key(V, params) if key_projection is None else key_projection
    return logits_from_projections(qa, vb, params.p[glimpse])


def bgn_update(
    X: Tensor,
    Y: Tensor,
    G: Tensor,
    params: BgnValueParams,
    dropout: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Per-node joint embedding, shape (..., K, m).

    Column i is relu(U^T x_i) o sum_j G[i, j] relu(V^T y_j).
    """
    X, Y, G = ad.as_tensor(X), ad.as_tensor(Y), ad.as_tensor(G)
    m, n = X.shape[-1], Y.shape[-1]
    if G.shape[-2:] != (m, n):
        raise ShapeError(f"graph {G.shape} does not connect {m} query and {n} value nodes")
    query = ad.relu(ad.linear(X, ad.transpose(params.U), params.u_bias))
    value = ad.relu(ad.linear(Y, ad.transpose(params.V), params.v_bias))
    if dropout is not None:
        value = dropout(value)
    return ad.hadamard(query, ad.matmul(value, ad.transpose(G)))


def decompose_map(G) -> tuple[Tensor, Tensor]:
    """Split G into row sums G_b and row-normalized G_a (zero rows stay zero)."""
    G = ad.as_tensor(G)
    if np.any(G.data < 0):
        raise ValueError("decompose_map needs a non-negative map")
    G_b = ad.sum(G, axis=-1)
    G_a = ad.safe_div(G, ad.unsqueeze(G_b, -1))
    return G_a, G_b


def summarize(Z_prime: Tensor, G_b: Tensor) -> Tensor:
    """Weighted column sum Z' G_b: (..., K, m) x (..., m) -> (..., K)."""
    Z_prime, G_b = ad.as_tensor(Z_prime), ad.as_tensor(G_b)
    if Z_prime.shape[-1] != G_b.shape[-1]:
        raise ShapeError(f"summarize: {Z_prime.shape} nodes vs weights {G_b.shape}")
    return ad.sum(ad.hadamard(Z_prime, ad.unsqueeze(G_b, -2)), axis=-1)


def eq6_oracle(Q, V, G, U, Vw) -> np.ndarray:
    """Joint embedding z by explicit loops over (k, i, j); plain floats, no tensors.

    z_k = sum_i sum_j G[i, j] * relu(q_i . U[:, k]) * relu(Vw[:, k] . v_j)
    """
    Q, V, G, U, Vw = (np.asarray(a, dtype=float).tolist() for a in (Q, V, G, U, Vw))
    C, m = len(Q), len(Q[0])
    D, n = len(V), len(V[0])
    K = len(U[0])
    z = [0.0] * K
    for k in range(K):
        acc = 0.0
        for i in range(m):
            qu = 0.0
            for c in range(C):
                qu += Q[c][i] * U[c][k]
            qu = max(qu, 0.0)
            for j in range(n):
                vv = 0.0
                for e in range(D):
                    vv += Vw[e][k] * V[e][j]
                acc += G[i][j] * qu * max(vv, 0.0)
        z[k] = acc
    return np.array(z)
