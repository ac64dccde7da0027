"""End-to-end bilinear graph network: encoders, graph stack, classifier, loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilinear import BgnValueParams, BilinearLogitParams
from .layers import (
    GraphLayerParams,
    LayerTrace,
    SdpLayerParams,
    ban_baseline_forward,
    sdp_variant_forward,
    stack_forward,
)

VARIANTS = ("bgn", "ban", "sdp")


@dataclass
class ModelConfig:
    C: int = 128
    D: int = 64
    K: int = 128
    K_prime: int = 128
    d: int = 3
    g: int = 4
    L: int = 1
    m: int = 15
    n: int = 16
    D_raw: int = 12
    embed_dim: int = 64
    vocab_size: int = 32
    answer_count: int = 7
    dropout_p: float = 0.2
    variant: str = "bgn"
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "int" and f.name != "seed" and value <= 0:
                raise ValueError(f"config {f.name} must be positive, got {value}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter construction


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named leaf tensors in a fixed insertion order."""

    def __init__(self, rng: np.random.Generator, bias: bool):
        self.rng = rng
        self.bias = bias
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def weight_normed(self, name: str, out: int, in_: int, lead: tuple[int, ...] = (), bias: bool = True) -> None:
        v = _glorot(self.rng, lead + (out, in_), in_, out)
        self.add(f"{name}.v", v)
        self.add(f"{name}.g", np.sqrt((v * v).sum(axis=-1)))
        if self.bias and bias:
            self.add(f"{name}.b", np.zeros(lead + (out,)))


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 1])
    store = ParamStore(rng, cfg.bias)
    C, D, K, Kp, d, g = cfg.C, cfg.D, cfg.K, cfg.K_prime, cfg.d, cfg.g

    store.add("encoder.tokens", _glorot(rng, (cfg.vocab_size, cfg.embed_dim), cfg.vocab_size, cfg.embed_dim))
    store.add("encoder.positions", _glorot(rng, (cfg.m, cfg.embed_dim), cfg.m, cfg.embed_dim))
    store.weight_normed("encoder.proj", C, cfg.embed_dim)
    if cfg.D_raw != D:
        store.weight_normed("objects.proj", D, cfg.D_raw)

    for i in range(cfg.L):
        base = f"layer{i}.image"
        store.weight_normed(f"{base}.logit.U", Kp, C, (d,))
        store.weight_normed(f"{base}.logit.V", Kp, D, (d,))
        store.add(f"{base}.logit.p", _glorot(rng, (g, Kp), Kp, 1))
        store.weight_normed(f"{base}.value.U", K, C, (g,))
        store.weight_normed(f"{base}.value.V", K, D, (g,))
        store.weight_normed(f"{base}.residual", C, K, (g,))
        if cfg.variant == "ban":
            continue
        base = f"layer{i}.question"
        if cfg.variant == "sdp":
            store.weight_normed(f"{base}.sdp.q", Kp, C, (g,))
            # a key bias only shifts each softmax row by a constant, so it is omitted
            store.weight_normed(f"{base}.sdp.k", Kp, C, (g,), bias=False)
            store.weight_normed(f"{base}.sdp.v", K, C, (g,))
        else:
            store.weight_normed(f"{base}.logit.U", Kp, C, (d,))
            store.weight_normed(f"{base}.logit.V", Kp, C, (d,))
            store.add(f"{base}.logit.p", _glorot(rng, (g, Kp), Kp, 1))
            store.weight_normed(f"{base}.value.U", K, C, (g,))
            store.weight_normed(f"{base}.value.V", K, C, (g,))
        store.weight_normed(f"{base}.residual", C, K, (g,))

    store.weight_normed("classifier.hidden", 2 * C, C)
    store.weight_normed("classifier.out", cfg.answer_count, 2 * C)
    return store.tensors


# ---------------------------------------------------------------------------
# model


class BGNModel:
    """Holds parameters and runs the forward pass for one of the three variants."""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, Tensor] | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = dict(params) if params is not None else init_params(cfg)

    # weight helpers -------------------------------------------------------
    def _w(self, name: str) -> Tensor:
        """Effective (…, out, in) weight of a weight-normalized map."""
        return ad.weight_norm(self.params[f"{name}.v"], self.params[f"{name}.g"])

    def _b(self, name: str) -> Tensor | None:
        return self.params.get(f"{name}.b")

    def _input_major(self, name: str) -> Tensor:
        return ad.transpose(self._w(name))

    def _per_glimpse(self, t: Tensor | None, g: int) -> list[Tensor | None]:
        return [None if t is None else t[j] for j in range(g)]

    def _graph_params(self, base: str, g: int) -> GraphLayerParams:
        logit = BilinearLogitParams(
            self._input_major(f"{base}.logit.U"),
            self._input_major(f"{base}.logit.V"),
            self.params[f"{base}.logit.p"],
            self._b(f"{base}.logit.U"),
            self._b(f"{base}.logit.V"),
        )
        U = self._input_major(f"{base}.value.U")
        V = self._input_major(f"{base}.value.V")
        ub = self._per_glimpse(self._b(f"{base}.value.U"), g)
        vb = self._per_glimpse(self._b(f"{base}.value.V"), g)
        values = [BgnValueParams(U[j], V[j], ub[j], vb[j]) for j in range(g)]
        W = self._w(f"{base}.residual")
        return GraphLayerParams(
            logit,
            values,
            [W[j] for j in range(g)],
            self._per_glimpse(self._b(f"{base}.residual"), g),
        )

    def _sdp_params(self, base: str, g: int) -> SdpLayerParams:
        Wq = self._input_major(f"{base}.sdp.q")
        Wk = self._input_major(f"{base}.sdp.k")
        Wv = self._input_major(f"{base}.sdp.v")
        W = self._w(f"{base}.residual")
        biases = {
            "q": self._per_glimpse(self._b(f"{base}.sdp.q"), g),
            "k": self._per_glimpse(self._b(f"{base}.sdp.k"), g),
            "v": self._per_glimpse(self._b(f"{base}.sdp.v"), g),
            "out": self._per_glimpse(self._b(f"{base}.residual"), g),
        }
        return SdpLayerParams(
            [Wq[j] for j in range(g)],
            [Wk[j] for j in range(g)],
            [Wv[j] for j in range(g)],
            [W[j] for j in range(g)],
            biases,
        )

    def layer_params(self) -> list:
        cfg = self.cfg
        out = []
        for i in range(cfg.L):
            image = self._graph_params(f"layer{i}.image", cfg.g)
            if cfg.variant == "ban":
                out.append(image)
            elif cfg.variant == "sdp":
                out.append((image, self._sdp_params(f"layer{i}.question", cfg.g)))
            else:
                out.append((image, self._graph_params(f"layer{i}.question", cfg.g)))
        return out

    # encoders -------------------------------------------------------------
    def encode_question(self, token_ids: np.ndarray, q_mask: np.ndarray) -> Tensor:
        """Token + position embeddings -> weight-normed map to C -> tanh; (..., C, m)."""
        token_ids = np.asarray(token_ids)
        if token_ids.shape[-1] != self.cfg.m:
            raise ValueError(f"questions must be padded to m={self.cfg.m}, got {token_ids.shape[-1]}")
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        emb = ad.add(ad.embedding(self.params["encoder.tokens"], token_ids), self.params["encoder.positions"])
        x = ad.linear(ad.transpose(emb), self._w("encoder.proj"), self._b("encoder.proj"))
        return ad.hadamard(ad.tanh(x), np.asarray(q_mask, dtype=float)[..., None, :])

    def encode_objects(self, features: np.ndarray, v_mask: np.ndarray) -> Tensor:
        """(..., n, D_raw) features -> (..., D, n), projected when D_raw != D."""
        x = ad.transpose(ad.as_tensor(features))
        if "objects.proj.v" in self.params:
            x = ad.linear(x, self._w("objects.proj"), self._b("objects.proj"))
        return ad.hadamard(x, np.asarray(v_mask, dtype=float)[..., None, :])

    # head -----------------------------------------------------------------
    def head(self, readout: Tensor, dropout=None) -> Tensor:
        """Two-layer MLP on a (..., C) readout -> (..., |A|) logits."""
        x = ad.unsqueeze(readout, -1)
        hidden = ad.relu(ad.linear(x, self._w("classifier.hidden"), self._b("classifier.hidden")))
        if dropout is not None:
            hidden = dropout(hidden)
        out = ad.linear(hidden, self._w("classifier.out"), self._b("classifier.out"))
        return ad.reshape(out, out.shape[:-1])

    def classify(self, O_L: Tensor, q_mask: np.ndarray, dropout=None) -> Tensor:
        """Sum the valid columns of O_L, then the two-layer head."""
        masked = ad.hadamard(O_L, np.asarray(q_mask, dtype=float)[..., None, :])
        return self.head(ad.sum(masked, axis=-1), dropout)

    # forward --------------------------------------------------------------
    def make_dropout(self, train: bool, rng: np.random.Generator | None):
        p = self.cfg.dropout_p
        if not train or p == 0.0:
            return None
        return lambda t: ad.dropout(t, p, True, rng)

    def forward(self, batch: Mapping[str, np.ndarray], train: bool = False, rng=None) -> tuple[Tensor, LayerTrace]:
        q_mask = np.asarray(batch["q_mask"], dtype=bool)
        v_mask = np.asarray(batch["v_mask"], dtype=bool)
        dropout = self.make_dropout(train, rng)
        Q = self.encode_question(batch["token_ids"], q_mask)
        V = self.encode_objects(batch["features"], v_mask)
        layers = self.layer_params()
        if self.cfg.variant == "ban":
            z, trace = ban_baseline_forward(Q, V, layers, q_mask, v_mask, dropout)
            last = layers[-1]
            g = last.glimpses
            projected = ad.linear(ad.unsqueeze(z, -1), last.residual_proj[g - 1], last.residual_bias[g - 1])
            if dropout is not None:
                projected = dropout(projected)
            H = trace.layers[-1]["H"]
            masked = ad.hadamard(H, q_mask.astype(float)[..., None, :])
            readout = ad.add(ad.sum(masked, axis=-1), ad.reshape(projected, projected.shape[:-1]))
            return self.head(readout, dropout), trace
        forward = sdp_variant_forward if self.cfg.variant == "sdp" else stack_forward
        O, trace = forward(Q, V, layers, q_mask, v_mask, dropout)
        return self.classify(O, q_mask, dropout), trace

    def loss(self, batch: Mapping[str, np.ndarray], train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        scores, _ = self.forward(batch, train, rng)
        return bce_loss(scores, batch["targets"]), scores

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# targets and loss


def soft_targets(answer_counts: Mapping[str, float], answers: Sequence[str]) -> np.ndarray:
    """y_i = min(count_i / 3, 1); answers outside the vocabulary are dropped."""
    index = {a: i for i, a in enumerate(answers)}
    y = np.zeros(len(answers))
    for answer, count in answer_counts.items():
        if count < 0:
            raise ValueError(f"negative count for answer {answer!r}")
        if answer in index:
            y[index[answer]] = min(count / 3.0, 1.0)
    return y


def bce_loss(scores: Tensor, targets) -> Tensor:
    return ad.bce_with_logits(scores, targets)


def predict(scores) -> np.ndarray | int:
    """Arg-max over answers; ties resolve to the lowest index."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    out = np.argmax(data, axis=-1)
    return int(out) if np.ndim(out) == 0 else out
