"""Scaled dot-product attention, multi-head attention, and the encoder block.

Sequence tensors are (..., tokens, d): a single sequence is rank 2 and a
batch of sequences is rank 3; every function here works on both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples rejected outside 2 standard deviations (ViT init recipe)."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the output projection."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor
    heads: int

    def __post_init__(self):
        if len(self.w_q) != self.heads or len(self.w_k) != self.heads or len(self.w_v) != self.heads:
            raise ConfigError("per-head projection count must equal the head count")
        d_model, d_k = self.w_q[0].shape
        for mats in (self.w_q, self.w_k, self.w_v):
            for m in mats:
                if m.shape != (d_model, d_k):
                    raise ConfigError(f"head projections disagree: {m.shape} vs {(d_model, d_k)}")
        if self.w_o.shape != (self.heads * d_k, d_model):
            raise ConfigError(
                f"output projection must be ({self.heads * d_k}, {d_model}), got {self.w_o.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q[0].shape[1]

    @classmethod
    def init(cls, d_model: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} not divisible by heads={heads}")
        d_k = d_model // heads
        mk = lambda shape: Tensor.param(truncated_normal(rng, shape))
        return cls(
            w_q=[mk((d_model, d_k)) for _ in range(heads)],
            w_k=[mk((d_model, d_k)) for _ in range(heads)],
            w_v=[mk((d_model, d_k)) for _ in range(heads)],
            w_o=mk((heads * d_k, d_model)),
            heads=heads,
        )

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i in range(self.heads):
            out += [(f"{prefix}w_q.{i}", self.w_q[i]),
                    (f"{prefix}w_k.{i}", self.w_k[i]),
                    (f"{prefix}w_v.{i}", self.w_v[i])]
        out.append((f"{prefix}w_o", self.w_o))
        return out


@dataclass
class EncoderBlockParams:
    """Pre-norm residual block: LN -> MHA -> add, LN -> MLP -> add."""

    attention: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(cls, d_model: int, heads: int, mlp_dim: int,
             rng: np.random.Generator) -> "EncoderBlockParams":
        return cls(
            attention=AttentionParams.init(d_model, heads, rng),
            ln1_gain=Tensor.param(np.ones(d_model)),
            ln1_bias=Tensor.param(np.zeros(d_model)),
            ln2_gain=Tensor.param(np.ones(d_model)),
            ln2_bias=Tensor.param(np.zeros(d_model)),
            mlp_w1=Tensor.param(truncated_normal(rng, (d_model, mlp_dim))),
            mlp_b1=Tensor.param(np.zeros(mlp_dim)),
            mlp_w2=Tensor.param(truncated_normal(rng, (mlp_dim, d_model))),
            mlp_b2=Tensor.param(np.zeros(d_model)),
        )

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.attention.named_parameters(prefix + "attn.")
        out += [(prefix + n, getattr(self, n))
                for n in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                          "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")]
        return out


def attention_scores(tape: Tape, q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic score matrix softmax(QK^T / sqrt(d_k))."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    d_k = q.shape[-1]
    raw = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(d_k))
    return tape.softmax(raw, axis=-1)


def self_attention(tape: Tape, q: Tensor, k: Tensor, v: Tensor,
                   capture: list | None = None) -> Tensor:
    """Scores applied to the values: attention_scores(Q, K) @ V."""
    if q.shape[-2] != v.shape[-2]:
        raise ShapeError(f"query/value row counts disagree: {q.shape} vs {v.shape}")
    scores = attention_scores(tape, q, k)
    if capture is not None:
        capture.append(scores.data.copy())
    return tape.matmul(scores, v)


def multi_head_attention(tape: Tape, x: Tensor, params: AttentionParams,
                         capture: list | None = None) -> Tensor:
    """Concat(head_1..head_h) @ W_O with head_i computed from X's projections.

    When ``capture`` is a list it receives one score matrix per head
    (diagnostic mode; skipped during plain training passes to bound memory).
    """
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input width {x.shape} does not match d_model={params.d_model}")
    heads = []
    for i in range(params.heads):
        q = tape.matmul(x, params.w_q[i])
        k = tape.matmul(x, params.w_k[i])
        v = tape.matmul(x, params.w_v[i])
        heads.append(self_attention(tape, q, k, v, capture=capture))
    return tape.matmul(tape.concat(heads, axis=-1), params.w_o)


def encoder_block(tape: Tape, x: Tensor, params: EncoderBlockParams,
                  capture: list | None = None) -> Tensor:
    """Pre-norm transformer encoder block; output shape equals input shape."""
    a = tape.layer_norm(x, params.ln1_gain, params.ln1_bias)
    x = tape.add(x, multi_head_attention(tape, a, params.attention, capture=capture))
    f = tape.layer_norm(x, params.ln2_gain, params.ln2_bias)
    h = tape.gelu(tape.add(tape.matmul(f, params.mlp_w1), params.mlp_b1))
    h = tape.add(tape.matmul(h, params.mlp_w2), params.mlp_b2)
    return tape.add(x, h)
