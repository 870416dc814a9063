"""Cross-channel residual self-attention blocks.

The input is a C x E matrix of per-channel utterance embeddings. Each
inter-channel layer runs multi-head scaled dot-product attention along the
channel dimension, where the raw (pre-normalization) score matrices from the
previous layer are added to the current ones before normalizing, and the new
raw scores are handed to the next layer. Attention output and a position-wise
feed-forward network are both wrapped in residual connections. The global
fusion block is the same layer followed by mean pooling over channels, so its
output width is independent of C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

from .errors import ContractError
from .tape import (
    NormMode,
    Tensor,
    concat_cols,
    matmul,
    mean_rows,
    relu,
    row_normalize,
    transpose,
)

NormAxis = Literal["query-rows", "key-columns"]

_NORM_AXES = ("query-rows", "key-columns")


@dataclass
class HeadParams:
    """Query/key/value projections of one attention head (d_in x d_k each)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1:
            raise ContractError(f"head projection shapes differ: {shapes}")

    @property
    def d_in(self) -> int:
        return self.w_q.rows

    @property
    def d_k(self) -> int:
        return self.w_q.cols


@dataclass
class LayerParams:
    """One inter-channel processing layer: h heads, output projection, FFN."""

    heads: list[HeadParams]
    w_o: Tensor       # E x E
    ffn_w1: Tensor    # E x F
    ffn_b1: Tensor    # 1 x F
    ffn_w2: Tensor    # F x E
    ffn_b2: Tensor    # 1 x E

    def __post_init__(self):
        if not self.heads:
            raise ContractError("a layer needs at least one head")
        width = len(self.heads) * self.heads[0].d_k
        if self.w_o.shape != (width, width):
            raise ContractError(
                f"w_o must be {width}x{width} (heads x d_k), got {self.w_o.shape}")
        if self.ffn_w1.rows != width or self.ffn_w2.cols != width:
            raise ContractError("FFN widths inconsistent with layer width")
        if self.ffn_b1.shape != (1, self.ffn_w1.cols) or self.ffn_b2.shape != (1, width):
            raise ContractError("FFN bias shapes inconsistent")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def width(self) -> int:
        return self.w_o.rows


class AttentionState:
    """Per-head raw score matrices threaded between layers (h of C x C)."""

    __slots__ = ("scores",)

    def __init__(self, scores: list[Tensor]):
        if not scores:
            raise ContractError("attention state needs at least one head")
        c = scores[0].rows
        for s in scores:
            if s.shape != (c, c):
                raise ContractError(
                    f"score matrices must all be {c}x{c}, got {s.shape}")
        self.scores = scores

    @classmethod
    def zeros(cls, n_heads: int, channels: int) -> "AttentionState":
        import numpy as np

        return cls([Tensor(np.zeros((channels, channels))) for _ in range(n_heads)])

    @property
    def n_heads(self) -> int:
        return len(self.scores)

    @property
    def channels(self) -> int:
        return self.scores[0].rows


def _normalize_scores(raw: Tensor, mode: NormMode, axis: NormAxis,
                      trace: list | None) -> Tensor:
    if axis not in _NORM_AXES:
        raise ContractError(f"unknown normalization axis {axis!r}")
    if axis == "query-rows":
        attn = row_normalize(raw, mode)
    else:
        attn = transpose(row_normalize(transpose(raw), mode))
    if trace is not None:
        trace.append(attn.data.copy())
    return attn


def attention_head(x: Tensor, prev: Tensor, params: HeadParams, mode: NormMode,
                   axis: NormAxis = "query-rows",
                   trace: list | None = None) -> tuple[Tensor, Tensor]:
    """One head of cross-channel attention with additive residual scores.

    Returns ``(head_out, new_scores)`` where ``new_scores`` is the raw
    Q K^T / sqrt(d_k) + prev matrix before normalization; that raw matrix is
    what the next layer receives.
    """
    c = x.rows
    if prev.shape != (c, c):
        raise ContractError(f"prev scores must be {c}x{c}, got {prev.shape}")
    if x.cols != params.d_in:
        raise ContractError(
            f"input width {x.cols} != head projection input {params.d_in}")
    q = matmul(x, params.w_q)
    k = matmul(x, params.w_k)
    v = matmul(x, params.w_v)
    raw = matmul(q, transpose(k)) * (1.0 / math.sqrt(params.d_k)) + prev
    attn = _normalize_scores(raw, mode, axis, trace)
    return matmul(attn, v), raw


def multi_head(x: Tensor, state: AttentionState, params: LayerParams,
               mode: NormMode, axis: NormAxis = "query-rows",
               trace: list | None = None) -> tuple[Tensor, AttentionState]:
    """All heads side by side, projected by w_o; collects new raw scores."""
    if state.n_heads != params.n_heads:
        raise ContractError(
            f"state has {state.n_heads} heads, layer has {params.n_heads}")
    if state.channels != x.rows:
        raise ContractError(
            f"state is for {state.channels} channels, input has {x.rows}")
    outs, raws = [], []
    head_trace: list | None = [] if trace is not None else None
    for head, prev in zip(params.heads, state.scores):
        out, raw = attention_head(x, prev, head, mode, axis, trace=head_trace)
        outs.append(out)
        raws.append(raw)
    if trace is not None:
        trace.append(head_trace)
    z = matmul(concat_cols(outs), params.w_o)
    return z, AttentionState(raws)


def feed_forward(x: Tensor, params: LayerParams) -> Tensor:
    hidden = relu(matmul(x, params.ffn_w1) + params.ffn_b1)
    return matmul(hidden, params.ffn_w2) + params.ffn_b2


def inter_channel_layer(x: Tensor, state: AttentionState, params: LayerParams,
                        mode: NormMode, axis: NormAxis = "query-rows",
                        trace: list | None = None) -> tuple[Tensor, AttentionState]:
    """Attention and FFN, each wrapped in a residual connection."""
    if x.cols != params.width:
        raise ContractError(f"input width {x.cols} != layer width {params.width}")
    z, new_state = multi_head(x, state, params, mode, axis, trace=trace)
    a = x + z
    y = a + feed_forward(a, params)
    return y, new_state


def global_fusion(x: Tensor, state: AttentionState, params: LayerParams,
                  mode: NormMode, axis: NormAxis = "query-rows",
                  trace: list | None = None) -> Tensor:
    """Fuse all channels into one 1 x E embedding, whatever C is."""
    if x.rows < 1:
        raise ContractError("global fusion needs at least one channel")
    y, _ = inter_channel_layer(x, state, params, mode, axis, trace=trace)
    return mean_rows(y)
