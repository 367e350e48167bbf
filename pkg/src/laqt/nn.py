"""Reusable neural blocks: linear layers, scaled-dot and multi-head attention,
Gumbel-softmax hard attention, position-wise feed-forward with layer norm,
and a GRU cell. Blocks are pure functions of (params, inputs, rng)."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, affine, layer_norm_op, straight_through

MASK_FILL = -1e9


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


@dataclass
class MultiHeadAttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams
    num_heads: int

    @property
    def model_dim(self) -> int:
        return self.query.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class FeedForwardParams:
    hidden: LinearParams  # [ffn_dim, model_dim]
    out: LinearParams  # [model_dim, ffn_dim]
    gain: Tensor  # [model_dim] layer-norm scale
    shift: Tensor  # [model_dim] layer-norm offset


@dataclass
class GruParams:
    # Gate rows stacked in (reset, update, candidate) order.
    input_weight: Tensor  # [3*hidden, in]
    hidden_weight: Tensor  # [3*hidden, hidden]
    input_bias: Tensor  # [3*hidden]
    hidden_bias: Tensor  # [3*hidden]

    @property
    def hidden_dim(self) -> int:
        return self.hidden_weight.shape[1]


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> LinearParams:
    bound = 1.0 / math.sqrt(in_dim)
    return LinearParams(
        weight=Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)), requires_grad=True),
        bias=Tensor(rng.uniform(-bound, bound, out_dim), requires_grad=True),
    )


def init_multi_head_attention(
    rng: np.random.Generator, model_dim: int, num_heads: int
) -> MultiHeadAttentionParams:
    if model_dim % num_heads != 0:
        raise ValueError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
    return MultiHeadAttentionParams(
        query=init_linear(rng, model_dim, model_dim),
        key=init_linear(rng, model_dim, model_dim),
        value=init_linear(rng, model_dim, model_dim),
        out=init_linear(rng, model_dim, model_dim),
        num_heads=num_heads,
    )


def init_feed_forward(rng: np.random.Generator, model_dim: int, ffn_dim: int) -> FeedForwardParams:
    return FeedForwardParams(
        hidden=init_linear(rng, model_dim, ffn_dim),
        out=init_linear(rng, ffn_dim, model_dim),
        gain=Tensor(np.ones(model_dim), requires_grad=True),
        shift=Tensor(np.zeros(model_dim), requires_grad=True),
    )


def init_gru(rng: np.random.Generator, in_dim: int, hidden_dim: int) -> GruParams:
    bi = 1.0 / math.sqrt(in_dim)
    bh = 1.0 / math.sqrt(hidden_dim)
    return GruParams(
        input_weight=Tensor(rng.uniform(-bi, bi, (3 * hidden_dim, in_dim)), requires_grad=True),
        hidden_weight=Tensor(rng.uniform(-bh, bh, (3 * hidden_dim, hidden_dim)), requires_grad=True),
        input_bias=Tensor(rng.uniform(-bi, bi, 3 * hidden_dim), requires_grad=True),
        hidden_bias=Tensor(rng.uniform(-bh, bh, 3 * hidden_dim), requires_grad=True),
    )


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested parameter dataclasses into a name -> Tensor table."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(v, name))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(named_parameters(v, f"{prefix}.{i}"))
    return out


# ---------------------------------------------------------------------------
# blocks


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return affine(x, p.weight, p.bias)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``mask`` is boolean with True marking keys that may be attended; masked
    logits get an additive-1e9 penalty so their weights underflow to exact 0.
    Returns (output, attention weights).
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention dims disagree: q {q.shape} vs k {k.shape}")
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, logits.shape).any(axis=-1).all():
            raise ValueError("attention row with every key masked")
        logits = logits + Tensor(np.where(mask, 0.0, MASK_FILL))
    weights = logits.softmax(axis=-1)
    return weights @ v, weights


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *batch, n, d = x.shape
    return x.reshape(*batch, n, num_heads, d // num_heads).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *batch, h, n, hd = x.shape
    return x.swapaxes(-3, -2).reshape(*batch, n, h * hd)


def multi_head_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    p: MultiHeadAttentionParams,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Heads attend independently on projected slices; outputs are merged and
    projected. Returns (output [..., n_q, model_dim], weights [..., heads, n_q, n_k])."""
    q = _split_heads(linear(query_seq, p.query), p.num_heads)
    k = _split_heads(linear(kv_seq, p.key), p.num_heads)
    v = _split_heads(linear(kv_seq, p.value), p.num_heads)
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :, :]
    out, weights = scaled_dot_attention(q, k, v, head_mask)
    return linear(_merge_heads(out), p.out), weights


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def one_hot_argmax(x: np.ndarray) -> np.ndarray:
    """Exact one-hot of the argmax along the last axis (ties -> lowest index)."""
    out = np.zeros_like(x, dtype=np.float64)
    np.put_along_axis(out, x.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return out


def gumbel_softmax(
    logits: Tensor, temperature: float, hard: bool, rng: np.random.Generator
) -> Tensor:
    """Sample a relaxed categorical along the last axis.

    Soft mode returns softmax((logits + g)/temperature). Hard mode forwards
    the exact one-hot argmax of the soft sample and routes the gradient
    through the soft sample (straight-through).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    noise = gumbel_noise(rng, logits.shape)
    soft = ((logits + Tensor(noise)) * (1.0 / temperature)).softmax(axis=-1)
    if not hard:
        return soft
    return straight_through(one_hot_argmax(soft.data), soft)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-12) -> Tensor:
    return layer_norm_op(x, gain, shift, eps)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    """Position-wise two-layer map with residual, then layer norm (post-norm)."""
    inner = linear(linear(x, p.hidden).relu(), p.out)
    return layer_norm(x + inner, p.gain, p.shift)


def gru_cell_pre(gi: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """GRU update given the precomputed input-path projection ``gi`` (lets a
    trainer project whole sequences in one call)."""
    hd = p.hidden_dim
    gh = affine(h_prev, p.hidden_weight, p.hidden_bias)
    r = (gi[..., :hd] + gh[..., :hd]).sigmoid()
    z = (gi[..., hd : 2 * hd] + gh[..., hd : 2 * hd]).sigmoid()
    n = (gi[..., 2 * hd :] + r * gh[..., 2 * hd :]).tanh()
    return (1.0 - z) * n + z * h_prev


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """Standard gated recurrent unit update over the last axis."""
    return gru_cell_pre(affine(x, p.input_weight, p.input_bias), h_prev, p)


def transformer_block(
    x: Tensor,
    attention: MultiHeadAttentionParams,
    ffn: FeedForwardParams,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Plain self-attention block: attention output into the feed-forward module."""
    attended, weights = multi_head_attention(x, x, attention, mask)
    return feed_forward(attended, ffn), weights


def mask_action_values(values: Tensor, avail: np.ndarray) -> Tensor:
    """Pin unavailable entries to exactly MASK_FILL; gradients flow only to
    available entries."""
    a = np.asarray(avail, dtype=np.float64)
    return values * Tensor(a) + Tensor((1.0 - a) * MASK_FILL)
