"""Level-adaptive transformer.

Coordination patterns are produced at L levels with the key/value
projections computed once from the input and held fixed: level 1 is plain
scaled-dot attention, and level i re-attends with the previous level's
pattern as the query. A per-entity hard selection (Gumbel mask over levels)
or a hybrid fusion (linear map over the concatenated levels) picks the
pattern that feeds the final feed-forward module.

The module also carries the conventionally *stacked* transformer (fresh
Q/K/V per layer) used as an ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    FeedForwardParams,
    LinearParams,
    feed_forward,
    gumbel_softmax,
    init_feed_forward,
    init_linear,
    linear,
    one_hot_argmax,
    scaled_dot_attention,
)
from .tensor import Tensor, concat, stack

MODES = ("hard", "hybrid")


@dataclass
class LaTransformerParams:
    query: LinearParams  # used by level 1 only; deeper levels query with c_{i-1}
    key: LinearParams
    value: LinearParams
    hard_key: LinearParams  # encodes each entity into the hard-selection key
    fusion: LinearParams  # [model_dim, levels * model_dim]
    ffn: FeedForwardParams
    levels: int
    mode: str
    gumbel_temperature: float = 1.0


@dataclass
class LevelStack:
    patterns: list[Tensor]  # each [..., n_entities, model_dim]
    attention: list[Tensor]  # each [..., n_entities, n_entities]

    @property
    def levels(self) -> int:
        return len(self.patterns)


@dataclass
class LaDiagnostics:
    """Per-forward analysis bundle (detached numpy arrays)."""

    attention: list[np.ndarray]
    level_gaps: list[float]  # gap between level i+1 and i, i = 1..L-1
    level_choice: np.ndarray | None  # hard mode: 1-based chosen level per entity


def init_la_transformer(
    rng: np.random.Generator,
    model_dim: int,
    levels: int,
    mode: str,
    ffn_dim: int,
    gumbel_temperature: float = 1.0,
) -> LaTransformerParams:
    if levels < 1:
        raise ValueError(f"level count must be >= 1, got {levels}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return LaTransformerParams(
        query=init_linear(rng, model_dim, model_dim),
        key=init_linear(rng, model_dim, model_dim),
        value=init_linear(rng, model_dim, model_dim),
        hard_key=init_linear(rng, model_dim, model_dim),
        fusion=init_linear(rng, levels * model_dim, model_dim),
        ffn=init_feed_forward(rng, model_dim, ffn_dim),
        levels=levels,
        mode=mode,
        gumbel_temperature=gumbel_temperature,
    )


def level_iterate(embeddings: Tensor, p: LaTransformerParams) -> LevelStack:
    """Produce all L coordination patterns with fixed keys and values."""
    if p.levels < 1:
        raise ValueError(f"level count must be >= 1, got {p.levels}")
    q = linear(embeddings, p.query)
    k = linear(embeddings, p.key)
    v = linear(embeddings, p.value)
    patterns: list[Tensor] = []
    weights: list[Tensor] = []
    current = q
    for _ in range(p.levels):
        current, w = scaled_dot_attention(current, k, v)
        patterns.append(current)
        weights.append(w)
    return LevelStack(patterns=patterns, attention=weights)


def level_gap(stack: LevelStack, i: int, j: int) -> float:
    """Frobenius distance between the patterns of two (1-based) levels."""
    levels = stack.levels
    for idx in (i, j):
        if not 1 <= idx <= levels:
            raise IndexError(f"level {idx} outside 1..{levels}")
    diff = stack.patterns[i - 1].data - stack.patterns[j - 1].data
    return float(np.sqrt((diff * diff).sum()))


def _level_logits(stack_: LevelStack, embeddings: Tensor, p: LaTransformerParams) -> Tensor:
    # One logit per (entity, level): the hard key dotted with that level's
    # pattern row for the entity.
    hard_key = linear(embeddings, p.hard_key)
    return stack([(hard_key * c).sum(axis=-1) for c in stack_.patterns], axis=-1)


def select_hard(
    stack_: LevelStack,
    embeddings: Tensor,
    p: LaTransformerParams,
    rng: np.random.Generator | None,
) -> tuple[Tensor, np.ndarray]:
    """Pick one pattern per entity.

    With a generator the mask is a straight-through Gumbel sample; without
    one (evaluation / analysis) it is the noise-free argmax, treated as a
    constant so the forward value stays piecewise smooth.
    Returns (selected patterns [..., n, model_dim], 1-based chosen levels).
    """
    logits = _level_logits(stack_, embeddings, p)
    if rng is not None:
        mask = gumbel_softmax(logits, p.gumbel_temperature, hard=True, rng=rng)
    else:
        mask = Tensor(one_hot_argmax(logits.data))
    choice = mask.data.argmax(axis=-1).astype(np.int64) + 1
    stacked = stack(stack_.patterns, axis=-2)  # [..., n, L, model_dim]
    mask_col = mask.reshape(*mask.shape, 1)
    selected = (stacked * mask_col).sum(axis=-2)
    return selected, choice


def fuse_hybrid(stack_: LevelStack, p: LaTransformerParams) -> Tensor:
    """Fuse all levels per entity through the linear fusion map."""
    return linear(concat(stack_.patterns, axis=-1), p.fusion)


def la_transformer_forward(
    embeddings: Tensor,
    p: LaTransformerParams,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LaDiagnostics]:
    """Full pass: level iteration, hard/hybrid pattern choice, feed-forward."""
    stack_ = level_iterate(embeddings, p)
    choice = None
    if p.mode == "hard":
        picked, choice = select_hard(stack_, embeddings, p, rng)
    elif p.mode == "hybrid":
        picked = fuse_hybrid(stack_, p)
    else:
        raise ValueError(f"mode must be one of {MODES}, got {p.mode!r}")
    out = feed_forward(picked, p.ffn)
    gaps = [level_gap(stack_, i + 1, i) for i in range(1, p.levels)]
    diag = LaDiagnostics(
        attention=[w.data for w in stack_.attention],
        level_gaps=gaps,
        level_choice=choice,
    )
    return out, diag


# ---------------------------------------------------------------------------
# stacked-transformer ablation


@dataclass
class StackedLayerParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    ffn: FeedForwardParams


@dataclass
class StackedTransformerParams:
    layers: list[StackedLayerParams] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.layers)


def init_stacked_transformer(
    rng: np.random.Generator, model_dim: int, depth: int, ffn_dim: int
) -> StackedTransformerParams:
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    return StackedTransformerParams(
        layers=[
            StackedLayerParams(
                query=init_linear(rng, model_dim, model_dim),
                key=init_linear(rng, model_dim, model_dim),
                value=init_linear(rng, model_dim, model_dim),
                ffn=init_feed_forward(rng, model_dim, ffn_dim),
            )
            for _ in range(depth)
        ]
    )


def stacked_transformer_forward(
    embeddings: Tensor, p: StackedTransformerParams
) -> tuple[Tensor, list[np.ndarray]]:
    """Conventional stacking: every layer recomputes Q, K, V from the
    previous layer's output."""
    x = embeddings
    weights: list[np.ndarray] = []
    for layer in p.layers:
        attended, w = scaled_dot_attention(
            linear(x, layer.query), linear(x, layer.key), linear(x, layer.value)
        )
        x = feed_forward(attended, layer.ffn)
        weights.append(w.data)
    return x, weights
