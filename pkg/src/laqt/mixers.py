"""Mixing networks: map per-agent action values plus the global state to a
joint value with non-negative per-agent credits.

All mixers share one calling convention so the trainer can swap them:

    forward(state, q_values, rng=None) -> MixerOutput(q_tot, credits, diagnostics)

``state`` blocks may carry leading batch dimensions; ``q_values`` follows
with shape [..., n_allies] and q_tot comes back as [...].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .latrans import (
    LaDiagnostics,
    LaTransformerParams,
    StackedTransformerParams,
    init_la_transformer,
    init_stacked_transformer,
    la_transformer_forward,
    stacked_transformer_forward,
)
from .nn import (
    LinearParams,
    MultiHeadAttentionParams,
    init_linear,
    init_multi_head_attention,
    linear,
    multi_head_attention,
    named_parameters,
)
from .tensor import Tensor, concat

MIXER_KINDS = ("la-hybrid", "la-hard", "qmix", "vdn", "stacked")


@dataclass(eq=False)
class GlobalState:
    """Entity-structured global state: one fixed-width block per unit,
    grouped by class, with dead units zero-filled and flagged."""

    allies: np.ndarray  # [..., n_allies, ally_dim]
    enemies: np.ndarray  # [..., n_enemies, enemy_dim]
    ally_alive: np.ndarray  # [..., n_allies] in {0, 1}
    enemy_alive: np.ndarray  # [..., n_enemies]

    @property
    def n_allies(self) -> int:
        return self.allies.shape[-2]

    @property
    def n_enemies(self) -> int:
        return self.enemies.shape[-2]

    def flat(self) -> np.ndarray:
        batch = self.allies.shape[:-2]
        return np.concatenate(
            [self.allies.reshape(*batch, -1), self.enemies.reshape(*batch, -1)], axis=-1
        )


class MixerOutput(NamedTuple):
    q_tot: Tensor
    credits: Tensor
    diagnostics: LaDiagnostics | None


def _check_inputs(state: GlobalState, q_values: Tensor) -> None:
    if q_values.shape[-1] != state.n_allies:
        raise ValueError(
            f"q_values for {q_values.shape[-1]} agents but state has {state.n_allies} allies"
        )
    if np.isnan(state.allies).any() or np.isnan(state.enemies).any():
        raise ValueError("NaN in global state")


# ---------------------------------------------------------------------------
# LA-QTransformer


@dataclass
class LaqParams:
    ally_encoder: LinearParams
    enemy_encoder: LinearParams
    la: LaTransformerParams
    credit_attention: MultiHeadAttentionParams
    credit_hidden: LinearParams
    credit_out: LinearParams
    bias_hidden: LinearParams
    bias_out: LinearParams


def init_laq(
    rng: np.random.Generator,
    ally_dim: int,
    enemy_dim: int,
    *,
    model_dim: int = 32,
    num_heads: int = 4,
    ffn_dim: int = 128,
    fc_mul_dim: int = 32,
    fc_add_dim: int = 32,
    levels: int = 3,
    mode: str = "hybrid",
    gumbel_temperature: float = 1.0,
) -> LaqParams:
    return LaqParams(
        ally_encoder=init_linear(rng, ally_dim, model_dim),
        enemy_encoder=init_linear(rng, enemy_dim, model_dim),
        la=init_la_transformer(rng, model_dim, levels, mode, ffn_dim, gumbel_temperature),
        credit_attention=init_multi_head_attention(rng, model_dim, num_heads),
        credit_hidden=init_linear(rng, model_dim, fc_mul_dim),
        credit_out=init_linear(rng, fc_mul_dim, 1),
        bias_hidden=init_linear(rng, model_dim, fc_add_dim),
        bias_out=init_linear(rng, fc_add_dim, 1),
    )


def la_qtransformer_forward(
    state: GlobalState,
    q_values: Tensor,
    p: LaqParams,
    rng: np.random.Generator | None = None,
) -> MixerOutput:
    """Encode entities, run the level-adaptive transformer, integrate the
    agent patterns with multi-head attention, and combine:

        q_tot = sum_i |credit_i| * q_i * alive_i + bias(state)

    Dead agents are masked out of the sum, so their network outputs cannot
    move q_tot.
    """
    _check_inputs(state, q_values)
    n_allies = state.n_allies
    batch = state.allies.shape[:-2]
    ally_emb = linear(Tensor(state.allies), p.ally_encoder)
    enemy_emb = linear(Tensor(state.enemies), p.enemy_encoder)
    entities = concat([ally_emb, enemy_emb], axis=-2)
    patterns, diag = la_transformer_forward(entities, p.la, rng)
    agent_patterns = patterns[..., :n_allies, :]
    integrated, _ = multi_head_attention(agent_patterns, patterns, p.credit_attention)
    raw = linear(linear(integrated, p.credit_hidden).relu(), p.credit_out)
    credits = raw.abs().reshape(*batch, n_allies)
    pooled = entities.mean(axis=-2)
    bias = linear(linear(pooled, p.bias_hidden).relu(), p.bias_out).reshape(*batch)
    alive = Tensor(state.ally_alive)
    q_tot = (credits * q_values * alive).sum(axis=-1) + bias
    return MixerOutput(q_tot, credits, diag)


class LaQMixer:
    population_invariant = True

    def __init__(self, params: LaqParams):
        self.params = params

    @property
    def kind(self) -> str:
        return "la-hard" if self.params.la.mode == "hard" else "la-hybrid"

    def forward(self, state, q_values, rng=None) -> MixerOutput:
        return la_qtransformer_forward(state, q_values, self.params, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params, "mixer")


# ---------------------------------------------------------------------------
# QMIX


@dataclass
class QmixParams:
    w1_hyper: LinearParams  # state -> n_agents * embed_dim (abs)
    b1_hyper: LinearParams  # state -> embed_dim
    w2_hyper: LinearParams  # state -> embed_dim (abs)
    b2_hidden: LinearParams  # state -> embed_dim
    b2_out: LinearParams  # embed_dim -> 1
    n_agents: int
    embed_dim: int


def init_qmix(
    rng: np.random.Generator, state_dim: int, n_agents: int, embed_dim: int = 32
) -> QmixParams:
    return QmixParams(
        w1_hyper=init_linear(rng, state_dim, n_agents * embed_dim),
        b1_hyper=init_linear(rng, state_dim, embed_dim),
        w2_hyper=init_linear(rng, state_dim, embed_dim),
        b2_hidden=init_linear(rng, state_dim, embed_dim),
        b2_out=init_linear(rng, embed_dim, 1),
        n_agents=n_agents,
        embed_dim=embed_dim,
    )


def qmix_forward(state: GlobalState, q_values: Tensor, p: QmixParams) -> MixerOutput:
    """Two-layer monotonic hypernetwork mixer: weights produced from the
    state pass through abs, so dq_tot/dq_i >= 0 everywhere."""
    _check_inputs(state, q_values)
    s = Tensor(state.flat())
    batch = s.shape[:-1]
    n, e = p.n_agents, p.embed_dim
    w1 = linear(s, p.w1_hyper).abs().reshape(*batch, n, e)
    b1 = linear(s, p.b1_hyper).reshape(*batch, 1, e)
    w2 = linear(s, p.w2_hyper).abs().reshape(*batch, e, 1)
    b2 = linear(linear(s, p.b2_hidden).relu(), p.b2_out).reshape(*batch)
    hidden = (q_values.reshape(*batch, 1, n) @ w1 + b1).elu()
    q_tot = (hidden @ w2).reshape(*batch) + b2
    credits = Tensor(np.ones(batch + (n,)))
    return MixerOutput(q_tot, credits, None)


class QmixMixer:
    kind = "qmix"
    population_invariant = False

    def __init__(self, params: QmixParams):
        self.params = params

    def forward(self, state, q_values, rng=None) -> MixerOutput:
        return qmix_forward(state, q_values, self.params)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params, "mixer")


# ---------------------------------------------------------------------------
# VDN


def vdn_forward(q_values: Tensor) -> MixerOutput:
    """q_tot is the plain sum; credits are the constant 1 (reported so the
    analysis pipeline treats every mixer alike)."""
    credits = Tensor(np.ones(q_values.shape))
    return MixerOutput(q_values.sum(axis=-1), credits, None)


class VdnMixer:
    kind = "vdn"
    population_invariant = True

    def __init__(self):
        self.params = None

    def forward(self, state, q_values, rng=None) -> MixerOutput:
        return vdn_forward(q_values)

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


# ---------------------------------------------------------------------------
# stacked-transformer ablation mixer


@dataclass
class StackedMixerParams:
    ally_encoder: LinearParams
    enemy_encoder: LinearParams
    stacked: StackedTransformerParams
    credit_attention: MultiHeadAttentionParams
    credit_hidden: LinearParams
    credit_out: LinearParams
    bias_hidden: LinearParams
    bias_out: LinearParams


def init_stacked_mixer(
    rng: np.random.Generator,
    ally_dim: int,
    enemy_dim: int,
    *,
    model_dim: int = 32,
    num_heads: int = 4,
    ffn_dim: int = 128,
    fc_mul_dim: int = 32,
    fc_add_dim: int = 32,
    depth: int = 2,
) -> StackedMixerParams:
    return StackedMixerParams(
        ally_encoder=init_linear(rng, ally_dim, model_dim),
        enemy_encoder=init_linear(rng, enemy_dim, model_dim),
        stacked=init_stacked_transformer(rng, model_dim, depth, ffn_dim),
        credit_attention=init_multi_head_attention(rng, model_dim, num_heads),
        credit_hidden=init_linear(rng, model_dim, fc_mul_dim),
        credit_out=init_linear(rng, fc_mul_dim, 1),
        bias_hidden=init_linear(rng, model_dim, fc_add_dim),
        bias_out=init_linear(rng, fc_add_dim, 1),
    )


def stacked_mixer_forward(
    state: GlobalState, q_values: Tensor, p: StackedMixerParams
) -> MixerOutput:
    """Same pipeline as the LA mixer with conventional transformer stacking
    in place of the level iteration (ablation baseline)."""
    _check_inputs(state, q_values)
    n_allies = state.n_allies
    batch = state.allies.shape[:-2]
    ally_emb = linear(Tensor(state.allies), p.ally_encoder)
    enemy_emb = linear(Tensor(state.enemies), p.enemy_encoder)
    entities = concat([ally_emb, enemy_emb], axis=-2)
    patterns, layer_weights = stacked_transformer_forward(entities, p.stacked)
    agent_patterns = patterns[..., :n_allies, :]
    integrated, _ = multi_head_attention(agent_patterns, patterns, p.credit_attention)
    raw = linear(linear(integrated, p.credit_hidden).relu(), p.credit_out)
    credits = raw.abs().reshape(*batch, n_allies)
    pooled = entities.mean(axis=-2)
    bias = linear(linear(pooled, p.bias_hidden).relu(), p.bias_out).reshape(*batch)
    alive = Tensor(state.ally_alive)
    q_tot = (credits * q_values * alive).sum(axis=-1) + bias
    diag = LaDiagnostics(attention=layer_weights, level_gaps=[], level_choice=None)
    return MixerOutput(q_tot, credits, diag)


class StackedMixer:
    kind = "stacked"
    population_invariant = True

    def __init__(self, params: StackedMixerParams):
        self.params = params

    def forward(self, state, q_values, rng=None) -> MixerOutput:
        return stacked_mixer_forward(state, q_values, self.params)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params, "mixer")


# ---------------------------------------------------------------------------
# factory


def make_mixer(
    kind: str,
    rng: np.random.Generator,
    *,
    ally_dim: int,
    enemy_dim: int,
    n_allies: int,
    n_enemies: int,
    model_dim: int = 32,
    num_heads: int = 4,
    ffn_dim: int = 128,
    fc_mul_dim: int = 32,
    fc_add_dim: int = 32,
    levels: int = 3,
    gumbel_temperature: float = 1.0,
    embed_dim: int = 32,
    stacked_depth: int = 2,
):
    if kind in ("la-hybrid", "la-hard"):
        params = init_laq(
            rng,
            ally_dim,
            enemy_dim,
            model_dim=model_dim,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            fc_mul_dim=fc_mul_dim,
            fc_add_dim=fc_add_dim,
            levels=levels,
            mode="hard" if kind == "la-hard" else "hybrid",
            gumbel_temperature=gumbel_temperature,
        )
        return LaQMixer(params)
    if kind == "qmix":
        state_dim = n_allies * ally_dim + n_enemies * enemy_dim
        return QmixMixer(init_qmix(rng, state_dim, n_allies, embed_dim))
    if kind == "vdn":
        return VdnMixer()
    if kind == "stacked":
        params = init_stacked_mixer(
            rng,
            ally_dim,
            enemy_dim,
            model_dim=model_dim,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            fc_mul_dim=fc_mul_dim,
            fc_add_dim=fc_add_dim,
            depth=stacked_depth,
        )
        return StackedMixer(params)
    raise ValueError(f"mixer kind must be one of {MIXER_KINDS}, got {kind!r}")
