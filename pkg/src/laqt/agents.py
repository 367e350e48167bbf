"""Agent networks.

The population-invariant agent (PIT) consumes entity-structured
observations: per-class encoders feed small transformer blocks that build a
group representation (mean embedding plus the entity most attended by the
agent's own token), a GRU core merges the groups over time, and the action
head splits into self actions (fixed width 6) and one interaction value per
enemy scored by a head shared across enemies. One parameter set therefore
evaluates on any team sizes.

The flat GRU agent is the deliberately non-invariant baseline: its input and
output widths are baked to one scenario.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    FeedForwardParams,
    GruParams,
    LinearParams,
    MultiHeadAttentionParams,
    gru_cell,
    gru_cell_pre,
    init_feed_forward,
    init_gru,
    init_linear,
    init_multi_head_attention,
    linear,
    mask_action_values,
    multi_head_attention,
    named_parameters,
    feed_forward,
)
from .tensor import Tensor, affine, concat

N_SELF_ACTIONS = 6  # no-op, stop, move north/south/east/west
AGENT_KINDS = ("pit", "gru")


@dataclass(eq=False)
class EntityObservation:
    """One agent's local view: own attributes plus the visible, living
    allies and enemies as per-class fixed-width feature rows."""

    self_attrs: np.ndarray  # [self_dim]
    ally_feats: np.ndarray  # [n_visible_allies, ally_dim]
    enemy_feats: np.ndarray  # [n_visible_enemies, enemy_dim]
    ally_ids: list[int]
    enemy_ids: list[int]


@dataclass(eq=False)
class PaddedObs:
    """Observations padded to scenario-fixed entity counts with visibility
    masks; leading axes are free batch dimensions."""

    self_attrs: np.ndarray  # [..., self_dim]
    ally_feats: np.ndarray  # [..., max_allies, ally_dim]
    ally_mask: np.ndarray  # [..., max_allies]
    enemy_feats: np.ndarray  # [..., max_enemies, enemy_dim]
    enemy_mask: np.ndarray  # [..., max_enemies]

    def flat(self) -> np.ndarray:
        batch = self.self_attrs.shape[:-1]
        return np.concatenate(
            [
                self.self_attrs,
                (self.ally_feats * self.ally_mask[..., None]).reshape(*batch, -1),
                (self.enemy_feats * self.enemy_mask[..., None]).reshape(*batch, -1),
            ],
            axis=-1,
        )


def pad_observations(
    observations: list[EntityObservation], max_allies: int, max_enemies: int
) -> PaddedObs:
    """Stack a team's observations into fixed-size arrays. Enemy rows keep
    their scenario index so interaction values line up with attack actions."""
    n = len(observations)
    self_dim = observations[0].self_attrs.shape[0]
    ally_dim = observations[0].ally_feats.shape[1]
    enemy_dim = observations[0].enemy_feats.shape[1]
    out = PaddedObs(
        self_attrs=np.zeros((n, self_dim)),
        ally_feats=np.zeros((n, max_allies, ally_dim)),
        ally_mask=np.zeros((n, max_allies)),
        enemy_feats=np.zeros((n, max_enemies, enemy_dim)),
        enemy_mask=np.zeros((n, max_enemies)),
    )
    for i, obs in enumerate(observations):
        out.self_attrs[i] = obs.self_attrs
        for row, feats in enumerate(obs.ally_feats):
            out.ally_feats[i, row] = feats
            out.ally_mask[i, row] = 1.0
        for row, enemy_id in enumerate(obs.enemy_ids):
            out.enemy_feats[i, enemy_id] = obs.enemy_feats[row]
            out.enemy_mask[i, enemy_id] = 1.0
    return out


# ---------------------------------------------------------------------------
# last-action decoupling


def decouple_last_action(index: int, n_enemies: int) -> tuple[np.ndarray, np.ndarray]:
    """Split an action index into the move one-hot and per-enemy attack bits
    so the feature widths stay fixed when the enemy count changes."""
    if not 0 <= index < N_SELF_ACTIONS + n_enemies:
        raise ValueError(f"action index {index} outside 0..{N_SELF_ACTIONS + n_enemies - 1}")
    move = np.zeros(N_SELF_ACTIONS)
    bits = np.zeros(n_enemies)
    if index < N_SELF_ACTIONS:
        move[index] = 1.0
    else:
        bits[index - N_SELF_ACTIONS] = 1.0
    return move, bits


def recompose_last_action(move: np.ndarray, bits: np.ndarray) -> int:
    if move.any():
        return int(move.argmax())
    return N_SELF_ACTIONS + int(bits.argmax())


# ---------------------------------------------------------------------------
# PIT


@dataclass
class GroupBlockParams:
    attention: MultiHeadAttentionParams
    ffn: FeedForwardParams


@dataclass
class PitParams:
    self_encoder: LinearParams
    ally_encoder: LinearParams
    enemy_encoder: LinearParams
    ally_group: GroupBlockParams
    enemy_group: GroupBlockParams
    gru: GruParams
    self_head: LinearParams  # hidden -> 6
    interact_head: LinearParams  # hidden + model_dim -> 1, shared across enemies

    @property
    def model_dim(self) -> int:
        return self.self_encoder.weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim


def init_pit(
    rng: np.random.Generator,
    self_dim: int,
    ally_dim: int,
    enemy_dim: int,
    *,
    model_dim: int = 16,
    num_heads: int = 2,
    ffn_dim: int = 64,
    hidden_dim: int = 64,
) -> PitParams:
    def group() -> GroupBlockParams:
        return GroupBlockParams(
            attention=init_multi_head_attention(rng, model_dim, num_heads),
            ffn=init_feed_forward(rng, model_dim, ffn_dim),
        )

    return PitParams(
        self_encoder=init_linear(rng, self_dim, model_dim),
        ally_encoder=init_linear(rng, ally_dim, model_dim),
        enemy_encoder=init_linear(rng, enemy_dim, model_dim),
        ally_group=group(),
        enemy_group=group(),
        gru=init_gru(rng, 5 * model_dim, hidden_dim),
        self_head=init_linear(rng, hidden_dim, N_SELF_ACTIONS),
        interact_head=init_linear(rng, hidden_dim + model_dim, 1),
    )


def property_group(
    self_emb: Tensor,
    feats: np.ndarray,
    mask: np.ndarray,
    encoder: LinearParams,
    block: GroupBlockParams,
) -> tuple[Tensor, Tensor]:
    """Run one entity group through its transformer block with the agent's
    own embedding prepended as a query token.

    The group representation is [mean of entity embeddings ; embedding of
    the entity the self token attends to most]. Empty groups yield zeros.
    Returns (representation [..., 2*model_dim], entity embeddings
    [..., n, model_dim]).
    """
    batch = feats.shape[:-2]
    n = feats.shape[-2]
    emb = linear(Tensor(feats), encoder)
    tokens = concat([self_emb.reshape(*batch, 1, -1), emb], axis=-2)
    key_mask = np.concatenate([np.ones(batch + (1,)), mask], axis=-1)
    attended, weights = multi_head_attention(
        tokens, tokens, block.attention, key_mask[..., None, :]
    )
    out_tokens = feed_forward(attended, block.ffn)
    entity_out = out_tokens[..., 1:, :]

    mask_t = Tensor(mask)
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
    mean_emb = (entity_out * mask_t.reshape(*mask.shape, 1)).sum(axis=-2) / Tensor(count)

    # Self token's attention over entity keys, averaged across heads; masked
    # keys carry exactly zero weight so argmax picks a visible entity.
    self_weights = weights.data.mean(axis=-3)[..., 0, 1:] * mask
    pick = self_weights.argmax(axis=-1)
    idx = np.broadcast_to(pick[..., None, None], batch + (1, emb.shape[-1]))
    picked = entity_out.take_along(np.ascontiguousarray(idx), axis=-2)[..., 0, :]

    has_any = Tensor((mask.sum(axis=-1) > 0).astype(np.float64)[..., None])
    return concat([mean_emb, picked], axis=-1) * has_any, entity_out


def pit_encode(obs: PaddedObs, p: PitParams) -> tuple[Tensor, Tensor]:
    """Everything that does not depend on the hidden state: entity encoders,
    both group transformers, and the GRU input projection. Batchable across
    timesteps. Returns (projected GRU input [..., 3*hidden], enemy
    embeddings [..., n_enemies, model_dim])."""
    e_self = linear(Tensor(obs.self_attrs), p.self_encoder)
    ally_repr, _ = property_group(e_self, obs.ally_feats, obs.ally_mask, p.ally_encoder, p.ally_group)
    enemy_repr, enemy_emb = property_group(
        e_self, obs.enemy_feats, obs.enemy_mask, p.enemy_encoder, p.enemy_group
    )
    gru_in = concat([e_self, ally_repr, enemy_repr], axis=-1)
    gi = affine(gru_in, p.gru.input_weight, p.gru.input_bias)
    return gi, enemy_emb


def pit_head_values(
    h: Tensor, enemy_emb: Tensor, p: PitParams, avail: np.ndarray
) -> Tensor:
    """Action heads over any leading batch shape: self-action values from
    the hidden state, one shared-head interaction value per enemy."""
    self_values = linear(h, p.self_head)
    batch = h.shape[:-1]
    n_enemies = enemy_emb.shape[-2]
    h_tiled = h.reshape(*batch, 1, -1).broadcast_to(batch + (n_enemies, p.hidden_dim))
    interact = linear(concat([h_tiled, enemy_emb], axis=-1), p.interact_head)
    values = concat([self_values, interact.reshape(*batch, n_enemies)], axis=-1)
    return mask_action_values(values, avail)


def pit_forward(
    obs: PaddedObs, h_prev: Tensor, p: PitParams, avail: np.ndarray
) -> tuple[Tensor, Tensor, Tensor]:
    """One recurrent step. Returns (masked action values
    [..., 6 + n_enemies], next hidden state, enemy embeddings)."""
    gi, enemy_emb = pit_encode(obs, p)
    h_next = gru_cell_pre(gi, h_prev, p.gru)
    values = pit_head_values(h_next, enemy_emb, p, avail)
    return values, h_next, enemy_emb


class PitAgent:
    kind = "pit"
    population_invariant = True

    def __init__(self, params: PitParams):
        self.params = params

    def init_hidden(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.params.hidden_dim)))

    def forward(self, obs: PaddedObs, h_prev: Tensor, avail: np.ndarray):
        values, h_next, _ = pit_forward(obs, h_prev, self.params, avail)
        return values, h_next

    # split API so the trainer can batch everything except the GRU over time
    def encode(self, obs: PaddedObs):
        return pit_encode(obs, self.params)

    def cell(self, encoded_t, h_prev: Tensor) -> Tensor:
        gi, _ = encoded_t
        return gru_cell_pre(gi, h_prev, self.params.gru)

    def head_values(self, h: Tensor, encoded, avail: np.ndarray) -> Tensor:
        _, enemy_emb = encoded
        return pit_head_values(h, enemy_emb, self.params, avail)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params, "agent")


# ---------------------------------------------------------------------------
# flat GRU baseline


@dataclass
class GruAgentParams:
    encoder: LinearParams
    gru: GruParams
    head: LinearParams

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim


def init_gru_agent(
    rng: np.random.Generator, flat_dim: int, n_actions: int, hidden_dim: int = 64
) -> GruAgentParams:
    return GruAgentParams(
        encoder=init_linear(rng, flat_dim, hidden_dim),
        gru=init_gru(rng, hidden_dim, hidden_dim),
        head=init_linear(rng, hidden_dim, n_actions),
    )


def gru_agent_forward(
    flat_obs: np.ndarray, h_prev: Tensor, p: GruAgentParams, avail: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Flat pipeline: MLP encoder, GRU, one linear head of scenario width."""
    h_next = gru_cell(linear(Tensor(flat_obs), p.encoder).relu(), h_prev, p.gru)
    return mask_action_values(linear(h_next, p.head), avail), h_next


class GruAgent:
    kind = "gru"
    population_invariant = False

    def __init__(self, params: GruAgentParams):
        self.params = params

    def init_hidden(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.params.hidden_dim)))

    def forward(self, obs: PaddedObs, h_prev: Tensor, avail: np.ndarray):
        return gru_agent_forward(obs.flat(), h_prev, self.params, avail)

    def encode(self, obs: PaddedObs):
        enc = linear(Tensor(obs.flat()), self.params.encoder).relu()
        return (affine(enc, self.params.gru.input_weight, self.params.gru.input_bias),)

    def cell(self, encoded_t, h_prev: Tensor) -> Tensor:
        return gru_cell_pre(encoded_t[0], h_prev, self.params.gru)

    def head_values(self, h: Tensor, encoded, avail: np.ndarray) -> Tensor:
        return mask_action_values(linear(h, self.params.head), avail)

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params, "agent")


# ---------------------------------------------------------------------------
# action selection


def select_action(
    values: np.ndarray, avail: np.ndarray, epsilon: float, rng: np.random.Generator | None
) -> int:
    """Epsilon-greedy over available actions; greedy ties break to the
    lowest index. Never selects an unavailable action."""
    available = np.flatnonzero(avail)
    if available.size == 0:
        raise ValueError("no available action")
    if epsilon > 0.0 and rng is not None and rng.random() < epsilon:
        return int(available[rng.integers(available.size)])
    masked = np.where(np.asarray(avail, dtype=bool), values, -np.inf)
    return int(masked.argmax())
