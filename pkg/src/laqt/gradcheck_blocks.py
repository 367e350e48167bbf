"""Finite-difference oracle builders for every differentiable block.

Each builder takes a seed and returns (params table, loss closure). Losses
project the block output through fixed random weights so every output
coordinate carries gradient. Hard-attention blocks are checked in their
noise-free mode, where the level mask is a constant and the forward map is
piecewise smooth — exactly what central differences measure.
"""

from __future__ import annotations

import numpy as np

from .agents import init_pit, pit_forward, PaddedObs
from .config import default_run_config
from .env import ALLY_FEATS, ENEMY_FEATS, SELF_FEATS, SkirmishEnv
from .latrans import init_la_transformer, init_stacked_transformer, la_transformer_forward, stacked_transformer_forward
from .mixers import GlobalState, init_laq, init_qmix, la_qtransformer_forward, qmix_forward
from .nn import (
    feed_forward,
    gru_cell,
    init_feed_forward,
    init_gru,
    init_multi_head_attention,
    multi_head_attention,
    named_parameters,
    scaled_dot_attention,
)
from .tensor import Tensor


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def build_attention(seed: int):
    rng = np.random.default_rng(seed)
    q = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    v = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    wrng = np.random.default_rng(seed + 1)
    weights = wrng.normal(size=(4, 6))
    return {"q": q, "k": k, "v": v}, lambda: (
        scaled_dot_attention(q, k, v)[0] * Tensor(weights)
    ).sum()


def build_multi_head_attention(seed: int):
    rng = np.random.default_rng(seed)
    p = init_multi_head_attention(rng, 8, 2)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    weights = rng.normal(size=(4, 8))
    table = named_parameters(p, "mha")
    table["x"] = x
    return table, lambda: (multi_head_attention(x, x, p)[0] * Tensor(weights)).sum()


def build_feed_forward(seed: int):
    rng = np.random.default_rng(seed)
    p = init_feed_forward(rng, 8, 16)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    weights = rng.normal(size=(4, 8))
    table = named_parameters(p, "ffn")
    table["x"] = x
    return table, lambda: (feed_forward(x, p) * Tensor(weights)).sum()


def build_gru(seed: int):
    rng = np.random.default_rng(seed)
    p = init_gru(rng, 6, 8)
    xs = [Tensor(rng.normal(size=(2, 6))) for _ in range(5)]
    weights = rng.normal(size=(2, 8))

    def loss():
        h = Tensor(np.zeros((2, 8)))
        for x in xs:
            h = gru_cell(x, h, p)
        return (h * Tensor(weights)).sum()

    return named_parameters(p, "gru"), loss


def _la_builder(mode: str):
    def build(seed: int):
        rng = np.random.default_rng(seed)
        p = init_la_transformer(rng, 8, 3, mode, ffn_dim=16)
        emb = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        weights = rng.normal(size=(5, 8))
        table = named_parameters(p, "la")
        table["emb"] = emb
        return table, lambda: (la_transformer_forward(emb, p, rng=None)[0] * Tensor(weights)).sum()

    return build


def build_stacked(seed: int):
    rng = np.random.default_rng(seed)
    p = init_stacked_transformer(rng, 8, 2, 16)
    emb = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    weights = rng.normal(size=(5, 8))
    table = named_parameters(p, "stacked")
    table["emb"] = emb
    return table, lambda: (stacked_transformer_forward(emb, p)[0] * Tensor(weights)).sum()


def _random_state(rng, n_allies=3, n_enemies=3):
    return GlobalState(
        allies=rng.normal(size=(n_allies, 9)),
        enemies=rng.normal(size=(n_enemies, 9)),
        ally_alive=np.ones(n_allies),
        enemy_alive=np.ones(n_enemies),
    )


def _laq_builder(mode: str, model_dim: int = 8):
    def build(seed: int):
        rng = np.random.default_rng(seed)
        p = init_laq(
            rng, 9, 9, model_dim=model_dim, num_heads=2, ffn_dim=16,
            fc_mul_dim=8, fc_add_dim=8, levels=2, mode=mode,
        )
        state = _random_state(np.random.default_rng(seed + 1))
        q = Tensor(np.random.default_rng(seed + 2).normal(size=3), requires_grad=True)
        table = named_parameters(p, "laq")
        table["q"] = q
        return table, lambda: la_qtransformer_forward(state, q, p, rng=None).q_tot

    return build


def build_qmix(seed: int):
    rng = np.random.default_rng(seed)
    p = init_qmix(rng, 6 * 9, 3, embed_dim=8)
    state = _random_state(np.random.default_rng(seed + 1))
    q = Tensor(np.random.default_rng(seed + 2).normal(size=3), requires_grad=True)
    table = named_parameters(p, "qmix")
    table["q"] = q
    return table, lambda: qmix_forward(state, q, p).q_tot


def build_pit(seed: int):
    rng = np.random.default_rng(seed)
    p = init_pit(rng, SELF_FEATS, ALLY_FEATS, ENEMY_FEATS, model_dim=4, num_heads=2, ffn_dim=8, hidden_dim=8)
    orng = np.random.default_rng(seed + 1)
    obs = PaddedObs(
        self_attrs=orng.normal(size=(3, SELF_FEATS)),
        ally_feats=orng.normal(size=(3, 2, ALLY_FEATS)),
        ally_mask=(orng.random((3, 2)) > 0.3).astype(np.float64),
        enemy_feats=orng.normal(size=(3, 3, ENEMY_FEATS)),
        enemy_mask=(orng.random((3, 3)) > 0.3).astype(np.float64),
    )
    avail = np.ones((3, 9))
    weights = orng.normal(size=(3, 9))

    def loss():
        values, _, _ = pit_forward(obs, Tensor(np.zeros((3, 8))), p, avail)
        return (values * Tensor(weights)).sum()

    return named_parameters(p, "pit"), loss


def build_td_loss(seed: int):
    """Full TD objective on a real 2-agent 2-step batch (PIT + hybrid mixer)."""
    from .env import ScenarioConfig
    from .trainer import EpisodeBatch, build_learner, run_episode, td_loss

    cfg = default_run_config("3m", "la-hybrid", "pit")
    cfg.scenario = ScenarioConfig(name="2m", ally_types=("m", "m"), enemy_types=("m", "m"), max_steps=2)
    cfg.agent.model_dim = 4
    cfg.agent.hidden_dim = 8
    cfg.agent.ffn_dim = 8
    cfg.mixer.model_dim = 8
    cfg.mixer.num_heads = 2
    cfg.mixer.ffn_dim = 16
    cfg.mixer.fc_mul_dim = 8
    cfg.mixer.fc_add_dim = 8
    cfg.mixer.levels = 2
    learner = build_learner(cfg, seed=seed)
    env = SkirmishEnv(cfg.scenario)
    rng = np.random.default_rng(seed + 3)
    records = [run_episode(env, learner.agent, 1.0, rng, seed=seed * 100 + i)[0] for i in range(2)]
    batch = EpisodeBatch.from_records(records)
    # keep target parameters distinct from the online ones
    trng = np.random.default_rng(seed + 4)
    for p in learner.target_parameters().values():
        p.data += 0.01 * trng.normal(size=p.data.shape)
    return learner.parameters(), lambda: td_loss(batch, learner, gamma=0.99, mixer_rng=None)[0]


REGISTRY = {
    "attention": build_attention,
    "multi_head_attention": build_multi_head_attention,
    "feed_forward": build_feed_forward,
    "gru_cell": build_gru,
    "la_transformer_hard": _la_builder("hard"),
    "la_transformer_hybrid": _la_builder("hybrid"),
    "stacked_transformer": build_stacked,
    "la_qtransformer": _laq_builder("hybrid"),
    "la_qtransformer_hard": _laq_builder("hard"),
    "qmix": build_qmix,
    "pit": build_pit,
    "td_loss": build_td_loss,
}
