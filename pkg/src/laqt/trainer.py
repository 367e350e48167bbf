"""Episodic TD-learning harness.

Rollouts collect whole padded episodes (recurrent agents need full unrolls
from a zero hidden state); a replay buffer of episodes feeds batched TD
updates against target copies of the agent and mixer. The greedy target max
decomposes per agent because every mixer here is monotone in the agent
values. Transfer reloads a checkpoint, measures the jumpstart win rate in
an evaluation-only phase, then fine-tunes at the reduced learning rate;
curriculum chains transfers across scenarios.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint as ckpt
from .agents import (
    GruAgent,
    PaddedObs,
    PitAgent,
    init_gru_agent,
    init_pit,
    pad_observations,
    select_action,
)
from .config import RunConfig, config_hash
from .env import ALLY_FEATS, ENEMY_FEATS, SELF_FEATS, ScenarioConfig, SkirmishEnv
from .mixers import GlobalState, make_mixer
from .nn import MASK_FILL
from .tensor import Tensor, no_grad, stack, unstack, zero_grad


class NumericalError(RuntimeError):
    pass


class IncompatibleTransferError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def linear_epsilon(step: int, start: float, end: float, anneal_steps: int) -> float:
    if anneal_steps <= 0:
        return end
    frac = min(1.0, step / anneal_steps)
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# learner bundle


@dataclass
class Learner:
    agent: PitAgent | GruAgent
    mixer: object
    target_agent: PitAgent | GruAgent
    target_mixer: object
    scenario: ScenarioConfig

    def parameters(self) -> dict[str, Tensor]:
        table = dict(self.agent.named_parameters())
        table.update(self.mixer.named_parameters())
        return table

    def target_parameters(self) -> dict[str, Tensor]:
        table = dict(self.target_agent.named_parameters())
        table.update(self.target_mixer.named_parameters())
        return table

    def sync_targets(self) -> None:
        online = self.parameters()
        for name, p in self.target_parameters().items():
            p.data[...] = online[name].data

    def load_flat(self, arrays: dict[str, np.ndarray]) -> None:
        ckpt.apply_to(arrays, self.parameters())
        self.sync_targets()

    def flat_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}


def _make_agent(kind: str, cfg: RunConfig, scenario: ScenarioConfig, rng: np.random.Generator):
    if kind == "pit":
        params = init_pit(
            rng,
            SELF_FEATS,
            ALLY_FEATS,
            ENEMY_FEATS,
            model_dim=cfg.agent.model_dim,
            num_heads=cfg.agent.num_heads,
            ffn_dim=cfg.agent.ffn_dim,
            hidden_dim=cfg.agent.hidden_dim,
        )
        return PitAgent(params)
    if kind == "gru":
        flat_dim = (
            SELF_FEATS
            + (scenario.n_allies - 1) * ALLY_FEATS
            + scenario.n_enemies * ENEMY_FEATS
        )
        params = init_gru_agent(rng, flat_dim, scenario.n_actions, hidden_dim=cfg.agent.hidden_dim)
        return GruAgent(params)
    raise ValueError(f"unknown agent kind {kind!r}")


def build_learner(cfg: RunConfig, scenario: ScenarioConfig | None = None, seed: int | None = None) -> Learner:
    scenario = scenario or cfg.scenario
    seed = cfg.train.seed if seed is None else seed
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))

    def mixer():
        return make_mixer(
            cfg.mixer.kind,
            init_rng,
            ally_dim=9,
            enemy_dim=9,
            n_allies=scenario.n_allies,
            n_enemies=scenario.n_enemies,
            model_dim=cfg.mixer.model_dim,
            num_heads=cfg.mixer.num_heads,
            ffn_dim=cfg.mixer.ffn_dim,
            fc_mul_dim=cfg.mixer.fc_mul_dim,
            fc_add_dim=cfg.mixer.fc_add_dim,
            levels=cfg.mixer.levels,
            gumbel_temperature=cfg.mixer.gumbel_temperature,
            embed_dim=cfg.mixer.embed_dim,
            stacked_depth=cfg.mixer.stacked_depth,
        )

    learner = Learner(
        agent=_make_agent(cfg.agent.kind, cfg, scenario, init_rng),
        mixer=mixer(),
        target_agent=_make_agent(cfg.agent.kind, cfg, scenario, init_rng),
        target_mixer=mixer(),
        scenario=scenario,
    )
    learner.sync_targets()
    return learner


# ---------------------------------------------------------------------------
# episodes


@dataclass(eq=False)
class EpisodeRecord:
    """One padded episode; observation-like arrays carry T+1 entries so the
    final step can bootstrap. Stored float32 to keep the buffer small."""

    self_attrs: np.ndarray  # [T+1, n_agents, SELF]
    ally_feats: np.ndarray
    ally_mask: np.ndarray
    enemy_feats: np.ndarray
    enemy_mask: np.ndarray
    state_allies: np.ndarray  # [T+1, n_allies, 9]
    state_enemies: np.ndarray
    ally_alive: np.ndarray
    enemy_alive: np.ndarray
    avail: np.ndarray  # [T+1, n_agents, n_actions]
    actions: np.ndarray  # [T, n_agents]
    rewards: np.ndarray  # [T]
    battle_over: np.ndarray  # [T] true terminal (not the step cap)
    won: bool
    episode_return: float

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class EpisodeStats:
    win: bool
    episode_return: float
    length: int


def run_episode(
    env: SkirmishEnv,
    agent,
    epsilon: float,
    action_rng: np.random.Generator | None,
    seed: int,
) -> tuple[EpisodeRecord, EpisodeStats]:
    """Roll one episode with shared parameters and epsilon-greedy actions,
    threading hidden states through time."""
    cfg = env.config
    n_agents = cfg.n_allies
    obs, state = env.reset(seed)
    h = agent.init_hidden(n_agents)
    cols = {k: [] for k in (
        "self_attrs", "ally_feats", "ally_mask", "enemy_feats", "enemy_mask",
        "state_allies", "state_enemies", "ally_alive", "enemy_alive", "avail",
    )}
    actions_log, rewards_log, over_log = [], [], []
    won = False
    done = False
    while not done:
        padded = pad_observations(obs, cfg.n_allies - 1, cfg.n_enemies)
        avail = np.stack([env.available_actions(i) for i in range(n_agents)])
        _record(cols, padded, state, avail)
        with no_grad():
            values, h = agent.forward(padded, h, avail.astype(np.float64))
        actions = [
            select_action(values.data[i], avail[i], epsilon, action_rng)
            for i in range(n_agents)
        ]
        obs, state, reward, done, info = env.step(actions)
        actions_log.append(actions)
        rewards_log.append(reward)
        over_log.append(info["battle_over"])
        won = info["win"]
    padded = pad_observations(obs, cfg.n_allies - 1, cfg.n_enemies)
    avail = np.stack([env.available_actions(i) for i in range(n_agents)])
    _record(cols, padded, state, avail)
    record = EpisodeRecord(
        self_attrs=np.array(cols["self_attrs"], dtype=np.float32),
        ally_feats=np.array(cols["ally_feats"], dtype=np.float32),
        ally_mask=np.array(cols["ally_mask"], dtype=np.float32),
        enemy_feats=np.array(cols["enemy_feats"], dtype=np.float32),
        enemy_mask=np.array(cols["enemy_mask"], dtype=np.float32),
        state_allies=np.array(cols["state_allies"], dtype=np.float32),
        state_enemies=np.array(cols["state_enemies"], dtype=np.float32),
        ally_alive=np.array(cols["ally_alive"], dtype=np.float32),
        enemy_alive=np.array(cols["enemy_alive"], dtype=np.float32),
        avail=np.array(cols["avail"], dtype=np.float32),
        actions=np.array(actions_log, dtype=np.int64),
        rewards=np.array(rewards_log, dtype=np.float64),
        battle_over=np.array(over_log, dtype=np.float32),
        won=won,
        episode_return=float(sum(rewards_log)),
    )
    stats = EpisodeStats(win=won, episode_return=record.episode_return, length=record.length)
    return record, stats


def _record(cols, padded: PaddedObs, state: GlobalState, avail: np.ndarray) -> None:
    cols["self_attrs"].append(padded.self_attrs)
    cols["ally_feats"].append(padded.ally_feats)
    cols["ally_mask"].append(padded.ally_mask)
    cols["enemy_feats"].append(padded.enemy_feats)
    cols["enemy_mask"].append(padded.enemy_mask)
    cols["state_allies"].append(state.allies)
    cols["state_enemies"].append(state.enemies)
    cols["ally_alive"].append(state.ally_alive)
    cols["enemy_alive"].append(state.enemy_alive)
    cols["avail"].append(avail.astype(np.float32))


@dataclass(eq=False)
class EpisodeBatch:
    """Episodes padded to a common length. Padding steps carry filled = 0,
    keep a no-op-only availability row, and contribute exactly zero loss."""

    self_attrs: np.ndarray  # [b, T+1, n_agents, SELF]
    ally_feats: np.ndarray
    ally_mask: np.ndarray
    enemy_feats: np.ndarray
    enemy_mask: np.ndarray
    state_allies: np.ndarray
    state_enemies: np.ndarray
    ally_alive: np.ndarray
    enemy_alive: np.ndarray
    avail: np.ndarray
    actions: np.ndarray  # [b, T, n_agents]
    rewards: np.ndarray  # [b, T]
    battle_over: np.ndarray  # [b, T]
    filled: np.ndarray  # [b, T]

    @property
    def size(self) -> int:
        return self.rewards.shape[0]

    @property
    def max_steps(self) -> int:
        return self.rewards.shape[1]

    @staticmethod
    def from_records(records: list[EpisodeRecord]) -> "EpisodeBatch":
        if not records:
            raise ValueError("empty batch")
        b = len(records)
        t_max = max(r.length for r in records)

        def pad_obs(name):
            shape = (b, t_max + 1) + getattr(records[0], name).shape[1:]
            out = np.zeros(shape, dtype=np.float64)
            for i, r in enumerate(records):
                out[i, : r.length + 1] = getattr(r, name)
            return out

        avail = pad_obs("avail")
        avail[..., 0] = np.where(avail.sum(axis=-1) == 0, 1.0, avail[..., 0])

        actions = np.zeros((b, t_max, records[0].actions.shape[1]), dtype=np.int64)
        rewards = np.zeros((b, t_max))
        battle_over = np.zeros((b, t_max))
        filled = np.zeros((b, t_max))
        for i, r in enumerate(records):
            actions[i, : r.length] = r.actions
            rewards[i, : r.length] = r.rewards
            battle_over[i, : r.length] = r.battle_over
            filled[i, : r.length] = 1.0
        return EpisodeBatch(
            self_attrs=pad_obs("self_attrs"),
            ally_feats=pad_obs("ally_feats"),
            ally_mask=pad_obs("ally_mask"),
            enemy_feats=pad_obs("enemy_feats"),
            enemy_mask=pad_obs("enemy_mask"),
            state_allies=pad_obs("state_allies"),
            state_enemies=pad_obs("state_enemies"),
            ally_alive=pad_obs("ally_alive"),
            enemy_alive=pad_obs("enemy_alive"),
            avail=avail,
            actions=actions,
            rewards=rewards,
            battle_over=battle_over,
            filled=filled,
        )

    def time_major_obs(self) -> PaddedObs:
        """All timesteps at once, [T+1, b*n_agents, ...] — the encoders have
        no recurrence, so they run over the whole batch in one call."""
        b, t_total, n_agents = self.avail.shape[:3]

        def arr(a):
            return np.ascontiguousarray(np.swapaxes(a, 0, 1)).reshape(
                (t_total, b * n_agents) + a.shape[3:]
            )

        return PaddedObs(
            self_attrs=arr(self.self_attrs),
            ally_feats=arr(self.ally_feats),
            ally_mask=arr(self.ally_mask),
            enemy_feats=arr(self.enemy_feats),
            enemy_mask=arr(self.enemy_mask),
        )

    def states_time_major(self, start: int, stop: int) -> GlobalState:
        """Global states for t in [start, stop), stacked as [T, b, ...]."""
        sl = slice(start, stop)
        return GlobalState(
            allies=np.swapaxes(self.state_allies, 0, 1)[sl],
            enemies=np.swapaxes(self.state_enemies, 0, 1)[sl],
            ally_alive=np.swapaxes(self.ally_alive, 0, 1)[sl],
            enemy_alive=np.swapaxes(self.enemy_alive, 0, 1)[sl],
        )


# ---------------------------------------------------------------------------
# TD loss


def _unstack_encoded(encoded):
    parts = [unstack(e) for e in encoded]
    return list(zip(*parts))


def _slice_encoded(encoded, sl: slice):
    return tuple(e[sl] for e in encoded)


def _unroll_hidden(agent, encoded_slices, h0: Tensor, t_from: int, t_to: int) -> list[Tensor]:
    """Hidden states after consuming steps t_from..t_to-1 (inclusive list)."""
    h = h0
    out = []
    for t in range(t_from, t_to):
        h = agent.cell(encoded_slices[t], h)
        out.append(h)
    return out


class TdStats(NamedTuple):
    abs_error: float
    level_gaps: list[float]  # adjacent-level pattern distances, LA mixers only


def td_loss(
    batch: EpisodeBatch,
    learner: Learner,
    gamma: float,
    mixer_rng: np.random.Generator | None = None,
) -> tuple[Tensor, TdStats]:
    """Masked mean squared TD error over the filled steps of a batch.

    Only the GRU cell walks the timesteps: entity encoders and action heads
    run once over the whole [T+1, batch] block, and each mixer runs once
    over all steps. Target networks stay under no_grad; their per-agent
    greedy max (over available actions) feeds the target mixer, which is
    exact because every mixer is monotone in the agent values.
    """
    b, t_total, n_agents, n_actions = batch.avail.shape
    t_max = batch.max_steps
    if float(batch.filled.sum()) == 0:
        raise ValueError("batch has no filled steps")
    obs = batch.time_major_obs()
    avail_t = np.ascontiguousarray(np.swapaxes(batch.avail, 0, 1)).reshape(
        t_total, b * n_agents, n_actions
    )

    # online side: hidden states for t = 0..T-1, heads batched over time
    online_enc = learner.agent.encode(obs)
    h_seq = _unroll_hidden(
        learner.agent, _unstack_encoded(online_enc), learner.agent.init_hidden(b * n_agents), 0, t_max
    )
    values = learner.agent.head_values(
        stack(h_seq, axis=0), _slice_encoded(online_enc, slice(0, t_max)), avail_t[:t_max]
    )
    idx = np.ascontiguousarray(np.swapaxes(batch.actions, 0, 1)).reshape(t_max, b * n_agents, 1)
    chosen_q = values.take_along(idx, axis=-1).reshape(t_max, b, n_agents)

    # target side: hidden states for t = 1..T under no_grad
    with no_grad():
        target_enc = learner.target_agent.encode(obs)
        th_seq = _unroll_hidden(
            learner.target_agent,
            _unstack_encoded(target_enc),
            learner.target_agent.init_hidden(b * n_agents),
            0,
            t_max + 1,
        )[1:]
        tvalues = learner.target_agent.head_values(
            stack(th_seq, axis=0),
            _slice_encoded(target_enc, slice(1, t_max + 1)),
            avail_t[1 : t_max + 1],
        )
    masked = np.where(avail_t[1 : t_max + 1] > 0, tvalues.data, MASK_FILL)
    target_max = masked.max(axis=-1).reshape(t_max, b, n_agents)

    mixer_out = learner.mixer.forward(batch.states_time_major(0, t_max), chosen_q, mixer_rng)
    q_tot = mixer_out.q_tot
    with no_grad():
        target_qtot = learner.target_mixer.forward(
            batch.states_time_major(1, t_max + 1), Tensor(target_max), None
        ).q_tot.data

    rewards = batch.rewards.T
    over = batch.battle_over.T
    filled = batch.filled.T
    y = rewards + gamma * (1.0 - over) * target_qtot
    err = q_tot - Tensor(y)
    loss = (err * err * Tensor(filled)).sum() / float(filled.sum())
    if not np.isfinite(loss.data):
        raise NumericalError("TD loss is not finite")
    abs_err = float((np.abs(err.data) * filled).sum() / filled.sum())
    gaps = mixer_out.diagnostics.level_gaps if mixer_out.diagnostics is not None else []
    return loss, TdStats(abs_error=abs_err, level_gaps=list(gaps))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(agent, scenario: ScenarioConfig, n_episodes: int, seed: int) -> tuple[float, float]:
    """Greedy rollout over independent episode seeds; returns (win rate,
    mean return)."""
    env = SkirmishEnv(scenario)
    wins = 0
    returns = []
    for i in range(n_episodes):
        _, stats = run_episode(env, agent, epsilon=0.0, action_rng=None, seed=seed + i)
        wins += int(stats.win)
        returns.append(stats.episode_return)
    return wins / n_episodes, float(np.mean(returns))


class _RandomAgent:
    """Uniform policy over available actions (baseline for jumpstart deltas)."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def init_hidden(self, batch: int):
        return Tensor(np.zeros((batch, 1)))

    def forward(self, obs, h_prev, avail):
        values = self.rng.random(avail.shape) * np.asarray(avail)
        return Tensor(values), h_prev


def random_policy_win_rate(scenario: ScenarioConfig, n_episodes: int, seed: int) -> float:
    win_rate, _ = evaluate(_RandomAgent(seed), scenario, n_episodes, seed)
    return win_rate


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRow:
    env_steps: int
    episodes: int
    epsilon: float
    loss: float
    td_abs_error: float
    eval_win_rate: float
    eval_return: float
    wall_s: float


@dataclass
class TrainResult:
    final_win_rate: float
    final_return: float
    env_steps: int
    episodes: int
    optimizer_steps: int
    metrics_path: Path | None
    checkpoint_path: Path | None
    history: list[MetricsRow] = field(default_factory=list)
    jumpstart_win_rate: float | None = None

    def first_step_reaching(self, threshold: float) -> int | None:
        for row in self.history:
            if row.eval_win_rate >= threshold:
                return row.env_steps
        return None


METRICS_COLUMNS = [
    "env_steps", "episodes", "epsilon", "loss", "td_abs_error",
    "eval_win_rate", "eval_return", "wall_s",
]


class _MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[MetricsRow] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(
                    [
                        row.env_steps,
                        row.episodes,
                        f"{row.epsilon:.6g}",
                        f"{row.loss:.8g}",
                        f"{row.td_abs_error:.8g}",
                        f"{row.eval_win_rate:.8g}",
                        f"{row.eval_return:.8g}",
                        f"{row.wall_s:.3f}",
                    ]
                )


def _env_seed(base_seed: int, episode: int) -> int:
    return (base_seed * 1_000_003 + episode * 7_919 + 17) % (2**63)


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    *,
    learner: Learner | None = None,
    lr: float | None = None,
    epsilon_start: float | None = None,
    metrics_name: str = "metrics.csv",
    checkpoint_name: str = "checkpoint_final.laqt",
    log=print,
) -> TrainResult:
    """Standard loop: rollout -> buffer -> sample -> TD step -> periodic
    target refresh, greedy evaluation, and checkpoints."""
    t_cfg = cfg.train
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    learner = learner or build_learner(cfg)
    scenario = learner.scenario
    env = SkirmishEnv(scenario)
    params = learner.parameters()
    optimizer = Adam(params, lr if lr is not None else t_cfg.lr)
    action_rng = np.random.default_rng(np.random.SeedSequence([t_cfg.seed, 0xAC7]))
    mixer_rng = np.random.default_rng(np.random.SeedSequence([t_cfg.seed, 0x91B]))
    buffer_rng = np.random.default_rng(np.random.SeedSequence([t_cfg.seed, 0xB0FF]))
    buffer: deque[EpisodeRecord] = deque(maxlen=t_cfg.buffer_capacity)
    eps_start = epsilon_start if epsilon_start is not None else t_cfg.epsilon_start

    metrics = _MetricsWriter(out_dir / metrics_name if out_dir else None)
    start = time.perf_counter()
    env_steps = 0
    episodes = 0
    train_steps = 0
    recent_losses: list[float] = []
    recent_abs: list[float] = []
    next_eval = 0
    next_checkpoint = t_cfg.checkpoint_interval
    final_win, final_ret = 0.0, 0.0
    checkpoint_path = out_dir / checkpoint_name if out_dir else None
    stop = False

    while env_steps < t_cfg.total_env_steps and not stop:
        epsilon = linear_epsilon(env_steps, eps_start, t_cfg.epsilon_end, t_cfg.epsilon_anneal_steps)
        record, _ = run_episode(env, learner.agent, epsilon, action_rng, _env_seed(t_cfg.seed, episodes))
        buffer.append(record)
        env_steps += record.length
        episodes += 1

        if len(buffer) >= t_cfg.batch_size and episodes % t_cfg.train_interval_episodes == 0:
            picks = buffer_rng.choice(len(buffer), size=t_cfg.batch_size, replace=False)
            batch = EpisodeBatch.from_records([buffer[int(i)] for i in picks])
            zero_grad(params)
            try:
                loss, stats = td_loss(batch, learner, t_cfg.gamma, mixer_rng)
                loss.backward()
            except NumericalError:
                if out_dir is not None:
                    _dump_diagnostics(out_dir, learner, env_steps)
                raise
            clip_grad_norm(params, t_cfg.grad_clip)
            optimizer.step()
            train_steps += 1
            recent_losses.append(loss.item())
            recent_abs.append(stats.abs_error)
            if stats.level_gaps and out_dir is not None:
                _append_level_gaps(out_dir / "level_gaps.csv", train_steps, stats.level_gaps)
            if train_steps % t_cfg.target_update_interval == 0:
                learner.sync_targets()

        if env_steps >= next_eval:
            next_eval += t_cfg.eval_interval
            win, ret = evaluate(
                learner.agent, scenario, t_cfg.eval_episodes, _env_seed(t_cfg.seed + 1, episodes)
            )
            final_win, final_ret = win, ret
            metrics.append(
                MetricsRow(
                    env_steps=env_steps,
                    episodes=episodes,
                    epsilon=epsilon,
                    loss=float(np.mean(recent_losses)) if recent_losses else float("nan"),
                    td_abs_error=float(np.mean(recent_abs)) if recent_abs else float("nan"),
                    eval_win_rate=win,
                    eval_return=ret,
                    wall_s=time.perf_counter() - start,
                )
            )
            recent_losses.clear()
            recent_abs.clear()
            log(
                f"steps={env_steps} episodes={episodes} eps={epsilon:.3f} "
                f"win_rate={win:.3f} return={ret:.2f}"
            )
            if t_cfg.stop_at_win_rate >= 0 and win >= t_cfg.stop_at_win_rate:
                stop = True
        if out_dir is not None and env_steps >= next_checkpoint:
            next_checkpoint += t_cfg.checkpoint_interval
            _save_checkpoint(out_dir / f"checkpoint_{env_steps}.laqt", learner, cfg, env_steps)

    if checkpoint_path is not None:
        _save_checkpoint(checkpoint_path, learner, cfg, env_steps)
    return TrainResult(
        final_win_rate=final_win,
        final_return=final_ret,
        env_steps=env_steps,
        episodes=episodes,
        optimizer_steps=train_steps,
        metrics_path=metrics.path,
        checkpoint_path=checkpoint_path,
        history=metrics.rows,
    )


def _append_level_gaps(path: Path, train_step: int, gaps: list[float]) -> None:
    if not path.exists():
        header = ",".join(["train_step"] + [f"gap_{i + 2}_{i + 1}" for i in range(len(gaps))])
        path.write_text(header + "\n")
    with open(path, "a") as f:
        f.write(",".join([str(train_step)] + [f"{g:.8g}" for g in gaps]) + "\n")


def _save_checkpoint(path: Path, learner: Learner, cfg: RunConfig, env_steps: int) -> None:
    meta = ckpt.CheckpointMeta(
        mixer_kind=learner.mixer.kind,
        agent_kind=learner.agent.kind,
        config_hash=config_hash(cfg),
        env_steps=env_steps,
    )
    ckpt.save(path, learner.flat_arrays(), meta)


def _dump_diagnostics(out_dir: Path, learner: Learner, env_steps: int) -> None:
    lines = [f"non-finite loss at env_steps={env_steps}"]
    for name, p in learner.parameters().items():
        data = p.data
        lines.append(
            f"{name}: shape={data.shape} min={data.min():.4g} max={data.max():.4g} "
            f"nan={int(np.isnan(data).sum())}"
        )
    (out_dir / "nan_dump.txt").write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# transfer and curriculum


def load_learner_from_checkpoint(
    path: str | Path, cfg: RunConfig, scenario: ScenarioConfig | None = None
) -> tuple[Learner, ckpt.CheckpointMeta]:
    """Rebuild a learner for ``scenario`` and fill it from a checkpoint.

    Population-dependent architectures (flat-GRU agent, QMIX mixer) refuse
    checkpoints whose shapes disagree with the target scenario — that
    incompatibility is the reason the population-invariant stack exists.
    """
    arrays, meta = ckpt.load(path)
    cfg_for_build = cfg
    if cfg.mixer.kind != meta.mixer_kind or cfg.agent.kind != meta.agent_kind:
        import copy

        cfg_for_build = copy.deepcopy(cfg)
        cfg_for_build.mixer.kind = meta.mixer_kind
        cfg_for_build.agent.kind = meta.agent_kind
    learner = build_learner(cfg_for_build, scenario=scenario or cfg.scenario)
    try:
        learner.load_flat(arrays)
    except ckpt.IncompatibleCheckpointError as exc:
        raise ckpt.IncompatibleCheckpointError(
            f"checkpoint {path} (agent={meta.agent_kind}, mixer={meta.mixer_kind}) does not fit "
            f"scenario {learner.scenario.name!r}: {exc}"
        ) from None
    return learner, meta


def transfer(
    checkpoint_path: str | Path,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    *,
    log=print,
) -> TrainResult:
    """Reload a checkpoint into the target scenario, evaluate without
    training for the configured fraction of the budget (the jumpstart
    phase), then fine-tune at the transfer learning rate."""
    t_cfg = cfg.train
    out_dir = Path(out_dir) if out_dir is not None else None
    learner, meta = load_learner_from_checkpoint(checkpoint_path, cfg)

    eval_budget = int(t_cfg.total_env_steps * t_cfg.transfer_eval_fraction)
    env = SkirmishEnv(cfg.scenario)
    wins, steps_used, episodes = 0, 0, 0
    returns = []
    while steps_used < eval_budget:
        _, stats = run_episode(
            env, learner.agent, epsilon=0.0, action_rng=None,
            seed=_env_seed(t_cfg.seed + 2, episodes),
        )
        wins += int(stats.win)
        returns.append(stats.episode_return)
        steps_used += stats.length
        episodes += 1
    jumpstart = wins / max(episodes, 1)
    log(f"jumpstart win_rate={jumpstart:.3f} over {episodes} episodes ({steps_used} steps)")

    fine_tune_cfg = _with_total_steps(cfg, max(t_cfg.total_env_steps - steps_used, 0))
    result = train(
        fine_tune_cfg,
        out_dir,
        learner=learner,
        lr=t_cfg.transfer_lr,
        epsilon_start=t_cfg.transfer_epsilon_start,
        log=log,
    )
    result.jumpstart_win_rate = jumpstart
    result.env_steps += steps_used
    return result


def _with_total_steps(cfg: RunConfig, steps: int) -> RunConfig:
    import copy

    out = copy.deepcopy(cfg)
    out.train.total_env_steps = steps
    return out


@dataclass
class CurriculumStage:
    scenario_preset: str
    env_steps: int
    eval_only: bool = False


def curriculum(
    stages: list[CurriculumStage],
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    init_checkpoint: str | Path | None = None,
    log=print,
) -> list[TrainResult]:
    """Chain of transfers across scenarios. Evaluation-only stages run zero
    optimizer steps; the first stage trains from scratch unless an initial
    checkpoint is supplied."""
    from .env import scenario_preset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[TrainResult] = []
    previous_ckpt = Path(init_checkpoint) if init_checkpoint else None
    for i, stage in enumerate(stages):
        stage_dir = out_dir / f"stage_{i}_{stage.scenario_preset}"
        stage_cfg = _with_total_steps(cfg, stage.env_steps)
        stage_cfg.scenario = scenario_preset(stage.scenario_preset)
        log(
            f"curriculum stage {i}: {stage.scenario_preset} "
            f"({'eval-only' if stage.eval_only else f'{stage.env_steps} steps'})"
        )
        if stage.eval_only:
            if previous_ckpt is None:
                raise ValueError("evaluation-only stage needs a previous checkpoint")
            learner, _ = load_learner_from_checkpoint(previous_ckpt, stage_cfg)
            win, ret = evaluate(
                learner.agent, stage_cfg.scenario, stage_cfg.train.eval_episodes,
                _env_seed(stage_cfg.train.seed + 3, i),
            )
            stage_dir.mkdir(parents=True, exist_ok=True)
            _save_checkpoint(stage_dir / "checkpoint_final.laqt", learner, stage_cfg, 0)
            results.append(
                TrainResult(
                    final_win_rate=win,
                    final_return=ret,
                    env_steps=0,
                    episodes=stage_cfg.train.eval_episodes,
                    optimizer_steps=0,
                    metrics_path=None,
                    checkpoint_path=stage_dir / "checkpoint_final.laqt",
                )
            )
        elif previous_ckpt is None:
            results.append(train(stage_cfg, stage_dir, log=log))
        else:
            results.append(transfer(previous_ckpt, stage_cfg, stage_dir, log=log))
        previous_ckpt = results[-1].checkpoint_path
        log(f"stage {i} done: win_rate={results[-1].final_win_rate:.3f}")
    return results
