"""Deterministic entity-based cooperative combat simulator.

Teams of typed units fight on a continuous bounded plane. Allies are
controlled by the learner, enemies by a fixed greedy script. Everything is
simultaneous within a step and fully determined by (scenario, seed, action
sequence): the only randomness is the spawn jitter drawn at reset.

Step resolution order: ally moves are applied, ally attacks land (shield
absorbs first, damage capped at the target's remaining pool), then enemy
units that still have health act on the post-move state, and deaths, the
reward, and cooldowns are settled at the end. A unit volleyed down to zero
health before the enemy phase never fires back, which gives coordinated
focus fire its edge.

Rewards are ally-perspective only: shaped damage, kill bonuses, and a win
bonus, rescaled so a flawless episode totals exactly 20.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .agents import N_SELF_ACTIONS, EntityObservation, decouple_last_action
from .mixers import GlobalState

TYPE_ORDER = ("m", "s", "z")


@dataclass(frozen=True)
class UnitTypeSpec:
    name: str
    max_health: float
    max_shield: float
    damage: float
    attack_range: float
    cooldown: int  # steps between shots; 1 fires every step
    speed: float


UNIT_TYPES = {
    "m": UnitTypeSpec("m", max_health=30.0, max_shield=0.0, damage=10.0, attack_range=2.5, cooldown=1, speed=1.0),
    "s": UnitTypeSpec("s", max_health=25.0, max_shield=15.0, damage=11.0, attack_range=3.5, cooldown=2, speed=1.0),
    "z": UnitTypeSpec("z", max_health=45.0, max_shield=10.0, damage=16.0, attack_range=1.5, cooldown=2, speed=1.25),
}

# action layout: 0 no-op, 1 stop, 2..5 move N/S/E/W, 6+j attack enemy j
MOVE_DIRS = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0))

SELF_FEATS = 4 + 1 + 1 + len(TYPE_ORDER) + N_SELF_ACTIONS  # move flags, hp, shield, type, last move
ALLY_FEATS = 3 + 1 + 1 + len(TYPE_ORDER)  # dist, dx, dy, hp, shield, type
ENEMY_FEATS = ALLY_FEATS + 1  # + attacked-by-me bit
STATE_FEATS = 2 + 1 + 1 + 1 + len(TYPE_ORDER) + 1  # x, y, hp, shield, cooldown, type, alive


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    ally_types: tuple[str, ...]
    enemy_types: tuple[str, ...]
    map_width: float = 16.0
    map_height: float = 16.0
    max_steps: int = 60
    sight_range: float = 6.0
    move_step: float = 1.0

    @property
    def n_allies(self) -> int:
        return len(self.ally_types)

    @property
    def n_enemies(self) -> int:
        return len(self.enemy_types)

    @property
    def n_actions(self) -> int:
        return N_SELF_ACTIONS + self.n_enemies

    def __post_init__(self):
        if self.n_allies < 1 or self.n_enemies < 1:
            raise ValueError("both teams need at least one unit")
        for t in self.ally_types + self.enemy_types:
            if t not in UNIT_TYPES:
                raise ValueError(f"unknown unit type {t!r}; known: {sorted(UNIT_TYPES)}")


def _mirror(name: str, types: str | tuple[str, ...], enemy_types=None) -> ScenarioConfig:
    ally = tuple(types)
    enemy = tuple(enemy_types) if enemy_types is not None else ally
    return ScenarioConfig(name=name, ally_types=ally, enemy_types=enemy)


PRESETS: dict[str, ScenarioConfig] = {
    "3m": _mirror("3m", "mmm"),
    "5m": _mirror("5m", "mmmmm"),
    "7m": _mirror("7m", "mmmmmmm"),
    "5m_vs_6m": _mirror("5m_vs_6m", "mmmmm", "mmmmmm"),
    "8m_vs_9m": _mirror("8m_vs_9m", "m" * 8, "m" * 9),
    "10m_vs_11m": _mirror("10m_vs_11m", "m" * 10, "m" * 11),
    "2s3z": _mirror("2s3z", ("s", "s", "z", "z", "z")),
    "1s2z": _mirror("1s2z", ("s", "z", "z")),
}


def scenario_preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown scenario preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]


@dataclass(eq=False)
class UnitState:
    type_name: str
    x: float
    y: float
    health: float
    shield: float
    cooldown: int = 0
    alive: bool = True

    @property
    def spec(self) -> UnitTypeSpec:
        return UNIT_TYPES[self.type_name]

    @property
    def pool(self) -> float:
        return self.health + self.shield


class UnavailableActionError(RuntimeError):
    pass


def _type_onehot(type_name: str) -> np.ndarray:
    out = np.zeros(len(TYPE_ORDER))
    out[TYPE_ORDER.index(type_name)] = 1.0
    return out


class SkirmishEnv:
    """One episode at a time; call reset(seed) before stepping."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.allies: list[UnitState] = []
        self.enemies: list[UnitState] = []
        self.last_actions: list[int] = []
        self.t = 0
        self._terminated = True
        self.replay_log: list[str] = []
        ne = config.n_enemies
        # max raw reward: full shaped damage + every kill + the win bonus
        self.reward_scale = 20.0 / (0.5 * ne + 5.0 * ne + 10.0)

    # -- lifecycle --

    def reset(self, seed: int) -> tuple[list[EntityObservation], GlobalState]:
        rng = np.random.default_rng(seed)
        cfg = self.config
        cy = cfg.map_height / 2.0
        self.allies = self._spawn(cfg.ally_types, 5.0, cy, rng)
        self.enemies = self._spawn(cfg.enemy_types, cfg.map_width - 5.0, cy, rng)
        self.last_actions = [0] * cfg.n_allies
        self.t = 0
        self._terminated = False
        self.replay_log = []
        return self._observations(), self.global_state()

    def _spawn(self, types, cx, cy, rng) -> list[UnitState]:
        units = []
        for i, t in enumerate(types):
            spec = UNIT_TYPES[t]
            jitter = rng.uniform(-1.5, 1.5, size=2)
            offset = (i - (len(types) - 1) / 2.0) * 1.5
            units.append(
                UnitState(
                    type_name=t,
                    x=float(np.clip(cx + jitter[0], 0.0, self.config.map_width)),
                    y=float(np.clip(cy + offset + jitter[1], 0.0, self.config.map_height)),
                    health=spec.max_health,
                    shield=spec.max_shield,
                )
            )
        return units

    # -- queries --

    def available_actions(self, agent: int) -> np.ndarray:
        """Boolean mask over 6 + n_enemies actions for one ally."""
        unit = self.allies[agent]
        mask = np.zeros(self.config.n_actions, dtype=bool)
        if not unit.alive:
            mask[0] = True  # dead units can only no-op
            return mask
        mask[1] = True  # stop
        for d, (dx, dy) in enumerate(MOVE_DIRS):
            step = self.config.move_step * unit.spec.speed
            nx, ny = unit.x + dx * step, unit.y + dy * step
            if 0.0 <= nx <= self.config.map_width and 0.0 <= ny <= self.config.map_height:
                mask[2 + d] = True
        if unit.cooldown == 0:
            for j, enemy in enumerate(self.enemies):
                if enemy.alive and _dist(unit, enemy) <= unit.spec.attack_range:
                    mask[N_SELF_ACTIONS + j] = True
        return mask

    def observe(self, agent: int) -> EntityObservation:
        """Entity-structured local view; only visible living units appear,
        features normalized into [-1, 1]."""
        cfg = self.config
        unit = self.allies[agent]
        spec = unit.spec
        move_flags = self.available_actions(agent)[2:6].astype(np.float64) if unit.alive else np.zeros(4)
        last_move, last_bits = decouple_last_action(self.last_actions[agent], cfg.n_enemies)
        self_attrs = np.concatenate(
            [
                move_flags,
                [unit.health / spec.max_health],
                [unit.shield / spec.max_shield if spec.max_shield > 0 else 0.0],
                _type_onehot(unit.type_name),
                last_move,
            ]
        )
        ally_rows, ally_ids = [], []
        enemy_rows, enemy_ids = [], []
        if unit.alive:
            for i, other in enumerate(self.allies):
                if i == agent or not other.alive:
                    continue
                d = _dist(unit, other)
                if d <= cfg.sight_range:
                    ally_rows.append(self._entity_feats(unit, other, d))
                    ally_ids.append(i)
            for j, enemy in enumerate(self.enemies):
                if not enemy.alive:
                    continue
                d = _dist(unit, enemy)
                if d <= cfg.sight_range:
                    row = np.concatenate([self._entity_feats(unit, enemy, d), [last_bits[j]]])
                    enemy_rows.append(row)
                    enemy_ids.append(j)
        return EntityObservation(
            self_attrs=self_attrs,
            ally_feats=np.array(ally_rows).reshape(-1, ALLY_FEATS),
            enemy_feats=np.array(enemy_rows).reshape(-1, ENEMY_FEATS),
            ally_ids=ally_ids,
            enemy_ids=enemy_ids,
        )

    def _entity_feats(self, viewer: UnitState, other: UnitState, d: float) -> np.ndarray:
        cfg = self.config
        spec = other.spec
        return np.concatenate(
            [
                [d / cfg.sight_range],
                [(other.x - viewer.x) / cfg.sight_range],
                [(other.y - viewer.y) / cfg.sight_range],
                [other.health / spec.max_health],
                [other.shield / spec.max_shield if spec.max_shield > 0 else 0.0],
                _type_onehot(other.type_name),
            ]
        )

    def global_state(self) -> GlobalState:
        cfg = self.config

        def block(units):
            rows = []
            for u in units:
                if u.alive:
                    spec = u.spec
                    rows.append(
                        np.concatenate(
                            [
                                [u.x / cfg.map_width, u.y / cfg.map_height],
                                [u.health / spec.max_health],
                                [u.shield / spec.max_shield if spec.max_shield > 0 else 0.0],
                                [u.cooldown / max(spec.cooldown, 1)],
                                _type_onehot(u.type_name),
                                [1.0],
                            ]
                        )
                    )
                else:
                    rows.append(np.zeros(STATE_FEATS))
            return np.array(rows)

        return GlobalState(
            allies=block(self.allies),
            enemies=block(self.enemies),
            ally_alive=np.array([1.0 if u.alive else 0.0 for u in self.allies]),
            enemy_alive=np.array([1.0 if u.alive else 0.0 for u in self.enemies]),
        )

    def _observations(self) -> list[EntityObservation]:
        return [self.observe(i) for i in range(self.config.n_allies)]

    # -- dynamics --

    def step(self, joint_action) -> tuple[list[EntityObservation], GlobalState, float, bool, dict]:
        if self._terminated:
            raise RuntimeError("episode over; call reset() first")
        cfg = self.config
        joint_action = [int(a) for a in joint_action]
        if len(joint_action) != cfg.n_allies:
            raise ValueError(f"need {cfg.n_allies} actions, got {len(joint_action)}")
        for agent, action in enumerate(joint_action):
            if not self.available_actions(agent)[action]:
                raise UnavailableActionError(f"agent {agent}: action {action} unavailable")

        damage_to_enemies = 0.0
        damage_norm = 0.0
        damage_to_allies = 0.0

        # the script commits to its actions from the start-of-step snapshot,
        # the same information the ally actions were chosen on
        enemy_decisions = self.enemy_policy()

        # ally moves
        for agent, action in enumerate(joint_action):
            unit = self.allies[agent]
            if unit.alive and 2 <= action < N_SELF_ACTIONS:
                dx, dy = MOVE_DIRS[action - 2]
                step = cfg.move_step * unit.spec.speed
                unit.x = float(np.clip(unit.x + dx * step, 0.0, cfg.map_width))
                unit.y = float(np.clip(unit.y + dy * step, 0.0, cfg.map_height))

        # ally attacks
        for agent, action in enumerate(joint_action):
            unit = self.allies[agent]
            if unit.alive and action >= N_SELF_ACTIONS:
                target = self.enemies[action - N_SELF_ACTIONS]
                dealt = _apply_damage(target, unit.spec.damage)
                damage_to_enemies += dealt
                damage_norm += dealt / (target.spec.max_health + target.spec.max_shield)
                unit.cooldown = unit.spec.cooldown

        # scripted enemies: a unit volleyed to zero health this step is
        # incapacitated and never executes its decision
        for enemy, decision in zip(self.enemies, enemy_decisions):
            if decision is None or not enemy.alive or enemy.health <= 0.0:
                continue
            kind, target_idx, direction = decision
            if kind == "attack":
                damage_to_allies += _apply_damage(self.allies[target_idx], enemy.spec.damage)
                enemy.cooldown = enemy.spec.cooldown
            else:
                _move_along(enemy, direction, cfg)

        # deaths
        kills = 0
        for enemy in self.enemies:
            if enemy.alive and enemy.health <= 0.0:
                enemy.alive = False
                enemy.health = 0.0
                enemy.shield = 0.0
                kills += 1
        for unit in self.allies:
            if unit.alive and unit.health <= 0.0:
                unit.alive = False
                unit.health = 0.0
                unit.shield = 0.0

        self.t += 1
        win = not any(e.alive for e in self.enemies)
        lose = not any(a.alive for a in self.allies)
        battle_over = win or lose
        terminated = battle_over or self.t >= cfg.max_steps
        self._terminated = terminated

        reward = self.reward_scale * (0.5 * damage_norm + 5.0 * kills + 10.0 * float(win))

        # cooldowns tick at the end of the step
        for u in self.allies + self.enemies:
            if u.cooldown > 0:
                u.cooldown -= 1
        for agent, action in enumerate(joint_action):
            self.last_actions[agent] = action if self.allies[agent].alive else 0

        state = self.global_state()
        info = {
            "win": win,
            "battle_over": battle_over,
            "kills": kills,
            "damage_norm": damage_norm,
            "damage_to_enemies": damage_to_enemies,
            "damage_to_allies": damage_to_allies,
        }
        self.replay_log.append(
            json.dumps(
                {
                    "t": self.t,
                    "state_hash": _state_hash(state),
                    "actions": joint_action,
                    "reward": reward,
                    "damage_norm": damage_norm,
                    "kills": kills,
                    "win": win,
                    "terminated": terminated,
                }
            )
        )
        return self._observations(), state, reward, terminated, info

    def enemy_policy(self) -> list[tuple[str, int, tuple[float, float]] | None]:
        """Scripted decision per enemy from the current state: attack the
        nearest living ally when ready and in range, otherwise step toward
        it. Dead (or targetless) units get None. Deterministic."""
        decisions: list[tuple[str, int, tuple[float, float]] | None] = []
        for enemy in self.enemies:
            if not enemy.alive:
                decisions.append(None)
                continue
            target_idx = self._nearest_living_ally(enemy)
            if target_idx is None:
                decisions.append(None)
                continue
            target = self.allies[target_idx]
            if enemy.cooldown == 0 and _dist(enemy, target) <= enemy.spec.attack_range:
                decisions.append(("attack", target_idx, (0.0, 0.0)))
            else:
                dx, dy = target.x - enemy.x, target.y - enemy.y
                decisions.append(("move", target_idx, (dx, dy)))
        return decisions

    def _nearest_living_ally(self, enemy: UnitState) -> int | None:
        best, best_d = None, np.inf
        for i, ally in enumerate(self.allies):
            if not ally.alive:
                continue
            d = _dist(enemy, ally)
            if d < best_d - 1e-12:  # ties break to the lowest ally index
                best, best_d = i, d
        return best


def _dist(a: UnitState, b: UnitState) -> float:
    return float(np.hypot(a.x - b.x, a.y - b.y))


def _apply_damage(target: UnitState, amount: float) -> float:
    """Shield absorbs first; damage is capped at the remaining pool so total
    damage dealt always equals total health+shield lost."""
    if not target.alive:
        return 0.0
    dealt = min(amount, target.pool)
    absorbed = min(target.shield, dealt)
    target.shield -= absorbed
    target.health -= dealt - absorbed
    return dealt


def _move_along(unit: UnitState, direction: tuple[float, float], cfg: ScenarioConfig) -> None:
    dx, dy = direction
    norm = float(np.hypot(dx, dy))
    if norm < 1e-9:
        return
    step = min(cfg.move_step * unit.spec.speed, norm)
    unit.x = float(np.clip(unit.x + dx / norm * step, 0.0, cfg.map_width))
    unit.y = float(np.clip(unit.y + dy / norm * step, 0.0, cfg.map_height))


def _state_hash(state: GlobalState) -> str:
    payload = np.concatenate([state.allies.ravel(), state.enemies.ravel()])
    return hashlib.sha256(payload.tobytes()).hexdigest()[:16]


def total_pool(units: list[UnitState]) -> float:
    return sum(u.pool for u in units)
