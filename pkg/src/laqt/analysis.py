"""Analysis outputs: per-timestep credit traces, pairwise coordination
weights (level-1 attention), hard-mode level histograms, and standalone SVG
charts for metrics files. CSV stays the source of truth; the SVG writer has
no plotting dependency."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import ScenarioConfig, SkirmishEnv
from .tensor import Tensor, no_grad
from .trainer import Learner
from .agents import pad_observations, select_action


@dataclass
class AnalysisTrace:
    """One greedy episode played with mixer diagnostics retained."""

    credits: np.ndarray  # [T, n_agents]
    ally_alive: np.ndarray  # [T, n_agents]
    pairwise: np.ndarray  # [T, n_entities, n_entities] level-1 attention
    level_choice: np.ndarray | None  # [T, n_entities] hard mode, 1-based
    rewards: np.ndarray  # [T]
    won: bool

    @property
    def length(self) -> int:
        return len(self.rewards)


def play_analysis_episode(scenario: ScenarioConfig, learner: Learner, seed: int) -> AnalysisTrace:
    """Greedy episode (no exploration, noise-free hard masks) recording the
    mixer's credits and level-1 attention at every step."""
    env = SkirmishEnv(scenario)
    obs, state = env.reset(seed)
    agent = learner.agent
    h = agent.init_hidden(scenario.n_allies)
    credits, alive, pairwise, choices, rewards = [], [], [], [], []
    done = False
    won = False
    while not done:
        padded = pad_observations(obs, scenario.n_allies - 1, scenario.n_enemies)
        avail = np.stack([env.available_actions(i) for i in range(scenario.n_allies)])
        with no_grad():
            values, h = agent.forward(padded, h, avail.astype(np.float64))
            actions = [
                select_action(values.data[i], avail[i], 0.0, None)
                for i in range(scenario.n_allies)
            ]
            chosen = values.data[np.arange(scenario.n_allies), actions]
            out = learner.mixer.forward(state, Tensor(chosen), None)
        credits.append(out.credits.data.copy())
        alive.append(state.ally_alive.copy())
        if out.diagnostics is not None and out.diagnostics.attention:
            pairwise.append(out.diagnostics.attention[0].copy())
            if out.diagnostics.level_choice is not None:
                choices.append(out.diagnostics.level_choice.copy())
        obs, state, reward, done, info = env.step(actions)
        rewards.append(reward)
        won = info["win"]
    n_entities = scenario.n_allies + scenario.n_enemies
    return AnalysisTrace(
        credits=np.array(credits),
        ally_alive=np.array(alive),
        pairwise=np.array(pairwise) if pairwise else np.zeros((0, n_entities, n_entities)),
        level_choice=np.array(choices) if choices else None,
        rewards=np.array(rewards),
        won=won,
    )


def write_credit_trace(trace: AnalysisTrace, path: str | Path) -> Path:
    """Credits per timestep; alive flags mark rows where an agent is dead
    and its (still reported) credit is masked out of the mixing sum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_agents = trace.credits.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["t"]
            + [f"agent_{i}" for i in range(n_agents)]
            + [f"alive_{i}" for i in range(n_agents)]
        )
        for t in range(trace.length):
            writer.writerow(
                [t]
                + [f"{c:.8g}" for c in trace.credits[t]]
                + [int(a) for a in trace.ally_alive[t]]
            )
    return path


def write_pairwise_weights(trace: AnalysisTrace, out_dir: str | Path) -> list[Path]:
    """One CSV per timestep holding the level-1 attention matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(trace.pairwise.shape[0]):
        p = out_dir / f"pairwise_t{t:04d}.csv"
        with open(p, "w", newline="") as f:
            writer = csv.writer(f)
            for row in trace.pairwise[t]:
                writer.writerow([f"{w:.8g}" for w in row])
        paths.append(p)
    return paths


def write_level_histogram(trace: AnalysisTrace, path: str | Path, levels: int) -> Path:
    """Hard mode only: how often each entity chose each level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if trace.level_choice is None:
        raise ValueError("no level choices recorded (hybrid mode has none)")
    n_entities = trace.level_choice.shape[1]
    counts = np.zeros((n_entities, levels), dtype=int)
    for t in range(trace.level_choice.shape[0]):
        for e, lvl in enumerate(trace.level_choice[t]):
            counts[e, int(lvl) - 1] += 1
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["entity"] + [f"level_{l + 1}" for l in range(levels)])
        for e in range(n_entities):
            writer.writerow([e] + counts[e].tolist())
    return path


def mean_offdiagonal(matrices: np.ndarray) -> float:
    """Average pairwise weight excluding self-attention; the scenario-level
    coordination statistic."""
    if matrices.size == 0:
        return 0.0
    n = matrices.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return float(matrices[..., mask].mean())


# ---------------------------------------------------------------------------
# SVG charts (dependency-free; the CSV stays authoritative)


def _read_metric(path: Path, column: str) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path) as f:
        for row in csv.DictReader(f):
            value = float(row[column])
            if np.isfinite(value):
                xs.append(float(row["env_steps"]))
                ys.append(value)
    return xs, ys


def write_metric_svg(
    metric_paths: list[str | Path],
    out_path: str | Path,
    column: str = "eval_win_rate",
    width: int = 640,
    height: int = 360,
) -> Path:
    """Line chart of one metrics column across runs: per-seed traces plus
    the mean +/- range band over the common step grid."""
    out_path = Path(out_path)
    series = [_read_metric(Path(p), column) for p in metric_paths]
    series = [s for s in series if s[0]]
    if not series:
        raise ValueError(f"no finite values for column {column!r}")
    all_x = sorted({x for xs, _ in series for x in xs})
    interp = np.array([np.interp(all_x, xs, ys) for xs, ys in series])
    mean = interp.mean(axis=0)
    lo = interp.min(axis=0)
    hi = interp.max(axis=0)

    margin = 45
    x_max = max(all_x) or 1.0
    y_min = float(min(lo.min(), 0.0))
    y_max = float(max(hi.max(), 1e-9))
    if y_max == y_min:
        y_max = y_min + 1.0

    def px(x):
        return margin + (x / x_max) * (width - 2 * margin)

    def py(y):
        return height - margin - ((y - y_min) / (y_max - y_min)) * (height - 2 * margin)

    def polyline(xs, ys, color, w, opacity=1.0):
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        return (
            f'<polyline fill="none" stroke="{color}" stroke-width="{w}" '
            f'opacity="{opacity}" points="{pts}"/>'
        )

    band_pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(all_x, hi))
    band_pts += " " + " ".join(
        f"{px(x):.1f},{py(y):.1f}" for x, y in zip(reversed(all_x), reversed(lo))
    )
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polygon fill="#4477aa" opacity="0.15" points="{band_pts}"/>',
    ]
    for xs, ys in series:
        parts.append(polyline(xs, ys, "#4477aa", 1, opacity=0.35))
    parts.append(polyline(all_x, mean, "#114488", 2))
    ax = f'stroke="#333" stroke-width="1"'
    parts.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" {ax}/>')
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" {ax}/>')
    for frac in (0.0, 0.5, 1.0):
        xv = frac * x_max
        yv = y_min + frac * (y_max - y_min)
        parts.append(
            f'<text x="{px(xv):.0f}" y="{height - margin + 16}" font-size="11" '
            f'text-anchor="middle" fill="#333">{xv:.0f}</text>'
        )
        parts.append(
            f'<text x="{margin - 6}" y="{py(yv) + 4:.0f}" font-size="11" '
            f'text-anchor="end" fill="#333">{yv:.3g}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="18" font-size="13" text-anchor="middle" fill="#111">'
        f"{column} vs env_steps</text>"
    )
    parts.append("</svg>")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts))
    return out_path
