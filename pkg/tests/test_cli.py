import csv
import re

import numpy as np
import pytest

from laqt.analysis import mean_offdiagonal, play_analysis_episode
from laqt.cli import main
from laqt.config import default_run_config
from laqt.trainer import build_learner, train


def small_cfg_text(preset="3m", mixer="vdn", agent="pit", steps=600):
    return f"""
[scenario]
preset = {preset}

[agent]
kind = {agent}
model_dim = 8
hidden_dim = 16

[mixer]
kind = {mixer}
model_dim = 16
ffn_dim = 32
num_heads = 2

[train]
total_env_steps = {steps}
eval_interval = 300
eval_episodes = 2
batch_size = 4
buffer_capacity = 32
"""


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(small_cfg_text())
    return p


ARCH_TEXT = """
[scenario]
preset = 3m

[agent]
kind = pit
model_dim = 8
hidden_dim = 16

[mixer]
kind = la-hard
model_dim = 16
ffn_dim = 32
num_heads = 2
levels = 2

[train]
total_env_steps = 600
eval_interval = 300
eval_episodes = 2
batch_size = 4
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    arch = out / "arch.ini"
    arch.write_text(ARCH_TEXT)
    cfg = default_run_config("3m", "la-hard", "pit")
    cfg.agent.model_dim = 8
    cfg.agent.hidden_dim = 16
    cfg.mixer.model_dim = 16
    cfg.mixer.ffn_dim = 32
    cfg.mixer.num_heads = 2
    cfg.mixer.levels = 2
    cfg.train.total_env_steps = 600
    cfg.train.eval_interval = 300
    cfg.train.eval_episodes = 2
    cfg.train.batch_size = 4
    result = train(cfg, out, log=lambda *a: None)
    return cfg, result, arch


# ---------------------------------------------------------------------------
# exit codes and smoke


def test_missing_config_exit_2(capsys, tmp_path):
    code = main(["train", str(tmp_path / "missing.ini"), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_exit_2(capsys, tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[scenario]\npreset = 3m\n[train]\nseed = zebra\n")
    code = main(["train", str(p), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_train_command_writes_result_line(capsys, cfg_file, tmp_path):
    out_dir = tmp_path / "newly" / "made"
    code = main(["train", str(cfg_file), "--out-dir", str(out_dir), "--seed", "3"])
    captured = capsys.readouterr().out
    assert code == 0
    assert re.search(r"RESULT win_rate=[\d.]+ steps=\d+", captured)
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "checkpoint_final.laqt").exists()


def test_train_same_seed_same_metrics(capsys, cfg_file, tmp_path):
    rows = []
    for name in ("r1", "r2"):
        main(["train", str(cfg_file), "--out-dir", str(tmp_path / name), "--seed", "5"])
        lines = (tmp_path / name / "metrics.csv").read_text().splitlines()
        rows.append([",".join(line.split(",")[:-1]) for line in lines])
    assert rows[0] == rows[1]


def test_eval_command(capsys, trained):
    cfg, result, arch = trained
    code = main([
        "eval", str(result.checkpoint_path), "3m", "-n", "4", "--seed", "1",
        "--config", str(arch),
    ])
    out = capsys.readouterr().out
    assert code == 0
    match = re.search(r"EVAL win_rate=([\d.]+)", out)
    assert match and 0.0 <= float(match.group(1)) <= 1.0


def test_transfer_incompatible_exit_3(capsys, tmp_path):
    cfg = default_run_config("3m", "qmix", "gru")
    cfg.train.total_env_steps = 300
    cfg.train.eval_interval = 200
    cfg.train.eval_episodes = 2
    cfg.train.batch_size = 4
    result = train(cfg, tmp_path / "src", log=lambda *a: None)
    target = tmp_path / "5m.ini"
    target.write_text(small_cfg_text(preset="5m", mixer="qmix", agent="gru", steps=300))
    code = main([
        "transfer", str(result.checkpoint_path), str(target), "--out-dir", str(tmp_path / "dst"),
    ])
    assert code == 3
    assert "shape conflict" in capsys.readouterr().err


def test_transfer_command_prints_jumpstart(capsys, trained, tmp_path):
    cfg, result, arch = trained
    target = tmp_path / "3m.ini"
    target.write_text(ARCH_TEXT.replace("total_env_steps = 600", "total_env_steps = 400"))
    code = main([
        "transfer", str(result.checkpoint_path), str(target), "--out-dir", str(tmp_path / "t"),
    ])
    out = capsys.readouterr().out
    assert code == 0
    assert re.search(r"JUMPSTART win_rate=[\d.]+", out)


def test_gradcheck_command(capsys):
    code = main(["gradcheck", "--module", "attention", "--samples", "3"])
    out = capsys.readouterr().out
    assert code == 0
    assert "GRADCHECK worst_rel_err" in out


def test_gradcheck_unknown_module(capsys):
    code = main(["gradcheck", "--module", "bogus"])
    assert code == 2


def test_curriculum_command(capsys, tmp_path):
    base = tmp_path / "base.ini"
    base.write_text(small_cfg_text())
    code = main([
        "curriculum", str(base),
        "--stages", "3m:400;3m:eval",
        "--out-dir", str(tmp_path / "curr"),
    ])
    out = capsys.readouterr().out
    assert code == 0
    assert "STAGE 0" in out and "STAGE 1" in out
    assert re.search(r"STAGE 1 scenario=3m win_rate=[\d.]+ optimizer_steps=0", out)


def test_curriculum_bad_stage_spec(capsys, tmp_path):
    base = tmp_path / "base.ini"
    base.write_text(small_cfg_text())
    code = main(["curriculum", str(base), "--stages", "3m", "--out-dir", str(tmp_path / "c")])
    assert code == 2


# ---------------------------------------------------------------------------
# analyze


def test_analyze_outputs(capsys, trained, tmp_path):
    cfg, result, arch = trained
    out_dir = tmp_path / "analysis"
    code = main([
        "analyze", str(result.checkpoint_path), "3m",
        "--credits", "--pairwise", "--levels",
        "--out-dir", str(out_dir), "--seed", "2", "--config", str(arch),
    ])
    out = capsys.readouterr().out
    assert code == 0
    match = re.search(r"ANALYZE episode_length=(\d+)", out)
    assert match
    episode_length = int(match.group(1))

    with open(out_dir / "credits.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == episode_length
    assert all(float(r["agent_0"]) >= 0.0 for r in rows)

    pairwise_files = sorted((out_dir / "pairwise").glob("pairwise_t*.csv"))
    assert len(pairwise_files) == episode_length
    mat = np.loadtxt(pairwise_files[0], delimiter=",")
    assert mat.shape == (6, 6)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-9)

    levels = (out_dir / "levels.csv").read_text().splitlines()
    assert levels[0].startswith("entity,level_1")


def test_analysis_trace_properties(trained):
    cfg, result, arch = trained
    learner = build_learner(cfg)
    trace = play_analysis_episode(cfg.scenario, learner, seed=3)
    assert trace.credits.shape[0] == trace.length
    assert (trace.credits >= 0).all()
    np.testing.assert_allclose(trace.pairwise.sum(axis=-1), 1.0, atol=1e-9)
    assert 0.0 <= mean_offdiagonal(trace.pairwise) <= 1.0


def test_transfer_lr_flag_overrides_config(tmp_path, monkeypatch):
    import laqt.cli as cli_mod

    seen = {}

    def fake_transfer(checkpoint, cfg, out_dir, **kw):
        seen["lr"] = cfg.train.transfer_lr
        from laqt.trainer import TrainResult

        return TrainResult(
            final_win_rate=0.0, final_return=0.0, env_steps=0, episodes=0,
            optimizer_steps=0, metrics_path=None, checkpoint_path=None,
            jumpstart_win_rate=0.5,
        )

    import laqt.trainer as trainer_mod

    monkeypatch.setattr(trainer_mod, "transfer", fake_transfer)
    cfg_path = tmp_path / "t.ini"
    cfg_path.write_text(small_cfg_text())
    ckpt = tmp_path / "c.laqt"
    ckpt.write_bytes(b"")
    code = main([
        "transfer", str(ckpt), str(cfg_path), "--lr", "0.00123",
        "--out-dir", str(tmp_path / "o"),
    ])
    assert code == 0
    assert seen["lr"] == pytest.approx(0.00123)


def test_mean_pairwise_recomputable_from_dump_across_scenarios(trained, tmp_path):
    # the dumped matrices are the source of truth: recompute the summary
    # statistic from the CSVs and compare on two scenarios
    cfg, result, arch = trained
    from laqt.trainer import load_learner_from_checkpoint
    from laqt.env import scenario_preset
    from laqt.analysis import write_pairwise_weights

    stats = {}
    for preset in ("3m", "5m_vs_6m"):
        learner, _ = load_learner_from_checkpoint(result.checkpoint_path, cfg, scenario_preset(preset))
        trace = play_analysis_episode(scenario_preset(preset), learner, seed=6)
        paths = write_pairwise_weights(trace, tmp_path / preset)
        dumped = np.stack([np.loadtxt(p, delimiter=",") for p in paths])
        from_dump = mean_offdiagonal(dumped)
        assert from_dump == pytest.approx(mean_offdiagonal(trace.pairwise), abs=1e-7)
        stats[preset] = from_dump
    assert all(0.0 <= v <= 1.0 for v in stats.values())
    assert stats["3m"] != stats["5m_vs_6m"]


def test_plot_command(capsys, trained, tmp_path):
    cfg, result, arch = trained
    out = tmp_path / "win.svg"
    code = main(["plot", str(result.metrics_path), "--out", str(out)])
    assert code == 0
    body = out.read_text()
    assert body.startswith("<svg") and "polyline" in body


def test_plot_missing_metrics(capsys, tmp_path):
    code = main(["plot", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.svg")])
    assert code == 2
