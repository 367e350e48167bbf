import itertools

import numpy as np
import pytest

from laqt.gradcheck import check_gradients
from laqt.mixers import GlobalState, make_mixer, vdn_forward
from laqt.tensor import Tensor

ALLY_DIM = 9
ENEMY_DIM = 9


def random_state(rng, n_allies=3, n_enemies=3, batch=()):
    return GlobalState(
        allies=rng.normal(size=batch + (n_allies, ALLY_DIM)),
        enemies=rng.normal(size=batch + (n_enemies, ENEMY_DIM)),
        ally_alive=np.ones(batch + (n_allies,)),
        enemy_alive=np.ones(batch + (n_enemies,)),
    )


def build(kind, rng, n_allies=3, n_enemies=3, **kw):
    defaults = dict(
        ally_dim=ALLY_DIM,
        enemy_dim=ENEMY_DIM,
        n_allies=n_allies,
        n_enemies=n_enemies,
        model_dim=16,
        num_heads=2,
        ffn_dim=32,
        fc_mul_dim=16,
        fc_add_dim=16,
        levels=2,
    )
    defaults.update(kw)
    return make_mixer(kind, rng, **defaults)


# ---------------------------------------------------------------------------
# LA-QTransformer


def test_zero_credit_head_leaves_only_bias():
    rng = np.random.default_rng(0)
    mixer = build("la-hybrid", rng)
    mixer.params.credit_out.weight.data[:] = 0.0
    mixer.params.credit_out.bias.data[:] = 0.0
    state = random_state(np.random.default_rng(1))
    out = mixer.forward(state, Tensor(np.array([1.0, -2.0, 3.0])))
    assert np.allclose(out.credits.data, 0.0)
    bias_only = mixer.forward(state, Tensor(np.zeros(3)))
    assert out.q_tot.item() == pytest.approx(bias_only.q_tot.item())


@pytest.mark.parametrize("kind", ["la-hybrid", "la-hard", "stacked"])
def test_dq_dqi_equals_credit(kind):
    rng = np.random.default_rng(2)
    mixer = build(kind, rng)
    state = random_state(np.random.default_rng(3))
    q = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    out = mixer.forward(state, q)
    out.q_tot.backward()
    np.testing.assert_allclose(q.grad, out.credits.data, atol=1e-12)


def test_q_value_length_checked():
    rng = np.random.default_rng(4)
    mixer = build("la-hybrid", rng)
    state = random_state(np.random.default_rng(5))
    with pytest.raises(ValueError, match="agents"):
        mixer.forward(state, Tensor(np.zeros(4)))


def test_nan_state_rejected():
    rng = np.random.default_rng(6)
    mixer = build("la-hybrid", rng)
    state = random_state(np.random.default_rng(7))
    state.allies[0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        mixer.forward(state, Tensor(np.zeros(3)))


def test_dead_agents_do_not_move_q_tot():
    rng = np.random.default_rng(8)
    mixer = build("la-hybrid", rng)
    state = random_state(np.random.default_rng(9))
    state.ally_alive[1] = 0.0
    q1 = np.array([1.0, 5.0, -2.0])
    q2 = np.array([1.0, -77.0, -2.0])  # dead agent's value swings wildly
    out1 = mixer.forward(state, Tensor(q1))
    out2 = mixer.forward(state, Tensor(q2))
    assert out1.q_tot.item() == pytest.approx(out2.q_tot.item(), abs=1e-12)


def test_population_invariance_same_params_any_size():
    rng = np.random.default_rng(10)
    mixer = build("la-hybrid", rng)
    for n_a, n_e in [(1, 1), (2, 5), (5, 6), (8, 9)]:
        state = random_state(np.random.default_rng(n_a * 10 + n_e), n_a, n_e)
        out = mixer.forward(state, Tensor(np.zeros(n_a)))
        assert out.credits.shape == (n_a,)


@pytest.mark.parametrize("kind", ["la-hybrid", "la-hard"])
def test_credit_equivariance_under_agent_permutation(kind):
    rng = np.random.default_rng(11)
    mixer = build(kind, rng, n_allies=4, n_enemies=3)
    state = random_state(np.random.default_rng(12), 4, 3)
    q = np.array([0.3, -0.4, 1.1, 0.7])
    perm = np.array([2, 0, 3, 1])
    out = mixer.forward(state, Tensor(q))
    permuted_state = GlobalState(
        allies=state.allies[perm],
        enemies=state.enemies,
        ally_alive=state.ally_alive[perm],
        enemy_alive=state.enemy_alive,
    )
    out_p = mixer.forward(permuted_state, Tensor(q[perm]))
    np.testing.assert_allclose(out_p.credits.data, out.credits.data[perm], atol=1e-9)
    assert out_p.q_tot.item() == pytest.approx(out.q_tot.item(), abs=1e-9)


def test_batched_forward_matches_single():
    rng = np.random.default_rng(13)
    mixer = build("la-hybrid", rng)
    srng = np.random.default_rng(14)
    states = [random_state(srng) for _ in range(4)]
    qs = srng.normal(size=(4, 3))
    batched = GlobalState(
        allies=np.stack([s.allies for s in states]),
        enemies=np.stack([s.enemies for s in states]),
        ally_alive=np.stack([s.ally_alive for s in states]),
        enemy_alive=np.stack([s.enemy_alive for s in states]),
    )
    out = mixer.forward(batched, Tensor(qs))
    assert out.q_tot.shape == (4,)
    for b in range(4):
        single = mixer.forward(states[b], Tensor(qs[b]))
        assert out.q_tot.data[b] == pytest.approx(single.q_tot.item(), abs=1e-12)


def test_degenerate_zero_transformer_output_smoke():
    rng = np.random.default_rng(15)
    mixer = build("la-hybrid", rng)
    p = mixer.params.la.ffn
    for lp in (p.hidden, p.out):
        lp.weight.data[:] = 0.0
        lp.bias.data[:] = 0.0
    p.gain.data[:] = 0.0
    p.shift.data[:] = 0.0  # transformer output pinned to zero
    state = random_state(np.random.default_rng(16))
    q = np.array([1.0, 2.0, 3.0])
    out = mixer.forward(state, Tensor(q))
    # all patterns equal -> every agent gets the identical credit
    c = out.credits.data
    assert np.allclose(c, c[0])
    assert out.q_tot.item() == pytest.approx(c[0] * q.sum() + (out.q_tot.item() - c[0] * q.sum()))


# ---------------------------------------------------------------------------
# QMIX


def test_qmix_zero_hypernets_gives_bias():
    rng = np.random.default_rng(17)
    mixer = build("qmix", rng)
    p = mixer.params
    for lp in (p.w1_hyper, p.b1_hyper, p.w2_hyper, p.b2_hidden):
        lp.weight.data[:] = 0.0
        lp.bias.data[:] = 0.0
    state = random_state(np.random.default_rng(18))
    out = mixer.forward(state, Tensor(np.array([4.0, 5.0, 6.0])))
    assert out.q_tot.item() == pytest.approx(float(p.b2_out.bias.data[0]))


def test_qmix_monotone_in_every_agent():
    rng = np.random.default_rng(19)
    mixer = build("qmix", rng)
    srng = np.random.default_rng(20)
    for _ in range(1000):
        state = random_state(srng)
        q = srng.normal(size=3)
        base = mixer.forward(state, Tensor(q)).q_tot.item()
        i = srng.integers(3)
        bumped = q.copy()
        bumped[i] += abs(srng.normal()) + 1e-3
        assert mixer.forward(state, Tensor(bumped)).q_tot.item() >= base - 1e-12


def test_qmix_gradients():
    rng = np.random.default_rng(21)
    mixer = build("qmix", rng)
    state = random_state(np.random.default_rng(22))
    q = Tensor(np.array([0.1, -0.2, 0.3]), requires_grad=True)
    table = mixer.named_parameters()
    table["q"] = q
    report = check_gradients(
        table, lambda: mixer.forward(state, q).q_tot, samples_per_tensor=6
    )
    assert report.ok, report.failures


# ---------------------------------------------------------------------------
# VDN


def test_vdn_sums_exactly():
    out = vdn_forward(Tensor(np.array([1.0, 2.0, 3.0])))
    assert out.q_tot.item() == 6.0


def test_vdn_gradient_all_ones():
    q = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    vdn_forward(q).q_tot.backward()
    assert np.array_equal(q.grad, np.ones(3))


def test_vdn_credits_constant_one():
    out = vdn_forward(Tensor(np.zeros((2, 4))))
    assert np.array_equal(out.credits.data, np.ones((2, 4)))


# ---------------------------------------------------------------------------
# monotonicity / IGM brute force


def brute_force_igm(mixer, state, q_table, rng=None):
    """Check that argmax over joint actions of q_tot factorizes per agent."""
    n_agents, n_actions = q_table.shape
    per_agent = [int(np.argmax(q_table[i])) for i in range(n_agents)]
    joints = list(itertools.product(range(n_actions), repeat=n_agents))
    qs = np.stack([np.array([q_table[i, a[i]] for i in range(n_agents)]) for a in joints])
    batched = GlobalState(
        allies=np.broadcast_to(state.allies, (len(joints),) + state.allies.shape),
        enemies=np.broadcast_to(state.enemies, (len(joints),) + state.enemies.shape),
        ally_alive=np.broadcast_to(state.ally_alive, (len(joints),) + state.ally_alive.shape),
        enemy_alive=np.broadcast_to(state.enemy_alive, (len(joints),) + state.enemy_alive.shape),
    )
    out = mixer.forward(batched, Tensor(qs), rng)
    best = joints[int(np.argmax(out.q_tot.data))]
    return tuple(best) == tuple(per_agent)


@pytest.mark.parametrize("kind", ["la-hybrid", "la-hard", "qmix", "vdn", "stacked"])
def test_igm_brute_force(kind):
    rng = np.random.default_rng(23)
    srng = np.random.default_rng(24)
    for draw in range(20):
        n_agents = int(srng.integers(2, 4))
        n_actions = int(srng.integers(2, 6))
        mixer = build(kind, np.random.default_rng(100 + draw), n_allies=n_agents)
        state = random_state(srng, n_agents, 3)
        q_table = srng.normal(size=(n_agents, n_actions))
        assert brute_force_igm(mixer, state, q_table), f"{kind} draw {draw}"


# ---------------------------------------------------------------------------
# stacked ablation mixer


def test_stacked_pipeline_runs_and_credits_nonnegative():
    rng = np.random.default_rng(25)
    mixer = build("stacked", rng)
    state = random_state(np.random.default_rng(26))
    out = mixer.forward(state, Tensor(np.array([1.0, -1.0, 0.5])))
    assert (out.credits.data >= 0).all()
    assert len(out.diagnostics.attention) == 2  # one weight matrix per layer


# ---------------------------------------------------------------------------
# gradients through the full LA mixer


@pytest.mark.parametrize("kind", ["la-hybrid", "la-hard"])
def test_la_mixer_gradients(kind):
    rng = np.random.default_rng(27)
    mixer = build(kind, rng)
    state = random_state(np.random.default_rng(28))
    q = Tensor(np.array([0.4, -0.6, 1.2]), requires_grad=True)
    table = mixer.named_parameters()
    table["q"] = q
    report = check_gradients(
        table, lambda: mixer.forward(state, q).q_tot, samples_per_tensor=4
    )
    assert report.ok, report.failures


def test_la_mixer_every_parameter_gradient_matches_fd():
    # standing full check: every entry of every parameter, reduced width
    rng = np.random.default_rng(31)
    mixer = build("la-hybrid", rng, model_dim=8, ffn_dim=16, fc_mul_dim=8, fc_add_dim=8)
    state = random_state(np.random.default_rng(32))
    q = Tensor(np.array([0.4, -0.6, 1.2]), requires_grad=True)
    table = mixer.named_parameters()
    table["q"] = q
    report = check_gradients(table, lambda: mixer.forward(state, q).q_tot, samples_per_tensor=None)
    assert report.ok, report.failures[:5]


def test_credits_nonnegative_many_draws():
    rng = np.random.default_rng(29)
    mixer = build("la-hybrid", rng)
    srng = np.random.default_rng(30)
    for _ in range(50):
        state = random_state(srng)
        out = mixer.forward(state, Tensor(srng.normal(size=3)))
        assert (out.credits.data >= 0).all()
