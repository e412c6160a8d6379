import numpy as np
import pytest

from clic.sac import Batch, PrioritizedReplayBuffer, ReplayBuffer, SacAgent, SacConfig, SumTree, \
    squash_log_prob

from test_nn import fd_grads, rel_err

OBS = 5


def small_agent(**kw):
    cfg = SacConfig(hidden=8, layers=2, **kw)
    return SacAgent(OBS, [-0.3, -0.04], [0.2, 0.04], cfg, seed=1)


def make_batch(n=7, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, OBS)), rng.uniform(-0.9, 0.9, size=(n, 2)), rng.normal(size=n),
                 rng.normal(size=(n, OBS)), (rng.random(n) < 0.3).astype(float),
                 rng.uniform(0.5, 1.0, size=n), np.arange(n))


def test_critic_gradients_match_finite_differences():
    agent = small_agent()
    batch = make_batch()
    xi = np.random.default_rng(3).standard_normal((7, 2))
    res = agent.critic_losses(batch, xi)
    for k, net in enumerate((agent.q1, agent.q2)):
        fd = fd_grads(lambda: agent.critic_losses(batch, xi)[k][0], net.params)
        assert rel_err(res[k][1], fd) < 1e-3


def test_actor_gradients_match_finite_differences():
    agent = small_agent(alpha=0.2)
    for p in agent.actor.params[-2:]:
        p += np.random.default_rng(5).normal(scale=0.3, size=p.shape)
    batch = make_batch(seed=1)
    xi = np.random.default_rng(4).standard_normal((7, 2))
    _, grads, _ = agent.actor_loss(batch, xi)
    fd = fd_grads(lambda: agent.actor_loss(batch, xi)[0], agent.actor.params)
    assert rel_err(grads, fd) < 1e-3


def test_squash_log_prob_matches_density():
    # change of variables checked against a 1-D numerical density of tanh(N(mu, s))
    mu, ls, xi = 0.3, np.log(0.7), 0.4
    z = mu + 0.7 * xi
    u = np.tanh(z)
    gauss = np.exp(-0.5 * xi * xi) / (0.7 * np.sqrt(2 * np.pi))
    ref = np.log(gauss / (1 - u * u))
    got = squash_log_prob(np.array([[xi]]), np.array([[ls]]), np.array([[z]]))[0]
    assert got == pytest.approx(ref, rel=1e-10)


def test_scale_maps_zero_and_bounds():
    agent = small_agent()
    assert np.array_equal(agent.scale([0.0, 0.0]), [0.0, 0.0])
    assert agent.scale([1.0, -1.0]) == pytest.approx([0.2, -0.04])
    assert agent.scale([-1.0, 1.0]) == pytest.approx([-0.3, 0.04])


def test_soft_update_tau_one_copies():
    agent = small_agent()
    for p in agent.q1.params:
        p += 1.0
    agent.soft_update(1.0)
    assert all(np.array_equal(a, b) for a, b in zip(agent.q1.params, agent.q1_targ.params))


def test_soft_update_tau_zero_keeps_targets():
    agent = small_agent()
    before = [p.copy() for p in agent.q2_targ.params]
    for p in agent.q2.params:
        p += 1.0
    agent.soft_update(0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.q2_targ.params))


def test_auto_alpha_step_direction():
    agent = small_agent(auto_alpha=True, target_entropy=-2.0, alpha=0.5, lr=0.01)
    # entropy estimate 1.0 is above target -2.0, so alpha shrinks by lr * 3
    assert agent.auto_alpha_update(np.array([-1.0, -1.0])) == pytest.approx(0.47)
    assert agent.auto_alpha_update(np.array([50.0])) == pytest.approx(0.47 + 0.01 * 48)


def test_auto_alpha_floor():
    agent = small_agent(auto_alpha=True, target_entropy=-100.0, alpha=1e-3, lr=1.0)
    assert agent.auto_alpha_update(np.zeros(3)) == agent.cfg.alpha_min


def test_update_runs_and_is_deterministic():
    def once():
        agent = small_agent()
        buf = ReplayBuffer(OBS, 2)
        b = make_batch(40)
        for i in range(40):
            buf.add(b.obs[i], b.act[i], b.rew[i], b.next_obs[i], b.done[i])
        rng = np.random.default_rng(0)
        for _ in range(5):
            agent.update(buf.sample(8, rng), rng, buf)
        return agent.parameter_checksum()

    assert once() == once()


def test_replay_buffer_ring_and_growth():
    buf = ReplayBuffer(1, 1, capacity=5000)
    for i in range(4100):
        buf.add([i], [0], i, [i], False)
    assert len(buf) == 4100 and buf.rew[4099] == 4099
    small = ReplayBuffer(1, 1, capacity=3)
    for i in range(5):
        small.add([i], [0], i, [i], False)
    assert len(small) == 3 and sorted(small.rew) == [2, 3, 4]


def test_replay_buffer_short_sample_errors():
    with pytest.raises(ValueError):
        ReplayBuffer(1, 1).sample(1, np.random.default_rng(0))


def test_sum_tree_find():
    tree = SumTree(5)
    tree.set(np.arange(5), [1.0, 2.0, 0.0, 3.0, 4.0])
    assert tree.total == 10.0
    assert list(tree.find(np.array([0.0, 0.99, 1.0, 2.99, 3.0, 6.0, 9.99]))) == [0, 0, 1, 1, 3, 4, 4]


def test_prioritized_frequencies_follow_priorities():
    buf = PrioritizedReplayBuffer(1, 1, capacity=8, alpha=1.0)
    buf.add([0], [0], 0, [0], False)
    buf.add([1], [0], 1, [1], False)
    buf.set_priorities([0, 1], [3.0, 1.0])
    rng = np.random.default_rng(0)
    idx = np.concatenate([buf.sample(2, rng).idx for _ in range(50_000)])
    assert abs(np.mean(idx == 0) - 0.75) < 3 * np.sqrt(0.75 * 0.25 / len(idx))


def test_prioritized_importance_weights():
    buf = PrioritizedReplayBuffer(1, 1, capacity=8, alpha=1.0, beta=1.0)
    for i in range(2):
        buf.add([i], [0], i, [i], False)
    buf.set_priorities([0, 1], [3.0, 1.0])
    rng = np.random.default_rng(1)
    draws = [buf.sample(2, rng) for _ in range(30)]
    idx = np.concatenate([d.idx for d in draws])
    w = np.concatenate([d.weights for d in draws])
    assert set(idx) == {0, 1}
    # w_i = (N P_i)^-beta normalized by max: item 0 gets (1/3), item 1 gets 1
    # within a batch holding both items
    for d in draws:
        if set(d.idx) == {0, 1}:
            assert np.allclose(d.weights[d.idx == 0], 1.0 / 3.0)
            assert np.allclose(d.weights[d.idx == 1], 1.0)
    assert np.all(w <= 1.0)


def test_prioritized_alpha_zero_is_uniform():
    buf = PrioritizedReplayBuffer(1, 1, capacity=8, alpha=0.0)
    for i in range(4):
        buf.add([i], [0], i, [i], False)
    buf.set_priorities(np.arange(4), [1.0, 5.0, 9.0, 0.1])
    assert np.allclose(buf.probabilities(), 0.25)


def test_nonpositive_priority_rejected():
    buf = PrioritizedReplayBuffer(1, 1)
    buf.add([0], [0], 0, [0], False)
    with pytest.raises(ValueError):
        buf.set_priorities([0], [0.0])


def test_buffer_state_round_trip():
    buf = PrioritizedReplayBuffer(2, 1, capacity=10)
    for i in range(6):
        buf.add([i, i], [0.1], i, [i, i], i == 5)
    buf.set_priorities([2], [7.0])
    other = PrioritizedReplayBuffer(2, 1, capacity=10)
    other.restore(buf.state_arrays())
    assert len(other) == 6 and other.ptr == buf.ptr
    assert np.array_equal(other.probabilities(), buf.probabilities())


def test_agent_save_load_round_trip(tmp_path):
    agent = small_agent(auto_alpha=True)
    buf = ReplayBuffer(OBS, 2)
    b = make_batch(20)
    for i in range(20):
        buf.add(b.obs[i], b.act[i], b.rew[i], b.next_obs[i], b.done[i])
    rng = np.random.default_rng(0)
    agent.update(buf.sample(8, rng), rng)
    agent.save(tmp_path / "a.bin")
    back = SacAgent.load(tmp_path / "a.bin")
    assert back.parameter_checksum() == agent.parameter_checksum()
    assert back.alpha == agent.alpha and back.n_updates == 1
    assert back.actor_opt.state.t == 1
    obs = np.random.default_rng(2).normal(size=(4, OBS))
    assert np.array_equal(back(obs), agent(obs))
    # continuing training from the checkpoint matches continuing in memory
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    agent.update(buf.sample(8, r1), r1)
    back.update(buf.sample(8, r2), r2)
    assert back.parameter_checksum() == agent.parameter_checksum()
