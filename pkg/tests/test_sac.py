import copy

import numpy as np
import pytest

from pclab import nets, sac
from pclab.envs import NavConfig, NavEnv
from pclab.errors import DimensionMismatchError


def make_actor(state_dim=4, action_dim=2, seed=0):
    return nets.init_net([state_dim, 16, 16, 2 * action_dim],
                         ["relu", "relu", "identity"], seed=seed)


def make_critic(state_dim=4, action_dim=2, seed=1):
    return nets.init_net([state_dim + action_dim, 16, 16, 1],
                         ["relu", "relu", "identity"], seed=seed)


def make_policy(seed=0, state_dim=4, action_dim=2):
    return sac.GaussianPolicy(actor=make_actor(state_dim, action_dim, seed),
                              action_scale=np.array([0.25, 0.25]),
                              input_scale=np.full(state_dim, 10.0),
                              env_id="nav")


def fd_grad(loss_fn, net, h=1e-6):
    params = net.params()
    theta0 = np.concatenate([p.ravel() for p in params])
    g = np.zeros_like(theta0)

    def set_theta(theta):
        i = 0
        for p in params:
            p.flat[:] = theta[i:i + p.size]
            i += p.size

    for i in range(len(theta0)):
        theta = theta0.copy()
        theta[i] += h
        set_theta(theta)
        lp = loss_fn()
        theta[i] -= 2 * h
        set_theta(theta)
        lm = loss_fn()
        g[i] = (lp - lm) / (2 * h)
    set_theta(theta0)
    return g


class TestAct:
    def test_actions_within_bounds(self):
        policy = make_policy()
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = rng.uniform(-20, 20, size=4)
            a = sac.act(policy, s, deterministic=False, rng=rng)
            assert np.all(np.abs(a) <= policy.action_scale + 1e-12)

    def test_deterministic_repeatable(self):
        policy = make_policy()
        s = np.array([1.0, 2.0, 3.0, 4.0])
        a1 = sac.act(policy, s, deterministic=True)
        a2 = sac.act(policy, s, deterministic=True)
        assert np.array_equal(a1, a2)

    def test_dim_mismatch(self):
        policy = make_policy()
        with pytest.raises(DimensionMismatchError):
            sac.act(policy, np.zeros(5))

    def test_sample_mean_matches_quadrature_oracle(self):
        # oracle: E[tanh(mu + sigma*eps)*c] by Gauss-Hermite quadrature
        from numpy.polynomial.hermite_e import hermegauss
        policy = make_policy(seed=3)
        s = np.array([2.0, -1.0, 4.0, 0.5])
        mu, log_std, _, _ = sac._actor_heads(policy.actor, s / policy.input_scale)
        sigma = np.exp(log_std)
        nodes, weights = hermegauss(80)
        expected = np.array([
            np.sum(weights * np.tanh(m + sd * nodes)) / np.sqrt(2 * np.pi) * c
            for m, sd, c in zip(mu, sigma, policy.action_scale)])
        rng = np.random.default_rng(9)
        draws = np.array([sac.act(policy, s, deterministic=False, rng=rng)
                          for _ in range(10_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - expected) <= 3 * se + 1e-12)


class TestGradients:
    def test_critic_loss_matches_fd(self):
        rng = np.random.default_rng(1)
        q = make_critic(seed=4)
        sa = rng.normal(size=(16, 6))
        y = rng.normal(size=16)
        loss, grads = sac.critic_loss_and_grads(q, sa, y)
        flat = np.concatenate([g.ravel() for g in grads])
        fd = fd_grad(lambda: sac.critic_loss_and_grads(q, sa, y)[0], q)
        rel = np.abs(flat - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() < 1e-3

    def test_actor_loss_matches_fd(self):
        rng = np.random.default_rng(2)
        actor = make_actor(seed=5)
        q1, q2 = make_critic(seed=6), make_critic(seed=7)
        s_net = rng.normal(size=(12, 4)) * 0.3
        eps = rng.normal(size=(12, 2))
        scale = np.array([0.25, 0.25])

        def loss():
            return sac.actor_loss_and_grads(actor, q1, q2, s_net, eps, 0.2, scale)[0]

        _, grads, _ = sac.actor_loss_and_grads(actor, q1, q2, s_net, eps, 0.2, scale)
        flat = np.concatenate([g.ravel() for g in grads])
        fd = fd_grad(loss, actor)
        rel = np.abs(flat - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() < 1e-3

    def test_actor_loss_fd_with_large_alpha(self):
        # exercises the entropy path strongly
        rng = np.random.default_rng(3)
        actor = make_actor(seed=8)
        q1, q2 = make_critic(seed=9), make_critic(seed=10)
        s_net = rng.normal(size=(8, 4)) * 0.5
        eps = rng.normal(size=(8, 2))
        scale = np.array([1.0, 0.5])
        _, grads, _ = sac.actor_loss_and_grads(actor, q1, q2, s_net, eps, 2.0, scale)
        flat = np.concatenate([g.ravel() for g in grads])
        fd = fd_grad(lambda: sac.actor_loss_and_grads(
            actor, q1, q2, s_net, eps, 2.0, scale)[0], actor)
        rel = np.abs(flat - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() < 1e-3


class TestTargets:
    def test_tau_one_copies_online_net(self):
        online = make_critic(seed=11)
        target = make_critic(seed=12)
        sac.soft_update(target, online, tau=1.0)
        for lt, lo in zip(target.layers, online.layers):
            assert np.array_equal(lt.w, lo.w)
            assert np.array_equal(lt.b, lo.b)

    def test_soft_update_blends(self):
        online = make_critic(seed=13)
        target = make_critic(seed=14)
        before = copy.deepcopy(target)
        sac.soft_update(target, online, tau=0.25)
        for lt, lb, lo in zip(target.layers, before.layers, online.layers):
            np.testing.assert_allclose(lt.w, 0.75 * lb.w + 0.25 * lo.w, atol=1e-15)


class TestReplay:
    def test_uniform_sampling_within_5_sigma(self):
        buf = sac.ReplayBuffer(100, 2, 1)
        for i in range(100):
            buf.add(np.zeros(2) + i, np.zeros(1), 0.0, np.zeros(2), False)
        rng = np.random.default_rng(123)
        counts = np.zeros(100)
        draws = 100_000
        for _ in range(draws // 1000):
            idx = rng.integers(0, buf.size, size=1000)
            np.add.at(counts, idx, 1)
        expected = draws / 100
        sigma = np.sqrt(draws * (1 / 100) * (99 / 100))
        assert np.all(np.abs(counts - expected) <= 5 * sigma)

    def test_ring_overwrites_oldest(self):
        buf = sac.ReplayBuffer(3, 1, 1)
        for i in range(5):
            buf.add([float(i)], [0.0], 0.0, [0.0], False)
        assert buf.size == 3
        assert set(buf.s[:, 0]) == {2.0, 3.0, 4.0}


class TestTrainSmoke:
    def small_cfg(self, **kw):
        base = dict(seed=1, hidden=(16, 16), total_steps=400, start_steps=100,
                    update_after=100, replay_capacity=2000, batch_size=32,
                    success_threshold=None, eval_episodes=5)
        base.update(kw)
        return sac.SacConfig(**base)

    def test_same_seed_identical_checkpoint_digest(self):
        cfgs = [self.small_cfg(), self.small_cfg()]
        digests = []
        for cfg in cfgs:
            env = NavEnv(NavConfig(episode_ticks=40))
            policy, _ = sac.train(env, cfg)
            digests.append(sac.policy_digest(policy))
        assert digests[0] == digests[1]

    def test_different_seed_different_digest(self):
        d = []
        for seed in (1, 2):
            env = NavEnv(NavConfig(episode_ticks=40))
            policy, _ = sac.train(env, self.small_cfg(seed=seed))
            d.append(sac.policy_digest(policy))
        assert d[0] != d[1]

    def test_checkpoint_round_trip(self, tmp_path):
        env = NavEnv(NavConfig(episode_ticks=40))
        policy, _ = sac.train(env, self.small_cfg())
        p = tmp_path / "pol.json"
        sac.save_policy(policy, p)
        loaded = sac.load_policy(p)
        s = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(sac.act(policy, s), sac.act(loaded, s))
        assert sac.policy_digest(policy) == sac.policy_digest(loaded)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            sac.SacConfig(gamma=1.5)
        with pytest.raises(ValueError):
            sac.SacConfig(tau=0.0)
