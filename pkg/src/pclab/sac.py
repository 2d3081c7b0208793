"""Soft actor-critic on the dense-net engine.

Twin critics, target nets with soft updates, tanh-squashed Gaussian actor,
entropy temperature auto-tuned toward -|A|. All gradients are the analytic
chain rule through nets.backward; the loss helpers are pure functions of
(params, batch, noise) so tests can check them against finite differences.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nets
from .errors import DimensionMismatchError, TrainingFailureError

POLICY_FORMAT = "policy"
POLICY_VERSION = 1

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class SacConfig:
    seed: int = 0
    hidden: tuple = (64, 64)
    lr: float = 3e-3
    gamma: float = 0.98
    tau: float = 0.01
    replay_capacity: int = 100_000
    batch_size: int = 128
    total_steps: int = 60_000
    start_steps: int = 2_000
    update_after: int = 2_000
    train_every: int = 1
    gradient_steps: int = 1
    alpha_init: float = 0.2
    alpha_lr: float = 3e-3
    target_entropy: float | None = None   # default -action_dim
    eval_episodes: int = 100
    success_threshold: float | None = 0.95

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0,1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0,1]")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ReplayBuffer:
    """Ring buffer of (s, a, r, s', done_for_bootstrap) with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def add(self, s, a, r, s2, done):
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


@dataclass
class GaussianPolicy:
    """Tanh-squashed Gaussian actor; emitted actions always lie in bounds."""
    actor: nets.DenseNet
    action_scale: np.ndarray   # per-dim bound c_i: a in [-c_i, c_i]
    input_scale: np.ndarray    # states are divided by this before the net
    env_id: str
    config_digest: str = ""

    @property
    def state_dim(self) -> int:
        return self.actor.input_dim

    @property
    def action_dim(self) -> int:
        return self.actor.output_dim // 2


def _actor_heads(actor: nets.DenseNet, s_net: np.ndarray):
    """Forward the actor and split into (mu, log_std, clip_mask, cache)."""
    out, cache = nets.forward_cached(actor, s_net)
    adim = actor.output_dim // 2
    mu = out[..., :adim]
    raw = out[..., adim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
    return mu, log_std, mask, cache


def _squash(mu, log_std, eps, scale):
    """Reparameterized draw: returns (action, tanh_val, log_prob_per_sample)."""
    sigma = np.exp(log_std)
    z = mu + sigma * eps
    t = np.tanh(z)
    a = t * scale
    logp = (-0.5 * eps * eps - log_std - 0.5 * LOG_2PI
            - np.log(scale * (1.0 - t * t) + SQUASH_EPS))
    return a, t, logp.sum(axis=-1)


def act(policy: GaussianPolicy, s, deterministic: bool = True,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Action for one state; deterministic returns the squashed mean."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (policy.state_dim,):
        raise DimensionMismatchError(
            f"state dim {s.shape} != policy input ({policy.state_dim},)")
    mu, log_std, _, _ = _actor_heads(policy.actor, s / policy.input_scale)
    if deterministic:
        return np.tanh(mu) * policy.action_scale
    if rng is None:
        rng = np.random.default_rng()
    eps = rng.standard_normal(policy.action_dim)
    a, _, _ = _squash(mu, log_std, eps, policy.action_scale)
    return a


# ---------------------------------------------------------------------------
# Pure loss helpers (finite-difference checkable)
# ---------------------------------------------------------------------------

def critic_loss_and_grads(qnet: nets.DenseNet, sa: np.ndarray, y: np.ndarray):
    """MSE between Q(s,a) and the fixed target y; grads w.r.t. qnet params."""
    pred, cache = nets.forward_cached(qnet, sa)
    pred = pred[:, 0]
    err = pred - y
    loss = float(np.mean(err * err))
    upstream = (2.0 / len(y)) * err[:, None]
    grads, _ = nets.backward_from_cache(qnet, cache, upstream)
    return loss, nets.flatten_grads(qnet, grads)


def actor_loss_and_grads(actor: nets.DenseNet, q1: nets.DenseNet, q2: nets.DenseNet,
                         s_net: np.ndarray, eps: np.ndarray, alpha: float,
                         action_scale: np.ndarray):
    """mean(alpha*logp - min(Q1,Q2)(s, a_theta)) with reparameterized actions.

    eps is the frozen N(0,1) draw, one per (sample, action dim). Returns
    (loss, actor grads, per-sample logp).
    """
    B = len(s_net)
    scale = action_scale
    mu, log_std, clip_mask, cache = _actor_heads(actor, s_net)
    sigma = np.exp(log_std)
    z = mu + sigma * eps
    t = np.tanh(z)
    a = t * scale
    u = scale * (1.0 - t * t) + SQUASH_EPS
    logp = (-0.5 * eps * eps - log_std - 0.5 * LOG_2PI - np.log(u)).sum(axis=1)

    sa = np.concatenate([s_net, a], axis=1)
    q1v, c1 = nets.forward_cached(q1, sa)
    q2v, c2 = nets.forward_cached(q2, sa)
    q1v, q2v = q1v[:, 0], q2v[:, 0]
    qmin = np.minimum(q1v, q2v)
    loss = float(np.mean(alpha * logp - qmin))

    # route -dqmin/da through whichever critic is the per-sample minimum
    pick1 = (q1v <= q2v).astype(np.float64)
    _, g1 = nets.backward_from_cache(q1, c1, (-pick1 / B)[:, None])
    _, g2 = nets.backward_from_cache(q2, c2, (-(1.0 - pick1) / B)[:, None])
    n_s = s_net.shape[1]
    dq_da = g1[:, n_s:] + g2[:, n_s:]

    dlogp_dz = 2.0 * scale * t * (1.0 - t * t) / u
    da_dz = scale * (1.0 - t * t)
    dmu = (alpha / B) * dlogp_dz + dq_da * da_dz
    dls = ((alpha / B) * (-1.0 + dlogp_dz * sigma * eps)
           + dq_da * da_dz * sigma * eps) * clip_mask
    upstream = np.concatenate([dmu, dls], axis=1)
    grads, _ = nets.backward_from_cache(actor, cache, upstream)
    return loss, nets.flatten_grads(actor, grads), logp


def soft_update(target: nets.DenseNet, online: nets.DenseNet, tau: float) -> None:
    for lt, lo in zip(target.layers, online.layers):
        lt.w *= 1.0 - tau
        lt.w += tau * lo.w
        if lt.b is not None:
            lt.b *= 1.0 - tau
            lt.b += tau * lo.b


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    episode_returns: list = field(default_factory=list)
    entropies: list = field(default_factory=list)      # mean(-logp) per update
    losses: list = field(default_factory=list)
    eval_success_rate: float | None = None
    target_entropy: float = 0.0


class SacTrainer:
    """Single-writer training loop; read-only snapshots may be shared."""

    def __init__(self, env, cfg: SacConfig):
        self.env = env
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        sdim, adim = env.state_dim, env.action_dim
        h = list(cfg.hidden)
        acts = ["relu"] * len(h) + ["identity"]
        seeds = self.rng.integers(0, 2**31 - 1, size=3)
        self.actor = nets.init_net([sdim] + h + [2 * adim], acts, seed=int(seeds[0]))
        self.q1 = nets.init_net([sdim + adim] + h + [1], acts, seed=int(seeds[1]))
        self.q2 = nets.init_net([sdim + adim] + h + [1], acts, seed=int(seeds[2]))
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        self.opt_actor = nets.adam_init(self.actor.params(), lr=cfg.lr)
        self.opt_q1 = nets.adam_init(self.q1.params(), lr=cfg.lr)
        self.opt_q2 = nets.adam_init(self.q2.params(), lr=cfg.lr)
        self.log_alpha = np.array([np.log(cfg.alpha_init)])
        self.opt_alpha = nets.adam_init([self.log_alpha], lr=cfg.alpha_lr)
        self.target_entropy = (cfg.target_entropy if cfg.target_entropy is not None
                               else -float(adim))
        self.buffer = ReplayBuffer(cfg.replay_capacity, sdim, adim)
        self.action_scale = np.asarray(env.action_scale, dtype=np.float64)
        self.input_scale = np.asarray(env.state_scale, dtype=np.float64)
        self.log = TrainLog(target_entropy=self.target_entropy)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def policy(self) -> GaussianPolicy:
        return GaussianPolicy(actor=copy.deepcopy(self.actor),
                              action_scale=self.action_scale.copy(),
                              input_scale=self.input_scale.copy(),
                              env_id=self.env.env_id,
                              config_digest=self.cfg.digest())

    def _sample_action(self, s):
        mu, log_std, _, _ = _actor_heads(self.actor, s / self.input_scale)
        eps = self.rng.standard_normal(self.env.action_dim)
        a, _, _ = _squash(mu, log_std, eps, self.action_scale)
        return a

    def update(self) -> dict:
        cfg = self.cfg
        s, a, r, s2, done = self.buffer.sample(cfg.batch_size, self.rng)
        s_n = s / self.input_scale
        s2_n = s2 / self.input_scale

        # target value with fresh next actions
        mu2, ls2, _, _ = _actor_heads(self.actor, s2_n)
        eps2 = self.rng.standard_normal(mu2.shape)
        a2, _, logp2 = _squash(mu2, ls2, eps2, self.action_scale)
        sa2 = np.concatenate([s2_n, a2], axis=1)
        q1t = nets.forward(self.q1_target, sa2)[:, 0]
        q2t = nets.forward(self.q2_target, sa2)[:, 0]
        y = r + cfg.gamma * (1.0 - done) * (np.minimum(q1t, q2t) - self.alpha * logp2)

        sa = np.concatenate([s_n, a], axis=1)
        l1, g1 = critic_loss_and_grads(self.q1, sa, y)
        nets.adam_step(self.q1.params(), g1, self.opt_q1)
        l2, g2 = critic_loss_and_grads(self.q2, sa, y)
        nets.adam_step(self.q2.params(), g2, self.opt_q2)

        eps = self.rng.standard_normal((cfg.batch_size, self.env.action_dim))
        la, ga, logp = actor_loss_and_grads(
            self.actor, self.q1, self.q2, s_n, eps, self.alpha, self.action_scale)
        nets.adam_step(self.actor.params(), ga, self.opt_actor)

        # temperature: d/dlog_alpha of -exp(log_alpha)*mean(logp + H_target)
        grad_la = np.array([-self.alpha * float(np.mean(logp + self.target_entropy))])
        nets.adam_step([self.log_alpha], [grad_la], self.opt_alpha)

        soft_update(self.q1_target, self.q1, cfg.tau)
        soft_update(self.q2_target, self.q2, cfg.tau)

        entropy = float(np.mean(-logp))
        self.log.entropies.append(entropy)
        return {"critic1": l1, "critic2": l2, "actor": la,
                "alpha": self.alpha, "entropy": entropy}

    def run(self) -> GaussianPolicy:
        cfg = self.cfg
        env = self.env
        s = env.reset(seed=int(self.rng.integers(0, 2**31 - 1)))
        ep_return = 0.0
        for step in range(cfg.total_steps):
            if step < cfg.start_steps:
                a = self.rng.uniform(-self.action_scale, self.action_scale)
            else:
                a = self._sample_action(s)
            res = env.step(a)
            timeout = res.info.get("timeout", False)
            self.buffer.add(s, a, res.reward, res.state, res.done and not timeout)
            ep_return += res.reward
            s = res.state
            if res.done:
                self.log.episode_returns.append(ep_return)
                ep_return = 0.0
                s = env.reset(seed=int(self.rng.integers(0, 2**31 - 1)))
            if step >= cfg.update_after and step % cfg.train_every == 0:
                for _ in range(cfg.gradient_steps):
                    losses = self.update()
            if step >= cfg.update_after and step % 5000 == 0:
                self.log.losses.append({"step": step, **losses})
        return self.policy()


def evaluate(policy: GaussianPolicy, env, episodes: int, seed: int = 12345) -> float:
    """Fraction of deterministic rollouts that end with the goal reached."""
    seed_rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(episodes):
        s = env.reset(seed=int(seed_rng.integers(0, 2**31 - 1)))
        done = False
        while not done:
            res = env.step(act(policy, s, deterministic=True))
            s, done = res.state, res.done
        if res.info.get("goal_reached", False):
            wins += 1
    return wins / episodes


def train(env, cfg: SacConfig):
    """Train a policy on env; returns (policy, log).

    Raises TrainingFailureError when the behavioral success gate is missed
    within the configured budget.
    """
    trainer = SacTrainer(env, cfg)
    policy = trainer.run()
    log = trainer.log
    if cfg.success_threshold is not None:
        rate = evaluate(policy, env, cfg.eval_episodes)
        log.eval_success_rate = rate
        if rate < cfg.success_threshold:
            raise TrainingFailureError(
                f"eval success {rate:.2%} below gate {cfg.success_threshold:.2%} "
                f"after {cfg.total_steps} steps",
                report={"success_rate": rate,
                        "episode_returns": log.episode_returns[-50:]})
    return policy, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def policy_to_dict(policy: GaussianPolicy) -> dict:
    return {"format": POLICY_FORMAT, "version": POLICY_VERSION,
            "env": policy.env_id,
            "state_dim": policy.state_dim, "action_dim": policy.action_dim,
            "action_scale": policy.action_scale.tolist(),
            "input_scale": policy.input_scale.tolist(),
            "config_digest": policy.config_digest,
            "actor": nets.net_to_dict(policy.actor)}


def policy_from_dict(d: dict) -> GaussianPolicy:
    if d.get("format") != POLICY_FORMAT:
        raise ValueError("not a policy checkpoint")
    if d.get("version") != POLICY_VERSION:
        raise ValueError(f"unsupported policy version {d.get('version')}")
    return GaussianPolicy(actor=nets.net_from_dict(d["actor"]),
                          action_scale=np.asarray(d["action_scale"]),
                          input_scale=np.asarray(d["input_scale"]),
                          env_id=d["env"], config_digest=d["config_digest"])


def save_policy(policy: GaussianPolicy, path) -> None:
    with open(path, "w") as f:
        json.dump(policy_to_dict(policy), f)


def load_policy(path) -> GaussianPolicy:
    with open(path) as f:
        return policy_from_dict(json.load(f))


def policy_digest(policy: GaussianPolicy) -> str:
    blob = json.dumps(policy_to_dict(policy), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
