"""Rollout history: record, persist, and query past episodes.

The archive is JSON Lines: a header line with schema version and dims, then
one episode per line. The nearest-state query is brute-force argmin over the
configured metric (L1 or weighted L1) by definition; a k-d tree acceleration
(scipy) is available and must agree exactly with the brute-force scan,
including the lowest-(episode, step) tie break.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (ArchiveVersionError, CorruptArchiveError,
                     DimensionMismatchError, EmptyStoreError)

ARCHIVE_FORMAT = "rollout-archive"
ARCHIVE_VERSION = 1

METRIC_L1 = "L1"
METRIC_WEIGHTED_L1 = "weighted-L1"


@dataclass
class Rollout:
    episode: int
    seed: int
    states: np.ndarray   # (T+1, n): every visited state incl. terminal
    actions: np.ndarray  # (T, m)
    rewards: np.ndarray  # (T,)
    terminal: bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.states) != len(self.actions) + 1 or len(self.actions) != len(self.rewards):
            raise ValueError("states must be one longer than actions/rewards")
        if len(self.actions) == 0:
            raise ValueError("empty rollout")

    def __eq__(self, other):
        return (self.episode == other.episode and self.seed == other.seed
                and self.terminal == other.terminal
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards))


@dataclass
class RolloutHistory:
    env_id: str
    state_dim: int
    action_dim: int
    rollouts: list = field(default_factory=list)

    def append(self, rollout: Rollout) -> None:
        if rollout.states.shape[1] != self.state_dim:
            raise DimensionMismatchError(
                f"rollout state dim {rollout.states.shape[1]} != store dim {self.state_dim}")
        self.rollouts.append(rollout)

    def __len__(self):
        return len(self.rollouts)

    def __eq__(self, other):
        return (self.env_id == other.env_id and self.state_dim == other.state_dim
                and self.action_dim == other.action_dim
                and len(self.rollouts) == len(other.rollouts)
                and all(a == b for a, b in zip(self.rollouts, other.rollouts)))

    def all_states(self) -> np.ndarray:
        if not self.rollouts:
            return np.zeros((0, self.state_dim))
        return np.concatenate([r.states for r in self.rollouts], axis=0)


def collect(policy, env, n: int, seed: int = 0, act_fn=None) -> RolloutHistory:
    """Record n deterministic-policy episodes, seeds derived from `seed`."""
    if n < 1:
        raise ValueError("need n >= 1 rollouts")
    if act_fn is None:
        from .sac import act as act_fn  # default: deterministic policy action
    history = RolloutHistory(env_id=env.env_id, state_dim=env.state_dim,
                             action_dim=env.action_dim)
    seed_rng = np.random.default_rng(seed)
    for episode in range(n):
        ep_seed = int(seed_rng.integers(0, 2**31 - 1))
        s = env.reset(seed=ep_seed)
        states, actions, rewards = [s], [], []
        done = False
        terminal = False
        while not done:
            a = act_fn(policy, s, deterministic=True)
            res = env.step(a)
            actions.append(a)
            rewards.append(res.reward)
            states.append(res.state)
            s = res.state
            done = res.done
            terminal = res.done and not res.info.get("timeout", False)
        history.append(Rollout(episode=episode, seed=ep_seed,
                               states=np.array(states), actions=np.array(actions),
                               rewards=np.array(rewards), terminal=terminal))
    return history


# ---------------------------------------------------------------------------
# Nearest-state index
# ---------------------------------------------------------------------------

@dataclass
class NearestResult:
    state: np.ndarray
    distance: float
    index: int      # row in the flat state matrix (insertion order)
    episode: int
    step: int


class StateIndex:
    """Flat matrix of every recorded state with (episode, step) back-refs.

    metric: L1 or weighted-L1 (weighted-L1 folds weights into the coordinates,
    so the accelerated tree sees plain L1). Brute force is the reference
    semantics; accel=True adds a k-d tree whose results must match it exactly.
    """

    def __init__(self, history: RolloutHistory, metric: str = METRIC_L1,
                 weights=None, accel: bool = True):
        if metric not in (METRIC_L1, METRIC_WEIGHTED_L1):
            raise ValueError(f"unknown metric {metric!r}")
        self.metric = metric
        self.state_dim = history.state_dim
        if metric == METRIC_WEIGHTED_L1:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (history.state_dim,) or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per state dim")
        else:
            w = np.ones(history.state_dim)
        self.weights = w
        self.states = history.all_states()
        backrefs = []
        for r in history.rollouts:
            for step in range(len(r.states)):
                backrefs.append((r.episode, step))
        self.backrefs = np.array(backrefs, dtype=np.int64).reshape(-1, 2)
        self._scaled = self.states * self.weights
        self._tree = cKDTree(self._scaled) if accel and len(self.states) else None

    def __len__(self):
        return len(self.states)

    def distance(self, a, b) -> float:
        return float(np.sum(np.abs((np.asarray(a) - np.asarray(b)) * self.weights)))

    def _check_query(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.state_dim,):
            raise DimensionMismatchError(
                f"query dim {s.shape} != index dim ({self.state_dim},)")
        if len(self.states) == 0:
            raise EmptyStoreError("nearest() on an empty store")
        return s

    def _result(self, idx: int, dist: float, s) -> NearestResult:
        ep, st = self.backrefs[idx]
        return NearestResult(state=self.states[idx].copy(), distance=float(dist),
                             index=int(idx), episode=int(ep), step=int(st))

    def nearest_brute(self, s) -> NearestResult:
        s = self._check_query(s)
        d = np.sum(np.abs(self._scaled - s * self.weights), axis=1)
        idx = int(np.argmin(d))  # argmin takes the first hit: earliest insertion
        return self._result(idx, d[idx], s)

    def nearest(self, s) -> NearestResult:
        if self._tree is None:
            return self.nearest_brute(s)
        s = self._check_query(s)
        q = s * self.weights
        d0, _ = self._tree.query(q, k=1, p=1)
        # re-evaluate candidates with the same arithmetic as the brute scan so
        # ties and 1-ulp discrepancies resolve identically
        radius = d0 * (1.0 + 1e-9) + 1e-12
        cand = self._tree.query_ball_point(q, r=radius, p=1)
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        dists = np.sum(np.abs(self._scaled[cand] - q), axis=1)
        best = dists.min()
        idx = int(cand[dists == best][0])
        return self._result(idx, best, s)


# ---------------------------------------------------------------------------
# JSON Lines archive
# ---------------------------------------------------------------------------

def save_history(history: RolloutHistory, path) -> None:
    with open(path, "w") as f:
        header = {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION,
                  "env": history.env_id, "state_dim": history.state_dim,
                  "action_dim": history.action_dim, "count": len(history.rollouts)}
        f.write(json.dumps(header) + "\n")
        for r in history.rollouts:
            line = {"episode": r.episode, "seed": r.seed,
                    "states": r.states.tolist(), "actions": r.actions.tolist(),
                    "rewards": r.rewards.tolist(), "terminal": r.terminal}
            f.write(json.dumps(line) + "\n")


def load_history(path) -> RolloutHistory:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorruptArchiveError(f"{path}: empty archive")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorruptArchiveError(f"{path}: bad header: {e}") from e
    if header.get("format") != ARCHIVE_FORMAT:
        raise CorruptArchiveError(f"{path}: not a rollout archive")
    if header.get("version") != ARCHIVE_VERSION:
        raise ArchiveVersionError(
            f"{path}: archive version {header.get('version')} unsupported")
    history = RolloutHistory(env_id=header["env"], state_dim=header["state_dim"],
                             action_dim=header["action_dim"])
    body = lines[1:]
    if len(body) != header["count"]:
        raise CorruptArchiveError(
            f"{path}: header says {header['count']} episodes, found {len(body)}")
    for line in body:
        try:
            d = json.loads(line)
            history.append(Rollout(
                episode=d["episode"], seed=d["seed"], states=d["states"],
                actions=d["actions"], rewards=d["rewards"], terminal=d["terminal"]))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise CorruptArchiveError(f"{path}: bad episode line: {e}") from e
    return history


def archive_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
