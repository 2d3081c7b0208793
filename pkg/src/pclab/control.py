"""Partitioned-control executor: the user teleoperates a disjoint subset of
action axes while the policy drives the rest.

Three conditions around the same tick loop:
  RL    - the policy sees the real state, untouched.
  STOP  - like RL, but robot-owned axes are zeroed whenever the env's
          failure predicate (spilling / outside workspace) holds.
  IODA  - when the real state is OOD w.r.t. the rollout history, the policy
          is fed the nearest recorded state instead (an imagined state).
          Dynamics always step from the real state; only the policy input
          is substituted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import PourConfig, bin_at
from .errors import DimensionMismatchError
from .rollouts import StateIndex
from .sac import GaussianPolicy, act

REPORT_FORMAT = "episode-report"
REPORT_VERSION = 1

CONDITION_RL = "RL"
CONDITION_STOP = "STOP"
CONDITION_IODA = "IODA"
CONDITIONS = (CONDITION_RL, CONDITION_STOP, CONDITION_IODA)


@dataclass(frozen=True)
class AxisPartition:
    """Per-action-dimension owner mask; True = user-controlled."""
    user_dims: tuple

    @classmethod
    def from_user_dims(cls, dims, action_dim: int) -> "AxisPartition":
        mask = np.zeros(action_dim, dtype=bool)
        mask[list(dims)] = True
        return cls(user_dims=tuple(bool(b) for b in mask))

    @property
    def mask(self) -> np.ndarray:
        return np.array(self.user_dims, dtype=bool)

    @property
    def action_dim(self) -> int:
        return len(self.user_dims)

    def validate_pc(self) -> None:
        m = self.mask
        if not m.any() or m.all():
            raise ValueError("a PC session needs at least one user and one robot axis")


@dataclass
class Condition:
    name: str
    detector: object | None = None     # IODA: fitted OOD detector
    index: StateIndex | None = None    # IODA: nearest-state index over D

    def __post_init__(self):
        if self.name not in CONDITIONS:
            raise ValueError(f"unknown condition {self.name!r}")
        if self.name == CONDITION_IODA:
            if self.detector is None or self.index is None:
                raise ValueError("IODA needs a fitted detector and a rollout index")
            if self.detector.state_dim != self.index.state_dim:
                raise DimensionMismatchError("detector/index state dims differ")


def combine(u: np.ndarray, a: np.ndarray, partition: AxisPartition) -> np.ndarray:
    """Disjoint combination: user values on user axes, policy values on the
    rest. Inputs are masked first, so off-owner components can never leak."""
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if u.shape != a.shape or u.shape != (partition.action_dim,):
        raise DimensionMismatchError(
            f"action dims {u.shape}/{a.shape} != partition ({partition.action_dim},)")
    m = partition.mask
    return np.where(m, u, 0.0) + np.where(m, 0.0, a)


def effective_state(s: np.ndarray, cond: Condition):
    """State handed to the policy: (state, imagined flag)."""
    if cond.name != CONDITION_IODA:
        return np.asarray(s, dtype=np.float64), False
    from .ood import is_ood
    if is_ood(cond.detector, s):
        return cond.index.nearest(s).state, True
    return np.asarray(s, dtype=np.float64), False


# ---------------------------------------------------------------------------
# Episode reports
# ---------------------------------------------------------------------------

@dataclass
class EpisodeReport:
    env_id: str
    condition: str
    seed: int
    user_dims: tuple
    states: np.ndarray         # (T+1, n)
    user_cmds: np.ndarray      # (T, m) raw user channel after masking/clipping
    policy_actions: np.ndarray # (T, m) what the policy emitted (pre STOP/mask)
    applied: np.ndarray        # (T, m) what the env actually stepped on
    rewards: np.ndarray        # (T,)
    ood: np.ndarray            # (T,) bool
    imagined: np.ndarray       # (T,) bool
    imagined_states: list      # per tick: state vector or None
    stop_engaged: np.ndarray   # (T,) bool
    tick_info: list            # per tick env info dicts
    done: bool
    timeout: bool
    user_present: bool = True  # False: autonomous baseline, no masking
    metrics: dict = field(default_factory=dict)

    @property
    def ticks(self) -> int:
        return len(self.applied)


def report_to_dict(r: EpisodeReport) -> dict:
    return {
        "format": REPORT_FORMAT, "version": REPORT_VERSION,
        "env": r.env_id, "condition": r.condition, "seed": r.seed,
        "user_dims": list(r.user_dims),
        "states": r.states.tolist(),
        "user_cmds": r.user_cmds.tolist(),
        "policy_actions": r.policy_actions.tolist(),
        "applied": r.applied.tolist(),
        "rewards": r.rewards.tolist(),
        "ood": [bool(x) for x in r.ood],
        "imagined": [bool(x) for x in r.imagined],
        "imagined_states": [None if s is None else list(s) for s in r.imagined_states],
        "stop_engaged": [bool(x) for x in r.stop_engaged],
        "tick_info": r.tick_info,
        "done": r.done, "timeout": r.timeout,
        "user_present": r.user_present,
        "metrics": r.metrics,
    }


def report_from_dict(d: dict) -> EpisodeReport:
    if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
        raise ValueError("not a supported episode report")
    return EpisodeReport(
        env_id=d["env"], condition=d["condition"], seed=d["seed"],
        user_dims=tuple(d["user_dims"]),
        states=np.asarray(d["states"], dtype=np.float64),
        user_cmds=np.asarray(d["user_cmds"], dtype=np.float64),
        policy_actions=np.asarray(d["policy_actions"], dtype=np.float64),
        applied=np.asarray(d["applied"], dtype=np.float64),
        rewards=np.asarray(d["rewards"], dtype=np.float64),
        ood=np.asarray(d["ood"], dtype=bool),
        imagined=np.asarray(d["imagined"], dtype=bool),
        imagined_states=[None if s is None else np.asarray(s, dtype=np.float64)
                         for s in d["imagined_states"]],
        stop_engaged=np.asarray(d["stop_engaged"], dtype=bool),
        tick_info=d["tick_info"], done=d["done"], timeout=d["timeout"],
        user_present=d.get("user_present", True),
        metrics=d["metrics"])


def save_report(r: EpisodeReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report_to_dict(r), f)


def load_report(path) -> EpisodeReport:
    with open(path) as f:
        return report_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Tick executor (shared by batch episodes and the live service)
# ---------------------------------------------------------------------------

class PcExecutor:
    """Single-threaded tick loop for one session.

    The caller supplies the user command each tick (scripted user, replay,
    or the live mailbox); everything else - gate, projection, STOP rule,
    disjoint combination, recording - happens here so offline replay and the
    live service share exact semantics.
    """

    def __init__(self, env, policy: GaussianPolicy, cond: Condition,
                 partition: AxisPartition, max_ticks: int | None = None):
        if policy.state_dim != env.state_dim:
            raise DimensionMismatchError("policy/env state dims differ")
        if partition.action_dim != env.action_dim:
            raise DimensionMismatchError("partition/env action dims differ")
        if cond.name == CONDITION_IODA and cond.index.state_dim != env.state_dim:
            raise DimensionMismatchError("rollout index/env state dims differ")
        partition.validate_pc()
        self.env = env
        self.policy = policy
        self.cond = cond
        self.partition = partition
        self.max_ticks = max_ticks
        self.state = None
        self.done = True
        self.seed = None
        self._records = None

    def reset(self, seed: int) -> np.ndarray:
        self.seed = int(seed)
        self.state = self.env.reset(seed=self.seed)
        self.done = False
        self._records = {k: [] for k in
                         ("states", "user_cmds", "policy_actions", "applied",
                          "rewards", "ood", "imagined", "imagined_states",
                          "stop_engaged", "tick_info")}
        self._timeout = False
        self._user_present = True
        return self.state.copy()

    @property
    def tick(self) -> int:
        return len(self._records["applied"]) if self._records else 0

    def step(self, user_cmd) -> dict:
        """One tick. user_cmd None runs the tick fully autonomously (the
        disjoint combination degenerates to the policy action)."""
        if self.done:
            raise RuntimeError("episode finished; reset() first")
        env, cond, partition = self.env, self.cond, self.partition
        scale = np.asarray(env.action_scale, dtype=np.float64)
        if user_cmd is None:
            self._user_present = False
            u = np.zeros(partition.action_dim)
        else:
            u = np.clip(np.asarray(user_cmd, dtype=np.float64), -scale, scale)
            u = np.where(partition.mask, u, 0.0)

        s = self.state
        s_policy, imagined = effective_state(s, cond)
        a = act(self.policy, s_policy, deterministic=True)
        stop = cond.name == CONDITION_STOP and env.failure_flag(s)
        a_exec = np.where(partition.mask, a, 0.0) if stop else a
        applied = a_exec if user_cmd is None else combine(u, a_exec, partition)
        res = env.step(applied)

        rec = self._records
        rec["states"].append(s.copy())
        rec["user_cmds"].append(u)
        rec["policy_actions"].append(a)
        rec["applied"].append(applied)
        rec["rewards"].append(res.reward)
        rec["ood"].append(imagined if cond.name == CONDITION_IODA else False)
        rec["imagined"].append(imagined)
        rec["imagined_states"].append(s_policy.copy() if imagined else None)
        rec["stop_engaged"].append(stop)
        rec["tick_info"].append(res.info)

        self.state = res.state
        self.done = res.done
        self._timeout = res.info.get("timeout", False)
        if self.max_ticks is not None and self.tick >= self.max_ticks and not self.done:
            self.done = True
            self._timeout = True
        return {"state": res.state.copy(), "reward": res.reward,
                "done": self.done, "ood": rec["ood"][-1],
                "imagined": imagined,
                "imagined_state": s_policy.copy() if imagined else None,
                "info": res.info}

    def report(self) -> EpisodeReport:
        rec = self._records
        states = rec["states"] + [self.state.copy()]
        return EpisodeReport(
            env_id=self.env.env_id, condition=self.cond.name, seed=self.seed,
            user_dims=self.partition.user_dims,
            states=np.asarray(states),
            user_cmds=np.asarray(rec["user_cmds"]),
            policy_actions=np.asarray(rec["policy_actions"]),
            applied=np.asarray(rec["applied"]),
            rewards=np.asarray(rec["rewards"]),
            ood=np.asarray(rec["ood"], dtype=bool),
            imagined=np.asarray(rec["imagined"], dtype=bool),
            imagined_states=rec["imagined_states"],
            stop_engaged=np.asarray(rec["stop_engaged"], dtype=bool),
            tick_info=rec["tick_info"],
            done=self.done, timeout=self._timeout,
            user_present=self._user_present)


def run_episode(env, policy: GaussianPolicy, user, cond: Condition,
                partition: AxisPartition, seed: int,
                max_ticks: int | None = None) -> EpisodeReport:
    """Run one partitioned-control episode with a scripted (or replayed)
    user; `user` may be None for a fully autonomous baseline tick loop."""
    ex = PcExecutor(env, policy, cond, partition, max_ticks=max_ticks)
    s = ex.reset(seed)
    if user is not None:
        user.reset(s)
    while not ex.done:
        u = None if user is None else user.command(ex.state, ex.tick)
        ex.step(u)
    return ex.report()


def rollout_report(rollout, env_id: str, partition: AxisPartition) -> EpisodeReport:
    """View a recorded autonomous rollout as an episode report, attributing
    the user-axis slice of each applied action to the user (what a watcher
    of that rollout would have anticipated)."""
    T = len(rollout.actions)
    mask = partition.mask
    user_cmds = np.where(mask, rollout.actions, 0.0)
    return EpisodeReport(
        env_id=env_id, condition=CONDITION_RL, seed=rollout.seed,
        user_dims=partition.user_dims,
        states=rollout.states.copy(), user_cmds=user_cmds,
        policy_actions=rollout.actions.copy(), applied=rollout.actions.copy(),
        rewards=rollout.rewards.copy(),
        ood=np.zeros(T, dtype=bool), imagined=np.zeros(T, dtype=bool),
        imagined_states=[None] * T, stop_engaged=np.zeros(T, dtype=bool),
        tick_info=[{} for _ in range(T)], done=rollout.terminal, timeout=False)


# ---------------------------------------------------------------------------
# Expectation model and alignment
# ---------------------------------------------------------------------------

@dataclass
class ExpectationModel:
    """The user's anticipated next state: act as in the closest previously
    seen state. predict(s, u) = T(s, u o pi*(nearest(s)))."""
    index: StateIndex
    policy: GaussianPolicy
    transition: object          # pure T(state, action) -> next state
    partition: AxisPartition

    def predict(self, s, u) -> np.ndarray:
        s_near = self.index.nearest(s).state
        a = act(self.policy, s_near, deterministic=True)
        return self.transition(s, combine(np.asarray(u), a, self.partition))

    def distance(self, a, b) -> float:
        return self.index.distance(a, b)


def expectation_alignment(report: EpisodeReport, model: ExpectationModel) -> float:
    """Mean distance between the anticipated and realized next state over
    the episode; lower means the robot behaved as the user expected."""
    if report.ticks == 0:
        raise ValueError("empty trajectory")
    total = 0.0
    for t in range(report.ticks):
        predicted = model.predict(report.states[t], report.user_cmds[t])
        total += model.distance(predicted, report.states[t + 1])
    return total / report.ticks


# ---------------------------------------------------------------------------
# Scripted users
# ---------------------------------------------------------------------------

class NavXController:
    """Optimal x-position controller: drives the x axis to each subgoal in
    turn (waiting there until the policy's y motion closes the gap), then to
    the primary goal's x."""

    def __init__(self, subgoals, max_speed: float, reach_radius: float = 0.6,
                 gain: float = 1.0):
        self.subgoals = [np.asarray(sg, dtype=np.float64) for sg in subgoals]
        self.max_speed = max_speed
        self.reach_radius = reach_radius
        self.gain = gain
        self.phase = 0

    def reset(self, state0) -> None:
        self.phase = 0

    def command(self, state, tick) -> np.ndarray:
        x, y, gx, gy = state
        while (self.phase < len(self.subgoals)
               and np.hypot(x - self.subgoals[self.phase][0],
                            y - self.subgoals[self.phase][1]) <= self.reach_radius):
            self.phase += 1
        tx = self.subgoals[self.phase][0] if self.phase < len(self.subgoals) else gx
        ux = float(np.clip(self.gain * (tx - x), -self.max_speed, self.max_speed))
        return np.array([ux, 0.0])


def subgoals_reached(states: np.ndarray, subgoals, radius: float) -> list:
    """In-order reach flags for each subgoal over a recorded trajectory."""
    flags = []
    t = 0
    n = len(states)
    for sg in subgoals:
        sg = np.asarray(sg, dtype=np.float64)
        hit = None
        while t < n:
            if np.hypot(states[t][0] - sg[0], states[t][1] - sg[1]) <= radius:
                hit = t
                break
            t += 1
        flags.append(hit is not None)
        if hit is None:
            t = n
    return flags


class PourScriptUser:
    """Pours a target weight into each bin while expecting steady cup motion.

    Holds the wrist just under the spill threshold between bins and tracks a
    constant target outflow over them. Where the user believes the cup is:
    resynchronized to the true position every `latency` ticks and
    dead-reckoned with the cruise speed from the rollout history in between,
    so unexpected robot behavior goes unnoticed for up to `latency` ticks
    (the surprise-reaction model). The wrist itself is the user's own hand
    and is always known exactly.
    """

    def __init__(self, cfg: PourConfig, cruise_speed: float,
                 latency: int = 10, outflow_target: float = 15.0,
                 level_margin: float = 0.15, per_bin_target: float | None = None,
                 sync_phase: int = 0):
        self.cfg = cfg
        self.cruise_speed = cruise_speed
        self.latency = max(1, int(latency))
        self.outflow_target = outflow_target
        self.level_margin = level_margin
        self.per_bin_target = (cfg.target_bin_weight if per_bin_target is None
                               else per_bin_target)
        self.sync_phase = sync_phase % self.latency
        self.p_hat = 0.0
        self.poured = np.zeros(5)

    def reset(self, state0) -> None:
        self.p_hat = float(state0[0])
        self.poured = np.zeros(5)

    def command(self, state, tick) -> np.ndarray:
        cfg = self.cfg
        if tick % self.latency == self.sync_phase:
            self.p_hat = float(state[0])
        else:
            self.p_hat = min(1.0, self.p_hat + self.cruise_speed)
        wrist = float(state[1])

        # believed delivery this tick, attributed to the believed bin
        believed_bin = bin_at(self.p_hat, cfg)
        flow_belief = cfg.outflow_coeff * max(wrist - cfg.spill_threshold, 0.0)
        if believed_bin is not None and flow_belief > 0:
            self.poured[believed_bin] += flow_belief

        pour_now = (believed_bin is not None
                    and self.poured[believed_bin] < self.per_bin_target)
        if pour_now:
            wrist_target = cfg.spill_threshold + self.outflow_target / cfg.outflow_coeff
        else:
            wrist_target = cfg.spill_threshold - self.level_margin
        w_cmd = float(np.clip(wrist_target - wrist,
                              -cfg.max_wrist_speed, cfg.max_wrist_speed))
        return np.array([0.0, w_cmd])


def make_pour_user(cfg: PourConfig, cruise_speed: float, seed: int,
                   latency: int = 10, outflow_target: float = 15.0) -> PourScriptUser:
    """Per-seed simulated pour user: one draw from a jittered population."""
    rng = np.random.default_rng(seed)
    return PourScriptUser(
        cfg, cruise_speed,
        latency=int(np.clip(latency + rng.integers(-3, 4), 4, 60)),
        outflow_target=float(np.clip(outflow_target + rng.normal(0.0, 1.5),
                                     6.0, cfg.outflow_coeff * (np.pi - cfg.spill_threshold))),
        sync_phase=int(rng.integers(0, latency)))


class ReplayUser:
    """Re-emits a logged command stream; used for bit-identical replays."""

    def __init__(self, commands):
        self.commands = np.asarray(commands, dtype=np.float64)

    def reset(self, state0) -> None:
        pass

    def command(self, state, tick) -> np.ndarray:
        return self.commands[tick]
