"""The two simulated MDPs: 2D goal navigation and the bead-pour task.

Both expose the same contract: reset(seed) -> state vector, step(action) ->
StepResult, plus a pure vector-level transition used by the expectation
model. Dynamics are deterministic kinematic integration at a fixed tick
(default 20 ticks/s); the only randomness is in reset sampling.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DimensionMismatchError, EpisodeDoneError

ENV_CONFIG_FORMAT = "env-config"
ENV_CONFIG_VERSION = 1

REWARD_WORKSPACE_PENALTY = "WORKSPACE_PENALTY"
REWARD_RETURN_HOME = "RETURN_HOME"


@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    info: dict


# ---------------------------------------------------------------------------
# 2D goal navigation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NavConfig:
    # workspace rectangle (meters)
    x_min: float = 0.0
    x_max: float = 10.0
    y_min: float = 0.0
    y_max: float = 10.0
    max_speed: float = 0.25          # m/tick, per axis
    reward_variant: str = REWARD_WORKSPACE_PENALTY
    goal_radius: float = 0.3
    step_penalty: float = 0.05
    leave_penalty: float = 0.5
    y_motion_penalty: float = 5.0    # per |a_y|, RETURN_HOME variant only
    goal_reward: float = 10.0
    episode_ticks: int = 200
    # reset sampling: start drawn from the workspace inflated by this margin
    # (goal is always inside the workspace)
    start_margin: float = 0.0
    # optional (xlo, xhi, ylo, yhi) sampling boxes; None = whole workspace.
    # Study configs narrow these so the scripted-user route is feasible.
    start_box: tuple | None = None
    goal_box: tuple | None = None

    def __post_init__(self):
        if min(self.step_penalty, self.leave_penalty, self.y_motion_penalty) < 0:
            raise ValueError("penalties must be >= 0")
        if self.goal_radius <= 0:
            raise ValueError("goal radius must be > 0")
        if self.reward_variant not in (REWARD_WORKSPACE_PENALTY, REWARD_RETURN_HOME):
            raise ValueError(f"unknown reward variant {self.reward_variant!r}")
        if self.goal_box is not None:
            xlo, xhi, ylo, yhi = self.goal_box
            if not (self.x_min <= xlo <= xhi <= self.x_max
                    and self.y_min <= ylo <= yhi <= self.y_max):
                raise ValueError("goal box must lie inside the workspace")

    @property
    def action_scale(self) -> np.ndarray:
        return np.array([self.max_speed, self.max_speed])

    @property
    def state_scale(self) -> np.ndarray:
        span = max(self.x_max - self.x_min, self.y_max - self.y_min)
        return np.full(4, span)


def nav_in_workspace(x: float, y: float, cfg: NavConfig) -> bool:
    return cfg.x_min <= x <= cfg.x_max and cfg.y_min <= y <= cfg.y_max


def nav_transition(state: np.ndarray, action: np.ndarray, cfg: NavConfig):
    """One tick of navigation dynamics on the flat state [x, y, gx, gy].

    Pure function; also the expectation model's T. Returns
    (next_state, reward, done, info).
    """
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (4,):
        raise DimensionMismatchError(f"nav state must be (4,), got {state.shape}")
    a = np.clip(np.asarray(action, dtype=np.float64), -cfg.max_speed, cfg.max_speed)
    if a.shape != (2,):
        raise DimensionMismatchError(f"nav action must be (2,), got {a.shape}")
    x, y, gx, gy = state
    nx, ny = x + a[0], y + a[1]
    inside = nav_in_workspace(nx, ny, cfg)
    at_goal = np.hypot(nx - gx, ny - gy) <= cfg.goal_radius
    reward = -cfg.step_penalty
    if not inside:
        reward -= cfg.leave_penalty
        if cfg.reward_variant == REWARD_RETURN_HOME:
            reward -= cfg.y_motion_penalty * abs(a[1])
    if at_goal:
        reward += cfg.goal_reward
    next_state = np.array([nx, ny, gx, gy])
    info = {"in_workspace": bool(inside), "goal_reached": bool(at_goal)}
    return next_state, float(reward), bool(at_goal), info


class NavEnv:
    """Single-session navigation MDP; never share instances."""

    state_dim = 4
    action_dim = 2
    env_id = "nav"

    def __init__(self, cfg: NavConfig | None = None):
        self.cfg = cfg or NavConfig()
        self._state = None
        self._done = True
        self.tick = 0

    @property
    def action_scale(self) -> np.ndarray:
        return self.cfg.action_scale

    @property
    def state_scale(self) -> np.ndarray:
        return self.cfg.state_scale

    def reset(self, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        if cfg.start_box is not None:
            xlo, xhi, ylo, yhi = cfg.start_box
        else:
            m = cfg.start_margin
            xlo, xhi = cfg.x_min - m, cfg.x_max + m
            ylo, yhi = cfg.y_min - m, cfg.y_max + m
        x = rng.uniform(xlo, xhi)
        y = rng.uniform(ylo, yhi)
        gxlo, gxhi, gylo, gyhi = (cfg.goal_box if cfg.goal_box is not None
                                  else (cfg.x_min, cfg.x_max, cfg.y_min, cfg.y_max))
        gx = rng.uniform(gxlo, gxhi)
        gy = rng.uniform(gylo, gyhi)
        self._state = np.array([x, y, gx, gy])
        self._done = False
        self.tick = 0
        return self._state.copy()

    def observe(self) -> np.ndarray:
        return self._state.copy()

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeDoneError("nav episode finished; call reset()")
        next_state, reward, done, info = nav_transition(self._state, action, self.cfg)
        self.tick += 1
        if self.tick >= self.cfg.episode_ticks and not done:
            done = True
            info["timeout"] = True
        self._state = next_state
        self._done = done
        return StepResult(next_state.copy(), reward, done, info)

    def transition(self, state, action):
        """Pure next-state map for the expectation model."""
        return nav_transition(state, action, self.cfg)[0]

    def failure_flag(self, state) -> bool:
        """STOP-condition failure predicate: outside the workspace."""
        return not nav_in_workspace(state[0], state[1], self.cfg)


# ---------------------------------------------------------------------------
# Bead-pour task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PourConfig:
    initial_mass: float = 400.0            # grams
    spill_threshold: float = 1.2           # radians of wrist tilt
    outflow_coeff: float = 16.0            # g per rad-over-threshold per tick
    bin_centers: tuple = (0.18, 0.34, 0.50, 0.66, 0.82)  # on the [0,1] path
    bin_half_width: float = 0.06
    max_path_speed: float = 0.02           # path fraction per tick
    max_wrist_speed: float = 0.8           # rad per tick
    speed_spill_enabled: bool = False      # "moving too fast" trigger
    speed_spill_limit: float = 0.015       # path speed above this spills ...
    speed_spill_margin: float = 0.6        # ... while tilted beyond this
    tick_penalty: float = 0.05
    spill_penalty: float = 1.0
    goal_reward: float = 10.0
    target_bin_weight: float = 68.0        # grams per bin for a perfect pour
    goal_position: float = 0.995           # path fraction counting as arrived
    episode_ticks: int = 60
    wrist_locked: bool = False             # training variant: wrist never moves

    def __post_init__(self):
        centers = np.asarray(self.bin_centers)
        if len(centers) != 5 or np.any(np.diff(centers) <= 2 * self.bin_half_width):
            raise ValueError("need 5 ordered, non-overlapping bins")
        if self.target_bin_weight * 5 > self.initial_mass:
            raise ValueError("perfect pour must be feasible: 5*w <= initial mass")

    @property
    def action_scale(self) -> np.ndarray:
        return np.array([self.max_path_speed, self.max_wrist_speed])

    @property
    def state_scale(self) -> np.ndarray:
        return np.array([1.0, np.pi, self.initial_mass])


def bin_at(p: float, cfg: PourConfig):
    """Index of the bin whose interval contains path position p, else None."""
    for i, c in enumerate(cfg.bin_centers):
        if abs(p - c) <= cfg.bin_half_width:
            return i
    return None


def pour_flow(path_speed: float, wrist: float, remaining: float, cfg: PourConfig) -> float:
    """Outflow this tick (grams), capped by what is left in the cup."""
    over = max(wrist - cfg.spill_threshold, 0.0)
    flow = cfg.outflow_coeff * over
    if (cfg.speed_spill_enabled and abs(path_speed) > cfg.speed_spill_limit
            and wrist > cfg.speed_spill_margin):
        flow = max(flow, cfg.outflow_coeff * (wrist - cfg.speed_spill_margin))
    return min(flow, remaining)


def pour_vector_transition(state: np.ndarray, action: np.ndarray, cfg: PourConfig):
    """One tick on the flat pour state [p, wrist, remaining].

    Pure function shared by the env step and the expectation model; the env
    additionally routes the outflow into bins. Returns
    (next_state, outflow, clipped_action).
    """
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (3,):
        raise DimensionMismatchError(f"pour state must be (3,), got {state.shape}")
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,):
        raise DimensionMismatchError(f"pour action must be (2,), got {a.shape}")
    v = float(np.clip(a[0], -cfg.max_path_speed, cfg.max_path_speed))
    w = 0.0 if cfg.wrist_locked else float(np.clip(a[1], -cfg.max_wrist_speed, cfg.max_wrist_speed))
    p = float(np.clip(state[0] + v, 0.0, 1.0))
    wrist = float(np.clip(state[1] + w, 0.0, np.pi))
    outflow = pour_flow(v, wrist, state[2], cfg)
    remaining = state[2] - outflow
    return np.array([p, wrist, remaining]), outflow, np.array([v, w])


@dataclass
class PourState:
    """Full pour state; the flat vector drops the bin breakdown."""
    p: float
    wrist: float
    remaining: float
    bins: np.ndarray
    lost: float

    def vector(self) -> np.ndarray:
        return np.array([self.p, self.wrist, self.remaining])


class PourEnv:
    """Single-session pour MDP; cup slides along a unit path over 5 bins."""

    state_dim = 3
    action_dim = 2
    env_id = "pour"

    def __init__(self, cfg: PourConfig | None = None):
        self.cfg = cfg or PourConfig()
        self._full: PourState | None = None
        self._done = True
        self.tick = 0

    @property
    def action_scale(self) -> np.ndarray:
        return self.cfg.action_scale

    @property
    def state_scale(self) -> np.ndarray:
        return self.cfg.state_scale

    def reset(self, seed=None) -> np.ndarray:
        # deterministic start; the seed is accepted for contract symmetry
        self._full = PourState(
            p=0.0, wrist=0.0, remaining=self.cfg.initial_mass,
            bins=np.zeros(5), lost=0.0)
        self._done = False
        self.tick = 0
        return self._full.vector()

    def observe(self) -> np.ndarray:
        return self._full.vector()

    @property
    def full_state(self) -> PourState:
        return self._full

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeDoneError("pour episode finished; call reset()")
        cfg = self.cfg
        st = self._full
        vec, outflow, clipped = pour_vector_transition(st.vector(), action, cfg)
        bins = st.bins.copy()
        lost = st.lost
        if outflow > 0:
            idx = bin_at(vec[0], cfg)
            if idx is None:
                lost += outflow
            else:
                bins[idx] += outflow
        spilling = outflow > 0
        at_goal = vec[0] >= cfg.goal_position
        reward = cfg.goal_reward if at_goal else -cfg.tick_penalty
        if spilling:
            reward -= cfg.spill_penalty
        self.tick += 1
        done = at_goal
        info = {"spilling": bool(spilling), "outflow": float(outflow),
                "goal_reached": bool(at_goal)}
        if self.tick >= cfg.episode_ticks and not done:
            done = True
            info["timeout"] = True
        self._full = PourState(p=vec[0], wrist=vec[1], remaining=vec[2],
                               bins=bins, lost=lost)
        self._done = done
        return StepResult(vec.copy(), float(reward), done, info)

    def transition(self, state, action):
        return pour_vector_transition(state, action, self.cfg)[0]

    def failure_flag(self, state) -> bool:
        """STOP-condition failure predicate: the cup is spilling."""
        return state[1] > self.cfg.spill_threshold and state[2] > 0.0


def pour_error(bins, target: float = 68.0) -> float:
    """Total deficit across the 5 bins relative to a perfect pour of
    `target` grams each: sum_i max(target - b_i, 0)."""
    bins = np.asarray(bins, dtype=np.float64)
    if bins.shape != (5,):
        raise DimensionMismatchError(f"expected 5 bins, got {bins.shape}")
    if np.any(bins < 0):
        raise ValueError("bin weights must be >= 0")
    return float(np.sum(np.maximum(target - bins, 0.0)))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

ENV_CLASSES = {"nav": (NavEnv, NavConfig), "pour": (PourEnv, PourConfig)}


def make_env(env_id: str, cfg=None):
    if env_id not in ENV_CLASSES:
        raise ValueError(f"unknown env {env_id!r}")
    env_cls, _ = ENV_CLASSES[env_id]
    return env_cls(cfg)


def config_to_dict(env_id: str, cfg) -> dict:
    d = asdict(cfg)
    d["bin_centers"] = list(d["bin_centers"]) if "bin_centers" in d else None
    d = {k: v for k, v in d.items() if v is not None or k != "bin_centers"}
    return {"format": ENV_CONFIG_FORMAT, "version": ENV_CONFIG_VERSION,
            "env": env_id, "config": d}


def config_from_dict(d: dict):
    if d.get("format") != ENV_CONFIG_FORMAT:
        raise ValueError("not an env config file")
    if d.get("version") != ENV_CONFIG_VERSION:
        raise ValueError(f"unsupported env config version {d.get('version')}")
    env_id = d["env"]
    _, cfg_cls = ENV_CLASSES[env_id]
    raw = dict(d["config"])
    for key in ("bin_centers", "start_box", "goal_box"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    return env_id, cfg_cls(**raw)


def save_env_config(env_id: str, cfg, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(env_id, cfg), f, indent=1)


def load_env_config(path):
    with open(path) as f:
        return config_from_dict(json.load(f))
