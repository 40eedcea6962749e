"""Damped point-mass reach and push tasks with externally settable start and goal.

Both tasks share one observation layout so that a hyper-network trained on one
task can be warm-started on the other::

    [agent_x, agent_y, agent_vx, agent_vy, block_x, block_y, goal_x, goal_y]

The block slots stay at zero for ``reach``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Optional

import numpy as np

TASKS = ("reach", "push")
OBS_DIM = 8
STATE_DIM = 6  # observation without the goal slot
GOAL_DIM = 2
ACTION_DIM = 2
INIT_DIM = 4  # positions controlled by the initial-state curriculum: agent xy, block xy

DEFAULT_MAX_STEPS = {"reach": 100, "push": 160}


@dataclass(frozen=True)
class EnvSpec:
    task: str = "reach"
    arena_half_width: float = 1.0
    max_steps: int = 0
    success_radius: float = 0.0
    dt: float = 0.1
    damping: float = 0.9
    contact_radius: float = 0.1
    d_s: int = OBS_DIM
    d_a: int = ACTION_DIM
    d_g: int = GOAL_DIM

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.max_steps == 0:
            object.__setattr__(self, "max_steps", DEFAULT_MAX_STEPS[self.task])
        if self.success_radius == 0.0:
            object.__setattr__(self, "success_radius", 0.01 * self.diagonal)
        if self.max_steps <= 0 or self.success_radius <= 0 or self.arena_half_width <= 0:
            raise ValueError("max_steps, success_radius and arena_half_width must be positive")

    @property
    def diagonal(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.arena_half_width

    @property
    def success_threshold(self) -> float:
        return 1.0 - self.success_radius / self.diagonal

    def clamp(self, xy: np.ndarray) -> np.ndarray:
        w = self.arena_half_width
        return np.clip(xy, -w, w)


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    block_pos: np.ndarray
    goal: np.ndarray
    step_count: int = 0
    spec: EnvSpec = field(default_factory=EnvSpec, repr=False)

    @property
    def tracked_pos(self) -> np.ndarray:
        """Position scored against the goal: the agent for reach, the block for push."""
        return self.block_pos if self.spec.task == "push" else self.agent_pos


def observe(state: EnvState, goal: Optional[np.ndarray] = None) -> np.ndarray:
    g = state.goal if goal is None else goal
    return np.concatenate([state.agent_pos, state.agent_vel, state.block_pos, g])


def fractional_success(pos: np.ndarray, goal: np.ndarray, spec: EnvSpec) -> float:
    """``max(0, 1 - |pos - goal| / D)`` with ``D`` the arena diagonal."""
    dist = float(np.linalg.norm(np.asarray(pos, dtype=np.float64) - np.asarray(goal, dtype=np.float64)))
    return max(0.0, 1.0 - dist / spec.diagonal)


def sample_goal(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    w = spec.arena_half_width
    return rng.uniform(-w, w, size=GOAL_DIM)


def sample_init(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform start: agent and block positions in the arena, zero velocity."""
    w = spec.arena_half_width
    agent = rng.uniform(-w, w, size=2)
    block = rng.uniform(-w, w, size=2) if spec.task == "push" else np.zeros(2)
    return np.concatenate([agent, np.zeros(2), block])


def fixed_init(spec: EnvSpec) -> np.ndarray:
    w = spec.arena_half_width
    return np.concatenate([np.array([-0.5 * w, -0.5 * w]), np.zeros(2), np.zeros(2)])


def init_from_positions(positions: np.ndarray, spec: EnvSpec) -> np.ndarray:
    """Expand the 4 curriculum-controlled positions into a full start state."""
    positions = np.asarray(positions, dtype=np.float64)
    block = positions[2:4] if spec.task == "push" else np.zeros(2)
    return np.concatenate([positions[:2], np.zeros(2), block])


def env_reset(
    spec: EnvSpec,
    init: Optional[np.ndarray] = None,
    goal: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[EnvState, np.ndarray]:
    """Start an episode.

    ``init`` is ``(x, y, vx, vy)`` or ``(x, y, vx, vy, bx, by)``; positions are
    clamped into the arena and velocities into ``[-1, 1]``. Missing pieces are
    drawn uniformly from ``rng`` (or a generator built from ``seed``).
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if init is None:
        init = sample_init(spec, rng)
    init = np.asarray(init, dtype=np.float64)
    if init.shape[0] not in (4, STATE_DIM) or not np.all(np.isfinite(init)):
        raise ValueError(f"init must be a finite vector of length 4 or {STATE_DIM}")
    if goal is None:
        goal = sample_goal(spec, rng)
    goal = np.asarray(goal, dtype=np.float64)
    if goal.shape != (GOAL_DIM,) or not np.all(np.isfinite(goal)):
        raise ValueError(f"goal must be a finite vector of length {GOAL_DIM}")

    agent_pos = spec.clamp(init[:2])
    agent_vel = np.clip(init[2:4], -1.0, 1.0)
    if spec.task == "push":
        block_pos = spec.clamp(init[4:6]) if init.shape[0] == STATE_DIM else np.zeros(2)
    else:
        block_pos = np.zeros(2)
    state = EnvState(agent_pos, agent_vel, block_pos, spec.clamp(goal), 0, spec)
    return state, observe(state)


def env_step(state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray, float, bool, dict]:
    """Advance one step. Pure in ``(state, action)``."""
    spec = state.spec
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = spec.damping * state.agent_vel + (1.0 - spec.damping) * a
    pos = spec.clamp(state.agent_pos + spec.dt * vel)
    block = state.block_pos
    if spec.task == "push" and np.linalg.norm(state.agent_pos - block) <= spec.contact_radius:
        block = spec.clamp(block + (pos - state.agent_pos))
    new = EnvState(pos, vel, block, state.goal, state.step_count + 1, spec)
    fs = fractional_success(new.tracked_pos, new.goal, spec)
    done = new.step_count >= spec.max_steps or fs >= spec.success_threshold
    return new, observe(new), fs, bool(done), {"fractional_success": fs}


def write_trajectory_jsonl(fh: IO[str], records: list[dict]) -> None:
    """Append transitions as JSON lines; numpy arrays become lists."""
    for rec in records:
        fh.write(json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rec.items()}) + "\n")


def read_trajectory_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
