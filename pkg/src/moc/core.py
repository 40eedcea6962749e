"""Shared types, the experience buffer, and seeding helpers."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

SEED_COMPONENTS = ("env", "agent_init", "hypernet_init", "sampler", "action_noise", "target_noise", "memory_init")


def derive_seeds(seed: int) -> dict[str, int]:
    """Split one experiment seed into independent per-component seeds."""
    children = np.random.SeedSequence(int(seed)).spawn(len(SEED_COMPONENTS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(SEED_COMPONENTS, children)}


@dataclass(frozen=True)
class Transition:
    """One environment step plus the curricula that were active when it was collected.

    ``r`` is the environment reward; ``shaped_r`` is ``r`` plus the shaping term
    recorded at collection time. ``goal`` holds the active subgoal (zeros when no
    subgoal curriculum runs) and ``goal_ctx``/``segment`` the Base-RNN contexts
    that produced it, so the subgoal can be regenerated differentiably.
    """

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    goal: np.ndarray
    c_abs: np.ndarray
    log_prob: float
    shaped_r: float
    c_init: np.ndarray = field(default_factory=lambda: np.zeros(0))
    goal_ctx: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    segment: int = 0
    episode: int = 0

    def validate(self) -> None:
        for name in ("s", "a", "s_next", "goal", "c_abs", "c_init", "goal_ctx"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"transition field {name!r} has non-finite entries")
        for name in ("r", "log_prob", "shaped_r"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"transition field {name!r} is not finite")


class ReplayBuffer:
    """FIFO experience store with seeded uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._items: deque[Transition] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, idx: int) -> Transition:
        return self._items[idx]

    def __iter__(self):
        return iter(self._items)

    def push(self, t: Transition) -> "ReplayBuffer":
        t.validate()
        self._items.append(t)
        return self

    def extend(self, items: Iterable[Transition]) -> "ReplayBuffer":
        for t in items:
            self.push(t)
        return self

    def clear(self) -> None:
        self._items.clear()

    def sample_indices(self, n: int, seed: int, strict: bool = False) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if len(self) == 0 or (strict and n > len(self)):
            raise ValueError(f"cannot sample {n} transitions from a buffer of length {len(self)}")
        rng = np.random.default_rng(seed)
        return rng.integers(0, len(self), size=n)

    def sample(self, n: int, seed: int, strict: bool = False) -> list[Transition]:
        return [self._items[i] for i in self.sample_indices(n, seed, strict)]

    def recent(self, n: int) -> list[Transition]:
        """The ``n`` most recently pushed transitions, oldest first."""
        n = min(n, len(self))
        return [self._items[i] for i in range(len(self) - n, len(self))]


def stack_batch(batch: list[Transition]) -> dict[str, np.ndarray]:
    """Column-stack a list of transitions into arrays keyed by field name."""
    if not batch:
        raise ValueError("empty batch")
    out = {
        "s": np.stack([t.s for t in batch]),
        "a": np.stack([t.a for t in batch]),
        "r": np.array([t.r for t in batch], dtype=np.float64),
        "s_next": np.stack([t.s_next for t in batch]),
        "done": np.array([t.done for t in batch], dtype=np.float64),
        "goal": np.stack([t.goal for t in batch]),
        "c_abs": np.stack([t.c_abs for t in batch]),
        "c_init": np.stack([t.c_init for t in batch]),
        "log_prob": np.array([t.log_prob for t in batch], dtype=np.float64),
        "shaped_r": np.array([t.shaped_r for t in batch], dtype=np.float64),
        "goal_ctx": np.stack([t.goal_ctx for t in batch]),
        "segment": np.array([t.segment for t in batch], dtype=np.int64),
        "episode": np.array([t.episode for t in batch], dtype=np.int64),
    }
    return out
