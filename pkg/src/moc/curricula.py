"""Curriculum generators driven by hyper-generated Base-RNN weights."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .hypernet import BaseRNNLayout, GeneratedParams

SHAPING_MODES = ("normalized", "invariant")


class BaseRNN:
    """Elman RNN whose weights are borrowed from a :class:`GeneratedParams`.

    Works on single contexts ``(N_x,)`` or batches ``(B, N_x)``; the hidden state
    is batched to match on the first step after :meth:`reset`.
    """

    def __init__(self, params: GeneratedParams, role: Optional[str] = None):
        if role is not None and params.role != role:
            raise ValueError(f"Base-RNN for role {role!r} given parameters for {params.role!r}")
        self.params = params
        self.layout: BaseRNNLayout = params.layout
        self._weights = self.layout.unflatten(params.theta_b)
        self.hidden: Optional[torch.Tensor] = None

    def reset(self, hidden: Optional[torch.Tensor] = None) -> None:
        self.hidden = hidden

    def step(self, x: torch.Tensor) -> torch.Tensor:
        w_h, w_x, b, w_o, b_o = self._weights
        x = x.to(w_x.dtype)
        if self.hidden is None:
            self.hidden = torch.zeros(*x.shape[:-1], self.layout.n_hidden, dtype=w_x.dtype)
        self.hidden = torch.tanh(self.hidden @ w_h.T + x @ w_x.T + b)
        return self.hidden @ w_o.T + b_o


def to_box(raw: torch.Tensor, low, high) -> torch.Tensor:
    """Squash with tanh and map affinely onto ``[low, high]``."""
    low = torch.as_tensor(low, dtype=raw.dtype)
    high = torch.as_tensor(high, dtype=raw.dtype)
    out = (low + high) / 2 + (high - low) / 2 * torch.tanh(raw)
    # rounding at saturation can overshoot by an ulp
    return torch.minimum(torch.maximum(out, low), high)


def gen_subgoal(rnn: BaseRNN, context: torch.Tensor, half_width: float) -> torch.Tensor:
    """Next subgoal in the goal box ``[-half_width, half_width]^d_g``."""
    return to_box(rnn.step(context), -half_width, half_width)


def gen_init_state(rnn: BaseRNN, context: torch.Tensor, half_width: float) -> torch.Tensor:
    """Start positions (agent xy, block xy) in the arena; a single step from a fresh hidden state."""
    rnn.reset()
    return to_box(rnn.step(context), -half_width, half_width)


def subgoals_from_contexts(params: GeneratedParams, contexts: torch.Tensor, segments: torch.Tensor, half_width: float):
    """Regenerate subgoals for a batch of stored context histories.

    ``contexts`` is ``(B, S, N_x)`` with row ``j`` the context fed at segment
    ``j``; returns, for each item, the subgoal after ``segments[b] + 1`` steps.
    """
    rnn = BaseRNN(params)
    n_seg = contexts.shape[1]
    out = torch.zeros(contexts.shape[0], params.layout.out_dim, dtype=params.theta_b.dtype)
    for j in range(n_seg):
        goal_j = gen_subgoal(rnn, contexts[:, j], half_width)
        sel = (segments == j).unsqueeze(-1)
        out = torch.where(sel, goal_j, out)
    return out


@dataclass
class PotentialFn:
    """State potential ``f(s)`` plus the shaping coefficient ``mu``.

    ``fn`` maps a batch of states ``(B, d_s)`` to ``(B,)``.
    """

    fn: Callable[[torch.Tensor], torch.Tensor]
    mu: float

    @classmethod
    def from_params(cls, params: GeneratedParams, mu: float) -> "PotentialFn":
        def fn(s: torch.Tensor) -> torch.Tensor:
            rnn = BaseRNN(params)
            return rnn.step(s).squeeze(-1)

        return cls(fn, mu)

    def __call__(self, s) -> torch.Tensor:
        return self.fn(torch.as_tensor(s))


def raw_shaping(pot: PotentialFn, s, s_next):
    """``mu * f(s') - f(s)``."""
    return pot.mu * pot(s_next) - pot(s)


class ShapingNormalizer:
    """Running min-max scaling of shaping values over a sliding window."""

    def __init__(self, window: int = 10_000):
        self.window = int(window)
        self._count = 0
        self._mins: deque[tuple[int, float]] = deque()
        self._maxs: deque[tuple[int, float]] = deque()
        self.low = 0.0
        self.high = 0.0

    def push(self, v: float) -> None:
        i = self._count
        self._count += 1
        while self._mins and self._mins[-1][1] >= v:
            self._mins.pop()
        self._mins.append((i, v))
        while self._maxs and self._maxs[-1][1] <= v:
            self._maxs.pop()
        self._maxs.append((i, v))
        oldest = i - self.window + 1
        while self._mins[0][0] < oldest:
            self._mins.popleft()
        while self._maxs[0][0] < oldest:
            self._maxs.popleft()
        self.low, self.high = self._mins[0][1], self._maxs[0][1]

    def update(self, values) -> np.ndarray:
        """Push values in order and return each one scaled by the window seen so far."""
        out = np.empty(len(values))
        for i, v in enumerate(np.asarray(values, dtype=np.float64)):
            self.push(float(v))
            out[i] = self.scale(v)
        return out

    def scale(self, v):
        span = self.high - self.low
        if span <= 1e-12:
            return v * 0.0
        scaled = (v - self.low) / span
        if isinstance(scaled, torch.Tensor):
            return scaled.clamp(0.0, 1.0)
        return np.clip(scaled, 0.0, 1.0)

    def state_dict(self) -> dict:
        return {"count": self._count, "mins": list(self._mins), "maxs": list(self._maxs)}

    def load_state_dict(self, state: dict) -> None:
        self._count = state["count"]
        self._mins = deque(tuple(x) for x in state["mins"])
        self._maxs = deque(tuple(x) for x in state["maxs"])
        if self._mins:
            self.low, self.high = self._mins[0][1], self._maxs[0][1]


def shaping_reward(pot: PotentialFn, s, s_next, mode: str = "invariant", normalizer: Optional[ShapingNormalizer] = None):
    """Shaping term for ``s -> s_next``.

    ``invariant`` returns ``mu * f(s') - f(s)``; ``normalized`` rescales it to
    ``[0, 1]`` with the normalizer's current window (which is not updated here).
    """
    if mode not in SHAPING_MODES:
        raise ValueError(f"unknown shaping mode {mode!r}")
    raw = raw_shaping(pot, s, s_next)
    if mode == "normalized":
        if normalizer is None:
            raise ValueError("normalized shaping needs a normalizer")
        return normalizer.scale(raw)
    return raw
