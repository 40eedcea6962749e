"""Curriculum-conditioned actor-critic: PPO policy and value heads plus a universal Q.

The Q network sees every curriculum slot at once; individual losses zero the
slots they do not use, so one network serves the per-curriculum Bellman
losses and the combined outer objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .memory import MemoryReadView

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
SLOTS = ("goal", "reward", "init", "abstract")


def mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    last = in_dim
    for h in hidden:
        layers += [nn.Linear(last, h), nn.ReLU()]
        last = h
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


def read_abstract_curriculum(view: MemoryReadView) -> torch.Tensor:
    """The agent's single access to memory: read the abstract curriculum."""
    return view.read()


@dataclass
class CurriculumFeatures:
    """Per-sample curriculum inputs to Q. ``reward`` is the potential value ``f(s)``."""

    goal: torch.Tensor  # (B, d_g)
    reward: torch.Tensor  # (B, 1)
    init: torch.Tensor  # (B, d_init)
    abstract: torch.Tensor  # (B, M)

    def masked(self, active: Sequence[str]) -> "CurriculumFeatures":
        for name in active:
            if name not in SLOTS:
                raise ValueError(f"unknown curriculum slot {name!r}")
        return replace(
            self, **{f.name: (getattr(self, f.name) if f.name in active else torch.zeros_like(getattr(self, f.name))) for f in fields(self)}
        )

    def cat(self) -> torch.Tensor:
        return torch.cat([self.goal, self.reward, self.init, self.abstract], dim=-1)

    def expand(self, n: int) -> "CurriculumFeatures":
        return CurriculumFeatures(*(getattr(self, f.name).unsqueeze(0).expand(n, *getattr(self, f.name).shape) for f in fields(self)))


@dataclass
class CurriculumBundle:
    """What the outer loop hands the inner loop for one episode."""

    c_goal: list = None  # subgoal sequences issued during the episode
    c_init: Optional[torch.Tensor] = None
    potential: object = None  # PotentialFn or None
    c_abs: Optional[torch.Tensor] = None
    params: dict = None  # role -> GeneratedParams (with graph when live)


class PolicyNet(nn.Module):
    """Diagonal Gaussian over actions; tanh mean head, state-independent log-std."""

    def __init__(self, obs_dim: int, goal_dim: int, abs_dim: int, act_dim: int, hidden=(64, 64), log_std_init: float = 0.0):
        super().__init__()
        self.obs_dim, self.goal_dim, self.abs_dim, self.act_dim = obs_dim, goal_dim, abs_dim, act_dim
        self.body = mlp(obs_dim + goal_dim + abs_dim, hidden, act_dim)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init)))

    def forward(self, obs, c_goal, c_abs) -> torch.distributions.Normal:
        mean = torch.tanh(self.body(torch.cat([obs, c_goal, c_abs], dim=-1)))
        std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp().expand_as(mean)
        return torch.distributions.Normal(mean, std)

    def sample_actions(self, obs, c_goal, c_abs, n: int = 1, generator: Optional[torch.Generator] = None):
        """``n`` reparameterised samples per row; returns ``(n, B, d_a)`` actions and ``(n, B)`` log-probs."""
        dist = self(obs, c_goal, c_abs)
        noise = torch.randn((n, *dist.loc.shape), generator=generator, dtype=dist.loc.dtype)
        actions = dist.loc + dist.scale * noise
        return actions, dist.log_prob(actions).sum(-1)


class ValueNet(nn.Module):
    def __init__(self, obs_dim: int, goal_dim: int, abs_dim: int, hidden=(64, 64)):
        super().__init__()
        self.body = mlp(obs_dim + goal_dim + abs_dim, hidden, 1)

    def forward(self, obs, c_goal, c_abs) -> torch.Tensor:
        return self.body(torch.cat([obs, c_goal, c_abs], dim=-1)).squeeze(-1)


class QNet(nn.Module):
    """Universal action value ``Q(s, a, c_goal, c_rew, c_init, c_abs)``."""

    def __init__(self, obs_dim: int, act_dim: int, goal_dim: int, init_dim: int, abs_dim: int, hidden=(64, 64)):
        super().__init__()
        self.body = mlp(obs_dim + act_dim + goal_dim + 1 + init_dim + abs_dim, hidden, 1)

    def forward(self, obs, act, feats: CurriculumFeatures) -> torch.Tensor:
        return self.body(torch.cat([obs, act, feats.cat()], dim=-1)).squeeze(-1)


QFn = Callable[[torch.Tensor, torch.Tensor, CurriculumFeatures], torch.Tensor]
PolicySampler = Callable[[torch.Tensor, CurriculumFeatures, int, Optional[torch.Generator]], tuple]


def policy_sampler(policy: PolicyNet) -> PolicySampler:
    """Adapt a :class:`PolicyNet` to the sampler signature used by the look-ahead."""

    def sample(s, feats: CurriculumFeatures, n, generator):
        return policy.sample_actions(s, feats.goal, feats.abstract, n, generator)

    return sample


def lookahead_target(
    r: torch.Tensor,
    s_next: torch.Tensor,
    done: torch.Tensor,
    feats_next: CurriculumFeatures,
    q_fn: QFn,
    sampler: PolicySampler,
    gamma: float,
    n_samples: int = 4,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """``r + gamma * E_{a'~pi}[Q(s', a') - log pi(a'|s')]``; exactly ``r`` on terminal rows."""
    actions, logp = sampler(s_next, feats_next, n_samples, generator)
    n = actions.shape[0]
    q = q_fn(s_next.unsqueeze(0).expand(n, *s_next.shape), actions, feats_next.expand(n))
    boot = (q - logp).mean(0)
    done = done.to(torch.bool)
    return torch.where(done, r, r + gamma * torch.where(done, torch.zeros_like(boot), boot))


def shaped_lookahead_target(r, shaping, s_next, done, feats_next, q_fn, sampler, gamma, n_samples=4, generator=None):
    """Look-ahead with the shaping term folded into the reward."""
    return lookahead_target(r + shaping, s_next, done, feats_next, q_fn, sampler, gamma, n_samples, generator)


@dataclass
class TensorBatch:
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s_next: torch.Tensor
    done: torch.Tensor

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=torch.float32) -> "TensorBatch":
        t = lambda k: torch.as_tensor(arrays[k], dtype=dtype)
        return cls(t("s"), t("a"), t("r"), t("s_next"), t("done"))

    def __len__(self):
        return self.s.shape[0]


def bellman_loss(
    q_fn: QFn,
    target_q_fn: QFn,
    sampler: PolicySampler,
    batch: TensorBatch,
    feats: CurriculumFeatures,
    feats_next: CurriculumFeatures,
    slots: Sequence[str],
    gamma: float,
    shaping: Optional[torch.Tensor] = None,
    n_samples: int = 4,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Mean squared residual of Q against its look-ahead with only ``slots`` active."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    f, f_next = feats.masked(slots), feats_next.masked(slots)
    r = batch.r if shaping is None else batch.r + shaping
    target = lookahead_target(r, batch.s_next, batch.done, f_next, target_q_fn, sampler, gamma, n_samples, generator)
    return ((q_fn(batch.s, batch.a, f) - target) ** 2).mean()


def curriculum_losses(
    q_fn: QFn,
    target_q_fn: QFn,
    sampler: PolicySampler,
    batch: TensorBatch,
    feats: CurriculumFeatures,
    feats_next: CurriculumFeatures,
    gamma: float,
    shaping: Optional[torch.Tensor] = None,
    n_samples: int = 4,
    generator: Optional[torch.Generator] = None,
) -> dict[str, torch.Tensor]:
    """The four per-curriculum Bellman losses. Only ``J_reward`` uses the shaped target."""
    common = dict(gamma=gamma, n_samples=n_samples, generator=generator)
    args = (q_fn, target_q_fn, sampler, batch, feats, feats_next)
    return {
        "J_goal": bellman_loss(*args, ["goal"], **common),
        "J_init": bellman_loss(*args, ["init"], **common),
        "J_reward": bellman_loss(*args, ["reward"], shaping=shaping, **common),
        "J_abstract": bellman_loss(*args, ["abstract"], **common),
    }


# --- PPO -------------------------------------------------------------------


def clip_advantage(eps: float, adv):
    """``(1 + eps) A`` where ``A >= 0``, else ``(1 - eps) A``."""
    if isinstance(adv, torch.Tensor):
        return torch.where(adv >= 0, (1 + eps) * adv, (1 - eps) * adv)
    return (1 + eps) * adv if adv >= 0 else (1 - eps) * adv


def ppo_clip_objective(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.minimum(ratio * adv, clip_advantage(eps, adv)).mean()


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """GAE over a ``(T, N)`` rollout. ``dones[t]`` marks that step ``t`` ended its episode."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    last = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


@dataclass
class RolloutBatch:
    obs: torch.Tensor
    c_goal: torch.Tensor
    c_abs: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class PPOConfig:
    lr: float = 2.5e-4
    clip: float = 0.3
    n_epochs: int = 10
    minibatch: int = 128
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 10.0


def ppo_update(policy: PolicyNet, value: ValueNet, optimizer, rollout: RolloutBatch, cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """Several epochs of clipped policy ascent and value regression over shuffled minibatches."""
    params = list(policy.parameters()) + list(value.parameters())
    n = len(rollout)
    stats = {"policy_objective": [], "value_loss": [], "skipped": 0}
    for _ in range(cfg.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = torch.as_tensor(order[start : start + cfg.minibatch])
            adv = rollout.advantages[idx]
            if len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            dist = policy(rollout.obs[idx], rollout.c_goal[idx], rollout.c_abs[idx])
            logp = dist.log_prob(rollout.actions[idx]).sum(-1)
            ratio = torch.exp(logp - rollout.log_probs[idx])
            objective = ppo_clip_objective(ratio, adv, cfg.clip)
            v_loss = ((value(rollout.obs[idx], rollout.c_goal[idx], rollout.c_abs[idx]) - rollout.returns[idx]) ** 2).mean()
            entropy = dist.entropy().sum(-1).mean()
            loss = -objective + cfg.vf_coef * v_loss - cfg.ent_coef * entropy
            optimizer.zero_grad()
            loss.backward()
            grads = [p.grad for p in params if p.grad is not None]
            if not all(torch.all(torch.isfinite(g)) for g in grads):
                log.warning("non-finite PPO gradient; minibatch update skipped")
                stats["skipped"] += 1
                optimizer.zero_grad()
                continue
            nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            stats["policy_objective"].append(objective.item())
            stats["value_loss"].append(v_loss.item())
    return {
        "policy_objective": float(np.mean(stats["policy_objective"])) if stats["policy_objective"] else float("nan"),
        "value_loss": float(np.mean(stats["value_loss"])) if stats["value_loss"] else float("nan"),
        "skipped": stats["skipped"],
    }


class RunningMeanStd:
    """Streaming mean and variance (parallel-merge form)."""

    def __init__(self):
        self.mean, self.var, self.count = 0.0, 1.0, 1e-4

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size == 0:
            return
        b_mean, b_var, b_count = x.mean(), x.var(), x.size
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean += delta * b_count / total
        self.var = (self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total) / total
        self.count = total

    def state_dict(self) -> dict:
        return {"mean": self.mean, "var": self.var, "count": self.count}

    def load_state_dict(self, state: dict) -> None:
        self.mean, self.var, self.count = state["mean"], state["var"], state["count"]


def scale_rewards(rewards: np.ndarray, dones: np.ndarray, running: np.ndarray, rms: RunningMeanStd, gamma: float):
    """Divide a ``(T, N)`` reward block by the running std of the discounted return.

    ``running`` holds each env's discounted return so far and is updated in place.
    """
    out = np.empty_like(rewards, dtype=np.float64)
    for t in range(rewards.shape[0]):
        running[:] = running * gamma + rewards[t]
        rms.update(running)
        out[t] = rewards[t] / np.sqrt(rms.var + 1e-8)
        running[dones[t] > 0] = 0.0
    return out


def polyak_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            tp.mul_(1.0 - tau).add_(sp, alpha=tau)
