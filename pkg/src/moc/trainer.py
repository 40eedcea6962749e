"""Bilevel training loop.

Each outer episode the hyper-network generates the curriculum Base-RNNs and
writes the memory once; the agent then trains on the resulting curricula with
PPO while the universal critic is fitted on the curriculum losses. At the end
of the episode the hyper-network parameters take one SGD step on the outer
loss, differentiated through the last ``unroll_K`` critic updates.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from . import memory as memlib
from .agent import (
    SLOTS,
    CurriculumFeatures,
    PolicyNet,
    PPOConfig,
    QNet,
    RolloutBatch,
    RunningMeanStd,
    TensorBatch,
    ValueNet,
    bellman_loss,
    compute_gae,
    curriculum_losses,
    policy_sampler,
    polyak_update,
    ppo_update,
    read_abstract_curriculum,
    scale_rewards,
)
from .config import ExperimentConfig
from .core import ReplayBuffer, Transition, derive_seeds, stack_batch
from .curricula import (
    BaseRNN,
    PotentialFn,
    ShapingNormalizer,
    gen_init_state,
    subgoals_from_contexts,
)
from .envs import (
    GOAL_DIM,
    INIT_DIM,
    OBS_DIM,
    EnvSpec,
    env_reset,
    env_step,
    fixed_init,
    init_from_positions,
    sample_goal,
)
from .hypernet import CURRICULUM_ROLES, BaseRNNLayout, HyperInput, HyperRNN, HyperState, IndependentBaseParams
from .memory import MemoryMatrix, MemoryReadView

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = (
    "episode",
    "env_steps",
    "mean_episode_reward",
    "fractional_success",
    "J_goal",
    "J_init",
    "J_reward",
    "J_abstract",
    "J_outer",
    "hypergrad_norm",
)


@dataclass(frozen=True)
class VariantSpec:
    """Which curriculum pieces a variant runs.

    ``init_source`` is ``curriculum``, ``random`` (uniform per outer episode),
    ``fixed`` or ``task`` (the env samples a start on every reset).
    ``goal_source`` is ``curriculum``, ``random`` (uniform subgoal per segment)
    or ``none``.
    """

    name: str
    roles: tuple[str, ...] = CURRICULUM_ROLES
    memory: bool = True
    hyper: bool = True
    init_source: str = "curriculum"
    goal_source: str = "curriculum"
    outer: bool = True
    loss_form: Optional[str] = None  # overrides the configured outer loss form


VARIANTS: dict[str, VariantSpec] = {
    v.name: v
    for v in (
        VariantSpec("moc"),
        VariantSpec("moc_base_minus", roles=(), init_source="task", goal_source="none"),
        VariantSpec("moc_memory_minus", memory=False),
        VariantSpec("moc_memory_minus_hyper_minus", memory=False, hyper=False, loss_form="sum"),
        VariantSpec("moc_memory_minus_goal_plus", roles=("subgoal",), memory=False, init_source="task"),
        VariantSpec("moc_rand_init_state", roles=("subgoal", "reward"), init_source="random"),
        VariantSpec("moc_fix_init_state", roles=("subgoal", "reward"), init_source="fixed"),
        VariantSpec("moc_rand_goal_state", roles=("init", "reward"), goal_source="random"),
        VariantSpec("ppo", roles=(), memory=False, hyper=False, init_source="task", goal_source="none", outer=False),
    )
}


@dataclass(frozen=True)
class BilevelConfig:
    T_outer: int
    T_inner: int
    unroll_K: int = 1
    outer_lr: float = 1e-3
    first_order: bool = False
    pretrain_episodes: int = 0
    inner_updates: int = 8

    def __post_init__(self):
        if not 1 <= self.unroll_K <= max(self.inner_updates, 1):
            raise ValueError("unroll_K must lie in [1, inner updates per episode]")
        if self.T_outer < 0 or self.T_inner < 0 or self.pretrain_episodes < 0:
            raise ValueError("loop bounds must be non-negative")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "BilevelConfig":
        return cls(cfg.outer_episodes, cfg.steps_per_episode, cfg.unroll_K, cfg.outer_lr, cfg.first_order,
                   cfg.pretrain_episodes, cfg.critic_updates)


# --- functional inner optimisers --------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def detach(self) -> "AdamState":
        return AdamState(self.step, {k: t.detach() for k, t in self.m.items()}, {k: t.detach() for k, t in self.v.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update written with differentiable tensor ops.

    A tiny constant under the square root keeps the second derivative finite
    for coordinates whose gradient has always been zero.
    """
    b1, b2 = betas
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = p - lr * m_hat / (torch.sqrt(v_hat + 1e-16) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(step, m_new, v_new)


def sgd_step(params: dict, grads: dict, state: AdamState, lr: float):
    return {k: p - lr * grads[k] for k, p in params.items()}, AdamState(state.step + 1)


# --- curricula ---------------------------------------------------------------


@dataclass
class Curricula:
    """Curricula of one outer episode; tensors keep their graph to the generator when live."""

    params: dict
    c_init: Optional[torch.Tensor]
    potential: Optional[PotentialFn]
    c_abs: Optional[torch.Tensor]
    memory: Optional[MemoryMatrix]
    hyper_state: Optional[HyperState]

    def detached(self) -> "Curricula":
        params = {r: p.detach() for r, p in self.params.items()}
        pot = PotentialFn.from_params(params["reward"], self.potential.mu) if self.potential is not None else None
        return Curricula(
            params,
            None if self.c_init is None else self.c_init.detach(),
            pot,
            None if self.c_abs is None else self.c_abs.detach(),
            None if self.memory is None else self.memory.detach(),
            None if self.hyper_state is None else self.hyper_state.detach(),
        )


def generate_curricula(
    generator: nn.Module,
    variant: VariantSpec,
    hyper_state: Optional[HyperState],
    memory: Optional[MemoryMatrix],
    final_obs: torch.Tensor,
    half_width: float,
    mu: float,
    init_override: Optional[torch.Tensor] = None,
) -> Curricula:
    """Step the hyper-network once per role, then write the memory once."""
    params = {}
    state = hyper_state
    if variant.hyper:
        for role in variant.roles:
            state, z = generator.step(state, HyperInput(final_obs, role))
            params[role] = generator.generate_weights(z, role)
        if variant.memory:
            state, _ = generator.step(state, HyperInput(final_obs, "memory"))
            m_e, m_a = generator.emit_memory_vectors(state)
            memory = memlib.hyper_write(memory, m_e, m_a)
    elif generator is not None:
        params = {role: generator.generate_weights(role) for role in variant.roles}

    if variant.init_source == "curriculum":
        c_init = gen_init_state(BaseRNN(params["init"], "init"), final_obs, half_width)
    else:
        c_init = init_override
    potential = PotentialFn.from_params(params["reward"], mu) if "reward" in params else None
    c_abs = read_abstract_curriculum(MemoryReadView(memory)) if variant.memory else None
    return Curricula(params, c_init, potential, c_abs, memory if variant.memory else None, state)


def batch_features(cur: Curricula, variant: VariantSpec, arrays: dict, half_width: float, live: bool, dtype):
    """Q features for a batch of transitions.

    With ``live`` the goal, init and abstract slots are recomputed from
    ``cur`` (so they carry its graph); otherwise the values stored with each
    transition are used. The potential slot always uses ``cur``.
    """
    t = lambda k: torch.as_tensor(arrays[k], dtype=dtype)
    s, s_next = t("s"), t("s_next")
    n = s.shape[0]
    if live and variant.goal_source == "curriculum":
        goal = subgoals_from_contexts(cur.params["subgoal"], t("goal_ctx"), torch.as_tensor(arrays["segment"]), half_width)
    else:
        goal = t("goal")
    if live and variant.init_source == "curriculum":
        init = cur.c_init.unsqueeze(0).expand(n, -1)
    else:
        init = t("c_init")
    if live and variant.memory:
        abstract = cur.c_abs.unsqueeze(0).expand(n, -1)
    else:
        abstract = t("c_abs")
    if cur.potential is not None:
        f_s, f_next = cur.potential(s).unsqueeze(-1), cur.potential(s_next).unsqueeze(-1)
    else:
        f_s = f_next = torch.zeros(n, 1, dtype=dtype)
    return CurriculumFeatures(goal, f_s, init, abstract), CurriculumFeatures(goal, f_next, init, abstract)


def shaping_term(cur: Curricula, arrays: dict, mode: str, bounds: Optional[tuple], dtype) -> torch.Tensor:
    """Shaping for a batch; normalized mode uses frozen ``(low, high)`` bounds."""
    n = len(arrays["r"])
    if cur.potential is None:
        return torch.zeros(n, dtype=dtype)
    s = torch.as_tensor(arrays["s"], dtype=dtype)
    s_next = torch.as_tensor(arrays["s_next"], dtype=dtype)
    raw = cur.potential.mu * cur.potential(s_next) - cur.potential(s)
    if mode == "invariant":
        return raw
    low, high = bounds
    if high - low <= 1e-12:
        return raw * 0.0
    return ((raw - low) / (high - low)).clamp(0.0, 1.0)


# --- outer objective -----------------------------------------------------------


@dataclass
class OuterLoss:
    sum: torch.Tensor
    combined: torch.Tensor
    components: dict

    def select(self, form: str) -> torch.Tensor:
        return self.combined if form == "combined" else self.sum


def outer_loss(q_fn, target_q_fn, sampler, batch: TensorBatch, feats, feats_next, gamma, shaping, n_samples, noise_seed) -> OuterLoss:
    """Both forms of the outer objective.

    The sum form adds the four per-curriculum losses; the combined form is one
    Bellman residual with every curriculum slot active and the shaped target.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    gen = lambda: torch.Generator().manual_seed(int(noise_seed))
    comps = {}
    for name, slots, shp in (("J_goal", ["goal"], None), ("J_init", ["init"], None),
                             ("J_reward", ["reward"], shaping), ("J_abstract", ["abstract"], None)):
        comps[name] = bellman_loss(q_fn, target_q_fn, sampler, batch, feats, feats_next, slots, gamma, shp, n_samples, gen())
    combined = bellman_loss(q_fn, target_q_fn, sampler, batch, feats, feats_next, SLOTS, gamma, shaping, n_samples, gen())
    return OuterLoss(sum(comps.values()), combined, comps)


def objective(form, q_fn, target_q_fn, sampler, batch, feats, feats_next, gamma, shaping, n_samples, noise_seed) -> torch.Tensor:
    """Only the selected form; cheaper than :func:`outer_loss` inside the inner trace."""
    gen = torch.Generator().manual_seed(int(noise_seed))
    if form == "combined":
        return bellman_loss(q_fn, target_q_fn, sampler, batch, feats, feats_next, SLOTS, gamma, shaping, n_samples, gen)
    losses = curriculum_losses(q_fn, target_q_fn, sampler, batch, feats, feats_next, gamma, shaping, n_samples, gen)
    return sum(losses.values())


def hypergradient_step(theta: list, j_outer: torch.Tensor, lr: float, max_norm: Optional[float] = None):
    """``theta <- theta - lr * dJ/dtheta``.

    Returns ``(grad_norm, applied)``. A non-finite gradient leaves ``theta``
    untouched and reports ``applied=False``.
    """
    grads = torch.autograd.grad(j_outer, theta, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(theta, grads)]
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if not math.isfinite(norm):
        return norm, False
    scale = 1.0
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
    with torch.no_grad():
        for p, g in zip(theta, grads):
            p.sub_(lr * scale * g)
    return norm, True


@dataclass
class OuterProblem:
    """Everything needed to evaluate the outer loss as a function of the generator parameters.

    ``loss`` replays the deferred critic updates on ``inner_batches`` starting
    from ``phi0`` and evaluates the outer objective on ``outer_batch``.
    """

    generator: nn.Module
    variant: VariantSpec
    qnet: QNet
    q_target: QNet
    policy: PolicyNet
    phi0: dict
    opt_state0: AdamState
    inner_batches: list
    outer_batch: dict
    noise_seed: int
    bounds: Optional[tuple]
    hyper_state: Optional[HyperState]
    memory: Optional[MemoryMatrix]
    final_obs: torch.Tensor
    init_override: Optional[torch.Tensor]
    cfg: ExperimentConfig
    dtype: torch.dtype

    def regenerate(self) -> Curricula:
        return generate_curricula(self.generator, self.variant, self.hyper_state, self.memory, self.final_obs,
                                  self.cfg.arena_half_width, self.cfg.mu, self.init_override)

    def form(self) -> str:
        return self.variant.loss_form or self.cfg.outer_loss

    def _pieces(self, cur: Curricula, arrays: dict):
        feats, feats_next = batch_features(cur, self.variant, arrays, self.cfg.arena_half_width, True, self.dtype)
        shaping = shaping_term(cur, arrays, self.cfg.shaping_mode, self.bounds, self.dtype)
        return TensorBatch.from_arrays(arrays, self.dtype), feats, feats_next, shaping

    def unroll(self, cur: Curricula, first_order: Optional[bool] = None):
        """Differentiable critic updates; returns the final critic parameters and optimiser state."""
        first_order = self.cfg.first_order if first_order is None else first_order
        cfg = self.cfg
        phi = {k: v.detach().clone().requires_grad_(True) for k, v in self.phi0.items()}
        state = self.opt_state0
        sampler = policy_sampler(self.policy)
        for k, arrays in enumerate(self.inner_batches):
            batch, feats, feats_next, shaping = self._pieces(cur, arrays)
            q_fn = lambda s, a, f, _phi=phi: functional_call(self.qnet, _phi, (s, a, f))
            loss = objective(self.form(), q_fn, self.q_target, sampler, batch, feats, feats_next, cfg.gamma, shaping,
                             cfg.n_target, self.noise_seed + 1 + k)
            names = list(phi)
            grads = torch.autograd.grad(loss, [phi[n] for n in names], create_graph=not first_order, allow_unused=True)
            grads = {n: torch.zeros_like(phi[n]) if g is None else g for n, g in zip(names, grads)}
            if first_order:
                grads = {n: g.detach() for n, g in grads.items()}
            if not all(torch.all(torch.isfinite(g)) for g in grads.values()):
                log.warning("non-finite critic gradient in the unrolled update; step skipped")
                continue
            if cfg.inner_optimizer == "adam":
                phi, state = adam_step(phi, grads, state, cfg.critic_lr)
            else:
                phi, state = sgd_step(phi, grads, state, cfg.critic_lr)
        return phi, state

    def loss(self, cur: Optional[Curricula] = None, first_order: Optional[bool] = None):
        """Outer loss after the unrolled updates; regenerates the curricula when ``cur`` is None."""
        if cur is None:
            cur = self.regenerate()
        phi, state = self.unroll(cur, first_order)
        batch, feats, feats_next, shaping = self._pieces(cur, self.outer_batch)
        q_fn = lambda s, a, f: functional_call(self.qnet, phi, (s, a, f))
        out = outer_loss(q_fn, self.q_target, policy_sampler(self.policy), batch, feats, feats_next, self.cfg.gamma,
                         shaping, self.cfg.n_target, self.noise_seed)
        return out, phi, state


# --- rollout -----------------------------------------------------------------


@dataclass
class EpisodeResult:
    record: dict
    positions: np.ndarray  # (n, 2) agent positions after each step
    step_start: int  # env-step counter before the episode
    curricula: dict  # JSON-ready summary
    trajectories: Optional[list] = None


class Trainer:
    """Owns the agent, the curriculum generator, the memory and the buffer for one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        self.cfg = cfg
        self.seed = int(seed)
        self.variant = VARIANTS[cfg.variant]
        self.bilevel = BilevelConfig.from_config(cfg)
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.spec = EnvSpec(cfg.task, cfg.arena_half_width, cfg.max_steps)
        self.seeds = derive_seeds(self.seed)
        v = self.variant

        bh = cfg.base_hidden
        all_layouts = {
            "subgoal": BaseRNNLayout(bh, OBS_DIM, GOAL_DIM),
            "init": BaseRNNLayout(bh, OBS_DIM, INIT_DIM),
            "reward": BaseRNNLayout(bh, OBS_DIM, 1),
        }
        layouts = {r: all_layouts[r] for r in v.roles}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seeds["hypernet_init"])
            if v.hyper:
                self.generator = HyperRNN(OBS_DIM, layouts, cfg.hyper_hidden, cfg.hyper_z, cfg.mem_cols, cfg.hyper_cell,
                                          cfg.hyper_init_scale)
            elif v.roles:
                self.generator = IndependentBaseParams(layouts)
            else:
                self.generator = None
        if self.generator is not None:
            self.generator.to(self.dtype)

        abs_dim = cfg.mem_cols
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seeds["agent_init"])
            self.policy = PolicyNet(OBS_DIM, GOAL_DIM, abs_dim, 2, cfg.policy_hidden, cfg.log_std_init).to(self.dtype)
            self.value = ValueNet(OBS_DIM, GOAL_DIM, abs_dim, cfg.policy_hidden).to(self.dtype)
            self.qnet = QNet(OBS_DIM, 2, GOAL_DIM, INIT_DIM, abs_dim, cfg.q_hidden).to(self.dtype)
        self.q_target = copy.deepcopy(self.qnet)
        self.q_target.requires_grad_(False)
        self.ppo_cfg = PPOConfig(cfg.lr, cfg.clip, cfg.n_epochs, cfg.minibatch, cfg.vf_coef, cfg.ent_coef, cfg.max_grad_norm)
        self.ppo_opt = torch.optim.Adam(list(self.policy.parameters()) + list(self.value.parameters()), lr=cfg.lr, eps=1e-5)
        self.phi = {k: p.detach().clone() for k, p in self.qnet.named_parameters()}
        self.critic_state = AdamState()

        self.buffer = ReplayBuffer(cfg.buffer_size)
        self.normalizer = ShapingNormalizer(cfg.shaping_window)
        self.return_rms = RunningMeanStd()
        self.env_rng = np.random.default_rng(self.seeds["env"])
        self.sampler_rng = np.random.default_rng(self.seeds["sampler"])
        self.target_rng = np.random.default_rng(self.seeds["target_noise"])
        self.action_gen = torch.Generator().manual_seed(self.seeds["action_noise"])
        mem_gen = torch.Generator().manual_seed(self.seeds["memory_init"])
        self.memory = MemoryMatrix.init(cfg.mem_rows, cfg.mem_cols, mem_gen, self.dtype) if v.memory else None
        self.hyper_state = self.generator.initial_state() if v.hyper else None
        self.final_obs = torch.zeros(OBS_DIM, dtype=self.dtype)
        self.outer_lr = cfg.outer_lr
        self.episode = 0
        self.env_steps = 0
        self.last_problem: Optional[OuterProblem] = None
        self.last_curricula: Optional[Curricula] = None

    # -- helpers --

    @property
    def theta(self) -> list:
        return [] if self.generator is None else list(self.generator.parameters())

    def _init_override(self) -> Optional[torch.Tensor]:
        src = self.variant.init_source
        w = self.cfg.arena_half_width
        if src == "random":
            return torch.as_tensor(self.env_rng.uniform(-w, w, size=INIT_DIM), dtype=self.dtype)
        if src == "fixed":
            full = fixed_init(self.spec)
            return torch.as_tensor(np.concatenate([full[:2], full[4:6]]), dtype=self.dtype)
        return None

    def generate(self, init_override=None) -> Curricula:
        if not self.variant.outer:
            return Curricula({}, None, None, None, None, None)
        if self.cfg.reset_hyper_state and self.variant.hyper:
            self.hyper_state = self.generator.initial_state()
        return generate_curricula(self.generator, self.variant, self.hyper_state, self.memory, self.final_obs,
                                  self.cfg.arena_half_width, self.cfg.mu, init_override)

    def _subgoal(self, cur: Curricula, contexts: list) -> np.ndarray:
        ctx = torch.as_tensor(np.stack(contexts), dtype=self.dtype).unsqueeze(0)
        seg = torch.tensor([len(contexts) - 1])
        with torch.no_grad():
            g = subgoals_from_contexts(cur.params["subgoal"], ctx, seg, self.cfg.arena_half_width)
        return g[0].numpy().astype(np.float64)

    # -- collection --

    def collect(self, cur: Curricula, n_steps: int):
        """Run the envs for ``n_steps`` total transitions under the detached curricula ``cur``."""
        cfg, spec, v = self.cfg, self.spec, self.variant
        n_envs = cfg.n_envs
        T = -(-n_steps // n_envs) if n_steps > 0 else 0
        S = cfg.n_subgoals
        seg_len = -(-spec.max_steps // S)
        w = cfg.arena_half_width
        c_abs_np = cur.c_abs.numpy().astype(np.float64) if cur.c_abs is not None else np.zeros(cfg.mem_cols)
        c_init_np = cur.c_init.numpy().astype(np.float64) if cur.c_init is not None else np.zeros(INIT_DIM)
        init_full = init_from_positions(c_init_np, spec) if v.init_source != "task" else None
        goals = [sample_goal(spec, self.env_rng) for _ in range(n_envs)]

        states, obs = [None] * n_envs, np.zeros((n_envs, OBS_DIM))
        contexts = [[] for _ in range(n_envs)]
        subgoal = np.zeros((n_envs, GOAL_DIM))
        ep_return = np.zeros(n_envs)
        ep_len = np.zeros(n_envs, dtype=int)
        last_fs = np.zeros(n_envs)
        finished: list[tuple[float, float]] = []

        def reset(i):
            goal = goals[i] if cfg.goal_resample == "outer" else sample_goal(spec, self.env_rng)
            states[i], obs[i] = env_reset(spec, init_full, goal, rng=self.env_rng)
            contexts[i] = []
            ep_return[i] = 0.0
            ep_len[i] = 0

        for i in range(n_envs):
            reset(i)

        shape = (T, n_envs)
        buf = {
            "obs": np.zeros(shape + (OBS_DIM,)), "next_obs": np.zeros(shape + (OBS_DIM,)),
            "actions": np.zeros(shape + (2,)), "log_probs": np.zeros(shape), "rewards": np.zeros(shape),
            "dones": np.zeros(shape), "values": np.zeros(shape), "c_goal": np.zeros(shape + (GOAL_DIM,)),
            "goal_ctx": np.zeros(shape + (S, OBS_DIM)), "segment": np.zeros(shape, dtype=np.int64),
            "fs": np.zeros(shape), "pos": np.zeros(shape + (2,)), "end_values": np.zeros(shape),
        }
        c_abs_t = torch.as_tensor(c_abs_np, dtype=self.dtype).expand(n_envs, -1)
        for t in range(T):
            for i in range(n_envs):
                k = states[i].step_count
                if k % seg_len == 0 and k // seg_len < S:
                    if v.goal_source == "curriculum":
                        ctx = obs[i] if (cfg.subgoal_mode == "closed" or not contexts[i]) else contexts[i][0]
                        contexts[i].append(np.array(ctx))
                        subgoal[i] = self._subgoal(cur, contexts[i])
                    elif v.goal_source == "random":
                        subgoal[i] = self.env_rng.uniform(-w, w, size=GOAL_DIM)
                buf["segment"][t, i] = min(k // seg_len, S - 1)
                if contexts[i]:
                    buf["goal_ctx"][t, i, : len(contexts[i])] = np.stack(contexts[i])
            obs_t = torch.as_tensor(obs, dtype=self.dtype)
            cg_t = torch.as_tensor(subgoal, dtype=self.dtype)
            with torch.no_grad():
                dist = self.policy(obs_t, cg_t, c_abs_t)
                value = self.value(obs_t, cg_t, c_abs_t)
                noise = torch.randn(dist.loc.shape, generator=self.action_gen, dtype=self.dtype)
                action = dist.loc + dist.scale * noise
                logp = dist.log_prob(action).sum(-1)
            buf["obs"][t], buf["c_goal"][t] = obs, subgoal
            buf["actions"][t], buf["log_probs"][t], buf["values"][t] = action.numpy(), logp.numpy(), value.numpy()
            for i in range(n_envs):
                states[i], nxt, r, done, info = env_step(states[i], buf["actions"][t, i])
                buf["next_obs"][t, i], buf["rewards"][t, i], buf["dones"][t, i] = nxt, r, float(done)
                buf["fs"][t, i], buf["pos"][t, i] = info["fractional_success"], states[i].agent_pos
                ep_return[i] += r
                ep_len[i] += 1
                last_fs[i] = info["fractional_success"]
                obs[i] = nxt
            ended = np.nonzero(buf["dones"][t])[0]
            if len(ended):
                with torch.no_grad():
                    buf["end_values"][t, ended] = self.value(torch.as_tensor(obs[ended], dtype=self.dtype),
                                                             cg_t[ended], c_abs_t[ended]).numpy()
            for i in ended:
                finished.append((ep_return[i], last_fs[i]))
                reset(i)
        # episodes cut by the end of the rollout also count: every env restarts next outer episode
        for i in range(n_envs):
            if ep_len[i] > 0:
                finished.append((ep_return[i], last_fs[i]))
        with torch.no_grad():
            last_values = self.value(torch.as_tensor(obs, dtype=self.dtype), torch.as_tensor(subgoal, dtype=self.dtype),
                                     c_abs_t).numpy()
        buf["last_values"] = last_values
        buf["c_abs"] = c_abs_np
        buf["c_init"] = c_init_np
        buf["final_obs"] = obs[0].copy()
        buf["finished"] = finished
        return buf

    # -- updates --

    def _shape(self, cur: Curricula, buf: dict) -> np.ndarray:
        flat_s = buf["obs"].reshape(-1, OBS_DIM)
        flat_n = buf["next_obs"].reshape(-1, OBS_DIM)
        if cur.potential is None or flat_s.shape[0] == 0:
            return np.zeros(buf["rewards"].shape)
        with torch.no_grad():
            raw = (cur.potential.mu * cur.potential(torch.as_tensor(flat_n, dtype=self.dtype))
                   - cur.potential(torch.as_tensor(flat_s, dtype=self.dtype))).numpy().astype(np.float64)
        if self.cfg.shaping_mode == "normalized":
            raw = self.normalizer.update(raw)
        return raw.reshape(buf["rewards"].shape)

    def _transitions(self, buf: dict, shaped: np.ndarray) -> list[Transition]:
        T, n = buf["rewards"].shape
        out = []
        for t in range(T):
            for i in range(n):
                out.append(Transition(
                    s=buf["obs"][t, i], a=buf["actions"][t, i], r=float(buf["rewards"][t, i]),
                    s_next=buf["next_obs"][t, i], done=bool(buf["dones"][t, i]), goal=buf["c_goal"][t, i],
                    c_abs=buf["c_abs"], log_prob=float(buf["log_probs"][t, i]),
                    shaped_r=float(buf["rewards"][t, i] + shaped[t, i]), c_init=buf["c_init"],
                    goal_ctx=buf["goal_ctx"][t, i], segment=int(buf["segment"][t, i]), episode=self.episode,
                ))
        return out

    def _ppo(self, cur: Curricula, buf: dict, shaped: np.ndarray) -> dict:
        rewards = buf["rewards"] + shaped
        if self.cfg.reward_scaling:
            rewards = scale_rewards(rewards, buf["dones"], np.zeros(rewards.shape[1]), self.return_rms, self.cfg.gamma)
        if self.cfg.bootstrap_episode_end:
            rewards = rewards + self.cfg.gamma * buf["end_values"] * buf["dones"]
        adv, returns = compute_gae(rewards, buf["values"], buf["dones"], buf["last_values"], self.cfg.gamma,
                                   self.cfg.gae_lambda)
        flat = lambda x, *rest: torch.as_tensor(x.reshape(-1, *rest), dtype=self.dtype)
        obs, c_goal = flat(buf["obs"], OBS_DIM), flat(buf["c_goal"], GOAL_DIM)
        c_abs = torch.as_tensor(buf["c_abs"], dtype=self.dtype).expand(obs.shape[0], -1)
        advantages = flat(adv)
        if self.cfg.advantage == "critic" and self.variant.outer:
            arrays = {"s": buf["obs"].reshape(-1, OBS_DIM), "s_next": buf["next_obs"].reshape(-1, OBS_DIM),
                      "goal": buf["c_goal"].reshape(-1, GOAL_DIM), "c_init": np.broadcast_to(buf["c_init"], (obs.shape[0], INIT_DIM)),
                      "c_abs": np.broadcast_to(buf["c_abs"], (obs.shape[0], self.cfg.mem_cols)), "r": buf["rewards"].reshape(-1)}
            with torch.no_grad():
                feats, _ = batch_features(cur, self.variant, arrays, self.cfg.arena_half_width, False, self.dtype)
                q = self.qnet(obs, flat(buf["actions"], 2), feats)
                advantages = q - self.value(obs, c_goal, c_abs)
        rollout = RolloutBatch(obs, c_goal, c_abs, flat(buf["actions"], 2), flat(buf["log_probs"]), advantages, flat(returns))
        return ppo_update(self.policy, self.value, self.ppo_opt, rollout, self.ppo_cfg, self.sampler_rng)

    def _critic_step(self, cur: Curricula, arrays: dict, noise_seed: int) -> None:
        """One plain (non-differentiated) critic update on stored features."""
        cfg = self.cfg
        feats, feats_next = batch_features(cur, self.variant, arrays, cfg.arena_half_width, False, self.dtype)
        bounds = (self.normalizer.low, self.normalizer.high)
        shaping = shaping_term(cur, arrays, cfg.shaping_mode, bounds, self.dtype)
        phi = {k: v.detach().requires_grad_(True) for k, v in self.phi.items()}
        q_fn = lambda s, a, f: functional_call(self.qnet, phi, (s, a, f))
        loss = objective(self.variant.loss_form or cfg.outer_loss, q_fn, self.q_target, policy_sampler(self.policy),
                         TensorBatch.from_arrays(arrays, self.dtype), feats, feats_next, cfg.gamma, shaping,
                         cfg.n_target, noise_seed)
        names = list(phi)
        grads = torch.autograd.grad(loss, [phi[n] for n in names], allow_unused=True)
        grads = {n: torch.zeros_like(phi[n]) if g is None else g for n, g in zip(names, grads)}
        if not all(torch.all(torch.isfinite(g)) for g in grads.values()):
            log.warning("non-finite critic gradient; update skipped")
            return
        step = adam_step if cfg.inner_optimizer == "adam" else sgd_step
        new, state = step(phi, grads, self.critic_state, cfg.critic_lr)
        self.phi = {k: v.detach() for k, v in new.items()}
        self.critic_state = state.detach()

    def _load_phi(self) -> None:
        with torch.no_grad():
            for name, p in self.qnet.named_parameters():
                p.copy_(self.phi[name])

    def _outer(self, cur_live: Curricula, cur: Curricula, n_new: int, init_override) -> dict:
        """Critic updates, then one hypergradient step. Returns the loss columns of the metrics row."""
        cfg = self.cfg
        nan = float("nan")
        row = {"J_goal": nan, "J_init": nan, "J_reward": nan, "J_abstract": nan, "J_outer": nan, "hypergrad_norm": nan}
        if len(self.buffer) == 0 or n_new == 0:
            return row
        deferred = cfg.unroll_K
        for _ in range(cfg.critic_updates - deferred):
            idx = self.buffer.sample_indices(cfg.outer_batch, int(self.sampler_rng.integers(2**31)))
            self._critic_step(cur, stack_batch([self.buffer[int(i)] for i in idx]), int(self.target_rng.integers(2**31)))

        recent = self.buffer.recent(n_new)
        pick = lambda: stack_batch([recent[int(i)] for i in self.sampler_rng.integers(0, len(recent), cfg.outer_batch)])
        inner_batches = [pick() for _ in range(deferred)]
        outer_batch = pick()
        problem = OuterProblem(
            self.generator, self.variant, self.qnet, self.q_target, copy.deepcopy(self.policy),
            {k: v.clone() for k, v in self.phi.items()}, self.critic_state, inner_batches, outer_batch,
            int(self.target_rng.integers(2**31)), (self.normalizer.low, self.normalizer.high),
            None if self.hyper_state is None else self.hyper_state.detach(),
            None if self.memory is None else self.memory.detach(), self.final_obs.clone(), init_override, cfg, self.dtype,
        )
        self.last_problem = problem
        out, phi, state = problem.loss(cur_live)
        j = out.select(problem.form())
        norm, applied = hypergradient_step(self.theta, j, self.outer_lr, cfg.outer_max_grad_norm)
        if not applied:
            log.warning("non-finite hypergradient at episode %d; update skipped, outer_lr halved", self.episode)
            self.outer_lr *= 0.5
        self.phi = {k: v.detach() for k, v in phi.items()}
        self.critic_state = state.detach()
        row.update({k: v.item() for k, v in out.components.items()})
        row["J_outer"] = j.item()
        row["hypergrad_norm"] = norm
        return row

    # -- episode --

    def outer_episode(self) -> EpisodeResult:
        cfg = self.cfg
        init_override = self._init_override()
        cur_live = self.generate(init_override)
        cur = cur_live.detached()
        self.last_curricula = cur
        n_steps = self.bilevel.T_inner
        buf = self.collect(cur, n_steps)
        shaped = self._shape(cur, buf)
        n_new = buf["rewards"].size
        step_start = self.env_steps
        self.env_steps += n_new

        if not cfg.buffer_persist:
            self.buffer.clear()
        if n_new:
            self.buffer.extend(self._transitions(buf, shaped))
            self._ppo(cur, buf, shaped)

        row = {"J_goal": float("nan"), "J_init": float("nan"), "J_reward": float("nan"), "J_abstract": float("nan"),
               "J_outer": float("nan"), "hypergrad_norm": float("nan")}
        if self.variant.outer:
            row = self._outer(cur_live, cur, n_new, init_override)
            self._load_phi()
            polyak_update(self.q_target, self.qnet, cfg.tau)

        if cur.memory is not None:
            self.memory = cur.memory
        if cur.hyper_state is not None:
            self.hyper_state = cur.hyper_state
        if n_new:
            self.final_obs = torch.as_tensor(buf["final_obs"], dtype=self.dtype)

        finished = buf["finished"]
        record = {
            "episode": self.episode,
            "env_steps": self.env_steps,
            "mean_episode_reward": float(np.mean([f[0] for f in finished])) if finished else float("nan"),
            "fractional_success": float(np.mean([f[1] for f in finished])) if finished else float("nan"),
            **row,
        }
        summary = {
            "episode": self.episode,
            "c_init": None if cur.c_init is None else cur.c_init.tolist(),
            "c_abs": None if cur.c_abs is None else cur.c_abs.tolist(),
            "subgoals_env0": _first_episode_subgoals(buf),
            "shaping_mean": float(shaped.mean()) if shaped.size else None,
        }
        traj = None
        if cfg.dump_trajectories and n_new:
            traj = [
                {"episode": self.episode, "env": i, "t": t, "s": buf["obs"][t, i], "a": buf["actions"][t, i],
                 "r": float(buf["rewards"][t, i]), "s_next": buf["next_obs"][t, i], "done": bool(buf["dones"][t, i])}
                for t in range(buf["rewards"].shape[0]) for i in range(buf["rewards"].shape[1])
            ]
        self.episode += 1
        return EpisodeResult(record, buf["pos"].reshape(-1, 2), step_start, summary, traj)

    def run(self, episodes: Optional[int] = None) -> Iterator[EpisodeResult]:
        for _ in range(self.bilevel.T_outer if episodes is None else episodes):
            yield self.outer_episode()

    # -- persistence --

    def manifest(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "variant": self.variant.name,
            "task": self.cfg.task,
            "obs_dim": OBS_DIM,
            "goal_dim": GOAL_DIM,
            "init_dim": INIT_DIM,
            "mem": None if self.memory is None else [self.memory.rows, self.memory.cols],
            "generator": self.generator.manifest() if isinstance(self.generator, HyperRNN) else
            (None if self.generator is None else {r: [l.n_hidden, l.n_input, l.out_dim] for r, l in sorted(self.generator.layouts.items())}),
            "policy_hidden": list(self.cfg.policy_hidden),
            "q_hidden": list(self.cfg.q_hidden),
            "dtype": self.cfg.dtype,
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        state = {
            "episode": self.episode,
            "env_steps": self.env_steps,
            "outer_lr": self.outer_lr,
            "generator": None if self.generator is None else self.generator.state_dict(),
            "policy": self.policy.state_dict(),
            "value": self.value.state_dict(),
            "qnet": self.qnet.state_dict(),
            "q_target": self.q_target.state_dict(),
            "ppo_opt": self.ppo_opt.state_dict(),
            "critic_state": {"step": self.critic_state.step, "m": self.critic_state.m, "v": self.critic_state.v},
            "memory": None if self.memory is None else {"matrix": self.memory.matrix, "m_a_prev": self.memory.m_a_prev},
            "hyper_state": None if self.hyper_state is None else {"h": self.hyper_state.h, "c": self.hyper_state.c},
            "final_obs": self.final_obs,
            "normalizer": self.normalizer.state_dict(),
            "return_rms": self.return_rms.state_dict(),
        }
        torch.save(state, path / "state.pt")
        return path

    def _check_manifest(self, path: Path, keys) -> dict:
        found = json.loads((path / "manifest.json").read_text())
        mine = self.manifest()
        if found.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {found.get('version')} is not {CHECKPOINT_VERSION}")
        for key in keys:
            if found.get(key) != mine.get(key):
                raise ValueError(f"checkpoint {key} mismatch: {found.get(key)!r} != {mine.get(key)!r}")
        return found

    def load_checkpoint(self, path) -> None:
        path = Path(path)
        self._check_manifest(path, ("variant", "obs_dim", "goal_dim", "init_dim", "mem", "generator", "policy_hidden", "q_hidden", "dtype"))
        state = torch.load(path / "state.pt", weights_only=False)
        self.episode, self.env_steps, self.outer_lr = state["episode"], state["env_steps"], state["outer_lr"]
        if self.generator is not None:
            self.generator.load_state_dict(state["generator"])
        self.policy.load_state_dict(state["policy"])
        self.value.load_state_dict(state["value"])
        self.qnet.load_state_dict(state["qnet"])
        self.q_target.load_state_dict(state["q_target"])
        self.ppo_opt.load_state_dict(state["ppo_opt"])
        cs = state["critic_state"]
        self.critic_state = AdamState(cs["step"], cs["m"], cs["v"])
        self.phi = {k: p.detach().clone() for k, p in self.qnet.named_parameters()}
        if state["memory"] is not None:
            self.memory = MemoryMatrix(state["memory"]["matrix"], state["memory"]["m_a_prev"])
        if state["hyper_state"] is not None:
            self.hyper_state = HyperState(state["hyper_state"]["h"], state["hyper_state"]["c"])
        self.final_obs = state["final_obs"]
        self.normalizer.load_state_dict(state["normalizer"])
        self.return_rms.load_state_dict(state["return_rms"])

    def load_pretrained(self, path) -> None:
        """Warm-start the generator and memory from a pretraining checkpoint."""
        path = Path(path)
        self._check_manifest(path, ("obs_dim", "mem", "generator", "dtype"))
        state = torch.load(path / "state.pt", weights_only=False)
        if self.generator is not None and state["generator"] is not None:
            self.generator.load_state_dict(state["generator"])
        if self.memory is not None and state["memory"] is not None:
            self.memory = MemoryMatrix(state["memory"]["matrix"], state["memory"]["m_a_prev"])


def _first_episode_subgoals(buf: dict) -> list:
    if buf["rewards"].shape[0] == 0:
        return []
    goals, seen = [], set()
    for t in range(buf["rewards"].shape[0]):
        seg = int(buf["segment"][t, 0])
        if seg not in seen and not (t > 0 and buf["dones"][t - 1, 0]):
            seen.add(seg)
            goals.append(buf["c_goal"][t, 0].tolist())
        if buf["dones"][t, 0]:
            break
    return goals


def train(cfg: ExperimentConfig, seed: int, pretrained: Optional[str] = None) -> Iterator[EpisodeResult]:
    """Stream one :class:`EpisodeResult` per outer episode."""
    trainer = Trainer(cfg, seed)
    if pretrained:
        trainer.load_pretrained(pretrained)
    yield from trainer.run()


def pretrain_task(task: str) -> str:
    return "push" if task == "reach" else "reach"


def pretrain(cfg: ExperimentConfig, seed: int, path) -> Path:
    """Train on the other task for ``pretrain_episodes`` and save the generator and memory."""
    pcfg = cfg.replace(task=pretrain_task(cfg.task), T_outer=max(cfg.pretrain_episodes, 1))
    trainer = Trainer(pcfg, seed)
    for _ in trainer.run(cfg.pretrain_episodes):
        pass
    return trainer.save_checkpoint(path)
