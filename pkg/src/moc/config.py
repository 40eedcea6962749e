"""Experiment configuration with a flat ``key = value`` file format.

One assignment per line, ``#`` starts a comment. Tuples are comma separated,
``none`` is the null value. Unknown keys are rejected with the offending line
number. Defaults follow the PPO hyper-parameter table (n_steps 5000, buffer
1e6, minibatch 128, lr 2.5e-4, clip 0.3, gamma 0.9995, value coef 0.5,
entropy coef 0, max grad norm 10).
"""

from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # experiment
    task: str = "reach"
    variant: str = "moc"
    seeds: tuple[int, ...] = (0,)
    total_env_steps: int = 200_000
    outdir: str = "runs"

    # environment
    arena_half_width: float = 1.0
    max_steps: int = 0  # 0: task default
    n_envs: int = 8
    goal_resample: str = "outer"  # outer | episode

    # PPO (inner loop)
    gamma: float = 0.9995
    n_steps: int = 5000
    lr: float = 2.5e-4
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 10.0
    clip: float = 0.3
    minibatch: int = 128
    n_epochs: int = 10
    gae_lambda: float = 0.95
    policy_hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    advantage: str = "return"  # return | critic
    bootstrap_episode_end: bool = True  # GAE bootstraps V at env episode ends (time is not observed)
    reward_scaling: bool = True  # divide PPO rewards by the running std of the discounted return

    # critic and look-ahead
    buffer_size: int = 1_000_000
    buffer_persist: bool = True
    q_hidden: tuple[int, ...] = (64, 64)
    critic_lr: float = 3e-4
    critic_updates: int = 8
    inner_optimizer: str = "adam"  # adam | sgd
    n_target: int = 4
    tau: float = 0.005

    # hyper-network
    hyper_hidden: int = 32
    hyper_z: int = 8
    hyper_cell: str = "lstm"  # lstm | tanh
    hyper_init_scale: float = 1e-2
    reset_hyper_state: bool = False
    base_hidden: int = 8

    # curricula
    n_subgoals: int = 4
    subgoal_mode: str = "closed"  # closed | open
    shaping_mode: str = "normalized"  # normalized | invariant
    shaping_mu: Optional[float] = None  # none: use gamma
    shaping_window: int = 10_000

    # memory
    mem_rows: int = 8
    mem_cols: int = 16
    memory_dump_every: int = 0

    # bilevel trainer
    T_outer: Optional[int] = None  # none: total_env_steps / T_inner
    T_inner: Optional[int] = None  # none: n_steps
    unroll_K: int = 1
    outer_lr: float = 1e-3
    outer_max_grad_norm: float = 10.0
    first_order: bool = False
    outer_loss: str = "combined"  # combined | sum
    outer_batch: int = 128
    pretrain_episodes: int = 0
    pretrain_from: str = ""

    # outputs
    checkpoint_every: int = 0
    dump_trajectories: bool = False
    record_visitation: bool = True
    visitation_bins: int = 50
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def mu(self) -> float:
        return self.gamma if self.shaping_mu is None else self.shaping_mu

    @property
    def steps_per_episode(self) -> int:
        return self.n_steps if self.T_inner is None else self.T_inner

    @property
    def outer_episodes(self) -> int:
        if self.T_outer is not None:
            return self.T_outer
        if self.steps_per_episode == 0:
            return 1
        return max(1, -(-self.total_env_steps // self.steps_per_episode))

    def validate(self) -> None:
        from .envs import TASKS
        from .trainer import VARIANTS

        choices = {
            "task": TASKS,
            "goal_resample": ("outer", "episode"),
            "advantage": ("return", "critic"),
            "inner_optimizer": ("adam", "sgd"),
            "hyper_cell": ("lstm", "tanh"),
            "subgoal_mode": ("closed", "open"),
            "shaping_mode": ("normalized", "invariant"),
            "outer_loss": ("combined", "sum"),
            "dtype": ("float32", "float64"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.variant not in VARIANTS and self.variant != "all":
            raise ConfigError(f"variant must be one of {tuple(VARIANTS)} or 'all', got {self.variant!r}")
        positive = ("n_envs", "n_steps", "minibatch", "n_epochs", "buffer_size", "n_target", "hyper_hidden", "hyper_z",
                    "base_hidden", "n_subgoals", "mem_rows", "mem_cols", "outer_batch", "visitation_bins", "shaping_window")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not 1 <= self.unroll_K <= max(self.critic_updates, 1):
            raise ConfigError("unroll_K must lie in [1, critic_updates]")
        if self.critic_updates < 0 or (self.T_inner or 0) < 0 or (self.T_outer or 0) < 0 or self.total_env_steps < 0:
            raise ConfigError("counts must be non-negative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    # --- serialisation ---------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_HINTS = None


def _hints() -> dict:
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(ExperimentConfig)
    return _HINTS


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    """Convert ``text`` to the declared type of field ``key``."""
    hints = _hints()
    if key not in hints:
        raise ConfigError(f"unknown key {key!r}")
    hint = hints[key]
    text = text.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(inner(p.strip()) for p in text.split(",") if p.strip())
        if hint is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(float(text)) if ("e" in text.lower() and "." not in text) else int(text)
        return hint(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse the flat grammar into a dict of typed values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from None
    return values


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides``; the last writer wins."""
    values: dict = {}
    if path:
        path = Path(path)
        for key, value in parse_text(path.read_text(), str(path)).items():
            values[key] = value
            log.info("config %s = %r (from %s)", key, value, path)
    for key, value in (overrides or {}).items():
        if key not in _hints():
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
        log.info("config %s = %r (from command line)", key, value)
    try:
        return ExperimentConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def from_text(text: str) -> ExperimentConfig:
    return ExperimentConfig(**parse_text(text))
