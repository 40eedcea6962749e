"""Recurrent hyper-network that writes the weights of the curriculum Base-RNNs.

One shared cell is stepped once per role each outer episode. Each step emits
three embeddings ``z_h, z_x, z_b`` which a role-specific generator turns into
a flat Base-RNN parameter vector::

    W_h(z_h) = diag(D_h z_h) Wbar_h        (N_h x N_h)
    W_x(z_x) = diag(D_x z_x) Wbar_x        (N_h x N_x)
    b(z_b)   = B z_b + b_0                 (N_h)
    W_o(z_h) = diag(D_o z_h) Wbar_o        (out x N_h)
    b_o(z_b) = B_o z_b + b_o0              (out)

This is the row-factorised form of contracting a weight tensor of shape
``(N_h, N_h, N_z)`` with ``z_h``: the tensor is ``D_h[i, k] * Wbar_h[i, j]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

ROLES = ("subgoal", "init", "reward", "memory")
CURRICULUM_ROLES = ROLES[:3]


@dataclass(frozen=True)
class BaseRNNLayout:
    """Shape of a Base-RNN: ``h' = tanh(W_h h + W_x x + b)``, ``y = W_o h' + b_o``.

    Flat parameter order is recurrent, input, bias, output weights, output bias.
    """

    n_hidden: int
    n_input: int
    out_dim: int

    @property
    def param_count(self) -> int:
        h, x, o = self.n_hidden, self.n_input, self.out_dim
        return h * h + h * x + h + (o * h + o)

    def unflatten(self, theta: torch.Tensor):
        h, x, o = self.n_hidden, self.n_input, self.out_dim
        if theta.shape[-1] != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {theta.shape[-1]}")
        sizes = [h * h, h * x, h, o * h, o]
        w_h, w_x, b, w_o, b_o = torch.split(theta, sizes, dim=-1)
        return w_h.reshape(h, h), w_x.reshape(h, x), b, w_o.reshape(o, h), b_o


def one_hot_role(role: str, dtype=torch.float32) -> torch.Tensor:
    vec = torch.zeros(len(ROLES), dtype=dtype)
    vec[ROLES.index(role)] = 1.0
    return vec


@dataclass
class HyperInput:
    final_state: torch.Tensor
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not torch.all(torch.isfinite(self.final_state)):
            raise ValueError("final_state must be finite")

    @property
    def role_onehot(self) -> torch.Tensor:
        return one_hot_role(self.role, self.final_state.dtype)

    def vector(self) -> torch.Tensor:
        return torch.cat([self.final_state, self.role_onehot])


@dataclass
class HyperState:
    h: torch.Tensor
    c: Optional[torch.Tensor] = None

    def detach(self) -> "HyperState":
        return HyperState(self.h.detach(), None if self.c is None else self.c.detach())


@dataclass
class GeneratedParams:
    role: str
    theta_b: torch.Tensor
    layout: BaseRNNLayout
    z_h: Optional[torch.Tensor] = None
    z_x: Optional[torch.Tensor] = None
    z_b: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.theta_b.shape[-1] != self.layout.param_count:
            raise ValueError(
                f"{self.role}: generated {self.theta_b.shape[-1]} parameters, "
                f"layout needs {self.layout.param_count}"
            )

    def detach(self) -> "GeneratedParams":
        return GeneratedParams(self.role, self.theta_b.detach(), self.layout)


class WeightGenerator(nn.Module):
    """Role-specific map from embeddings to a flat Base-RNN parameter vector."""

    def __init__(self, layout: BaseRNNLayout, z_dim: int):
        super().__init__()
        self.layout = layout
        h, x, o = layout.n_hidden, layout.n_input, layout.out_dim
        self.d_h = nn.Parameter(torch.full((h, z_dim), 1.0 / z_dim))
        self.base_h = nn.Parameter(torch.empty(h, h).uniform_(-1 / math.sqrt(h), 1 / math.sqrt(h)))
        self.d_x = nn.Parameter(torch.full((h, z_dim), 1.0 / z_dim))
        self.base_x = nn.Parameter(torch.empty(h, x).uniform_(-1 / math.sqrt(x), 1 / math.sqrt(x)))
        self.w_bz = nn.Parameter(torch.randn(h, z_dim) * 1e-2)
        self.b0 = nn.Parameter(torch.zeros(h))
        self.d_o = nn.Parameter(torch.full((o, z_dim), 1.0 / z_dim))
        self.base_o = nn.Parameter(torch.empty(o, h).uniform_(-1 / math.sqrt(h), 1 / math.sqrt(h)))
        self.w_boz = nn.Parameter(torch.randn(o, z_dim) * 1e-2)
        self.b_o0 = nn.Parameter(torch.zeros(o))

    def forward(self, z_h: torch.Tensor, z_x: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
        w_h = (self.d_h @ z_h).unsqueeze(-1) * self.base_h
        w_x = (self.d_x @ z_x).unsqueeze(-1) * self.base_x
        b = self.w_bz @ z_b + self.b0
        w_o = (self.d_o @ z_h).unsqueeze(-1) * self.base_o
        b_o = self.w_boz @ z_b + self.b_o0
        return torch.cat([w_h.reshape(-1), w_x.reshape(-1), b, w_o.reshape(-1), b_o])


class HyperRNN(nn.Module):
    """The shared hyper-network ``f_h(I; theta_h)``.

    Input per step is ``[final_state, role_onehot]``. ``cell="lstm"`` uses a
    gated recurrence; ``cell="tanh"`` uses ``h' = tanh(W_h h + W_x x + b)``.
    """

    def __init__(
        self,
        state_dim: int,
        layouts: dict[str, BaseRNNLayout],
        hidden: int = 32,
        z_dim: int = 8,
        mem_cols: int = 16,
        cell: str = "lstm",
        init_scale: float = 1e-2,
    ):
        super().__init__()
        if cell not in ("lstm", "tanh"):
            raise ValueError(f"unknown cell {cell!r}")
        for role in layouts:
            if role not in CURRICULUM_ROLES:
                raise ValueError(f"no Base-RNN for role {role!r}")
        self.state_dim = state_dim
        self.hidden = hidden
        self.z_dim = z_dim
        self.mem_cols = mem_cols
        self.cell = cell
        self.layouts = dict(layouts)
        gates = 4 if cell == "lstm" else 1
        in_dim = state_dim + len(ROLES)
        self.w_rec = nn.Linear(hidden, gates * hidden, bias=False)
        self.w_in = nn.Linear(in_dim, gates * hidden, bias=True)

        self.to_zh = nn.Linear(hidden, z_dim)
        self.to_zx = nn.Linear(hidden, z_dim)
        self.to_zb = nn.Linear(hidden, z_dim, bias=False)
        with torch.no_grad():
            for lin in (self.to_zh, self.to_zx, self.to_zb):
                lin.weight.normal_(0.0, init_scale)
            # z starts near one so generated weights start near Wbar
            self.to_zh.bias.fill_(1.0)
            self.to_zx.bias.fill_(1.0)

        self.generators = nn.ModuleDict({role: WeightGenerator(lay, z_dim) for role, lay in layouts.items()})
        self.to_erase = nn.Linear(hidden, mem_cols, bias=False)
        self.to_add = nn.Linear(hidden, mem_cols, bias=False)

    def manifest(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "hidden": self.hidden,
            "z_dim": self.z_dim,
            "mem_cols": self.mem_cols,
            "cell": self.cell,
            "layouts": {r: [l.n_hidden, l.n_input, l.out_dim] for r, l in sorted(self.layouts.items())},
        }

    def initial_state(self) -> HyperState:
        dtype = self.w_rec.weight.dtype
        h = torch.zeros(self.hidden, dtype=dtype)
        return HyperState(h, torch.zeros(self.hidden, dtype=dtype) if self.cell == "lstm" else None)

    def step(self, state: HyperState, inp: HyperInput):
        """Advance the cell on one input; return the new state and ``(z_h, z_x, z_b)``."""
        x = inp.vector().to(self.w_in.weight.dtype)
        if x.shape[-1] != self.w_in.in_features:
            raise ValueError(f"hyper input has {x.shape[-1]} entries, expected {self.w_in.in_features}")
        pre = self.w_rec(state.h) + self.w_in(x)
        if self.cell == "lstm":
            i, f, g, o = pre.chunk(4, dim=-1)
            c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            new = HyperState(h, c)
        else:
            new = HyperState(torch.tanh(pre))
        z = (self.to_zh(new.h), self.to_zx(new.h), self.to_zb(new.h))
        return new, z

    def generate_weights(self, z, role: str) -> GeneratedParams:
        if role not in self.generators:
            raise ValueError(f"no generator for role {role!r}")
        z_h, z_x, z_b = z
        theta = self.generators[role](z_h, z_x, z_b)
        return GeneratedParams(role, theta, self.layouts[role], z_h, z_x, z_b)

    def emit_memory_vectors(self, state: HyperState):
        """Erase vector in (0, 1) and add vector in (-1, 1), both of length ``mem_cols``."""
        return torch.sigmoid(self.to_erase(state.h)), torch.tanh(self.to_add(state.h))


class IndependentBaseParams(nn.Module):
    """Directly trained Base-RNN parameters, used when there is no hyper-network."""

    def __init__(self, layouts: dict[str, BaseRNNLayout], scale: float = 1.0):
        super().__init__()
        self.layouts = dict(layouts)
        self.thetas = nn.ParameterDict()
        for role, lay in layouts.items():
            h, x, o = lay.n_hidden, lay.n_input, lay.out_dim
            parts = [
                torch.empty(h * h).uniform_(-1 / math.sqrt(h), 1 / math.sqrt(h)),
                torch.empty(h * x).uniform_(-1 / math.sqrt(x), 1 / math.sqrt(x)),
                torch.zeros(h),
                torch.empty(o * h).uniform_(-1 / math.sqrt(h), 1 / math.sqrt(h)),
                torch.zeros(o),
            ]
            self.thetas[role] = nn.Parameter(torch.cat(parts) * scale)

    def generate_weights(self, role: str) -> GeneratedParams:
        return GeneratedParams(role, self.thetas[role], self.layouts[role])
