"""Abstract-curriculum memory: written by the hyper-network, read by the agent.

Rows are addressed by a softmax over cosine similarity with a key. A write
erases and adds along an outer product::

    M'[k, j] = M[k, j] * (1 - alpha[k] * erase[j]) + alpha[k] * add[j]

The agent only ever receives a :class:`MemoryReadView`, which has no write path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

_EPS = 1e-12


@dataclass(frozen=True)
class MemoryMatrix:
    matrix: torch.Tensor  # (K, M)
    m_a_prev: torch.Tensor  # (M,) add vector of the latest write

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def init(cls, rows: int, cols: int, generator: Optional[torch.Generator] = None, dtype=torch.float32):
        m = (torch.rand(rows, cols, generator=generator, dtype=dtype) * 2.0 - 1.0) * 0.01
        return cls(m, torch.zeros(cols, dtype=dtype))

    def detach(self) -> "MemoryMatrix":
        return MemoryMatrix(self.matrix.detach(), self.m_a_prev.detach())

    def to_csv(self, path) -> None:
        np.savetxt(path, self.matrix.detach().cpu().numpy(), delimiter=",", fmt="%.8g")


def cosine_scores(matrix: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; zero-norm rows or key score 0."""
    dots = matrix @ key
    denom = matrix.norm(dim=-1) * key.norm()
    safe = denom > _EPS
    return torch.where(safe, dots / torch.where(safe, denom, torch.ones_like(denom)), torch.zeros_like(dots))


def attend(memory: MemoryMatrix | torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    matrix = memory.matrix if isinstance(memory, MemoryMatrix) else memory
    if not torch.all(torch.isfinite(key)):
        raise ValueError("attention key must be finite")
    return torch.softmax(cosine_scores(matrix, key), dim=-1)


def mem_read(memory: MemoryMatrix) -> torch.Tensor:
    """Convex combination of rows, addressed by the latest stored add vector."""
    alpha = attend(memory, memory.m_a_prev)
    return alpha @ memory.matrix


def mem_write(memory: MemoryMatrix, alpha: torch.Tensor, m_e: torch.Tensor, m_a: torch.Tensor) -> MemoryMatrix:
    keep = 1.0 - torch.outer(alpha, m_e)
    new = memory.matrix * keep + torch.outer(alpha, m_a)
    return MemoryMatrix(new, m_a)


def hyper_write(memory: MemoryMatrix, m_e: torch.Tensor, m_a: torch.Tensor) -> MemoryMatrix:
    """Write with attention recomputed from the current add vector."""
    return mem_write(memory, attend(memory, m_a), m_e, m_a)


class MemoryReadView:
    """Read-only handle given to the agent side."""

    __slots__ = ("_memory",)

    def __init__(self, memory: MemoryMatrix):
        self._memory = memory

    def read(self) -> torch.Tensor:
        return mem_read(self._memory)

    @property
    def cols(self) -> int:
        return self._memory.cols
