"""Absolute (sinusoidal) and relative (learnable, per-offset) positional encodings."""
from __future__ import annotations

import numpy as np

from .nn import Module
from .tensor import Tensor, stack


def absolute_pe(pos: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of one position, float64.

    Entry ``2d`` is ``sin(pos / 10000**(2d/dim))`` and ``2d+1`` the matching cosine.
    """
    if dim % 2:
        raise ValueError(f"absolute_pe: dim must be even, got {dim}")
    if pos < 0:
        raise ValueError(f"absolute_pe: pos must be >= 0, got {pos}")
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(pos / freq)
    out[1::2] = np.cos(pos / freq)
    return out


def absolute_pe_table(max_position: int, dim: int) -> np.ndarray:
    return np.stack([absolute_pe(p, dim) for p in range(max_position)])


class RelativePEBank(Module):
    """One learnable vector per drawing-order distance ``0..M-1`` plus a fixed zero placeholder.

    ``lookup(i, j)`` returns the very same tensor object for every pair with
    equal ``|i - j|``; index 0 denotes the global node and maps to the placeholder.
    """

    def __init__(self, m: int, dim: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.m = m
        self.offsets = [Tensor(rng.normal(0.0, std, dim).astype(dtype), requires_grad=True, name=f"r{k}")
                        for k in range(m)]
        self.placeholder = Tensor(np.zeros(dim, dtype=dtype), name="delta0_rel")

    def lookup(self, i: int, j: int) -> Tensor:
        if not (0 <= i <= self.m and 0 <= j <= self.m):
            raise IndexError(f"relative_pe: indices ({i}, {j}) outside 0..{self.m}")
        if i == 0 or j == 0:
            return self.placeholder
        return self.offsets[abs(i - j)]

    def matrix(self) -> Tensor:
        """(M, dim) stack of the offset vectors, row k = r_k."""
        return stack(self.offsets, axis=0)


def relative_pe(i: int, j: int, bank: RelativePEBank) -> Tensor:
    return bank.lookup(i, j)


def offset_incidence(m: int) -> np.ndarray:
    """(M+1, M+1, M) one-hot tensor: entry [i, j, k] = 1 iff i, j >= 1 and |i - j| == k."""
    e = np.zeros((m + 1, m + 1, m))
    idx = np.arange(1, m + 1)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    e[i, j, np.abs(i - j)] = 1.0
    return e


def pe_tables_for_graph(m: int, dim: int, dtype=np.float32) -> np.ndarray:
    """(M+1, dim) table: zero placeholder row for the global node, then positions 1..M."""
    if m < 1:
        raise ValueError("pe_tables_for_graph: M must be >= 1")
    table = np.zeros((m + 1, dim), dtype=np.float64)
    table[1:] = absolute_pe_table(m + 1, dim)[1:]
    return table.astype(dtype)
