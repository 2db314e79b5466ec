"""Temporal-spectral tokenization: patch embedding and fixed 2D positions.

Token order is a frozen format-level contract: the (grid_k, grid_t) grid
flattens row-major with the subcarrier-patch index outer and the time-patch
index inner, so token ``n = i * grid_t + j``. Mask index sets, positional
rows, and checkpointed projections all assume this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CsiWindow, PatchConfig

__all__ = [
    "TokenGrid",
    "PositionalTable",
    "extract_patches",
    "patch_embed",
    "sincos_positions",
    "add_positions",
]


@dataclass(frozen=True)
class TokenGrid:
    """Embedded patch tokens, shape (grid_k, grid_t, embed_dim)."""

    tokens: np.ndarray
    config: PatchConfig

    def __post_init__(self) -> None:
        expect = (self.config.grid_k, self.config.grid_t, self.config.embed_dim)
        if self.tokens.shape != expect:
            raise ValueError(f"token tensor shape {self.tokens.shape} != {expect}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("token tensor contains non-finite values")

    @property
    def flat(self) -> np.ndarray:
        """(num_tokens, embed_dim) view in the frozen row-major order."""
        n = self.config.num_tokens
        return self.tokens.reshape(n, self.config.embed_dim)


@dataclass(frozen=True)
class PositionalTable:
    """Fixed sine-cosine positions, shape (grid_k, grid_t, embed_dim)."""

    table: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        nk, nt, d = self.table.shape
        return self.table.reshape(nk * nt, d)


def extract_patches(values: np.ndarray, config: PatchConfig) -> np.ndarray:
    """Flatten each non-overlapping patch to a row.

    Returns (num_tokens, C*patch_k*patch_t); row ``i*grid_t + j`` is
    ``vec(window[:, i*P_K:(i+1)*P_K, j*P_T:(j+1)*P_T])`` in (C, P_K, P_T)
    order. Shared by the forward patch projection and its backward pass.
    """
    c, k, t = values.shape
    if k != config.subcarriers or t != config.time_steps:
        raise ValueError(
            f"window (K={k}, T={t}) does not match patch config "
            f"(K={config.subcarriers}, T={config.time_steps})"
        )
    pk, pt = config.patch_k, config.patch_t
    nk, nt = config.grid_k, config.grid_t
    # (C, NK, PK, NT, PT) -> (NK, NT, C, PK, PT) -> (N, C*PK*PT)
    patches = values.reshape(c, nk, pk, nt, pt).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(patches).reshape(nk * nt, c * pk * pt)


def patch_embed(
    window: CsiWindow, weights: np.ndarray, bias: np.ndarray, config: PatchConfig
) -> TokenGrid:
    """Project each patch with ``weights @ vec(patch) + bias``.

    ``weights`` is (embed_dim, C*patch_k*patch_t); equivalent to a
    non-overlapping strided linear projection.
    """
    in_dim = window.channels * config.patch_k * config.patch_t
    if weights.shape != (config.embed_dim, in_dim):
        raise ValueError(
            f"projection shape {weights.shape} != ({config.embed_dim}, {in_dim})"
        )
    if bias.shape != (config.embed_dim,):
        raise ValueError(f"bias shape {bias.shape} != ({config.embed_dim},)")
    rows = extract_patches(window.values, config)
    tokens = rows.astype(weights.dtype) @ weights.T + bias
    return TokenGrid(tokens.reshape(config.grid_k, config.grid_t, config.embed_dim), config)


def sincos_positions(config: PatchConfig, dtype=np.float32) -> PositionalTable:
    """Fixed 2D sine-cosine table; depends only on (grid_k, grid_t, embed_dim).

    First half of the embedding encodes the subcarrier-patch index, second
    half the time-patch index. Within each half, frequencies interleave as
    (sin(pos/w_d), cos(pos/w_d)) pairs with w_d = 10000^(2d/(D/2)).
    """
    d = config.embed_dim
    if d % 4 != 0:
        raise ValueError(f"embed_dim must be divisible by 4, got {d}")
    half = d // 2

    def axis_table(length: int) -> np.ndarray:
        pairs = half // 2
        omega = 10000.0 ** (2.0 * np.arange(pairs, dtype=np.float64) / half)
        pos = np.arange(length, dtype=np.float64)
        angles = pos[:, None] / omega[None, :]  # (length, pairs)
        out = np.empty((length, half), dtype=np.float64)
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    k_part = axis_table(config.grid_k)  # (NK, half)
    t_part = axis_table(config.grid_t)  # (NT, half)
    table = np.empty((config.grid_k, config.grid_t, d), dtype=np.float64)
    table[:, :, :half] = k_part[:, None, :]
    table[:, :, half:] = t_part[None, :, :]
    return PositionalTable(table.astype(dtype))


def add_positions(grid: TokenGrid, table: PositionalTable) -> TokenGrid:
    if grid.tokens.shape != table.table.shape:
        raise ValueError(
            f"token shape {grid.tokens.shape} != positional shape {table.table.shape}"
        )
    return TokenGrid(grid.tokens + table.table, grid.config)
