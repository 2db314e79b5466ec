"""Channel variation-aware target masking plus the three baseline policies.

Variation maps are stored k-major, shape (K, T), matching the (C, K, T)
window layout and the (grid_k, grid_t) patch grid. Sampled masks partition
the token grid into one contiguous rectangular target block and a context
holding everything else.

Draw order per strategy (one mask per call, frozen for reproducibility):
``channel-aware``/``rect``: area fraction, aspect ratio, anchor;
``time``/``subcarrier``: area fraction, anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CsiWindow, PatchConfig

__all__ = [
    "STRATEGIES",
    "VariationMap",
    "PatchScoreGrid",
    "MaskSpec",
    "variation_map",
    "patch_scores",
    "sample_block_dims",
    "score_blocks",
    "anchor_distribution",
    "sample_target",
    "sample_baseline",
    "sample_mask",
]

STRATEGIES = ("channel-aware", "time", "subcarrier", "rect")

DEFAULT_AREA_RANGE = (0.15, 0.30)
DEFAULT_ASPECT_RANGE = (0.5, 2.0)
DEFAULT_EPS_STAB = 1e-6


@dataclass(frozen=True)
class VariationMap:
    """Temporal/spectral absolute-difference maps and their convex blend."""

    temporal: np.ndarray  # (K, T), first time column zero
    spectral: np.ndarray  # (K, T), first subcarrier row zero
    combined: np.ndarray  # lam*temporal + (1-lam)*spectral
    lam: float


@dataclass(frozen=True)
class PatchScoreGrid:
    """Per-patch mean of the combined variation map, shape (grid_k, grid_t)."""

    scores: np.ndarray


@dataclass(frozen=True)
class MaskSpec:
    """One rectangular target block and its complement on the token grid.

    ``target`` and ``context`` are sorted arrays of flat token indices
    (row-major, ``n = i * grid_t + j``) that partition the grid.
    """

    anchor: tuple[int, int]
    block: tuple[int, int]
    target: np.ndarray
    context: np.ndarray
    strategy: str

    def debug_line(self) -> str:
        return (
            f"{self.anchor[0]} {self.anchor[1]} {self.block[0]} {self.block[1]} {self.strategy}"
        )


def variation_map(window: CsiWindow, lam: float) -> VariationMap:
    """Per-cell channel variation (mean |difference| over channels).

    ``temporal[k, t] = mean_c |X[c,k,t] - X[c,k,t-1]|`` with the missing
    t=0 differences set to zero; ``spectral`` likewise along k. Expects a
    standardized window.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    vals = window.values.astype(np.float64)
    temporal = np.zeros(vals.shape[1:], dtype=np.float64)
    temporal[:, 1:] = np.abs(vals[:, :, 1:] - vals[:, :, :-1]).mean(axis=0)
    spectral = np.zeros(vals.shape[1:], dtype=np.float64)
    spectral[1:, :] = np.abs(vals[:, 1:, :] - vals[:, :-1, :]).mean(axis=0)
    combined = lam * temporal + (1.0 - lam) * spectral
    return VariationMap(temporal, spectral, combined, lam)


def patch_scores(vmap: VariationMap, config: PatchConfig) -> PatchScoreGrid:
    """Mean of the combined map over each patch's covered cells."""
    k, t = vmap.combined.shape
    if k != config.subcarriers or t != config.time_steps:
        raise ValueError(
            f"map shape {(k, t)} does not match patch config "
            f"({config.subcarriers}, {config.time_steps})"
        )
    scores = vmap.combined.reshape(
        config.grid_k, config.patch_k, config.grid_t, config.patch_t
    ).mean(axis=(1, 3))
    return PatchScoreGrid(scores)


def _round_half_away(x: float) -> int:
    # np.round is half-to-even; the block-dims law rounds half away from zero.
    return int(np.floor(x + 0.5))


def sample_block_dims(
    config: PatchConfig,
    rng: np.random.Generator,
    area_range: tuple[float, float] = DEFAULT_AREA_RANGE,
    aspect_range: tuple[float, float] = DEFAULT_ASPECT_RANGE,
) -> tuple[int, int]:
    """Draw target block dims from the area/aspect law, clamped to the grid.

    rho ~ U[area range], alpha ~ U[aspect range]; b_K = round(sqrt(rho*N*alpha)),
    b_T = round(sqrt(rho*N/alpha)). A block that would cover the whole grid
    has its longer side shrunk by 1 so at least one context patch survives.
    """
    rho = rng.uniform(*area_range)
    alpha = rng.uniform(*aspect_range)
    n = config.num_tokens
    b_k = _round_half_away(np.sqrt(rho * n * alpha))
    b_t = _round_half_away(np.sqrt(rho * n / alpha))
    b_k = min(max(b_k, 1), config.grid_k)
    b_t = min(max(b_t, 1), config.grid_t)
    if b_k == config.grid_k and b_t == config.grid_t:
        if b_t >= b_k:
            b_t -= 1
        else:
            b_k -= 1
    return b_k, b_t


def score_blocks(scores: PatchScoreGrid, dims: tuple[int, int]) -> np.ndarray:
    """Mean patch score inside every feasible block placement.

    Returns R with shape (grid_k-b_K+1, grid_t-b_T+1). Uses a 2D summed-area
    table, so cost is O(grid area) independent of block size.
    """
    grid = scores.scores
    b_k, b_t = dims
    nk, nt = grid.shape
    if not (1 <= b_k <= nk and 1 <= b_t <= nt):
        raise ValueError(f"block dims {dims} not feasible on {grid.shape} grid")
    sat = np.zeros((nk + 1, nt + 1), dtype=np.float64)
    sat[1:, 1:] = grid.astype(np.float64).cumsum(axis=0).cumsum(axis=1)
    m, n = nk - b_k + 1, nt - b_t + 1
    sums = sat[b_k:, b_t:] - sat[:m, b_t:] - sat[b_k:, :n] + sat[:m, :n]
    return sums / float(b_k * b_t)


def anchor_distribution(block_scores: np.ndarray, eta: float, eps_stab: float) -> np.ndarray:
    """Mix the score-normalized anchor distribution with the uniform one.

    p = (R + eps) / sum(R + eps); p_mask = (1 - eta) * p + eta / |Omega|.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if np.any(block_scores < 0):
        raise ValueError("block scores must be non-negative")
    shifted = block_scores + eps_stab
    p = shifted / shifted.sum()
    return (1.0 - eta) * p + eta / block_scores.size


def _block_index_sets(
    anchor: tuple[int, int], dims: tuple[int, int], config: PatchConfig
) -> tuple[np.ndarray, np.ndarray]:
    a, b = anchor
    b_k, b_t = dims
    ii, jj = np.meshgrid(np.arange(a, a + b_k), np.arange(b, b + b_t), indexing="ij")
    target = (ii * config.grid_t + jj).ravel()
    target.sort()
    mask = np.ones(config.num_tokens, dtype=bool)
    mask[target] = False
    context = np.nonzero(mask)[0]
    if context.size == 0:
        raise ValueError("target block covers the whole grid")
    return target, context


def _draw_anchor(p_flat: np.ndarray, rng: np.random.Generator) -> int:
    # Inverse-CDF over row-major anchor order.
    cdf = np.cumsum(p_flat)
    u = rng.random()
    return min(int(np.searchsorted(cdf, u, side="right")), p_flat.size - 1)


def sample_target(
    block_scores: np.ndarray,
    dims: tuple[int, int],
    config: PatchConfig,
    eta: float,
    eps_stab: float,
    rng: np.random.Generator,
) -> MaskSpec:
    """Sample the channel variation-aware target block.

    ``block_scores`` is the R matrix from :func:`score_blocks` for ``dims``.
    """
    p_mask = anchor_distribution(block_scores, eta, eps_stab)
    idx = _draw_anchor(p_mask.ravel(), rng)
    n_cols = block_scores.shape[1]
    anchor = (idx // n_cols, idx % n_cols)
    target, context = _block_index_sets(anchor, dims, config)
    return MaskSpec(anchor, dims, target, context, "channel-aware")


def sample_baseline(
    strategy: str,
    config: PatchConfig,
    rng: np.random.Generator,
    area_range: tuple[float, float] = DEFAULT_AREA_RANGE,
    aspect_range: tuple[float, float] = DEFAULT_ASPECT_RANGE,
) -> MaskSpec:
    """Sample one of the non-variation-aware masking policies.

    ``time`` spans all subcarrier patches and a contiguous time range whose
    width follows the same area law; ``subcarrier`` is the transpose;
    ``rect`` uses the channel-aware dims law with a uniform anchor.
    """
    nk, nt = config.grid_k, config.grid_t
    if strategy == "time":
        if nt < 2:
            raise ValueError("time masking needs at least 2 time patches")
        rho = rng.uniform(*area_range)
        b_t = min(max(_round_half_away(rho * nt), 1), nt - 1)
        dims = (nk, b_t)
        anchor = (0, int(rng.integers(0, nt - b_t + 1)))
    elif strategy == "subcarrier":
        if nk < 2:
            raise ValueError("subcarrier masking needs at least 2 subcarrier patches")
        rho = rng.uniform(*area_range)
        b_k = min(max(_round_half_away(rho * nk), 1), nk - 1)
        dims = (b_k, nt)
        anchor = (int(rng.integers(0, nk - b_k + 1)), 0)
    elif strategy == "rect":
        dims = sample_block_dims(config, rng, area_range, aspect_range)
        anchor = (
            int(rng.integers(0, nk - dims[0] + 1)),
            int(rng.integers(0, nt - dims[1] + 1)),
        )
    else:
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    target, context = _block_index_sets(anchor, dims, config)
    return MaskSpec(anchor, dims, target, context, strategy)


def sample_mask(
    window: CsiWindow,
    strategy: str,
    config: PatchConfig,
    rng: np.random.Generator,
    lam: float = 0.5,
    eta: float = 0.3,
    eps_stab: float = DEFAULT_EPS_STAB,
    area_range: tuple[float, float] = DEFAULT_AREA_RANGE,
    aspect_range: tuple[float, float] = DEFAULT_ASPECT_RANGE,
) -> MaskSpec:
    """Route one window through the named masking strategy."""
    if strategy == "channel-aware":
        dims = sample_block_dims(config, rng, area_range, aspect_range)
        scores = patch_scores(variation_map(window, lam), config)
        r = score_blocks(scores, dims)
        return sample_target(r, dims, config, eta, eps_stab, rng)
    if strategy in STRATEGIES:
        return sample_baseline(strategy, config, rng, area_range, aspect_range)
    raise ValueError(f"unknown masking strategy {strategy!r}")
