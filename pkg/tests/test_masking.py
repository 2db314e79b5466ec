"""Masking: variation maps vs loop oracles, block scoring, sampling laws."""

import numpy as np
import pytest

from csijepa.core import CsiWindow, PatchConfig
from csijepa.masking import (
    MaskSpec,
    PatchScoreGrid,
    anchor_distribution,
    patch_scores,
    sample_baseline,
    sample_block_dims,
    sample_mask,
    sample_target,
    score_blocks,
    variation_map,
)
from csijepa.rng import stream

CFG_8x8 = PatchConfig.from_dims(16, 16, 2, 2, embed_dim=8)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def variation_map_oracle(values, lam):
    """Naive double loop over (k, t)."""
    c, k, t = values.shape
    vt = np.zeros((k, t))
    vk = np.zeros((k, t))
    for ki in range(k):
        for ti in range(t):
            if ti > 0:
                vt[ki, ti] = np.mean(
                    [abs(float(values[ci, ki, ti]) - float(values[ci, ki, ti - 1])) for ci in range(c)]
                )
            if ki > 0:
                vk[ki, ti] = np.mean(
                    [abs(float(values[ci, ki, ti]) - float(values[ci, ki - 1, ti])) for ci in range(c)]
                )
    return vt, vk, lam * vt + (1 - lam) * vk


def patch_scores_oracle(combined, cfg):
    out = np.zeros((cfg.grid_k, cfg.grid_t))
    for i in range(cfg.grid_k):
        for j in range(cfg.grid_t):
            cells = []
            for a in range(i * cfg.patch_k, (i + 1) * cfg.patch_k):
                for b in range(j * cfg.patch_t, (j + 1) * cfg.patch_t):
                    cells.append(combined[a, b])
            out[i, j] = np.mean(cells)
    return out


def score_blocks_oracle(scores, dims):
    b_k, b_t = dims
    nk, nt = scores.shape
    out = np.zeros((nk - b_k + 1, nt - b_t + 1))
    for a in range(nk - b_k + 1):
        for b in range(nt - b_t + 1):
            out[a, b] = scores[a : a + b_k, b : b + b_t].mean()
    return out


# ---------------------------------------------------------------------------
# variation_map
# ---------------------------------------------------------------------------


def test_variation_map_constant_window_is_zero():
    vm = variation_map(CsiWindow(np.zeros((1, 4, 4))), lam=0.5)
    assert not vm.temporal.any() and not vm.spectral.any() and not vm.combined.any()


def test_variation_map_hand_case():
    # k rows, t cols: [[0,1],[0,1]] -> only temporal variation at t=1
    w = CsiWindow(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
    vm = variation_map(w, lam=0.5)
    np.testing.assert_allclose(vm.temporal[:, 1], [1.0, 1.0])
    np.testing.assert_allclose(vm.temporal[:, 0], [0.0, 0.0])
    np.testing.assert_allclose(vm.spectral, 0.0)
    np.testing.assert_allclose(vm.combined[:, 1], [0.5, 0.5])
    np.testing.assert_allclose(vm.combined[:, 0], [0.0, 0.0])


def test_variation_map_matches_loop_oracle():
    rng = stream(11, "mask", "vm")
    for trial in range(5):
        vals = rng.normal(size=(2, 16, 16))
        lam = rng.uniform()
        vm = variation_map(CsiWindow(vals), lam)
        vt, vk, m = variation_map_oracle(np.asarray(vals, dtype=np.float32), lam)
        np.testing.assert_allclose(vm.temporal, vt, atol=1e-6)
        np.testing.assert_allclose(vm.spectral, vk, atol=1e-6)
        np.testing.assert_allclose(vm.combined, m, atol=1e-6)


def test_variation_map_boundary_rows_zero():
    rng = stream(12, "mask", "bound")
    vm = variation_map(CsiWindow(rng.normal(size=(1, 8, 8))), lam=0.3)
    assert not vm.temporal[:, 0].any()
    assert not vm.spectral[0, :].any()


def test_variation_map_rejects_bad_lambda():
    w = CsiWindow(np.zeros((1, 4, 4)))
    for lam in (-0.1, 1.1):
        with pytest.raises(ValueError):
            variation_map(w, lam)


# ---------------------------------------------------------------------------
# patch_scores
# ---------------------------------------------------------------------------


def test_patch_scores_uniform_map():
    vm = variation_map(CsiWindow(np.zeros((1, 16, 16))), 0.5)
    grid = patch_scores(vm, CFG_8x8)
    np.testing.assert_allclose(grid.scores, 0.0)
    # uniform nonzero value
    from dataclasses import replace

    vm2 = replace(vm, combined=np.full((16, 16), 3.25))
    np.testing.assert_allclose(patch_scores(vm2, CFG_8x8).scores, 3.25)


def test_patch_scores_single_cell():
    from dataclasses import replace

    cfg = PatchConfig.from_dims(16, 16, 4, 8, embed_dim=8)  # patch covers 32 cells
    vm = variation_map(CsiWindow(np.zeros((1, 16, 16))), 0.5)
    combined = np.zeros((16, 16))
    combined[5, 9] = 1.0  # inside patch (1, 1)
    vm = replace(vm, combined=combined)
    scores = patch_scores(vm, cfg).scores
    assert scores[1, 1] == pytest.approx(1.0 / 32.0)
    scores[1, 1] = 0.0
    assert not scores.any()


def test_patch_scores_matches_loop_oracle():
    rng = stream(13, "mask", "ps")
    w = CsiWindow(rng.normal(size=(1, 16, 16)))
    vm = variation_map(w, 0.5)
    got = patch_scores(vm, CFG_8x8).scores
    want = patch_scores_oracle(vm.combined, CFG_8x8)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_patch_scores_rejects_mismatch():
    vm = variation_map(CsiWindow(np.zeros((1, 8, 8))), 0.5)
    with pytest.raises(ValueError):
        patch_scores(vm, CFG_8x8)


# ---------------------------------------------------------------------------
# sample_block_dims
# ---------------------------------------------------------------------------


class FixedUniformRng:
    """Stub generator returning scripted uniform draws."""

    def __init__(self, values):
        self.values = list(values)

    def uniform(self, lo, hi):
        frac = self.values.pop(0)
        return lo + (hi - lo) * frac


def test_block_dims_exact_case():
    cfg = PatchConfig.from_dims(16, 16, 2, 2, embed_dim=8)  # 8x8 grid
    # rho=0.25 (fraction (0.25-0.15)/0.15), alpha=1 (fraction 1/3)
    rng = FixedUniformRng([(0.25 - 0.15) / 0.15, (1.0 - 0.5) / 1.5])
    b_k, b_t = sample_block_dims(cfg, rng)
    assert (b_k, b_t) == (4, 4)  # sqrt(0.25 * 64) = 4


def test_block_dims_degenerate_grid_clamps():
    cfg = PatchConfig(1, 1, 1, 2, embed_dim=8)  # 1x2 grid
    rng = stream(14, "mask", "deg")
    for _ in range(50):
        b_k, b_t = sample_block_dims(cfg, rng)
        assert (b_k, b_t) == (1, 1)


def test_block_dims_always_leave_context():
    rng = stream(15, "mask", "ctx")
    for nk, nt in [(2, 2), (1, 3), (3, 1), (8, 8), (29, 20)]:
        cfg = PatchConfig(1, 1, nk, nt, embed_dim=8)
        for _ in range(200):
            b_k, b_t = sample_block_dims(cfg, rng)
            assert 1 <= b_k <= nk and 1 <= b_t <= nt
            assert b_k * b_t < nk * nt


def test_block_dims_area_law_montecarlo():
    cfg = PatchConfig(1, 1, 29, 20, embed_dim=8)
    rng = stream(16, "mask", "mc")
    n = cfg.num_tokens
    fracs = []
    for _ in range(10_000):
        b_k, b_t = sample_block_dims(cfg, rng)
        fracs.append(b_k * b_t / n)
    fracs = np.asarray(fracs)
    inside = np.mean((fracs >= 0.13) & (fracs <= 0.32))
    assert inside >= 0.99


# ---------------------------------------------------------------------------
# score_blocks
# ---------------------------------------------------------------------------


def test_score_blocks_uniform_and_identity():
    uniform = PatchScoreGrid(np.full((5, 7), 2.5))
    r = score_blocks(uniform, (3, 2))
    assert r.shape == (3, 6)
    np.testing.assert_allclose(r, 2.5)
    rng = stream(17, "mask", "sb")
    scores = PatchScoreGrid(rng.uniform(size=(6, 4)))
    np.testing.assert_allclose(score_blocks(scores, (1, 1)), scores.scores, atol=1e-12)


def test_score_blocks_matches_anchor_loop():
    rng = stream(18, "mask", "sbo")
    for dims in [(3, 2), (2, 5), (4, 4), (1, 6)]:
        scores = PatchScoreGrid(rng.uniform(size=(8, 6)) * 10)
        got = score_blocks(scores, dims)
        want = score_blocks_oracle(scores.scores, dims)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_score_blocks_rejects_infeasible():
    with pytest.raises(ValueError):
        score_blocks(PatchScoreGrid(np.ones((3, 3))), (4, 1))


# ---------------------------------------------------------------------------
# anchor distribution / sample_target
# ---------------------------------------------------------------------------


def test_anchor_distribution_eta_one_uniform():
    rng = stream(19, "mask", "eta1")
    r = rng.uniform(size=(4, 4)) * 5
    p = anchor_distribution(r, eta=1.0, eps_stab=1e-6)
    np.testing.assert_allclose(p, 1.0 / 16.0, atol=1e-12)


def test_anchor_distribution_zero_scores_uniform():
    for eta in (0.0, 0.3, 0.9):
        p = anchor_distribution(np.zeros((3, 5)), eta=eta, eps_stab=1e-6)
        np.testing.assert_allclose(p, 1.0 / 15.0, atol=1e-12)


def test_anchor_distribution_properties():
    rng = stream(20, "mask", "prop")
    for _ in range(50):
        r = rng.uniform(size=(5, 6))
        eta = float(rng.uniform())
        p = anchor_distribution(r, eta, 1e-6)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p >= eta / r.size - 1e-12)


def test_anchor_distribution_scale_invariant_without_eps():
    rng = stream(21, "mask", "scale")
    r = rng.uniform(size=(4, 4)) + 0.1
    base = anchor_distribution(r, eta=0.2, eps_stab=0.0)
    for c in (0.5, 3.0, 1e4):
        np.testing.assert_allclose(anchor_distribution(c * r, 0.2, 0.0), base, atol=1e-12)


def test_anchor_distribution_monotone_in_score():
    r = np.ones((3, 3))
    before = anchor_distribution(r, eta=0.3, eps_stab=1e-6)[1, 1]
    r2 = r.copy()
    r2[1, 1] = 2.0
    after = anchor_distribution(r2, eta=0.3, eps_stab=1e-6)[1, 1]
    assert after > before


def test_sample_target_partition_and_rectangle():
    rng = stream(22, "mask", "part")
    cfg = PatchConfig(1, 1, 6, 5, embed_dim=8)
    for _ in range(100):
        dims = sample_block_dims(cfg, rng)
        r = np.abs(stream(23, "mask", "r").uniform(size=(6 - dims[0] + 1, 5 - dims[1] + 1)))
        spec = sample_target(r, dims, cfg, eta=0.3, eps_stab=1e-6, rng=rng)
        merged = np.sort(np.concatenate([spec.target, spec.context]))
        np.testing.assert_array_equal(merged, np.arange(cfg.num_tokens))
        assert len(np.intersect1d(spec.target, spec.context)) == 0
        assert spec.target.size == dims[0] * dims[1] >= 1
        assert spec.context.size >= 1
        # contiguous rectangle: indices decompose into the anchored block
        a, b = spec.anchor
        expect = sorted(
            (a + di) * cfg.grid_t + (b + dj) for di in range(dims[0]) for dj in range(dims[1])
        )
        np.testing.assert_array_equal(spec.target, expect)


def test_sample_target_empirical_distribution():
    # 4x4 score grid with a high-variation quadrant; exact p_mask by enumeration.
    scores = PatchScoreGrid(np.zeros((5, 5)))
    grid = np.zeros((5, 5))
    grid[:2, :2] = 4.0
    cfg = PatchConfig(1, 1, 5, 5, embed_dim=8)
    dims = (2, 2)
    r = score_blocks(PatchScoreGrid(grid), dims)
    p_mask = anchor_distribution(r, eta=0.3, eps_stab=1e-6).ravel()

    draws = 20_000
    rng = stream(24, "mask", "hist")
    counts = np.zeros(p_mask.size)
    for _ in range(draws):
        spec = sample_target(r, dims, cfg, 0.3, 1e-6, rng)
        counts[spec.anchor[0] * r.shape[1] + spec.anchor[1]] += 1
    sigma = np.sqrt(draws * p_mask * (1 - p_mask))
    assert np.all(np.abs(counts - draws * p_mask) <= 4.0 * sigma + 1e-9)


def test_same_seed_identical_mask_sequence():
    rng_a = stream(25, "mask", "det")
    rng_b = stream(25, "mask", "det")
    w = CsiWindow(stream(26, "mask", "w").normal(size=(1, 16, 16)))
    for _ in range(10):
        sa = sample_mask(w, "channel-aware", CFG_8x8, rng_a)
        sb = sample_mask(w, "channel-aware", CFG_8x8, rng_b)
        assert sa.debug_line() == sb.debug_line()
        np.testing.assert_array_equal(sa.target, sb.target)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def test_time_strategy_spans_all_rows():
    rng = stream(27, "mask", "time")
    for _ in range(50):
        spec = sample_baseline("time", CFG_8x8, rng)
        assert spec.block[0] == CFG_8x8.grid_k
        assert spec.anchor[0] == 0
        assert spec.context.size >= 1


def test_subcarrier_strategy_spans_all_cols():
    rng = stream(28, "mask", "sub")
    for _ in range(50):
        spec = sample_baseline("subcarrier", CFG_8x8, rng)
        assert spec.block[1] == CFG_8x8.grid_t
        assert spec.anchor[1] == 0
        assert spec.context.size >= 1


def test_rect_anchor_uniform():
    cfg = PatchConfig(1, 1, 4, 4, embed_dim=8)
    rng = stream(29, "mask", "rect")
    counts = {}
    draws = 30_000
    for _ in range(draws):
        spec = sample_baseline("rect", cfg, rng)
        key = (spec.anchor, spec.block)
        counts[key] = counts.get(key, 0) + 1
    # conditioned on block dims, anchors must be uniform over feasible set
    by_dims = {}
    for (anchor, block), c in counts.items():
        by_dims.setdefault(block, {})[anchor] = c
    for block, anchors in by_dims.items():
        feasible = (cfg.grid_k - block[0] + 1) * (cfg.grid_t - block[1] + 1)
        total = sum(anchors.values())
        if total < 2000:
            continue
        p = 1.0 / feasible
        sigma = np.sqrt(total * p * (1 - p))
        for anchor, c in anchors.items():
            assert abs(c - total * p) <= 4.5 * sigma + 1e-9
        assert len(anchors) == feasible


def test_baseline_rejects_unknown_and_degenerate():
    with pytest.raises(ValueError):
        sample_baseline("bogus", CFG_8x8, stream(0))
    thin = PatchConfig(1, 1, 3, 1, embed_dim=8)
    with pytest.raises(ValueError):
        sample_baseline("time", thin, stream(0))


def test_debug_line_format():
    spec = MaskSpec((2, 3), (4, 5), np.arange(1), np.arange(1, 2), "rect")
    assert spec.debug_line() == "2 3 4 5 rect"
