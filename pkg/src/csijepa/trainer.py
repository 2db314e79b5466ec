"""JEPA pretraining: masked latent prediction with AdamW and an EMA target.

One step, per sample: tokenize + add positions, sample a target block, encode
the context with the online encoder, encode the full sequence with the target
encoder (stop-gradient), predict the target latents, smooth-L1 in latent
space. Gradients flow to the online encoder, predictor and the shared patch
embedder only; the target tracks the online blocks by EMA with a linearly
increasing momentum.

Masks are drawn from per-step keyed streams and gradients reduce in a fixed
pairwise tree, so runs are reproducible and resumable regardless of worker
fan-out; ``threads=1`` (strict serial) is the reference schedule.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import net
from .core import CsiWindow, PatchConfig
from .masking import MaskSpec, sample_mask
from .net import ModelConfig, ModelState
from .rng import stream
from .tokenizer import extract_patches, sincos_positions

logger = logging.getLogger(__name__)

__all__ = [
    "PretrainConfig",
    "LossRecord",
    "smooth_l1",
    "smooth_l1_grad",
    "mu_schedule",
    "adamw_step",
    "jepa_loss",
    "jepa_loss_and_grads",
    "pretrain_step",
    "pretrain",
    "write_loss_log",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class PretrainConfig:
    """Hyperparameters; optimization defaults follow the published recipe."""

    epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    strategy: str = "channel-aware"
    lam: float = 0.5
    eta: float = 0.3
    eps_stab: float = 1e-6
    area_range: tuple[float, float] = (0.15, 0.30)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    mu_start: float = 0.996
    mu_end: float = 1.0
    patch_k: int = 8
    patch_t: int = 25
    embed_dim: int = 256
    enc_heads: int = 8
    enc_blocks: int = 6
    pred_dim: int = 192
    pred_heads: int = 6
    pred_blocks: int = 3
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if not (0 < self.mu_start <= 1 and 0 < self.mu_end <= 1):
            raise ValueError("momentum endpoints must lie in (0, 1]")
        for v, name in ((self.lam, "lam"), (self.eta, "eta")):
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            in_dim=channels * self.patch_k * self.patch_t,
            embed_dim=self.embed_dim,
            enc_heads=self.enc_heads,
            enc_blocks=self.enc_blocks,
            pred_dim=self.pred_dim,
            pred_heads=self.pred_heads,
            pred_blocks=self.pred_blocks,
        )

    def patch_config(self, subcarriers: int, time_steps: int) -> PatchConfig:
        return PatchConfig.from_dims(
            subcarriers, time_steps, self.patch_k, self.patch_t, self.embed_dim
        )


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    loss: float
    target_std: float


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Elementwise 0.5*r^2 (|r|<1) else |r|-0.5, averaged over dims then rows."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    r = pred - target
    a = np.abs(r)
    return float(np.where(a < 1.0, 0.5 * r * r, a - 0.5).mean())


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    r = pred - target
    return np.where(np.abs(r) < 1.0, r, np.sign(r)) / r.size


def mu_schedule(
    step: int, total_steps: int, mu_start: float = 0.996, mu_end: float = 1.0
) -> float:
    """Linear EMA momentum ramp: mu(0)=mu_start, mu(total_steps-1)=mu_end."""
    if total_steps <= 1:
        return mu_end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return mu_start + (mu_end - mu_start) * frac


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def _decays(name: str) -> bool:
    # No decay on layer-norm scale/shift or the predictor mask token.
    parts = name.split(".")
    if parts[-1] == "mask_token":
        return False
    return not (len(parts) >= 2 and parts[-2].startswith("ln"))


def adamw_step(params, grads, m, v, t, lr, weight_decay):
    """One decoupled-weight-decay Adam step; returns new (params, m, v).

    ``t`` is the 1-based step count for bias correction.
    """
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in sorted(params):
        g = grads[name]
        mn = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        vn = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * g * g
        update = (mn / bc1) / (np.sqrt(vn / bc2) + ADAM_EPS)
        p = params[name] - lr * update
        if weight_decay and _decays(name):
            p = p - lr * weight_decay * params[name]
        new_p[name], new_m[name], new_v[name] = p, mn, vn
    return new_p, new_m, new_v


# ---------------------------------------------------------------------------
# Per-sample JEPA loss
# ---------------------------------------------------------------------------


def _tokens(params, rows, pos_flat):
    return rows @ params["patch_embed.w"].T + params["patch_embed.b"] + pos_flat


def jepa_targets(params, target, mcfg: ModelConfig, rows, pos_flat, mask: MaskSpec):
    """Stop-gradient target latents: full sequence through the target encoder."""
    tokens = _tokens(params, rows, pos_flat)
    h_full = net.encode(target, tokens, mcfg.enc_heads, mcfg.enc_blocks)
    return h_full[mask.target]


def jepa_loss(params, mcfg: ModelConfig, rows, pos_flat, mask: MaskSpec, h_tgt):
    """Forward-only loss with the target latents held constant (stop-gradient)."""
    tokens = _tokens(params, rows, pos_flat)
    h_ctx = net.encode(
        net.subdict(params, "enc."), tokens[mask.context], mcfg.enc_heads, mcfg.enc_blocks
    )
    pred = net.predict_targets(
        net.subdict(params, "pred."),
        h_ctx,
        pos_flat[mask.target],
        mcfg.pred_heads,
        mcfg.pred_blocks,
    )
    return smooth_l1(pred, h_tgt)


def jepa_loss_and_grads(params, target, mcfg: ModelConfig, rows, pos_flat, mask: MaskSpec):
    """Loss plus exact gradients for every trainable tensor.

    Returns ``(loss, grads, h_tgt)``; ``grads`` has no entries for the target
    encoder (stop-gradient) and ``h_tgt`` feeds the collapse monitor.
    """
    tokens = _tokens(params, rows, pos_flat)
    h_tgt = net.encode(target, tokens, mcfg.enc_heads, mcfg.enc_blocks)[mask.target]

    h_ctx, c_enc = net.encode_fwd(
        net.subdict(params, "enc."), tokens[mask.context], mcfg.enc_heads, mcfg.enc_blocks
    )
    pred, c_pred = net.predict_fwd(
        net.subdict(params, "pred."),
        h_ctx,
        pos_flat[mask.target],
        mcfg.pred_heads,
        mcfg.pred_blocks,
    )
    loss = smooth_l1(pred, h_tgt)

    dh_ctx, g_pred = net.predict_bwd(smooth_l1_grad(pred, h_tgt), c_pred)
    dctx, g_enc = net.encode_bwd(dh_ctx, c_enc)
    grads = {"pred." + k: g for k, g in g_pred.items()}
    grads.update({"enc." + k: g for k, g in g_enc.items()})
    grads["patch_embed.w"] = dctx.T @ rows[mask.context]
    grads["patch_embed.b"] = dctx.sum(axis=0)
    return loss, grads, h_tgt


# ---------------------------------------------------------------------------
# Steps and the epoch loop
# ---------------------------------------------------------------------------


def _tree_reduce(items, combine):
    # Fixed pairwise reduction: identical result for any worker schedule.
    items = list(items)
    while len(items) > 1:
        nxt = [combine(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _step_masks(windows, config: PretrainConfig, patch_cfg, step: int):
    rng = stream(config.seed, "mask", step)
    return [
        sample_mask(
            w,
            config.strategy,
            patch_cfg,
            rng,
            lam=config.lam,
            eta=config.eta,
            eps_stab=config.eps_stab,
            area_range=config.area_range,
            aspect_range=config.aspect_range,
        )
        for w in windows
    ]


def pretrain_step(
    state: ModelState,
    windows: Sequence[CsiWindow],
    config: PretrainConfig,
    patch_cfg: PatchConfig,
    pos_flat: np.ndarray,
    total_steps: int,
    epoch: int = 1,
    threads: int = 1,
) -> tuple[ModelState, LossRecord]:
    """One optimizer step over a batch; returns the new state and its record."""
    if len(windows) == 0:
        raise ValueError("empty batch")
    masks = _step_masks(windows, config, patch_cfg, state.step)
    rows = [extract_patches(w.values, patch_cfg) for w in windows]

    def one(i):
        return jepa_loss_and_grads(
            state.params, state.target, state.config, rows[i], pos_flat, masks[i]
        )

    if threads > 1 and len(windows) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(windows))))
    else:
        results = [one(i) for i in range(len(windows))]

    losses = [r[0] for r in results]
    grads = _tree_reduce([r[1] for r in results], lambda a, b: {k: a[k] + b[k] for k in a})
    scale = 1.0 / len(windows)
    grads = {k: g * scale for k, g in grads.items()}
    batch_loss = float(_tree_reduce(losses, lambda a, b: a + b) * scale)
    if not np.isfinite(batch_loss):
        raise FloatingPointError(f"non-finite batch loss at step {state.step}")

    all_targets = np.concatenate([r[2] for r in results], axis=0)
    target_std = float(all_targets.std(axis=0).mean())

    new_params, new_m, new_v = adamw_step(
        state.params,
        grads,
        state.opt_m,
        state.opt_v,
        state.step + 1,
        config.learning_rate,
        config.weight_decay,
    )
    mu = mu_schedule(state.step, total_steps, config.mu_start, config.mu_end)
    new_target = net.ema_update(net.subdict(new_params, "enc."), state.target, mu)

    new_state = ModelState(
        config=state.config,
        params=new_params,
        target=new_target,
        opt_m=new_m,
        opt_v=new_v,
        step=state.step + 1,
    )
    return new_state, LossRecord(state.step, epoch, batch_loss, target_std)


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / f"checkpoint_epoch_{epoch:03d}.ckpt"


def pretrain(
    windows: Sequence[CsiWindow],
    config: PretrainConfig,
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    threads: int = 1,
) -> tuple[ModelState, list[LossRecord]]:
    """Seeded epochs over an unlabeled corpus of standardized windows.

    Writes ``checkpoint_epoch_NNN.ckpt`` every ``checkpoint_every`` epochs
    plus the final epoch, and ``loss_log.csv``, into ``out_dir`` when given.
    ``resume`` restarts from a mid-run checkpoint and reproduces the exact
    loss stream of an uninterrupted run.
    """
    if len(windows) == 0:
        raise ValueError("empty pretraining corpus")
    first = windows[0]
    patch_cfg = config.patch_config(first.subcarriers, first.time_steps)
    mcfg = config.model_config(first.channels)
    pos_flat = sincos_positions(patch_cfg).flat.astype(np.float32)

    steps_per_epoch = (len(windows) + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs

    if resume is not None:
        state = net.load_checkpoint(resume, mcfg)
        if state.step % steps_per_epoch != 0:
            raise ValueError(
                f"checkpoint step {state.step} is not an epoch boundary "
                f"({steps_per_epoch} steps/epoch)"
            )
        start_epoch = state.step // steps_per_epoch
    else:
        state = net.init_model(mcfg, config.seed)
        start_epoch = 0

    records: list[LossRecord] = []
    for epoch in range(start_epoch, config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(len(windows))
        for b in range(steps_per_epoch):
            batch = [windows[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            state, rec = pretrain_step(
                state, batch, config, patch_cfg, pos_flat, total_steps, epoch + 1, threads
            )
            records.append(rec)
        logger.info(
            "epoch %d/%d loss %.5f target_std %.4f",
            epoch + 1,
            config.epochs,
            float(np.mean([r.loss for r in records[-steps_per_epoch:]])),
            records[-1].target_std,
        )
        if out_dir is not None:
            is_last = epoch + 1 == config.epochs
            if is_last or (epoch + 1) % config.checkpoint_every == 0:
                net.save_checkpoint(state, checkpoint_path(Path(out_dir), epoch + 1))
    if out_dir is not None:
        write_loss_log(records, Path(out_dir) / "loss_log.csv")
    return state, records


def write_loss_log(records: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "loss", "target_std"])
        for r in records:
            writer.writerow([r.step, r.epoch, repr(r.loss), repr(r.target_std)])
