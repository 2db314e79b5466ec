"""Transformer kernel: forward passes with caches and exact reverse-mode backward.

Parameters live in flat ``{name: ndarray}`` dicts. Trainable state uses the
prefixes ``patch_embed.``, ``enc.`` (online encoder), ``pred.`` (predictor);
the EMA target encoder keeps unprefixed encoder keys. All ops preserve the
dtype of their inputs, so the same code runs float32 training and float64
gradient checks.

Blocks are pre-layer-norm ViT style: ``x += Attn(LN(x)); x += MLP(LN(x))``,
full (uncausal) attention, GELU, MLP hidden 4*D, final LN after the encoder
stack. The predictor projects context latents to its own width, appends one
``mask_token + in_proj(position)`` slot per target, runs its blocks, and maps
the mask slots back to encoder width with a linear head.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import erf

from . import core

__all__ = [
    "ModelConfig",
    "ModelState",
    "encoder_param_shapes",
    "predictor_param_shapes",
    "trainable_shapes",
    "init_model",
    "encode",
    "encode_fwd",
    "encode_bwd",
    "predict_targets",
    "predict_fwd",
    "predict_bwd",
    "ema_update",
    "subdict",
    "params_checksum",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5
MLP_RATIO = 4

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dims; defaults follow the full-scale configuration."""

    in_dim: int
    embed_dim: int = 256
    enc_heads: int = 8
    enc_blocks: int = 6
    pred_dim: int = 192
    pred_heads: int = 6
    pred_blocks: int = 3

    def __post_init__(self) -> None:
        if self.in_dim <= 0 or self.embed_dim <= 0 or self.pred_dim <= 0:
            raise ValueError("model dims must be positive")
        if self.enc_blocks < 0 or self.pred_blocks < 0:
            raise ValueError("block counts must be non-negative")
        if self.embed_dim % self.enc_heads != 0:
            raise ValueError("embed_dim must be divisible by enc_heads")
        if self.pred_dim % self.pred_heads != 0:
            raise ValueError("pred_dim must be divisible by pred_heads")


# ---------------------------------------------------------------------------
# Primitive layers: forward returns (out, cache), backward consumes the cache
# ---------------------------------------------------------------------------


def _linear_fwd(x, w, b):
    return x @ w.T + b, (x, w)


def _linear_bwd(dy, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, (x, phi)


def _gelu_bwd(dy, cache):
    x, phi = cache
    return dy * (phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_fwd(x, p, pre, heads):
    n, d = x.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qkv, c_qkv = _linear_fwd(x, p[pre + "qkv.w"], p[pre + "qkv.b"])
    q = qkv[:, :d].reshape(n, heads, dh).transpose(1, 0, 2)
    k = qkv[:, d : 2 * d].reshape(n, heads, dh).transpose(1, 0, 2)
    v = qkv[:, 2 * d :].reshape(n, heads, dh).transpose(1, 0, 2)
    att = _softmax(q @ k.transpose(0, 2, 1) * scale)  # (H, n, n)
    merged = (att @ v).transpose(1, 0, 2).reshape(n, d)
    out, c_proj = _linear_fwd(merged, p[pre + "proj.w"], p[pre + "proj.b"])
    return out, (c_qkv, c_proj, q, k, v, att, scale)


def _attention_bwd(dout, cache, grads, pre):
    c_qkv, c_proj, q, k, v, att, scale = cache
    heads, n, dh = q.shape
    d = heads * dh
    dmerged, dwp, dbp = _linear_bwd(dout, c_proj)
    grads[pre + "proj.w"] = grads.get(pre + "proj.w", 0) + dwp
    grads[pre + "proj.b"] = grads.get(pre + "proj.b", 0) + dbp
    dctx = dmerged.reshape(n, heads, dh).transpose(1, 0, 2)
    datt = dctx @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ dctx
    dscore = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dq = dscore @ k
    dk = dscore.transpose(0, 2, 1) @ q
    dqkv = np.empty((n, 3 * d), dtype=dout.dtype)
    dqkv[:, :d] = dq.transpose(1, 0, 2).reshape(n, d)
    dqkv[:, d : 2 * d] = dk.transpose(1, 0, 2).reshape(n, d)
    dqkv[:, 2 * d :] = dv.transpose(1, 0, 2).reshape(n, d)
    dx, dwq, dbq = _linear_bwd(dqkv, c_qkv)
    grads[pre + "qkv.w"] = grads.get(pre + "qkv.w", 0) + dwq
    grads[pre + "qkv.b"] = grads.get(pre + "qkv.b", 0) + dbq
    return dx


def _block_fwd(x, p, pre, heads):
    h1, c_ln1 = _layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, c_att = _attention_fwd(h1, p, pre, heads)
    x1 = x + a
    h2, c_ln2 = _layernorm_fwd(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    f1, c_fc1 = _linear_fwd(h2, p[pre + "fc1.w"], p[pre + "fc1.b"])
    g1, c_gelu = _gelu_fwd(f1)
    f2, c_fc2 = _linear_fwd(g1, p[pre + "fc2.w"], p[pre + "fc2.b"])
    return x1 + f2, (c_ln1, c_att, c_ln2, c_fc1, c_gelu, c_fc2)


def _block_bwd(dout, cache, grads, pre):
    c_ln1, c_att, c_ln2, c_fc1, c_gelu, c_fc2 = cache
    dg1, dw2, db2 = _linear_bwd(dout, c_fc2)
    grads[pre + "fc2.w"] = grads.get(pre + "fc2.w", 0) + dw2
    grads[pre + "fc2.b"] = grads.get(pre + "fc2.b", 0) + db2
    df1 = _gelu_bwd(dg1, c_gelu)
    dh2, dw1, db1 = _linear_bwd(df1, c_fc1)
    grads[pre + "fc1.w"] = grads.get(pre + "fc1.w", 0) + dw1
    grads[pre + "fc1.b"] = grads.get(pre + "fc1.b", 0) + db1
    dx1_mlp, dg_ln2, db_ln2 = _layernorm_bwd(dh2, c_ln2)
    grads[pre + "ln2.g"] = grads.get(pre + "ln2.g", 0) + dg_ln2
    grads[pre + "ln2.b"] = grads.get(pre + "ln2.b", 0) + db_ln2
    dx1 = dout + dx1_mlp
    dh1 = _attention_bwd(dx1, c_att, grads, pre)
    dx_ln1, dg_ln1, db_ln1 = _layernorm_bwd(dh1, c_ln1)
    grads[pre + "ln1.g"] = grads.get(pre + "ln1.g", 0) + dg_ln1
    grads[pre + "ln1.b"] = grads.get(pre + "ln1.b", 0) + db_ln1
    return dx1 + dx_ln1


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activations after {what}")


def _blocks_fwd(p, x, heads, n_blocks, label):
    caches = []
    for i in range(n_blocks):
        x, c = _block_fwd(x, p, f"blk{i}.", heads)
        _check_finite(x, f"{label} block {i}")
        caches.append(c)
    return x, caches


def _blocks_bwd(dx, caches, grads):
    for i in reversed(range(len(caches))):
        dx = _block_bwd(dx, caches[i], grads, f"blk{i}.")
    return dx


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def encode_fwd(p, tokens, heads, n_blocks):
    """Pre-LN transformer over positioned tokens; returns (latents, cache)."""
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"expected (n>=1, d) token matrix, got {tokens.shape}")
    x, caches = _blocks_fwd(p, tokens, heads, n_blocks, "encoder")
    out, c_f = _layernorm_fwd(x, p["ln_f.g"], p["ln_f.b"])
    _check_finite(out, "encoder final layer-norm")
    return out, (caches, c_f)


def encode(p, tokens, heads, n_blocks):
    return encode_fwd(p, tokens, heads, n_blocks)[0]


def encode_bwd(dout, cache, grads=None):
    """Backward through :func:`encode_fwd`; returns (dtokens, grads)."""
    caches, c_f = cache
    if grads is None:
        grads = {}
    dx, dg, db = _layernorm_bwd(dout, c_f)
    grads["ln_f.g"] = grads.get("ln_f.g", 0) + dg
    grads["ln_f.b"] = grads.get("ln_f.b", 0) + db
    dx = _blocks_bwd(dx, caches, grads)
    return dx, grads


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------


def predict_fwd(p, h_context, target_positions, heads, n_blocks):
    """Predict target latents from context latents plus target positions."""
    if h_context.shape[0] < 1 or target_positions.shape[0] < 1:
        raise ValueError("need at least one context latent and one target position")
    n_ctx = h_context.shape[0]
    cin, c_ctx = _linear_fwd(h_context, p["in_proj.w"], p["in_proj.b"])
    pin, c_pos = _linear_fwd(target_positions, p["in_proj.w"], p["in_proj.b"])
    seq = np.concatenate([cin, pin + p["mask_token"]], axis=0)
    seq, caches = _blocks_fwd(p, seq, heads, n_blocks, "predictor")
    out, c_head = _linear_fwd(seq[n_ctx:], p["head.w"], p["head.b"])
    _check_finite(out, "predictor head")
    return out, (n_ctx, c_ctx, c_pos, caches, c_head)


def predict_targets(p, h_context, target_positions, heads, n_blocks):
    return predict_fwd(p, h_context, target_positions, heads, n_blocks)[0]


def predict_bwd(dout, cache, grads=None):
    """Backward through :func:`predict_fwd`; returns (dh_context, grads)."""
    n_ctx, c_ctx, c_pos, caches, c_head = cache
    if grads is None:
        grads = {}
    dmask_rows, dwh, dbh = _linear_bwd(dout, c_head)
    grads["head.w"] = grads.get("head.w", 0) + dwh
    grads["head.b"] = grads.get("head.b", 0) + dbh
    dseq = np.zeros((n_ctx + dmask_rows.shape[0], dmask_rows.shape[1]), dtype=dout.dtype)
    dseq[n_ctx:] = dmask_rows
    dseq = _blocks_bwd(dseq, caches, grads)
    grads["mask_token"] = grads.get("mask_token", 0) + dseq[n_ctx:].sum(axis=0)
    _, dwp, dbp = _linear_bwd(dseq[n_ctx:], c_pos)  # positions are constants
    dh_ctx, dwc, dbc = _linear_bwd(dseq[:n_ctx], c_ctx)
    grads["in_proj.w"] = grads.get("in_proj.w", 0) + dwp + dwc
    grads["in_proj.b"] = grads.get("in_proj.b", 0) + dbp + dbc
    return dh_ctx, grads


# ---------------------------------------------------------------------------
# Parameter tables, init, EMA, state
# ---------------------------------------------------------------------------


def _block_shapes(d, n_blocks):
    shapes = {}
    for i in range(n_blocks):
        pre = f"blk{i}."
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        shapes[pre + "qkv.w"] = (3 * d, d)
        shapes[pre + "qkv.b"] = (3 * d,)
        shapes[pre + "proj.w"] = (d, d)
        shapes[pre + "proj.b"] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "fc1.w"] = (MLP_RATIO * d, d)
        shapes[pre + "fc1.b"] = (MLP_RATIO * d,)
        shapes[pre + "fc2.w"] = (d, MLP_RATIO * d)
        shapes[pre + "fc2.b"] = (d,)
    return shapes


def encoder_param_shapes(config: ModelConfig):
    shapes = _block_shapes(config.embed_dim, config.enc_blocks)
    shapes["ln_f.g"] = (config.embed_dim,)
    shapes["ln_f.b"] = (config.embed_dim,)
    return shapes


def predictor_param_shapes(config: ModelConfig):
    d, dp = config.embed_dim, config.pred_dim
    shapes = {
        "in_proj.w": (dp, d),
        "in_proj.b": (dp,),
        "mask_token": (dp,),
        "head.w": (d, dp),
        "head.b": (d,),
    }
    shapes.update(_block_shapes(dp, config.pred_blocks))
    return shapes


def trainable_shapes(config: ModelConfig):
    """Full-name shape table for every gradient-trained tensor."""
    shapes = {
        "patch_embed.w": (config.embed_dim, config.in_dim),
        "patch_embed.b": (config.embed_dim,),
    }
    shapes.update({"enc." + k: v for k, v in encoder_param_shapes(config).items()})
    shapes.update({"pred." + k: v for k, v in predictor_param_shapes(config).items()})
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _init_tensor(name, shape, seed, in_dim, dtype):
    from .rng import stream

    leaf = name.rsplit(".", 1)[-1] if "." in name else name
    if name == "patch_embed.w":
        bound = 1.0 / math.sqrt(in_dim)
        arr = stream(seed, "init", name).uniform(-bound, bound, size=shape)
    elif name.endswith("mask_token"):
        arr = _trunc_normal(stream(seed, "init", name), shape)
    elif leaf == "w":
        arr = _trunc_normal(stream(seed, "init", name), shape)
    elif leaf == "g":
        arr = np.ones(shape)
    else:  # biases and LN shifts
        arr = np.zeros(shape)
    return arr.astype(dtype)


@dataclass
class ModelState:
    """Online encoder + predictor parameters, EMA target, optimizer moments."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int = 0


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    """Deterministic init; each tensor draws from its own keyed stream.

    The target encoder starts as a copy of the online encoder blocks.
    """
    params = {
        name: _init_tensor(name, shape, seed, config.in_dim, dtype)
        for name, shape in trainable_shapes(config).items()
    }
    target = {k[len("enc.") :]: v.copy() for k, v in params.items() if k.startswith("enc.")}
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(
        config=config,
        params=params,
        target=target,
        opt_m=zeros,
        opt_v={k: np.zeros_like(v) for k, v in params.items()},
        step=0,
    )


def ema_update(online: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray], mu: float):
    """xi <- mu*xi + (1-mu)*theta elementwise over every tensor in ``target``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {mu}")
    if mu == 1.0:  # exact freeze, no float round trip
        return dict(target)
    return {k: mu * target[k] + (1.0 - mu) * online[k] for k in target}


def subdict(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def params_checksum(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over sorted (name, bytes); used to prove the encoder stays frozen."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def _state_shape_table(config: ModelConfig):
    shapes = {}
    for name, shape in trainable_shapes(config).items():
        shapes["params." + name] = shape
        shapes["opt_m." + name] = shape
        shapes["opt_v." + name] = shape
    for name, shape in encoder_param_shapes(config).items():
        shapes["target." + name] = shape
    shapes["meta.step"] = (1,)
    return shapes


def save_checkpoint(state: ModelState, path) -> None:
    tensors: dict[str, np.ndarray] = {"meta.step": np.array([state.step], dtype=np.float32)}
    tensors.update({"params." + k: v for k, v in state.params.items()})
    tensors.update({"target." + k: v for k, v in state.target.items()})
    tensors.update({"opt_m." + k: v for k, v in state.opt_m.items()})
    tensors.update({"opt_v." + k: v for k, v in state.opt_v.items()})
    core.save_tensors(path, tensors)


def load_checkpoint(path, config: ModelConfig) -> ModelState:
    """Load a checkpoint, validating every tensor shape against ``config``."""
    tensors = core.load_tensors(path, expected_shapes=_state_shape_table(config))
    extra = set(tensors) - set(_state_shape_table(config))
    if extra:
        raise core.FileFormatError(f"{path}: unexpected tensors {sorted(extra)[:3]}")
    return ModelState(
        config=config,
        params=subdict(tensors, "params."),
        target=subdict(tensors, "target."),
        opt_m=subdict(tensors, "opt_m."),
        opt_v=subdict(tensors, "opt_v."),
        step=int(round(float(tensors["meta.step"][0]))),
    )
