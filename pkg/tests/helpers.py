"""Shared test oracles: straight-line forward reimplementation + finite differences.

Everything here is deliberately loop-based and independent of the library's
vectorized code paths.
"""

import math

import numpy as np

LN_EPS = 1e-5


def layernorm_oracle(x, g, b):
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i].astype(np.float64)
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = (row - mu) / math.sqrt(var + LN_EPS) * g + b
    return out


def gelu_oracle(x):
    flat = x.reshape(-1)
    out = np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2))) for v in flat])
    return out.reshape(x.shape)


def attention_oracle(x, p, pre, heads):
    n, d = x.shape
    dh = d // heads
    wqkv, bqkv = p[pre + "qkv.w"], p[pre + "qkv.b"]
    qkv = np.array([[row @ wqkv[j] + bqkv[j] for j in range(3 * d)] for row in x])
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    merged = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, sl] @ k[j, sl] for j in range(n)]) / math.sqrt(dh)
            weights = np.exp(scores - scores.max())
            weights = weights / weights.sum()
            merged[i, sl] = sum(weights[j] * v[j, sl] for j in range(n))
    return merged @ p[pre + "proj.w"].T + p[pre + "proj.b"]


def block_oracle(x, p, pre, heads):
    x1 = x + attention_oracle(layernorm_oracle(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, heads)
    h2 = layernorm_oracle(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    f1 = h2 @ p[pre + "fc1.w"].T + p[pre + "fc1.b"]
    f2 = gelu_oracle(f1) @ p[pre + "fc2.w"].T + p[pre + "fc2.b"]
    return x1 + f2


def encode_oracle(p, tokens, heads, n_blocks):
    x = tokens.astype(np.float64)
    for i in range(n_blocks):
        x = block_oracle(x, p, f"blk{i}.", heads)
    return layernorm_oracle(x, p["ln_f.g"], p["ln_f.b"])


def predict_oracle(p, h_ctx, tpos, heads, n_blocks):
    cin = h_ctx @ p["in_proj.w"].T + p["in_proj.b"]
    pin = tpos @ p["in_proj.w"].T + p["in_proj.b"] + p["mask_token"]
    x = np.concatenate([cin, pin], axis=0)
    for i in range(n_blocks):
        x = block_oracle(x, p, f"blk{i}.", heads)
    return x[h_ctx.shape[0] :] @ p["head.w"].T + p["head.b"]


def finite_diff_grads(loss_fn, params, step=1e-4):
    """Central finite differences of ``loss_fn(params)`` for every tensor element."""
    grads = {}
    for name in sorted(params):
        base = params[name]
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_fn(params)
            flat[idx] = orig - step
            down = loss_fn(params)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y):
    """Raw-feature nearest-centroid classifier accuracy."""
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    dists = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(dists, axis=1)]
    return float((pred == np.asarray(test_y)).mean())


def flatten_windows(windows):
    return np.stack([w.values.ravel() for w in windows])
