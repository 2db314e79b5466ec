"""Frozen-encoder adaptation: pooled embeddings, linear/MLP heads, budgets.

The pretrained online encoder is never updated here -- every probe run
checksums its parameters before and after training and refuses to continue on
drift. Label budgets subsample the training split with nested, class-stratified
prefixes: the budget-10 subset is contained in the budget-100 subset, so
budget curves are monotone in information.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import net
from .core import Corpus, CsiWindow, PatchConfig
from .net import ModelConfig, ModelState
from .rng import stream
from .tokenizer import extract_patches, sincos_positions
from .trainer import adamw_step

logger = logging.getLogger(__name__)

__all__ = [
    "BudgetSpec",
    "FrozenEncoder",
    "ProbeHead",
    "ProbeRecord",
    "EvalResult",
    "embed_pool",
    "nested_budget_order",
    "train_probe",
    "evaluate",
    "run_probe",
    "write_probe_record",
    "load_probe_records",
]

HEAD_KINDS = ("linear", "mlp")
DEFAULT_BUDGETS = (10, 100, 500, 1000)
MAX_BUDGET_CAP = 10_000


@dataclass(frozen=True)
class BudgetSpec:
    """Label budgets; the top budget is the capped training-split size."""

    budgets: tuple[int, ...] = DEFAULT_BUDGETS
    max_cap: int = MAX_BUDGET_CAP
    seed: int = 0

    def resolve(self, split_size: int) -> list[int]:
        b_max = min(split_size, self.max_cap)
        usable = {int(b) for b in self.budgets if 0 < b <= b_max}
        usable.add(b_max)
        return sorted(usable)


@dataclass
class FrozenEncoder:
    """Read-only bundle of the pieces needed to embed windows."""

    model_cfg: ModelConfig
    patch_cfg: PatchConfig
    params: dict[str, np.ndarray]  # patch_embed.* and enc.*
    pos_flat: np.ndarray

    @classmethod
    def from_state(cls, state: ModelState, patch_cfg: PatchConfig) -> "FrozenEncoder":
        params = {
            k: v for k, v in state.params.items() if k.startswith(("patch_embed.", "enc."))
        }
        pos = sincos_positions(patch_cfg).flat.astype(np.float32)
        return cls(state.config, patch_cfg, params, pos)

    @classmethod
    def from_checkpoint(cls, path, model_cfg: ModelConfig, patch_cfg: PatchConfig):
        return cls.from_state(net.load_checkpoint(path, model_cfg), patch_cfg)

    def checksum(self) -> str:
        return net.params_checksum(self.params)

    def embed(self, window: CsiWindow) -> np.ndarray:
        return embed_pool(self, window)

    def embed_corpus(self, corpus: Corpus | Sequence[CsiWindow]) -> np.ndarray:
        windows = corpus.windows if isinstance(corpus, Corpus) else corpus
        return np.stack([embed_pool(self, w) for w in windows])


def embed_pool(frozen: FrozenEncoder, window: CsiWindow) -> np.ndarray:
    """Mean over all token latents of the full (unmasked) sequence."""
    rows = extract_patches(window.values, frozen.patch_cfg)
    tokens = (
        rows @ frozen.params["patch_embed.w"].T
        + frozen.params["patch_embed.b"]
        + frozen.pos_flat
    )
    h = net.encode(
        net.subdict(frozen.params, "enc."),
        tokens,
        frozen.model_cfg.enc_heads,
        frozen.model_cfg.enc_blocks,
    )
    return h.mean(axis=0)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


@dataclass
class ProbeHead:
    """LayerNorm over the pooled vector, then a linear or 2-layer MLP classifier."""

    kind: str
    num_classes: int
    params: dict[str, np.ndarray]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return _head_fwd(self.params, self.kind, features)[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def _head_shapes(kind: str, dim: int, num_classes: int, hidden: int):
    shapes = {"ln.g": (dim,), "ln.b": (dim,)}
    if kind == "linear":
        shapes.update({"out.w": (num_classes, dim), "out.b": (num_classes,)})
    elif kind == "mlp":
        shapes.update(
            {
                "fc1.w": (hidden, dim),
                "fc1.b": (hidden,),
                "out.w": (num_classes, hidden),
                "out.b": (num_classes,),
            }
        )
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    return shapes


def _init_head(kind: str, dim: int, num_classes: int, hidden: int, seed: int) -> ProbeHead:
    params = {}
    for name, shape in _head_shapes(kind, dim, num_classes, hidden).items():
        leaf = name.split(".")[-1]
        if name == "ln.g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:
            arr = net._trunc_normal(stream(seed, "head", kind, name), shape)
        params[name] = arr.astype(np.float32)
    return ProbeHead(kind, num_classes, params)


def _head_fwd(params, kind, x):
    normed, c_ln = net._layernorm_fwd(x, params["ln.g"], params["ln.b"])
    if kind == "linear":
        out, c_out = net._linear_fwd(normed, params["out.w"], params["out.b"])
        return out, (c_ln, None, None, c_out)
    h, c_fc1 = net._linear_fwd(normed, params["fc1.w"], params["fc1.b"])
    g, c_gelu = net._gelu_fwd(h)
    out, c_out = net._linear_fwd(g, params["out.w"], params["out.b"])
    return out, (c_ln, c_fc1, c_gelu, c_out)


def _head_bwd(dlogits, cache, kind):
    c_ln, c_fc1, c_gelu, c_out = cache
    grads = {}
    dx, dw, db = net._linear_bwd(dlogits, c_out)
    grads["out.w"], grads["out.b"] = dw, db
    if kind == "mlp":
        dx = net._gelu_bwd(dx, c_gelu)
        dx, dw1, db1 = net._linear_bwd(dx, c_fc1)
        grads["fc1.w"], grads["fc1.b"] = dw1, db1
    _, dg, dbn = net._layernorm_bwd(dx, c_ln)
    grads["ln.g"], grads["ln.b"] = dg, dbn
    return grads


def _cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = labels.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# ---------------------------------------------------------------------------
# Budget selection
# ---------------------------------------------------------------------------


def nested_budget_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Priority order whose prefixes are nested, class-balanced subsets."""
    labels = np.asarray(labels)
    pools = [rng.permutation(np.where(labels == c)[0]) for c in np.unique(labels)]
    order = []
    depth = 0
    while any(depth < len(p) for p in pools):
        for p in pools:
            if depth < len(p):
                order.append(int(p[depth]))
        depth += 1
    return np.asarray(order, dtype=np.int64)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


def train_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    kind: str,
    num_classes: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    max_epochs: int = 20,
    patience: int = 5,
    hidden: int = 256,
) -> tuple[ProbeHead, int]:
    """AdamW on frozen features with early stopping on validation accuracy.

    Ties in accuracy break toward lower validation loss. Returns the
    best-validation head and the number of epochs actually run.
    """
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind!r}")
    head = _init_head(kind, train_x.shape[1], num_classes, hidden, seed)
    m = {k: np.zeros_like(v) for k, v in head.params.items()}
    v = {k: np.zeros_like(v_) for k, v_ in head.params.items()}
    best = None  # (acc, -loss) maximized
    best_params = {k: p.copy() for k, p in head.params.items()}
    since_improve = 0
    epochs_ran = 0
    t = 0
    n = train_x.shape[0]
    for epoch in range(max_epochs):
        epochs_ran = epoch + 1
        order = stream(seed, "probe-shuffle", epoch).permutation(n)
        for b0 in range(0, n, batch_size):
            idx = order[b0 : b0 + batch_size]
            logits, cache = _head_fwd(head.params, kind, train_x[idx])
            _, dlogits = _cross_entropy(logits, train_y[idx])
            grads = _head_bwd(dlogits, cache, kind)
            t += 1
            head.params, m, v = adamw_step(head.params, grads, m, v, t, lr, 0.0)
        val_logits = head.logits(val_x)
        val_loss, _ = _cross_entropy(val_logits, val_y)
        val_acc = float((np.argmax(val_logits, axis=1) == val_y).mean())
        score = (val_acc, -val_loss)
        if best is None or score > best:
            best = score
            best_params = {k: p.copy() for k, p in head.params.items()}
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= patience:
                break
    return ProbeHead(kind, num_classes, best_params), epochs_ran


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    weighted_f1: float
    per_class_support: tuple[int, ...]
    per_class_f1: tuple[float, ...]


def evaluate(head: ProbeHead, features: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Accuracy and support-weighted F1 over a test split."""
    if features.shape[0] == 0:
        raise ValueError("empty test split")
    pred = head.predict(features)
    labels = np.asarray(labels)
    total = labels.shape[0]
    supports, f1s = [], []
    for c in range(head.num_classes):
        tp = int(np.sum((pred == c) & (labels == c)))
        fp = int(np.sum((pred == c) & (labels != c)))
        fn = int(np.sum((pred != c) & (labels == c)))
        support = tp + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        supports.append(support)
        f1s.append(f1)
    weighted = float(sum(s * f for s, f in zip(supports, f1s)) / total)
    accuracy = float((pred == labels).mean())
    return EvalResult(accuracy, weighted, tuple(supports), tuple(f1s))


@dataclass(frozen=True)
class ProbeRecord:
    task: str
    head: str
    budget: int
    seed: int
    accuracy: float
    f1: float
    epochs_ran: int


def run_probe(
    frozen: FrozenEncoder,
    train: Corpus,
    val: Corpus,
    test: Corpus,
    kind: str,
    budget: int,
    seed: int,
    task: str = "task",
    features: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    lr: float = 1e-3,
    hidden: int = 256,
) -> ProbeRecord:
    """Budgeted subset -> head training -> test metrics, all frozen-encoder.

    ``features`` may carry precomputed (train, val, test) embeddings so
    budget sweeps share one embedding pass.
    """
    if budget <= 0 or budget > len(train):
        raise ValueError(f"budget {budget} outside (0, {len(train)}]")
    checksum_before = frozen.checksum()
    if features is None:
        features = (
            frozen.embed_corpus(train),
            frozen.embed_corpus(val),
            frozen.embed_corpus(test),
        )
    train_x, val_x, test_x = features
    train_y = train.labels_array
    order = nested_budget_order(train_y, stream(seed, "budget", task))
    subset = order[:budget]
    sub_y = train_y[subset]
    present = set(int(c) for c in np.unique(sub_y))
    missing = [c for c in range(train.num_classes) if c not in present]
    if missing:
        logger.warning("budget %d subset is missing classes %s", budget, missing)
    # Pooled latents carry a large sample-independent offset at desk scale;
    # per-dimension standardization (stats from the budgeted subset only)
    # conditions the head's 20-epoch optimization without information leaks.
    mu = train_x[subset].mean(axis=0)
    sd = train_x[subset].std(axis=0) + 1e-6
    head, epochs_ran = train_probe(
        ((train_x[subset] - mu) / sd).astype(np.float32),
        sub_y,
        ((val_x - mu) / sd).astype(np.float32),
        val.labels_array,
        kind,
        train.num_classes,
        seed,
        lr=lr,
        hidden=hidden,
    )
    result = evaluate(head, ((test_x - mu) / sd).astype(np.float32), test.labels_array)
    if frozen.checksum() != checksum_before:
        raise RuntimeError("frozen encoder parameters changed during probe training")
    return ProbeRecord(
        task=task,
        head=kind,
        budget=budget,
        seed=seed,
        accuracy=result.accuracy,
        f1=result.weighted_f1,
        epochs_ran=epochs_ran,
    )


def write_probe_record(record: ProbeRecord, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(record), indent=2) + "\n")


def load_probe_records(paths: Sequence[str | Path]) -> list[ProbeRecord]:
    records = []
    for p in paths:
        data = json.loads(Path(p).read_text())
        records.append(ProbeRecord(**data))
    return records
