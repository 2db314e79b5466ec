"""Probe: pooling, budget nesting, head training, metrics, frozen guarantee."""

import numpy as np
import pytest
from helpers import encode_oracle

from csijepa import net, probe
from csijepa.core import Corpus, CsiWindow, PatchConfig, standardize
from csijepa.net import ModelConfig
from csijepa.probe import (
    BudgetSpec,
    FrozenEncoder,
    ProbeHead,
    evaluate,
    embed_pool,
    nested_budget_order,
    run_probe,
    train_probe,
    write_probe_record,
    load_probe_records,
)
from csijepa.rng import stream
from csijepa.tokenizer import sincos_positions

TINY_MCFG = ModelConfig(
    in_dim=4, embed_dim=8, enc_heads=2, enc_blocks=1, pred_dim=8, pred_heads=2, pred_blocks=1
)
TINY_PCFG = PatchConfig.from_dims(4, 4, 2, 2, embed_dim=8)


def tiny_frozen(seed=0):
    state = net.init_model(TINY_MCFG, seed)
    return FrozenEncoder.from_state(state, TINY_PCFG)


# ---------------------------------------------------------------------------
# embed_pool
# ---------------------------------------------------------------------------


def test_embed_pool_is_token_mean_with_identity_encoder(monkeypatch):
    frozen = tiny_frozen()
    frozen.params["patch_embed.w"] = np.eye(8, 4, dtype=np.float32) * 0.0
    monkeypatch.setattr(probe.net, "encode", lambda p, tokens, heads, blocks: tokens)
    captured = {}

    def fake_encode(p, tokens, heads, blocks):
        captured["tokens"] = tokens
        return tokens

    monkeypatch.setattr(probe.net, "encode", fake_encode)
    w = CsiWindow(np.zeros((1, 4, 4)))
    r = embed_pool(frozen, w)
    np.testing.assert_allclose(r, captured["tokens"].mean(axis=0), atol=1e-7)
    # permutation invariance of the pooled vector
    perm = stream(50, "probe", "perm").permutation(captured["tokens"].shape[0])
    np.testing.assert_allclose(r, captured["tokens"][perm].mean(axis=0), atol=1e-6)


def test_embed_pool_matches_loop_oracle():
    frozen = tiny_frozen(seed=3)
    rng = stream(51, "probe", "w")
    w = standardize(CsiWindow(rng.normal(size=(1, 4, 4))))
    got = embed_pool(frozen, w)

    from csijepa.tokenizer import extract_patches

    rows = extract_patches(w.values, TINY_PCFG)
    tokens = (
        rows @ frozen.params["patch_embed.w"].T
        + frozen.params["patch_embed.b"]
        + frozen.pos_flat
    )
    h = encode_oracle(net.subdict(frozen.params, "enc."), tokens, 2, 1)
    want = np.array([sum(h[i][d] for i in range(h.shape[0])) / h.shape[0] for d in range(8)])
    np.testing.assert_allclose(got, want, atol=1e-6)


# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


def test_budget_spec_resolution():
    spec = BudgetSpec()
    assert spec.resolve(5000) == [10, 100, 500, 1000, 5000]
    assert spec.resolve(20_000) == [10, 100, 500, 1000, 10_000]
    assert spec.resolve(500) == [10, 100, 500]
    assert spec.resolve(8) == [8]


def test_nested_budget_order_properties():
    rng = stream(52, "probe", "order")
    labels = np.array([0] * 40 + [1] * 40 + [2] * 20)
    order = nested_budget_order(labels, stream(53, "probe", "nest"))
    assert sorted(order.tolist()) == list(range(100))
    # nested: any prefix is a subset of any longer prefix (trivially true),
    # and prefixes are near class-balanced while all classes remain
    ten = labels[order[:10]]
    counts = np.bincount(ten, minlength=3)
    assert counts.min() >= 3  # 10 samples over 3 classes: at least 3 each
    sixty = labels[order[:60]]
    assert set(order[:10]) <= set(order[:60])
    assert np.bincount(sixty, minlength=3)[2] == 20  # class 2 exhausted, others fill
    # deterministic given the stream key
    again = nested_budget_order(labels, stream(53, "probe", "nest"))
    np.testing.assert_array_equal(order, again)


# ---------------------------------------------------------------------------
# head training
# ---------------------------------------------------------------------------


def _two_cluster_features(n_per, d=8, gap=4.0, seed=0):
    # directional separation so the pre-head LayerNorm cannot erase it
    rng = stream(54, "probe", "clusters", seed)
    direction = np.concatenate([np.full(d // 2, gap), np.full(d - d // 2, -gap)])
    a = rng.normal(size=(n_per, d)) + direction
    b = rng.normal(size=(n_per, d)) - direction
    x = np.concatenate([a, b]).astype(np.float32)
    y = np.array([0] * n_per + [1] * n_per)
    perm = rng.permutation(2 * n_per)
    return x[perm], y[perm]


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_probe_separates_two_clusters(kind):
    train_x, train_y = _two_cluster_features(40)
    val_x, val_y = _two_cluster_features(20, seed=1)
    head, epochs = train_probe(train_x, train_y, val_x, val_y, kind, 2, seed=7)
    assert epochs <= 20
    acc = float((head.predict(val_x) == val_y).mean())
    assert acc == 1.0


def test_probe_rejects_unknown_kind():
    x, y = _two_cluster_features(4)
    with pytest.raises(ValueError):
        train_probe(x, y, x, y, "conv", 2, seed=0)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _const_head(num_classes, winner=0):
    params = {
        "ln.g": np.ones(4, dtype=np.float32),
        "ln.b": np.zeros(4, dtype=np.float32),
        "out.w": np.zeros((num_classes, 4), dtype=np.float32),
        "out.b": np.eye(num_classes, dtype=np.float32)[winner] * 2.0,
    }
    return ProbeHead("linear", num_classes, params)


def test_evaluate_perfect_predictions():
    x = np.array([[3, 0, 0, 0], [-3, 0, 0, 0]] * 4, dtype=np.float32)
    y = np.array([0, 1] * 4)
    params = {
        "ln.g": np.ones(4, dtype=np.float32),
        "ln.b": np.zeros(4, dtype=np.float32),
        "out.w": np.array([[1, 0, 0, 0], [-1, 0, 0, 0]], dtype=np.float32),
        "out.b": np.zeros(2, dtype=np.float32),
    }
    res = evaluate(ProbeHead("linear", 2, params), x, y)
    assert res.accuracy == 1.0
    assert res.weighted_f1 == pytest.approx(1.0)


def test_evaluate_hand_computed_weighted_f1():
    # supports (3,1), everything predicted class 0
    x = stream(55, "probe", "f1").normal(size=(4, 4)).astype(np.float32)
    y = np.array([0, 0, 0, 1])
    res = evaluate(_const_head(2, winner=0), x, y)
    assert res.accuracy == pytest.approx(0.75)
    assert res.per_class_support == (3, 1)
    assert res.per_class_f1[0] == pytest.approx(6.0 / 7.0)
    assert res.per_class_f1[1] == 0.0
    assert res.weighted_f1 == pytest.approx(0.75 * 6.0 / 7.0)
    assert res.weighted_f1 == pytest.approx(0.642857, abs=1e-6)


def test_evaluate_matches_sklearn_weighted_f1():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = stream(56, "probe", "sk")
    x = rng.normal(size=(200, 4)).astype(np.float32)
    y = rng.integers(0, 3, size=200)
    head, _ = train_probe(x, y, x, y, "linear", 3, seed=1, max_epochs=2)
    res = evaluate(head, x, y)
    pred = head.predict(x)
    want = sklearn_metrics.f1_score(y, pred, average="weighted", zero_division=0)
    assert res.weighted_f1 == pytest.approx(float(want), abs=1e-9)
    assert res.accuracy == pytest.approx(float((pred == y).mean()))


def test_evaluate_rejects_empty_split():
    with pytest.raises(ValueError):
        evaluate(_const_head(2), np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# run_probe end to end
# ---------------------------------------------------------------------------


def _tiny_corpora(n_train=24, n_val=12, n_test=12):
    rng = stream(57, "probe", "corpora")

    def windows_for(n, offset):
        out, labels = [], []
        for i in range(n):
            cls = i % 2
            base = rng.normal(size=(1, 4, 4)) + (3.0 if cls else -3.0)
            out.append(standardize(CsiWindow(base)))
            labels.append(cls)
        return Corpus(windows=out, labels=labels, num_classes=2)

    return windows_for(n_train, 0), windows_for(n_val, 1), windows_for(n_test, 2)


def test_run_probe_uses_budget_and_freezes_encoder(tmp_path):
    frozen = tiny_frozen(seed=5)
    train, val, test = _tiny_corpora()
    before = frozen.checksum()
    rec = run_probe(frozen, train, val, test, "linear", budget=10, seed=3, task="t0")
    assert frozen.checksum() == before
    assert rec.budget == 10 and rec.head == "linear" and rec.task == "t0"
    assert 0.0 <= rec.accuracy <= 1.0 and 0.0 <= rec.f1 <= 1.0
    assert 1 <= rec.epochs_ran <= 20

    path = tmp_path / "rec.json"
    write_probe_record(rec, path)
    back = load_probe_records([path])[0]
    assert back == rec


def test_run_probe_rejects_oversized_budget():
    frozen = tiny_frozen(seed=6)
    train, val, test = _tiny_corpora(n_train=8)
    with pytest.raises(ValueError):
        run_probe(frozen, train, val, test, "linear", budget=100, seed=0)


def test_run_probe_warns_on_missing_class(caplog):
    frozen = tiny_frozen(seed=7)
    train, val, test = _tiny_corpora()
    with caplog.at_level("WARNING"):
        run_probe(frozen, train, val, test, "linear", budget=1, seed=0)
    assert any("missing classes" in r.message for r in caplog.records)


def test_run_probe_detects_encoder_drift(monkeypatch):
    frozen = tiny_frozen(seed=8)
    train, val, test = _tiny_corpora()

    original = probe.train_probe

    def tampering(*args, **kwargs):
        frozen.params["enc.ln_f.g"] += 0.5
        return original(*args, **kwargs)

    monkeypatch.setattr(probe, "train_probe", tampering)
    with pytest.raises(RuntimeError, match="frozen encoder"):
        run_probe(frozen, train, val, test, "linear", budget=10, seed=0)
