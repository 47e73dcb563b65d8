import math

import numpy as np
import pytest

from hinbot import model as bm
from hinbot.graph import HinGraph, build_index
from hinbot.model import BotModel, ModelConfig, TrainConfig
from hinbot.synth import fixtures, generate


def tiny_graph(seed=0, n=6, rels=("follower", "following"), m=10, F=5):
    rng = np.random.default_rng(seed)
    edges = {r: rng.integers(0, n, size=(m, 2)) for r in rels}
    labels = np.array([1, 0] * (n // 2))
    split = np.arange(n) % 3
    split[:4] = 0
    return HinGraph(n, list(rels), edges, rng.normal(size=(n, F)), labels,
                    split == 0, split == 1, split == 2)


def tiny_model(g, seed=0, bias_scale=0.3, **kw):
    cfg = dict(hidden=8, layers=2, rgt_heads=2, semantic_heads=2, dropout=0.0, relations=tuple(g.relations))
    cfg.update(kw)
    m = BotModel(ModelConfig(**cfg), g.feature_dim, seed=seed)
    rng = np.random.default_rng(seed + 7)
    for p in m.params():
        if p.value.ndim == 1:
            p.value[:] = bias_scale * rng.normal(size=p.shape)
    return m


def leaky(x):
    return np.where(x >= 0, x, 0.01 * x)


def dense_forward(m, g):
    """Whole model by dense matrices, one relation and head at a time."""
    cfg = m.config
    named = {p.name: p.value for p in m.params()}
    n, H, C, D = g.num_nodes, cfg.hidden, cfg.rgt_heads, cfg.semantic_heads
    d = H // C
    x = leaky(g.features @ named["enc.w"].T + named["enc.b"])
    for l in range(cfg.layers):
        hs = []
        for r in g.relations:
            P = lambda name: named[f"l{l}.{r}.{name}"]
            adj = np.zeros((n, n), dtype=bool)
            adj[g.edges[r][:, 1], g.edges[r][:, 0]] = True
            q, k, v = (x @ P(f"{t}_w").T + P(f"{t}_b") for t in "qkv")
            u = np.zeros((n, H))
            for c in range(C):
                blk = slice(c * d, (c + 1) * d)
                s = q[:, blk] @ k[:, blk].T / math.sqrt(d)
                for i in range(n):
                    if adj[i].any():
                        e = np.exp(s[i, adj[i]] - s[i, adj[i]].max())
                        u[i, blk] = (e / e.sum()) @ v[adj[i], blk]
            u /= C
            z = 1 / (1 + np.exp(-(np.hstack([u, x]) @ P("gate_w").T + P("gate_b"))))
            hs.append(np.tanh(u) * z + x * (1 - z))
        W = named[f"l{l}.sem.proj_w"].reshape(D, -1, H)
        b = named[f"l{l}.sem.proj_b"].reshape(D, -1)
        qv = named[f"l{l}.sem.query"]
        w = np.array([[np.mean(np.tanh(h @ W[dd].T + b[dd]) @ qv[dd]) for h in hs] for dd in range(D)])
        beta = np.exp(w) / np.exp(w).sum(axis=1, keepdims=True)
        x = sum(beta[dd, ri] * hs[ri] for dd in range(D) for ri in range(len(hs))) / D
    a = leaky(x @ named["head.w"].T + named["head.b"])
    logits = a @ named["out.w"].T + named["out.b"]
    return np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)


# -- encoder and forward -------------------------------------------------------

def test_encoder_identity_and_zero():
    g = tiny_graph(F=8)
    m = tiny_model(g)
    m.enc_w.value[:] = np.eye(8)
    m.enc_b.value[:] = 0
    feats = np.abs(g.features[:, :8])
    np.testing.assert_array_equal(m.encode_features(feats)[0], feats)
    np.testing.assert_array_equal(m.encode_features(np.zeros((3, 8)))[0], 0)


def test_encoder_random_oracle():
    g = tiny_graph()
    m = tiny_model(g)
    x, _ = m.encode_features(g.features)
    np.testing.assert_allclose(x, leaky(g.features @ m.enc_w.value.T + m.enc_b.value), rtol=0, atol=1e-14)


def test_encoder_shape_mismatch():
    m = tiny_model(tiny_graph())
    with pytest.raises(ValueError):
        m.encode_features(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("shape", [dict(layers=1, rgt_heads=1, semantic_heads=1, relations=("follower",)),
                                   dict(layers=2, rgt_heads=2, semantic_heads=2),
                                   dict(layers=1, rgt_heads=4, semantic_heads=3)])
def test_forward_matches_dense_oracle(seed, shape):
    g = tiny_graph(seed, rels=shape.get("relations", ("follower", "following")))
    m = tiny_model(g, seed, **shape)
    probs = m.forward(g, build_index(g)).probs
    np.testing.assert_allclose(probs, dense_forward(m, g), rtol=0, atol=1e-12)


def test_eval_forward_bit_identical():
    g = tiny_graph()
    m = tiny_model(g, dropout=0.5)
    idx = build_index(g)
    a = m.forward(g, idx).probs
    b = m.forward(g, idx, train_mode=False, rng=np.random.default_rng(0)).probs
    assert a.tobytes() == b.tobytes()


def test_zero_dropout_train_equals_eval():
    g = tiny_graph()
    m = tiny_model(g)
    idx = build_index(g)
    a = m.forward(g, idx).probs
    b = m.forward(g, idx, train_mode=True, rng=np.random.default_rng(0)).probs
    assert a.tobytes() == b.tobytes()


def test_dropout_changes_train_forward():
    g = tiny_graph()
    m = tiny_model(g, dropout=0.5)
    idx = build_index(g)
    a = m.forward(g, idx).probs
    b = m.forward(g, idx, train_mode=True, rng=np.random.default_rng(0)).probs
    assert not np.allclose(a, b)


def test_probabilities_are_distributions():
    g = tiny_graph()
    p = tiny_model(g, bias_scale=3.0).forward(g, build_index(g)).probs
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_relation_mismatch_names_relations():
    g = tiny_graph()
    m = tiny_model(g, relations=("follower", "retweet"))
    with pytest.raises(bm.RelationMismatchError, match="retweet"):
        m.forward(g, build_index(g))


# -- loss --------------------------------------------------------------------

def test_loss_half_probability():
    probs = np.full((4, 2), 0.5)
    labels = np.array([1, 0, 1, 0])
    assert bm.loss(probs, labels, np.arange(4), 0.0, []) == pytest.approx(4 * math.log(2), abs=1e-15)


def test_loss_confident_is_zero_and_clamped():
    probs = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bm.loss(probs, np.array([1, 0]), np.arange(2), 0.0, []) == 0.0
    # fully wrong prediction hits the clamp instead of infinity
    assert bm.loss(probs, np.array([0, 0]), np.array([0]), 0.0, []) == pytest.approx(-math.log(1e-12))


def test_loss_regularization_only():
    from hinbot.nn import Param
    probs = np.array([[0.0, 1.0]])
    theta = [Param("a", np.array([2.0])), Param("b", np.array([3.0]))]
    assert bm.loss(probs, np.array([1]), np.array([0]), 0.1, theta) == pytest.approx(1.3, abs=1e-15)


def test_loss_empty_batch():
    with pytest.raises(ValueError):
        bm.loss(np.full((2, 2), 0.5), np.array([0, 1]), np.array([], dtype=int), 0.0, [])


def test_whole_model_gradient():
    g = tiny_graph()
    m = tiny_model(g)
    errs = bm.gradient_check(m, g, np.flatnonzero(g.train_mask), 3e-5)
    assert max(errs.values()) < 1e-5, sorted(errs.items(), key=lambda kv: -kv[1])[:3]


@pytest.mark.parametrize("kw", [dict(aggregator_mode="no_gate"), dict(aggregator_mode="no_transformer"),
                                dict(aggregator_mode="mean_neighbor"), dict(fusion_mode="max"),
                                dict(fusion_mode="sum")])
def test_ablation_gradients(kw):
    g = tiny_graph(1)
    m = tiny_model(g, 1, **kw)
    errs = bm.gradient_check(m, g, np.flatnonzero(g.train_mask), 3e-5)
    assert max(errs.values()) < 1e-5


def test_dropout_gradient_with_fixed_masks():
    g = tiny_graph(2)
    m = tiny_model(g, 2, dropout=0.3)
    idx = build_index(g)
    batch = np.flatnonzero(g.train_mask)
    cache = m.forward(g, idx, train_mode=True, rng=np.random.default_rng(5))
    m.zero_grad()
    m.backward(g, idx, cache, bm.loss_grad(cache.probs, g.labels, batch, 0.0, m.params()))
    from hinbot.nn import finite_diff_check

    def f():
        return bm.loss(m.forward(g, idx, train_mode=True, rng=np.random.default_rng(5)).probs,
                       g.labels, batch, 0.0, [])
    assert finite_diff_check(f, [m.head_w, m.enc_w], h=1e-5) < 1e-5


# -- ablation equivalences -----------------------------------------------------

def copy_shared(src, dst):
    by_name = {p.name: p for p in dst.params()}
    for p in src.params():
        if p.name in by_name:
            by_name[p.name].value[...] = p.value


def test_mean_fusion_equals_frozen_uniform_beta():
    g = tiny_graph(3)
    sem = tiny_model(g, 3)
    mean = tiny_model(g, 3, fusion_mode="mean")
    copy_shared(sem, mean)
    idx = build_index(g)
    uniform = np.full((2, 2), 0.5)
    a = sem.forward(g, idx, beta_override=uniform).probs
    b = mean.forward(g, idx).probs
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_mean_neighbor_equals_frozen_uniform_alpha():
    g = tiny_graph(4)
    full = tiny_model(g, 4)
    mn = tiny_model(g, 4, aggregator_mode="mean_neighbor")
    copy_shared(mn, full)
    C = full.config.rgt_heads
    for layer in full.rgt_layers:
        for r in layer.relations:
            layer[(r, "v_w")].value[:] = C * np.eye(8)
            layer[(r, "v_b")].value[:] = 0
    idx = build_index(g)
    a = full.forward(g, idx, alpha_override="uniform").probs
    b = mn.forward(g, idx).probs
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_zero_heads_map_to_attention_free_modes():
    cfg = ModelConfig(hidden=8, rgt_heads=0, semantic_heads=0)
    assert cfg.effective_aggregator == "mean_neighbor"
    assert cfg.effective_fusion == "mean"
    m = BotModel(cfg, 3)
    assert not any("q_w" in p.name or "sem." in p.name for p in m.params())


@pytest.mark.parametrize("bad", [dict(hidden=10, rgt_heads=4), dict(dropout=1.0), dict(layers=0),
                                 dict(fusion_mode="median"), dict(aggregator_mode="gat")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


# -- metrics -------------------------------------------------------------------

def test_metrics_all_correct():
    m = bm.metrics_from_predictions(np.array([1, 0, 1]), np.array([1, 0, 1]))
    assert (m.accuracy, m.f1) == (1.0, 1.0)


def test_metrics_all_bot():
    m = bm.metrics_from_predictions(np.ones(10, int), np.array([1, 0] * 5))
    assert (m.accuracy, m.precision, m.recall) == (0.5, 0.5, 1.0)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_metrics_undefined_precision_is_zero():
    m = bm.metrics_from_predictions(np.zeros(4, int), np.array([1, 0, 1, 0]))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)


def test_metrics_match_tally():
    rng = np.random.default_rng(11)
    pred, truth = rng.integers(0, 2, 200), rng.integers(0, 2, 200)
    counts = {(p, t): 0 for p in (0, 1) for t in (0, 1)}
    for p, t in zip(pred, truth):
        counts[(int(p), int(t))] += 1
    m = bm.metrics_from_predictions(pred, truth)
    assert (m.tp, m.fp, m.tn, m.fn) == (counts[1, 1], counts[1, 0], counts[0, 0], counts[0, 1])
    prec = counts[1, 1] / (counts[1, 1] + counts[1, 0])
    rec = counts[1, 1] / (counts[1, 1] + counts[0, 1])
    assert m.f1 == pytest.approx(2 * prec * rec / (prec + rec), abs=1e-15)
    assert m.tp + m.fp + m.tn + m.fn == 200


def test_evaluate_empty_mask():
    g = tiny_graph()
    with pytest.raises(ValueError):
        bm.evaluate(tiny_model(g), g, np.zeros(g.num_nodes, bool))


# -- training ------------------------------------------------------------------

@pytest.fixture(scope="module")
def separable():
    return generate(fixtures(num_nodes=300)["separable-features"])


def small_cfg(g, **kw):
    base = dict(hidden=16, rgt_heads=2, semantic_heads=2, relations=tuple(g.relations))
    base.update(kw)
    return ModelConfig(**base)


def test_zero_epochs_reports_initial_model(separable):
    m = BotModel(small_cfg(separable), separable.feature_dim, seed=0)
    before = [p.value.copy() for p in m.params()]
    rep = bm.train(m, separable, TrainConfig(max_epochs=0))
    assert [e.epoch for e in rep.epochs] == [0] and rep.best_epoch == 0
    assert all(np.array_equal(a, p.value) for a, p in zip(before, m.params()))


def test_loss_decreases_over_first_epoch(separable):
    m = BotModel(small_cfg(separable), separable.feature_dim, seed=0)
    rep = bm.train(m, separable, TrainConfig(max_epochs=1))
    assert rep.epochs[1].train_loss < rep.epochs[0].train_loss


def test_separable_fixture_learns(separable):
    m = BotModel(small_cfg(separable), separable.feature_dim, seed=0)
    rep = bm.train(m, separable, TrainConfig(max_epochs=40))
    assert max(e.val_acc for e in rep.epochs) >= 0.95


def test_same_seed_same_report(separable, tmp_path):
    outs = []
    for k in range(2):
        m = BotModel(small_cfg(separable), separable.feature_dim, seed=3)
        rep = bm.train(m, separable, TrainConfig(max_epochs=3, seed=3))
        bm.save_checkpoint(m, tmp_path / f"c{k}.json")
        outs.append((rep.to_csv(), (tmp_path / f"c{k}.json").read_bytes()))
    assert outs[0] == outs[1]


def test_best_epoch_parameters_restored(separable):
    m = BotModel(small_cfg(separable), separable.feature_dim, seed=1)
    rep = bm.train(m, separable, TrainConfig(max_epochs=4, seed=1))
    best = rep.epochs[rep.best_epoch]
    assert best.val_f1 == max(e.val_f1 for e in rep.epochs)
    assert best.val_f1 > max(e.val_f1 for e in rep.epochs[:rep.best_epoch]) if rep.best_epoch else True
    val = bm.evaluate(m, separable, separable.val_mask)
    assert val.f1 == best.val_f1


@pytest.mark.parametrize("fraction", [0.2, 0.4, 0.33, 1.0])
def test_train_fraction_uses_ceiling(separable, fraction):
    m = BotModel(small_cfg(separable), separable.feature_dim)
    rep = bm.train(m, separable, TrainConfig(max_epochs=0, train_fraction=fraction))
    assert rep.train_nodes == math.ceil(fraction * separable.train_mask.sum())


def test_train_rejects_graph_without_test_nodes():
    g = tiny_graph()
    g.test_mask[:] = False
    g.labels[~(g.train_mask | g.val_mask)] = -1
    with pytest.raises(bm.TrainingError):
        bm.train(tiny_model(g), g, TrainConfig(max_epochs=1))


def test_non_finite_loss_aborts():
    g = tiny_graph()
    m = tiny_model(g)
    m.out_w.value[0, 0] = np.nan
    with pytest.raises(Exception, match="non-finite"):
        bm.train(m, g, TrainConfig(max_epochs=1))


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(l2_lambda=-1.0), dict(train_fraction=0.0),
                                 dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_report_csv_layout(separable):
    m = BotModel(small_cfg(separable), separable.feature_dim)
    text = bm.train(m, separable, TrainConfig(max_epochs=2)).to_csv()
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,val_acc,val_f1"
    assert len(lines) == 5 and lines[-1].startswith("# best_epoch=")


# -- persistence and exports ---------------------------------------------------

def test_checkpoint_round_trip_is_exact(tmp_path):
    g = tiny_graph()
    m = tiny_model(g, aggregator_mode="no_gate", fusion_mode="min")
    bm.save_checkpoint(m, tmp_path / "m.json")
    back = bm.load_checkpoint(tmp_path / "m.json")
    assert back.config == m.config
    for a, b in zip(m.params(), back.params()):
        assert a.name == b.name and a.value.tobytes() == b.value.tobytes()


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ValueError):
        bm.load_checkpoint(tmp_path / "x.json")


def test_embedding_export(tmp_path):
    g = tiny_graph()
    m = tiny_model(g)
    bm.export_embeddings(m, g, tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["id", "label", "e0"]
    assert len(rows) == g.num_nodes + 1
    first = np.array([float(v) for v in rows[1].split(",")[2:]])
    np.testing.assert_array_equal(first, m.embeddings(g)[0])


def test_attention_export_round_trip(tmp_path):
    g = tiny_graph(5, m=20)
    m = tiny_model(g, 5, bias_scale=1.0)
    bm.export_attention(m, g, tmp_path / "a.csv")
    att = bm.load_attention(tmp_path / "a.csv")
    assert len(att["beta"]) == 2 * 2
    for weights in att["beta"].values():
        assert abs(sum(weights.values()) - 1.0) < 1e-6
    idx = build_index(g)
    expected_groups = sum(2 * 2 * int(np.sum(idx[r].in_degree() > 0)) for r in g.relations)
    assert len(att["alpha"]) == expected_groups
    for weights in att["alpha"].values():
        assert abs(sum(weights.values()) - 1.0) < 1e-9
