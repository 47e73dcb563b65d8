"""Bot detector: feature encoder, stacked RGT + fusion layers, softmax head."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fusion as fz
from . import rgt
from .graph import HinGraph, NeighborIndex, build_index
from .nn import (Param, adamw_step, finite_diff_check, glorot, leaky_relu, leaky_relu_backward, linear,
                 linear_backward, softmax)

LOG_CLAMP = 1e-12
CHECKPOINT_FORMAT = "hinbot-checkpoint"


class TrainingError(RuntimeError):
    pass


class RelationMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 128
    layers: int = 2
    rgt_heads: int = 8
    semantic_heads: int = 8
    dropout: float = 0.5
    relations: tuple[str, ...] = ("follower", "following")
    fusion_mode: str = "semantic_attention"
    aggregator_mode: str = "rgt"
    semantic_hidden: int = 0  # 0 means "same as hidden"
    dtype: str = "float64"

    def __post_init__(self) -> None:
        self.relations = tuple(self.relations)
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.rgt_heads < 0 or self.semantic_heads < 0:
            raise ValueError("head counts must be non-negative")
        if self.rgt_heads and self.hidden % self.rgt_heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.rgt_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.fusion_mode not in fz.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.aggregator_mode not in rgt.AGGREGATOR_MODES:
            raise ValueError(f"unknown aggregator mode {self.aggregator_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if not self.relations:
            raise ValueError("need at least one relation")

    # C = 0 / D = 0 are the attention-free ablations
    @property
    def effective_aggregator(self) -> str:
        # zero heads leaves no projections: plain uniform mean over neighbors
        if self.rgt_heads == 0 and self.aggregator_mode in ("rgt", "no_gate", "no_transformer"):
            return "mean_neighbor"
        return self.aggregator_mode

    @property
    def effective_fusion(self) -> str:
        if self.semantic_heads == 0 and self.fusion_mode == "semantic_attention":
            return "mean"
        return self.fusion_mode


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2_lambda: float = 3e-5
    batch_size: int = 256
    max_epochs: int = 40
    seed: int = 0
    train_fraction: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.l2_lambda < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch size must be >= 1 and max epochs >= 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train fraction must be in (0, 1]")


@dataclass
class Metrics:
    accuracy: float
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    test: Metrics
    train_nodes: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_acc,val_f1\n")
        for e in self.epochs:
            buf.write(f"{e.epoch},{e.train_loss!r},{e.val_acc!r},{e.val_f1!r}\n")
        t = self.test
        buf.write(f"# best_epoch={self.best_epoch},train_nodes={self.train_nodes},"
                  f"test_acc={t.accuracy!r},test_f1={t.f1!r},test_precision={t.precision!r},"
                  f"test_recall={t.recall!r},tp={t.tp},fp={t.fp},tn={t.tn},fn={t.fn}\n")
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def metrics_from_predictions(pred: np.ndarray, truth: np.ndarray) -> Metrics:
    if len(truth) == 0:
        raise ValueError("cannot evaluate on an empty node set")
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics((tp + tn) / len(truth), f1, precision, recall, tp, fp, tn, fn)


# -- model ---------------------------------------------------------------------

@dataclass
class ForwardCache:
    pre0: np.ndarray
    layers: list[tuple[rgt.LayerActivations, fz.FusionCache, np.ndarray | None]]
    x_last: np.ndarray
    head_pre: np.ndarray
    head_act: np.ndarray
    head_mask: np.ndarray | None
    logits: np.ndarray
    probs: np.ndarray


class BotModel:
    """All trainable state of the detector plus its forward/backward passes."""

    def __init__(self, config: ModelConfig, feature_dim: int, seed: int = 0):
        self.config = config
        self.feature_dim = feature_dim
        self.dtype = np.dtype(config.dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
        H, dt = config.hidden, self.dtype
        rels = list(config.relations)
        self.enc_w = Param("enc.w", glorot(rng, H, feature_dim, dt))
        self.enc_b = Param("enc.b", np.zeros(H, dt))
        self.rgt_layers: list[rgt.RgtParams] = []
        self.sem_layers: list[fz.SemanticParams | None] = []
        agg, fus = config.effective_aggregator, config.effective_fusion
        S = config.semantic_hidden or H
        for l in range(config.layers):
            self.rgt_layers.append(rgt.RgtParams.init(rng, H, config.rgt_heads, rels, agg, f"l{l}.", dt))
            self.sem_layers.append(
                fz.SemanticParams.init(rng, H, config.semantic_heads, S, f"l{l}.", dt)
                if fus == "semantic_attention" else None)
        self.head_w = Param("head.w", glorot(rng, H, H, dt))
        self.head_b = Param("head.b", np.zeros(H, dt))
        self.out_w = Param("out.w", glorot(rng, 2, H, dt))
        self.out_b = Param("out.b", np.zeros(2, dt))

    def params(self) -> list[Param]:
        ps = [self.enc_w, self.enc_b]
        for rp, sp in zip(self.rgt_layers, self.sem_layers):
            ps += rp.params()
            if sp is not None:
                ps += sp.params()
        return ps + [self.head_w, self.head_b, self.out_w, self.out_b]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def check_graph(self, graph: HinGraph) -> None:
        if list(graph.relations) != list(self.config.relations):
            raise RelationMismatchError(
                f"model relations {list(self.config.relations)} do not match graph relations {graph.relations}")
        if graph.feature_dim != self.feature_dim:
            raise ValueError(f"model expects {self.feature_dim} features, graph has {graph.feature_dim}")

    # -- forward ---------------------------------------------------------------

    def encode_features(self, features: np.ndarray):
        pre = linear(self.enc_w, self.enc_b, np.asarray(features, dtype=self.dtype))
        return leaky_relu(pre), pre

    def _dropout(self, x: np.ndarray, rng: np.random.Generator | None):
        p = self.config.dropout
        if rng is None or p == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= p).astype(self.dtype) / (1.0 - p)
        return x * mask, mask

    def forward(self, graph: HinGraph, index: NeighborIndex, train_mode: bool = False,
                rng: np.random.Generator | None = None, alpha_override: str | None = None,
                beta_override: np.ndarray | None = None) -> ForwardCache:
        """Full-graph forward. Dropout only when ``train_mode`` and ``rng`` given."""
        self.check_graph(graph)
        drop_rng = rng if train_mode else None
        x, pre0 = self.encode_features(graph.features)
        layers = []
        fus = self.config.effective_fusion
        for rp, sp in zip(self.rgt_layers, self.sem_layers):
            hs, acts = rgt.layer_forward(rp, x, index, alpha_override)
            x, fcache = fz.fusion_forward(fus, sp, hs, beta_override)
            x, mask = self._dropout(x, drop_rng)
            layers.append((acts, fcache, mask))
        head_pre = linear(self.head_w, self.head_b, x)
        head_act, head_mask = self._dropout(leaky_relu(head_pre), drop_rng)
        logits = linear(self.out_w, self.out_b, head_act)
        return ForwardCache(pre0, layers, x, head_pre, head_act, head_mask, logits, softmax(logits, axis=1))

    def backward(self, graph: HinGraph, index: NeighborIndex, cache: ForwardCache,
                 grad_logits: np.ndarray) -> None:
        """Accumulate gradients of all parameters given d(loss)/d(logits)."""
        g = linear_backward(self.out_w, self.out_b, cache.head_act, grad_logits)
        if cache.head_mask is not None:
            g = g * cache.head_mask
        g = leaky_relu_backward(cache.head_pre, g)
        g = linear_backward(self.head_w, self.head_b, cache.x_last, g)
        fus = self.config.effective_fusion
        for rp, sp, (acts, fcache, mask) in reversed(list(zip(self.rgt_layers, self.sem_layers, cache.layers))):
            if mask is not None:
                g = g * mask
            dhs = fz.fusion_backward(fus, sp, fcache, g)
            g = rgt.layer_backward(rp, acts, index, dhs)
        g = leaky_relu_backward(cache.pre0, g)
        linear_backward(self.enc_w, self.enc_b, graph.features.astype(self.dtype), g)

    def predict_proba(self, graph: HinGraph, index: NeighborIndex | None = None) -> np.ndarray:
        return self.forward(graph, index or build_index(graph)).probs

    def embeddings(self, graph: HinGraph, index: NeighborIndex | None = None) -> np.ndarray:
        return self.forward(graph, index or build_index(graph)).x_last

    def cast(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for p in self.params():
            p.astype(self.dtype)


# -- loss ----------------------------------------------------------------------

def regularization(params: list[Param]):
    # stays in the parameter dtype so extended-precision copies keep their digits
    return sum(np.sum(p.value ** 2) for p in params)


def loss(probs: np.ndarray, labels: np.ndarray, batch: np.ndarray, lam: float,
         params: list[Param]):
    """Summed binary cross-entropy over ``batch`` plus ``lam * sum(w^2)``.

    The bot-class softmax probability is the scalar prediction; the human
    class probability stands in for ``1 - p`` so no cancellation occurs.
    """
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("loss over an empty batch")
    y = labels[batch]
    p_true = probs[batch, y]
    ce = -np.sum(np.log(np.maximum(p_true, LOG_CLAMP)))
    return ce + lam * regularization(params)


def loss_grad(probs: np.ndarray, labels: np.ndarray, batch: np.ndarray, lam: float,
              params: list[Param]) -> np.ndarray:
    """Gradient of :func:`loss` w.r.t. logits; adds ``2*lam*w`` into param grads."""
    grad = np.zeros_like(probs)
    y = labels[batch]
    g = probs[batch].copy()
    g[np.arange(len(batch)), y] -= 1.0
    g[probs[batch, y] <= LOG_CLAMP] = 0.0  # clamped log is flat
    np.add.at(grad, batch, g)
    if lam:
        for p in params:
            p.grad += 2.0 * lam * p.value
    return grad


# -- training ------------------------------------------------------------------

def gradient_check(model: BotModel, graph: HinGraph, batch: np.ndarray, lam: float,
                   h: float = 1e-5, oracle_dtype=np.longdouble,
                   index: NeighborIndex | None = None) -> dict[str, float]:
    """Per-tensor max relative error of the analytic gradient (eval mode).

    Gradients come from ``model`` in its own dtype. The finite-difference side
    re-evaluates the loss on a copy cast to ``oracle_dtype``; in extended
    precision the roundoff of a loss difference sits well below coordinates
    whose true gradient is near the 1e-8 floor.
    """
    index = index or build_index(graph)
    batch = np.asarray(batch)
    params = model.params()
    model.zero_grad()
    cache = model.forward(graph, index)
    model.backward(graph, index, cache, loss_grad(cache.probs, graph.labels, batch, lam, params))

    oracle = BotModel(model.config, model.feature_dim, seed=0)
    oracle.cast(oracle_dtype)
    pairs = list(zip(params, oracle.params()))

    def loss_fn():
        for src, dst in pairs:
            dst.value[...] = src.value
        return loss(oracle.forward(graph, index).probs, graph.labels, batch, lam, oracle.params())

    return {p.name: float(finite_diff_check(loss_fn, [p], h)) for p in params}


def evaluate(model: BotModel, graph: HinGraph, mask: np.ndarray,
             index: NeighborIndex | None = None, probs: np.ndarray | None = None) -> Metrics:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot evaluate on an empty mask")
    if probs is None:
        probs = model.predict_proba(graph, index)
    pred = np.argmax(probs[mask], axis=1)
    return metrics_from_predictions(pred, graph.labels[mask])


def subsample_train(graph: HinGraph, fraction: float, rng: np.random.Generator) -> np.ndarray:
    nodes = np.flatnonzero(graph.train_mask)
    if fraction >= 1.0:
        return nodes
    k = math.ceil(fraction * len(nodes))
    return np.sort(rng.choice(nodes, size=k, replace=False))


def _mean_ce(probs: np.ndarray, labels: np.ndarray, nodes: np.ndarray) -> float:
    p = probs[nodes, labels[nodes]]
    return float(-np.mean(np.log(np.maximum(p, LOG_CLAMP))))


def _snapshot(model: BotModel) -> list[np.ndarray]:
    return [p.value.copy() for p in model.params()]


def _restore(model: BotModel, values: list[np.ndarray]) -> None:
    for p, v in zip(model.params(), values):
        p.value[...] = v


def train_epoch(model: BotModel, graph: HinGraph, index: NeighborIndex, order: np.ndarray,
                cfg: TrainConfig, drop_rng: np.random.Generator | None, epoch: int = 0) -> None:
    """One pass over ``order`` in batches: full-graph forward, batch loss, AdamW step."""
    params = model.params()
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        model.zero_grad()
        cache = model.forward(graph, index, train_mode=True, rng=drop_rng)
        value = loss(cache.probs, graph.labels, batch, cfg.l2_lambda, params)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
        g = loss_grad(cache.probs, graph.labels, batch, cfg.l2_lambda, params)
        model.backward(graph, index, cache, g)
        adamw_step(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)


def train(model: BotModel, graph: HinGraph, cfg: TrainConfig,
          index: NeighborIndex | None = None, log=None) -> TrainReport:
    """Minibatch training with full-graph forward passes.

    Each epoch shuffles the (possibly subsampled) training nodes, and each
    batch takes one AdamW step on the loss restricted to that batch. After
    every epoch the model is scored in eval mode; the parameters of the epoch
    with the best validation F1 (earliest on ties) are restored at the end.
    """
    model.check_graph(graph)
    index = index or build_index(graph)
    streams = np.random.SeedSequence([cfg.seed, 1]).spawn(3)
    sub_rng, shuffle_rng, drop_rng = (np.random.Generator(np.random.PCG64(s)) for s in streams)
    train_nodes = subsample_train(graph, cfg.train_fraction, sub_rng)
    if len(train_nodes) == 0:
        raise TrainingError("no training nodes")
    if not graph.test_mask.any():
        raise TrainingError("graph has no test nodes")
    has_val = bool(graph.val_mask.any())

    def score(epoch: int) -> EpochRecord:
        probs = model.forward(graph, index).probs
        if has_val:
            m = evaluate(model, graph, graph.val_mask, probs=probs)
            va, vf = m.accuracy, m.f1
        else:
            va = vf = 0.0
        return EpochRecord(epoch, _mean_ce(probs, graph.labels, train_nodes), va, vf)

    records = [score(0)]
    best_epoch, best_f1, best_vals = 0, records[0].val_f1, _snapshot(model)
    for epoch in range(1, cfg.max_epochs + 1):
        train_epoch(model, graph, index, shuffle_rng.permutation(train_nodes), cfg, drop_rng, epoch)
        rec = score(epoch)
        records.append(rec)
        if log is not None:
            log(f"epoch {epoch}: train_loss={rec.train_loss:.4f} val_acc={rec.val_acc:.4f} val_f1={rec.val_f1:.4f}")
        if rec.val_f1 > best_f1:
            best_epoch, best_f1, best_vals = epoch, rec.val_f1, _snapshot(model)
    _restore(model, best_vals)
    test = evaluate(model, graph, graph.test_mask, index)
    return TrainReport(records, best_epoch, test, int(len(train_nodes)))


# -- persistence and exports ---------------------------------------------------

def save_checkpoint(model: BotModel, path: str | os.PathLike) -> None:
    """Text checkpoint: config plus every tensor with its shape; exact round-trip."""
    cfg = asdict(model.config)
    cfg["relations"] = list(cfg["relations"])
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "feature_dim": model.feature_dim,
        "config": cfg,
        "params": [{"name": p.name, "shape": list(p.shape),
                    "data": [float(v) for v in p.value.reshape(-1)]} for p in model.params()],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> BotModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    model = BotModel(cfg, doc["feature_dim"])
    by_name = {p.name: p for p in model.params()}
    if set(by_name) != {e["name"] for e in doc["params"]}:
        raise ValueError(f"{path}: parameter set does not match its config")
    for e in doc["params"]:
        p = by_name[e["name"]]
        if list(p.shape) != e["shape"]:
            raise ValueError(f"{path}: shape mismatch for {e['name']}")
        p.value[...] = np.asarray(e["data"], dtype=model.dtype).reshape(e["shape"])
    return model


def export_embeddings(model: BotModel, graph: HinGraph, path: str | os.PathLike,
                      index: NeighborIndex | None = None) -> None:
    emb = model.embeddings(graph, index)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{k}" for k in range(emb.shape[1])])
        for i in range(graph.num_nodes):
            w.writerow([i, int(graph.labels[i])] + [repr(float(v)) for v in emb[i]])


def export_attention(model: BotModel, graph: HinGraph, path: str | os.PathLike,
                     index: NeighborIndex | None = None) -> None:
    """Relation weights (``beta``) and per-edge attention (``alpha``) as one CSV.

    Columns: ``kind,layer,relation,head,src,dst,weight``; ``src``/``dst`` are
    empty on ``beta`` rows.
    """
    index = index or build_index(graph)
    cache = model.forward(graph, index)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "layer", "relation", "head", "src", "dst", "weight"])
        for l, (acts, fcache, _) in enumerate(cache.layers):
            if fcache.beta is not None:
                for d in range(fcache.beta.shape[0]):
                    for r, name in enumerate(graph.relations):
                        w.writerow(["beta", l, name, d, "", "", repr(float(fcache.beta[d, r]))])
            for name in graph.relations:
                rc = acts.per_relation[name]
                rel = index[name]
                for c in range(rc.alpha.shape[1]):
                    for s, t, a in zip(rel.src, rel.dst, rc.alpha[:, c]):
                        w.writerow(["alpha", l, name, c, int(s), int(t), repr(float(a))])


def load_attention(path: str | os.PathLike) -> dict[str, dict]:
    """Read an attention export back into ``{"beta": {...}, "alpha": {...}}``.

    ``beta[(layer, head)] -> {relation: weight}``;
    ``alpha[(layer, relation, head, dst)] -> {src: weight}``.
    """
    beta: dict = {}
    alpha: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            layer, head, wt = int(row["layer"]), int(row["head"]), float(row["weight"])
            if row["kind"] == "beta":
                beta.setdefault((layer, head), {})[row["relation"]] = wt
            elif row["kind"] == "alpha":
                key = (layer, row["relation"], head, int(row["dst"]))
                alpha.setdefault(key, {})[int(row["src"])] = wt
            else:
                raise ValueError(f"unknown attention row kind {row['kind']!r}")
    return {"beta": beta, "alpha": alpha}
