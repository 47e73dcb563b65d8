"""Relational graph transformer layer.

For each relation the layer runs multi-head scaled dot-product attention over
each node's in-neighborhood, averages the heads, and mixes the result with the
layer input through a learned sigmoid gate:

    q, k, v  = per-head affine maps of the layer input
    alpha    = softmax over N(i) of q_i . k_j / sqrt(d)
    u_i      = (1/C) * concat_c sum_j alpha_cij v_cj
    z_i      = sigmoid(W_A [u_i, x_i] + b_A)
    h_i      = tanh(u_i) * z_i + x_i * (1 - z_i)

Head ``c`` owns rows ``c*d:(c+1)*d`` of the H-by-H query/key/value matrices.
Edges are processed in target-sorted CSR order, sources ascending within a
target, so every reduction has a fixed summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import NeighborIndex, RelationIndex
from .nn import Param, glorot, linear, linear_backward, sigmoid, tanh

AGGREGATOR_MODES = ("rgt", "no_transformer", "no_gate", "mean_neighbor")


# -- segment reductions over CSR-ordered edges ---------------------------------

def _reduce(matrix, values: np.ndarray) -> np.ndarray:
    flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:])))
    out = np.asarray(matrix @ flat, dtype=values.dtype)
    return out.reshape((matrix.shape[0],) + values.shape[1:])


def segment_sum(values: np.ndarray, rel: RelationIndex) -> np.ndarray:
    """Sum each target's edge rows into its node row; isolated nodes get zero."""
    return _reduce(rel.to_dst, values)


def segment_max(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n = len(offsets) - 1
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    if values.shape[0] == 0:
        return out
    starts = offsets[:-1]
    nonempty = offsets[1:] > starts
    out[nonempty] = np.maximum.reduceat(values, starts[nonempty], axis=0)
    return out


def scatter_to_sources(values: np.ndarray, rel: RelationIndex) -> np.ndarray:
    """Sum edge rows into their source node (deterministic order)."""
    return _reduce(rel.to_src, values)


# -- parameters ----------------------------------------------------------------

@dataclass
class RgtParams:
    """Parameters of one layer, keyed ``(relation, name)``."""

    hidden: int
    heads: int
    relations: list[str]
    mode: str = "rgt"
    tensors: dict[tuple[str, str], Param] = field(default_factory=dict)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def __getitem__(self, key: tuple[str, str]) -> Param:
        return self.tensors[key]

    def params(self) -> list[Param]:
        return list(self.tensors.values())

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, heads: int, relations: list[str],
             mode: str = "rgt", prefix: str = "", dtype=np.float64) -> "RgtParams":
        if mode not in AGGREGATOR_MODES:
            raise ValueError(f"unknown aggregator mode {mode!r}")
        heads = max(heads, 1)
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        p = cls(hidden, heads, list(relations), mode)
        names = []
        if mode in ("rgt", "no_gate"):
            names += ["q", "k"]
        if mode != "mean_neighbor":
            names += ["v"]
        for r in relations:
            for nm in names:
                p.tensors[(r, f"{nm}_w")] = Param(f"{prefix}{r}.{nm}_w", glorot(rng, hidden, hidden, dtype))
                p.tensors[(r, f"{nm}_b")] = Param(f"{prefix}{r}.{nm}_b", np.zeros(hidden, dtype))
            if mode != "no_gate":
                p.tensors[(r, "gate_w")] = Param(f"{prefix}{r}.gate_w", glorot(rng, hidden, 2 * hidden, dtype))
                p.tensors[(r, "gate_b")] = Param(f"{prefix}{r}.gate_b", np.zeros(hidden, dtype))
        return p

    def has(self, r: str, name: str) -> bool:
        return (r, name) in self.tensors


# -- forward pieces ------------------------------------------------------------

def compute_qkv(params: RgtParams, x_prev: np.ndarray, r: str):
    """Per-head query/key/value, each ``(N, C, d)``; ``None`` if the mode has none."""
    n, C, d = x_prev.shape[0], params.heads, params.head_dim
    out = []
    for nm in ("q", "k", "v"):
        if params.has(r, f"{nm}_w"):
            y = linear(params[(r, f"{nm}_w")], params[(r, f"{nm}_b")], x_prev)
            out.append(y.reshape(n, C, d))
        else:
            out.append(None)
    return tuple(out)


def attention_logits(q: np.ndarray, k: np.ndarray, rel: RelationIndex) -> np.ndarray:
    d = q.shape[2]
    return np.einsum("ecd,ecd->ec", q[rel.dst], k[rel.src]) / np.sqrt(d)


def segment_softmax(logits: np.ndarray, rel: RelationIndex) -> np.ndarray:
    """Softmax of edge logits within each target's neighborhood."""
    mx = segment_max(logits, rel.offsets)
    e = np.exp(logits - mx[rel.dst])
    return e / segment_sum(e, rel)[rel.dst]


def attention_coeffs(q: np.ndarray, k: np.ndarray, rel: RelationIndex) -> np.ndarray:
    """Attention weight per (edge, head), edges in the index's target order."""
    return segment_softmax(attention_logits(q, k, rel), rel)


def uniform_coeffs(rel: RelationIndex, heads: int) -> np.ndarray:
    deg = rel.in_degree()
    a = 1.0 / deg[rel.dst].astype(np.float64)
    return np.repeat(a[:, None], heads, axis=1)


def aggregate(alpha: np.ndarray, v: np.ndarray, rel: RelationIndex) -> np.ndarray:
    """``u_i = (1/C) concat_c sum_j alpha_cij v_cj``; isolated targets get 0."""
    n, C, d = v.shape
    msgs = alpha[:, :, None] * v[rel.src]
    return segment_sum(msgs, rel).reshape(n, C * d) / C


def gated_residual(params: RgtParams, u: np.ndarray, x_prev: np.ndarray, r: str):
    """Returns ``(h, z)``; ``z`` is ``None`` for the no-gate ablation."""
    if u.shape != x_prev.shape:
        raise ValueError(f"gate: u {u.shape} and x_prev {x_prev.shape} differ")
    if not params.has(r, "gate_w"):
        return tanh(u), None
    z = sigmoid(linear(params[(r, "gate_w")], params[(r, "gate_b")], np.concatenate([u, x_prev], axis=1)))
    return tanh(u) * z + x_prev * (1.0 - z), z


@dataclass
class RelationCache:
    q: np.ndarray | None
    k: np.ndarray | None
    v: np.ndarray | None
    alpha: np.ndarray | None
    u: np.ndarray
    z: np.ndarray | None
    h: np.ndarray
    frozen_alpha: bool


@dataclass
class LayerActivations:
    x_prev: np.ndarray
    per_relation: dict[str, RelationCache]


def layer_forward(params: RgtParams, x_prev: np.ndarray, index: NeighborIndex,
                  alpha_override: str | None = None):
    """Run the layer for every relation.

    ``alpha_override="uniform"`` freezes attention to ``1/|N(i)|``; it is how
    the no-transformer ablation runs and what the equivalence tests call.
    Returns ``(list of h per relation, LayerActivations)``.
    """
    hs, caches = [], {}
    for r in params.relations:
        rel = index[r]
        q, k, v = compute_qkv(params, x_prev, r)
        frozen = alpha_override == "uniform" or q is None
        if params.mode == "mean_neighbor":
            alpha = uniform_coeffs(rel, 1)
            u = aggregate(alpha, x_prev[:, None, :], rel)
        else:
            if frozen:
                alpha = uniform_coeffs(rel, params.heads)
            else:
                alpha = attention_coeffs(q, k, rel)
            u = aggregate(alpha, v, rel)
        h, z = gated_residual(params, u, x_prev, r)
        hs.append(h)
        caches[r] = RelationCache(q, k, v, alpha, u, z, h, frozen)
    return hs, LayerActivations(x_prev, caches)


def layer_backward(params: RgtParams, acts: LayerActivations, index: NeighborIndex,
                   grad_hs: list[np.ndarray]) -> np.ndarray:
    """Accumulate parameter grads; return the gradient w.r.t. the layer input."""
    if acts is None:
        raise ValueError("layer_backward called without a forward cache")
    x = acts.x_prev
    n, H = x.shape
    dx = np.zeros_like(x)
    for r, dh in zip(params.relations, grad_hs):
        c = acts.per_relation[r]
        rel = index[r]
        th = np.tanh(c.u)
        if c.z is None:
            du = dh * (1.0 - th * th)
        else:
            z = c.z
            du = dh * z * (1.0 - th * th)
            dx += dh * (1.0 - z)
            dpre = dh * (th - x) * z * (1.0 - z)
            dcat = linear_backward(params[(r, "gate_w")], params[(r, "gate_b")],
                                   np.concatenate([c.u, x], axis=1), dpre)
            du += dcat[:, :H]
            dx += dcat[:, H:]

        if params.mode == "mean_neighbor":
            dagg = du[:, None, :]  # C = 1
            dx += scatter_to_sources(c.alpha[:, :, None] * dagg[rel.dst], rel).reshape(n, H)
            continue

        C, d = params.heads, params.head_dim
        dagg = (du / C).reshape(n, C, d)
        dagg_e = dagg[rel.dst]  # (E, C, d)
        dv = scatter_to_sources(c.alpha[:, :, None] * dagg_e, rel)
        dx += linear_backward(params[(r, "v_w")], params[(r, "v_b")], x, dv.reshape(n, H))
        if c.frozen_alpha:
            continue

        dalpha = np.einsum("ecd,ecd->ec", dagg_e, c.v[rel.src])
        dlogit = c.alpha * (dalpha - segment_sum(c.alpha * dalpha, rel)[rel.dst])
        dlogit /= np.sqrt(d)
        dq = segment_sum(dlogit[:, :, None] * c.k[rel.src], rel)
        dk = scatter_to_sources(dlogit[:, :, None] * c.q[rel.dst], rel)
        dx += linear_backward(params[(r, "q_w")], params[(r, "q_b")], x, dq.reshape(n, H))
        dx += linear_backward(params[(r, "k_w")], params[(r, "k_b")], x, dk.reshape(n, H))
    return dx
