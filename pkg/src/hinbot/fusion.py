"""Fusion of per-relation node representations.

Semantic attention scores each relation by a global mean over all nodes,
normalizes the scores with a softmax per head, and averages the
relation-weighted representations over heads. Pooling modes are the
parameter-free ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Param, glorot, softmax, softmax_backward

FUSION_MODES = ("semantic_attention", "sum", "mean", "max", "min")
POOL_MODES = ("sum", "mean", "max", "min")


@dataclass
class SemanticParams:
    """``proj_w`` stacks the D per-head (S, H) projections as (D*S, H)."""

    heads: int
    att_hidden: int
    proj_w: Param
    proj_b: Param
    query: Param  # (D, S)

    def params(self) -> list[Param]:
        return [self.proj_w, self.proj_b, self.query]

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, heads: int, att_hidden: int,
             prefix: str = "", dtype=np.float64) -> "SemanticParams":
        if heads < 1:
            raise ValueError("semantic attention needs at least one head")
        return cls(
            heads, att_hidden,
            Param(f"{prefix}sem.proj_w", glorot(rng, heads * att_hidden, hidden, dtype)),
            Param(f"{prefix}sem.proj_b", np.zeros(heads * att_hidden, dtype)),
            Param(f"{prefix}sem.query", glorot(rng, heads, att_hidden, dtype)),
        )


@dataclass
class FusionCache:
    hs: list[np.ndarray]
    proj: list[np.ndarray] | None = None  # per relation, (N, D, S) tanh activations
    beta: np.ndarray | None = None  # (D, R)
    pool_choice: np.ndarray | None = None  # (N, H) argmax/argmin relation


def relation_scores(params: SemanticParams, hs: list[np.ndarray]):
    """Raw relation importance ``w`` (D, R) plus the tanh projections."""
    n = hs[0].shape[0]
    if n == 0:
        raise ValueError("relation scores need at least one node")
    D, S = params.heads, params.att_hidden
    projs, cols = [], []
    for h in hs:
        p = np.tanh(h @ params.proj_w.value.T + params.proj_b.value).reshape(n, D, S)
        projs.append(p)
        cols.append(np.einsum("nds,ds->d", p, params.query.value) / n)
    return np.stack(cols, axis=1), projs


def normalize_relation_weights(w: np.ndarray) -> np.ndarray:
    return softmax(w, axis=1)


def fuse(beta: np.ndarray, hs: list[np.ndarray]) -> np.ndarray:
    """``x_i = (1/D) sum_d sum_r beta[d, r] h_r[i]``."""
    mean_beta = beta.mean(axis=0)
    out = np.zeros_like(hs[0])
    for b, h in zip(mean_beta, hs):
        out += b * h
    return out


def pool_fuse(mode: str, hs: list[np.ndarray]):
    """Elementwise pooling over relations; returns ``(x, choice)``."""
    stack = np.stack(hs, axis=0)
    if mode == "sum":
        return stack.sum(axis=0), None
    if mode == "mean":
        return stack.mean(axis=0), None
    if mode == "max":
        choice = np.argmax(stack, axis=0)
    elif mode == "min":
        choice = np.argmin(stack, axis=0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return np.take_along_axis(stack, choice[None], axis=0)[0], choice


def fusion_forward(mode: str, params: SemanticParams | None, hs: list[np.ndarray],
                   beta_override: np.ndarray | None = None):
    """Fuse ``hs``; ``beta_override`` freezes relation weights (tests, ablations)."""
    if mode == "semantic_attention":
        if beta_override is not None:
            return fuse(beta_override, hs), FusionCache(hs, None, beta_override)
        w, projs = relation_scores(params, hs)
        beta = normalize_relation_weights(w)
        return fuse(beta, hs), FusionCache(hs, projs, beta)
    x, choice = pool_fuse(mode, hs)
    return x, FusionCache(hs, pool_choice=choice)


def fusion_backward(mode: str, params: SemanticParams | None, cache: FusionCache,
                    grad_x: np.ndarray) -> list[np.ndarray]:
    """Gradient w.r.t. each ``h_r``; semantic parameter grads are accumulated."""
    if cache is None:
        raise ValueError("fusion_backward called without a forward cache")
    hs = cache.hs
    R = len(hs)
    if mode == "sum":
        return [grad_x.copy() for _ in hs]
    if mode == "mean":
        return [grad_x / R for _ in hs]
    if mode in ("max", "min"):
        return [np.where(cache.pool_choice == r, grad_x, 0.0) for r in range(R)]
    if mode != "semantic_attention":
        raise ValueError(f"unknown fusion mode {mode!r}")

    beta = cache.beta
    D = beta.shape[0]
    mean_beta = beta.mean(axis=0)
    dhs = [b * grad_x for b in mean_beta]
    if cache.proj is None:  # frozen weights
        return dhs

    n = hs[0].shape[0]
    S = params.att_hidden
    dmean_beta = np.array([np.sum(grad_x * h) for h in hs])
    dbeta = np.broadcast_to(dmean_beta / D, beta.shape)
    dw = softmax_backward(beta, dbeta, axis=1)  # (D, R)
    q = params.query.value
    for r, (h, p) in enumerate(zip(hs, cache.proj)):
        coef = dw[:, r] / n  # (D,)
        params.query.grad += coef[:, None] * p.sum(axis=0)
        dp = np.broadcast_to((coef[:, None] * q)[None], (n, D, S))
        dpre = (dp * (1.0 - p * p)).reshape(n, D * S)
        params.proj_w.grad += dpre.T @ h
        params.proj_b.grad += dpre.sum(axis=0)
        dhs[r] = dhs[r] + dpre @ params.proj_w.value
    return dhs
