"""Synthetic heterogeneous graphs from a directed two-block SBM.

Each relation gets its own intra/inter-class edge probabilities, rescaled by a
common factor so the expected in-degree matches ``mean_degree``. Features are
Gaussian with class means ``+mu`` (bots) and ``-mu`` (humans) on every axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .graph import UNLABELED, HinGraph


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class RelationSpec:
    name: str
    p_intra: float
    p_inter: float
    mean_degree: float


@dataclass
class SynthSpec:
    num_nodes: int = 1000
    bot_fraction: float = 0.5
    relations: list[RelationSpec] = field(default_factory=list)
    feature_dim: int = 16
    feature_informativeness: float = 0.0
    splits: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        self.relations = [r if isinstance(r, RelationSpec) else RelationSpec(**r) for r in self.relations]
        self.splits = tuple(float(s) for s in self.splits)
        self.validate()

    def validate(self) -> None:
        if self.num_nodes < 2:
            raise ValueError("need at least two nodes")
        if not 0.0 < self.bot_fraction < 1.0:
            raise ValueError("bot_fraction must be in (0, 1)")
        if not self.relations:
            raise ValueError("need at least one relation")
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate relation names {names}")
        for r in self.relations:
            if not (0 <= r.p_intra <= 1 and 0 <= r.p_inter <= 1):
                raise ValueError(f"relation {r.name!r}: probabilities must lie in [0, 1]")
            if r.p_intra + r.p_inter == 0 and r.mean_degree > 0:
                raise InfeasibleSpecError(f"relation {r.name!r}: zero probabilities cannot reach a positive degree")
            if r.mean_degree < 0:
                raise ValueError(f"relation {r.name!r}: mean_degree must be >= 0")
        if self.feature_dim < 1 or self.feature_informativeness < 0:
            raise ValueError("feature_dim must be >= 1 and informativeness >= 0")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("splits must be three non-negative fractions summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def edge_scale(rel: RelationSpec, n_bot: int, n_human: int) -> float:
    """Factor turning (p_intra, p_inter) into probabilities with the target mean degree."""
    same_pairs = n_bot * (n_bot - 1) + n_human * (n_human - 1)
    cross_pairs = 2 * n_bot * n_human
    expected = rel.p_intra * same_pairs + rel.p_inter * cross_pairs
    if rel.mean_degree == 0:
        return 0.0
    if expected == 0:
        raise InfeasibleSpecError(f"relation {rel.name!r}: no admissible edges")
    s = rel.mean_degree * (n_bot + n_human) / expected
    if s * max(rel.p_intra, rel.p_inter) > 1.0:
        raise InfeasibleSpecError(
            f"relation {rel.name!r}: mean degree {rel.mean_degree} needs edge probability "
            f"{s * max(rel.p_intra, rel.p_inter):.3f} > 1")
    return s


def _sample_block(rng: np.random.Generator, rows: np.ndarray, cols: np.ndarray, p: float,
                  diagonal: bool) -> np.ndarray:
    """Bernoulli(p) directed edges between two node blocks, no self-loops."""
    nr, nc = len(rows), len(cols)
    npairs = nr * (nc - 1) if diagonal else nr * nc
    if npairs <= 0 or p <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    count = int(rng.binomial(npairs, min(p, 1.0)))
    k = np.sort(rng.choice(npairs, size=count, replace=False))
    if diagonal:
        i, j = np.divmod(k, nc - 1)
        j = j + (j >= i)
    else:
        i, j = np.divmod(k, nc)
    return np.stack([rows[i], cols[j]], axis=1).astype(np.int64)


def generate(spec: SynthSpec) -> HinGraph:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.num_nodes
    labels = (rng.random(n) < spec.bot_fraction).astype(np.int64)
    bots, humans = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)

    edges = {}
    for rel in spec.relations:
        s = edge_scale(rel, len(bots), len(humans))
        parts = [
            _sample_block(rng, bots, bots, s * rel.p_intra, True),
            _sample_block(rng, humans, humans, s * rel.p_intra, True),
            _sample_block(rng, bots, humans, s * rel.p_inter, False),
            _sample_block(rng, humans, bots, s * rel.p_inter, False),
        ]
        e = np.concatenate(parts, axis=0)
        edges[rel.name] = e[np.lexsort((e[:, 1], e[:, 0]))]

    mu = spec.feature_informativeness
    sign = np.where(labels == 1, 1.0, -1.0)
    features = rng.standard_normal((n, spec.feature_dim)) + (mu * sign)[:, None]

    perm = rng.permutation(n)
    n_train = int(round(spec.splits[0] * n))
    n_val = int(round(spec.splits[1] * n))
    n_val = min(n_val, n - n_train)
    split = np.full(n, 2)
    split[perm[:n_train]] = 0
    split[perm[n_train:n_train + n_val]] = 1

    return HinGraph(n, [r.name for r in spec.relations], edges, features, labels,
                    split == 0, split == 1, split == 2)


def expected_mean_degree(spec: SynthSpec, rel_name: str, labels: np.ndarray) -> float:
    """Analytic expected mean in-degree given realized class labels (bot = 1)."""
    rel = next(r for r in spec.relations if r.name == rel_name)
    nb = int(np.sum(labels == 1))
    nh = len(labels) - nb
    s = edge_scale(rel, nb, nh)
    same = nb * (nb - 1) + nh * (nh - 1)
    return s * (rel.p_intra * same + rel.p_inter * 2 * nb * nh) / len(labels)


# -- label signal of a relation ----------------------------------------------

def _majority_bot_prob(lam: float, rho: float, kmax: int) -> float:
    """P(neighbor-majority says bot) with Poisson(lam) neighbors, each a bot w.p. rho.

    Ties (including no neighbors) are broken by a fair coin.
    """
    k = np.arange(kmax + 1)
    pk = stats.poisson.pmf(k, lam)
    total = 0.0
    for kk, w in zip(k, pk):
        if w == 0:
            continue
        b = np.arange(kk + 1)
        pb = stats.binom.pmf(b, kk, rho)
        total += w * (pb[2 * b > kk].sum() + 0.5 * pb[2 * b == kk].sum())
    return float(total)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def neighbor_majority_mutual_information(bot_fraction: float, p_intra: float, p_inter: float,
                                         mean_degree: float) -> float:
    """Mutual information (bits) between a node's label and its in-neighbor majority label.

    Large-graph limit of the generator: a class-y node receives Poisson many
    in-edges with mean ``s*(p_intra*n_y + p_inter*n_other)/n``, and each
    in-neighbor is same-class with probability
    ``p_intra*n_y / (p_intra*n_y + p_inter*n_other)``.
    """
    pb = bot_fraction
    ph = 1.0 - pb
    s = mean_degree / (p_intra * (pb * pb + ph * ph) + p_inter * 2 * pb * ph)
    lam_b = s * (p_intra * pb + p_inter * ph)
    lam_h = s * (p_intra * ph + p_inter * pb)
    rho_b = p_intra * pb / (p_intra * pb + p_inter * ph)  # a bot's neighbor is a bot
    rho_h = p_inter * pb / (p_inter * pb + p_intra * ph)  # a human's neighbor is a bot
    kmax = int(max(lam_b, lam_h) + 12 * math.sqrt(max(lam_b, lam_h)) + 20)
    m_b = _majority_bot_prob(lam_b, rho_b, kmax)
    m_h = _majority_bot_prob(lam_h, rho_h, kmax)
    joint = np.array([[pb * m_b, pb * (1 - m_b)], [ph * m_h, ph * (1 - m_h)]])
    return _entropy(joint.sum(axis=0)) + _entropy(joint.sum(axis=1)) - _entropy(joint.ravel())


def empirical_neighbor_majority_mi(graph: HinGraph, relation: str, rng: np.random.Generator) -> float:
    """Plug-in estimate of the same quantity on a generated graph."""
    e = graph.edges[relation]
    labels = graph.labels
    truth = labels.copy()
    n = graph.num_nodes
    bot_in = np.bincount(e[:, 1], weights=(truth[e[:, 0]] == 1), minlength=n)
    deg = np.bincount(e[:, 1], minlength=n)
    tie = 2 * bot_in == deg
    maj = np.where(2 * bot_in > deg, 1, 0)
    maj[tie] = rng.integers(0, 2, size=int(tie.sum()))
    ok = truth != UNLABELED
    joint = np.zeros((2, 2))
    np.add.at(joint, (1 - truth[ok], 1 - maj[ok]), 1.0)
    joint /= joint.sum()
    return _entropy(joint.sum(axis=0)) + _entropy(joint.sum(axis=1)) - _entropy(joint.ravel())


# -- presets -------------------------------------------------------------------

def fixtures(num_nodes: int = 1000, seed: int = 0) -> dict[str, SynthSpec]:
    """Named presets used by tests, the CLI and the ablation protocols."""
    return {
        "separable-structure": SynthSpec(
            num_nodes=num_nodes, bot_fraction=0.5, feature_dim=16, feature_informativeness=0.0,
            relations=[RelationSpec("follower", 0.95, 0.05, 10.0),
                       RelationSpec("following", 0.5, 0.5, 10.0)],
            seed=seed),
        "separable-features": SynthSpec(
            num_nodes=num_nodes, bot_fraction=0.5, feature_dim=16, feature_informativeness=2.0,
            relations=[RelationSpec("follower", 0.5, 0.5, 10.0),
                       RelationSpec("following", 0.5, 0.5, 10.0)],
            seed=seed),
        "hetero-two-relations": SynthSpec(
            num_nodes=num_nodes, bot_fraction=0.5, feature_dim=16, feature_informativeness=0.3,
            relations=[RelationSpec("follower", 0.85, 0.15, 10.0),
                       RelationSpec("following", 0.65, 0.35, 10.0)],
            seed=seed),
    }


def load_spec(path_or_preset: str | os.PathLike, seed: int | None = None) -> SynthSpec:
    """A preset name, or a JSON file holding a spec (a manifest's ``spec`` key works too)."""
    presets = fixtures()
    key = str(path_or_preset)
    if key in presets and not Path(key).exists():
        spec = presets[key]
    else:
        doc = json.loads(Path(path_or_preset).read_text(encoding="utf-8"))
        spec = SynthSpec.from_dict(doc.get("spec", doc))
    if seed is not None:
        spec.seed = seed
    return spec
