"""Heterogeneous information network: one node set, several typed edge sets.

Messages flow from an edge's source to its target, so the neighborhood of
node ``i`` under a relation is the set of sources of edges ending at ``i``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

UNLABELED = -1
SPLITS = ("train", "val", "test", "none")


class GraphFormatError(ValueError):
    """Malformed graph file; message carries the file and line number."""


class UnknownNodeError(GraphFormatError):
    pass


class NonNumericFeatureError(GraphFormatError):
    pass


class MaskOverlapError(GraphFormatError):
    pass


@dataclass
class HinGraph:
    num_nodes: int
    relations: list[str]
    edges: dict[str, np.ndarray]  # relation -> (E, 2) int64 array of (src, dst)
    features: np.ndarray
    labels: np.ndarray  # 1 bot, 0 human, -1 unlabeled
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self) -> None:
        self.relations = list(self.relations)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("train_mask", "val_mask", "test_mask"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        self.edges = {r: dedup_edges(np.asarray(self.edges.get(r, np.zeros((0, 2))), dtype=np.int64))
                      for r in self.relations}
        self.validate()

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def relation_id(self, name: str) -> int:
        return self.relations.index(name)

    def validate(self) -> None:
        n = self.num_nodes
        if len(set(self.relations)) != len(self.relations):
            raise ValueError(f"duplicate relation names: {self.relations}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be ({n}, F), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        for arr in (self.labels, self.train_mask, self.val_mask, self.test_mask):
            if arr.shape != (n,):
                raise ValueError(f"per-node array has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isin(self.labels, (0, 1, UNLABELED))):
            raise ValueError("labels must be 0, 1 or -1")
        for r, e in self.edges.items():
            if e.size and (e.min() < 0 or e.max() >= n):
                raise UnknownNodeError(f"relation {r!r} has an endpoint outside 0..{n - 1}")
        overlap = (self.train_mask.astype(int) + self.val_mask + self.test_mask) > 1
        if overlap.any():
            raise MaskOverlapError(f"node {int(np.argmax(overlap))} is in more than one split")
        in_split = self.train_mask | self.val_mask | self.test_mask
        if np.any(in_split & (self.labels == UNLABELED)):
            raise ValueError("unlabeled node assigned to a split")
        if np.any(~in_split & (self.labels != UNLABELED)):
            raise ValueError("labeled node not assigned to any split")

    def subgraph_relations(self, keep: Sequence[str]) -> "HinGraph":
        """Same nodes, only the listed relations (for relation ablations)."""
        missing = [r for r in keep if r not in self.relations]
        if missing:
            raise KeyError(f"unknown relations {missing}")
        return HinGraph(self.num_nodes, list(keep), {r: self.edges[r] for r in keep},
                        self.features, self.labels, self.train_mask, self.val_mask, self.test_mask)

    def split_of(self, i: int) -> str:
        if self.train_mask[i]:
            return "train"
        if self.val_mask[i]:
            return "val"
        if self.test_mask[i]:
            return "test"
        return "none"

    def equals(self, other: "HinGraph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and self.relations == other.relations
            and all(np.array_equal(self.edges[r], other.edges[r]) for r in self.relations)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
        )


def dedup_edges(edges: np.ndarray) -> np.ndarray:
    """Unique (src, dst) pairs, sorted by (src, dst)."""
    edges = edges.reshape(-1, 2)
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(edges, axis=0)


# -- neighbor index ----------------------------------------------------------

@dataclass(frozen=True)
class RelationIndex:
    """CSR view of one relation, grouped by edge target.

    Edge ``e`` (in target-sorted order) runs ``src[e] -> dst[e]``; edges of
    target ``i`` occupy ``offsets[i]:offsets[i+1]`` with sources ascending.
    ``by_src`` re-sorts edges by source for scatter in the backward pass.
    ``to_dst`` / ``to_src`` are (nodes x edges) 0/1 matrices that sum edge
    rows into their target / source node in a fixed order.
    """

    num_nodes: int
    offsets: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    by_src: np.ndarray
    src_offsets: np.ndarray
    to_dst: sp.csr_matrix
    to_src: sp.csr_matrix

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def neighbors(self, i: int) -> np.ndarray:
        return self.src[self.offsets[i]:self.offsets[i + 1]]

    def in_degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edge_list(self) -> np.ndarray:
        return np.stack([self.src, self.dst], axis=1)


@dataclass(frozen=True)
class NeighborIndex:
    relations: list[str]
    per_relation: dict[str, RelationIndex] = field(default_factory=dict)

    def __getitem__(self, relation: str) -> RelationIndex:
        return self.per_relation[relation]

    def neighbors(self, relation: str, i: int) -> np.ndarray:
        return self.per_relation[relation].neighbors(i)


def index_relation(edges: np.ndarray, num_nodes: int) -> RelationIndex:
    edges = dedup_edges(edges)
    src, dst = edges[:, 0], edges[:, 1]
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=num_nodes), out=offsets[1:])
    by_src = np.lexsort((dst, src))
    src_offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=src_offsets[1:])
    ones = np.ones(len(src))
    to_dst = sp.csr_matrix((ones, np.arange(len(src)), offsets), shape=(num_nodes, len(src)))
    to_src = sp.csr_matrix((ones, by_src, src_offsets), shape=(num_nodes, len(src)))
    return RelationIndex(num_nodes, offsets, src, dst, by_src, src_offsets, to_dst, to_src)


def build_index(g: HinGraph) -> NeighborIndex:
    return NeighborIndex(list(g.relations),
                         {r: index_relation(g.edges[r], g.num_nodes) for r in g.relations})


def degree_stats(g: HinGraph) -> dict[str, dict]:
    """Per-relation in-degree histogram (index = degree) and summary counts."""
    out = {}
    for r in g.relations:
        deg = np.bincount(g.edges[r][:, 1], minlength=g.num_nodes) if len(g.edges[r]) else np.zeros(g.num_nodes, dtype=np.int64)
        out[r] = {
            "num_edges": int(len(g.edges[r])),
            "mean_degree": float(deg.mean()) if g.num_nodes else 0.0,
            "max_degree": int(deg.max()) if g.num_nodes else 0,
            "isolated": int(np.sum(deg == 0)),
            "histogram": np.bincount(deg).tolist() if g.num_nodes else [],
        }
    return out


# -- file I/O ----------------------------------------------------------------

def load_graph(nodes_path: str | os.PathLike, edge_paths: Mapping[str, str | os.PathLike]) -> HinGraph:
    """Read a nodes CSV and one edge CSV per relation (see README for format)."""
    ids, labels, splits, feats = [], [], [], []
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "label", "split"]:
            raise GraphFormatError(f"{nodes_path}:1: header must start with id,label,split")
        nfeat = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != nfeat + 3:
                raise GraphFormatError(f"{nodes_path}:{lineno}: expected {nfeat + 3} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
                label = int(row[1])
            except ValueError:
                raise GraphFormatError(f"{nodes_path}:{lineno}: id and label must be integers") from None
            if label not in (0, 1, UNLABELED):
                raise GraphFormatError(f"{nodes_path}:{lineno}: label must be 0, 1 or -1")
            if row[2] not in SPLITS:
                raise GraphFormatError(f"{nodes_path}:{lineno}: split must be one of {SPLITS}")
            if label == UNLABELED and row[2] != "none":
                raise MaskOverlapError(f"{nodes_path}:{lineno}: unlabeled node assigned to split {row[2]!r}")
            if label != UNLABELED and row[2] == "none":
                raise GraphFormatError(f"{nodes_path}:{lineno}: labeled node has no split")
            try:
                vals = [float(v) for v in row[3:]]
            except ValueError:
                raise NonNumericFeatureError(f"{nodes_path}:{lineno}: non-numeric feature value") from None
            if not all(np.isfinite(vals)):
                raise NonNumericFeatureError(f"{nodes_path}:{lineno}: non-finite feature value")
            labels.append(label)
            splits.append(row[2])
            feats.append(vals)
    n = len(ids)
    order = np.argsort(ids, kind="stable")
    if n and not np.array_equal(np.asarray(ids)[order], np.arange(n)):
        seen = set()
        for k, i in enumerate(ids):
            if i in seen or not 0 <= i < n:
                raise GraphFormatError(f"{nodes_path}:{k + 2}: node ids must be unique and cover 0..{n - 1}")
            seen.add(i)
    labels_arr = np.asarray(labels, dtype=np.int64)[order]
    splits_arr = np.asarray(splits, dtype=object)[order]
    features = np.asarray(feats, dtype=np.float64).reshape(n, -1)[order] if n else np.zeros((0, 0))

    edges = {}
    for rel, path in edge_paths.items():
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["src", "dst"]:
                raise GraphFormatError(f"{path}:1: header must be src,dst")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    s, d = int(row[0]), int(row[1])
                except (ValueError, IndexError):
                    raise GraphFormatError(f"{path}:{lineno}: malformed edge {row}") from None
                for v in (s, d):
                    if not 0 <= v < n:
                        raise UnknownNodeError(f"{path}:{lineno}: unknown node id {v}")
                rows.append((s, d))
        edges[rel] = np.asarray(rows, dtype=np.int64).reshape(-1, 2)

    return HinGraph(
        num_nodes=n,
        relations=list(edge_paths),
        edges=edges,
        features=features,
        labels=labels_arr,
        train_mask=splits_arr == "train",
        val_mask=splits_arr == "val",
        test_mask=splits_arr == "test",
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(g: HinGraph, out_dir: str | os.PathLike, extra_manifest: dict | None = None) -> Path:
    """Write nodes.csv, one edges_<relation>.csv per relation and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["id", "label", "split"] + [f"f{k}" for k in range(g.feature_dim)]) + "\n")
        for i in range(g.num_nodes):
            fh.write(",".join([str(i), str(int(g.labels[i])), g.split_of(i)]
                              + [_fmt(v) for v in g.features[i]]) + "\n")
    files = {}
    for r in g.relations:
        fname = f"edges_{r}.csv"
        files[r] = fname
        with open(out / fname, "w", newline="", encoding="utf-8") as fh:
            fh.write("src,dst\n")
            fh.writelines(f"{s},{d}\n" for s, d in g.edges[r])
    manifest = {"nodes": "nodes.csv", "relations": g.relations, "edge_files": files}
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_graph_dir(graph_dir: str | os.PathLike) -> HinGraph:
    """Load a directory written by :func:`save_graph`.

    Without a manifest, every ``edges_<name>.csv`` is taken as a relation,
    in sorted name order.
    """
    d = Path(graph_dir)
    manifest_path = d / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        edge_paths = {r: d / manifest["edge_files"][r] for r in manifest["relations"]}
        nodes = d / manifest.get("nodes", "nodes.csv")
    else:
        edge_paths = {p.stem[len("edges_"):]: p for p in sorted(d.glob("edges_*.csv"))}
        nodes = d / "nodes.csv"
    if not nodes.exists():
        raise FileNotFoundError(f"no nodes.csv in {d}")
    return load_graph(nodes, edge_paths)
