"""Full-rank Recall@N, class-node classification metrics and k-shot splits."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graph import SparseGraph

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class AugmentationMissingError(ValueError):
    pass


def _score_rows(scores, queries: np.ndarray) -> np.ndarray:
    if callable(scores):
        return np.asarray(scores(queries))
    return np.asarray(scores)[queries]


def embedding_scorer(emb: np.ndarray):
    """Row scorer for dot-product link scores over an embedding table."""
    emb = np.asarray(emb)
    return lambda queries: emb[queries] @ emb.T


def recall_at_n(scores, train_adj: Optional[SparseGraph], test_edges, N: int, micro: bool = False,
                candidates: Optional[np.ndarray] = None, details: bool = False, chunk: int = 256,
                partition: Optional[np.ndarray] = None):
    """Full-rank Recall@N.

    ``scores`` is an n x n matrix or a callable mapping query ids to score rows.
    Every node with at least one test edge is a query; its candidates are all
    nodes except itself and its training neighbours (optionally intersected
    with a ``candidates`` mask, or restricted to the other side of a
    ``partition`` labelling for bipartite graphs). Ties rank lower node ids first. The default
    is the mean of per-node recalls; ``micro`` pools hits over all test edges.
    """
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
    test_nb: dict = {}
    for u, v in test_edges:
        test_nb.setdefault(int(u), set()).add(int(v))
        test_nb.setdefault(int(v), set()).add(int(u))
    queries = np.array(sorted(test_nb), dtype=np.int64)
    per_node, hits_total, truth_total, skipped = [], 0, 0, 0
    for start in range(0, queries.shape[0], chunk):
        qs = queries[start:start + chunk]
        rows = _score_rows(scores, qs).astype(np.float64, copy=True)
        n = rows.shape[1]
        for r, q in enumerate(qs):
            blocked = np.zeros(n, dtype=bool)
            blocked[q] = True
            if train_adj is not None:
                blocked[train_adj.neighbors(q)] = True
            if candidates is not None:
                blocked |= ~candidates
            if partition is not None:
                blocked |= partition == partition[q]
            if blocked.all():
                skipped += 1
                continue
            row = rows[r]
            row[blocked] = -np.inf
            order = np.argsort(-row, kind="stable")[:min(N, int((~blocked).sum()))]
            truth = test_nb[int(q)]
            hits = len(truth.intersection(order.tolist()))
            per_node.append(hits / len(truth))
            hits_total += hits
            truth_total += len(truth)
    if skipped:
        log.warning("recall@%d: skipped %d query nodes with no candidates", N, skipped)
    if micro:
        value = hits_total / truth_total if truth_total else 0.0
    else:
        value = float(np.mean(per_node)) if per_node else 0.0
    return (value, len(per_node), skipped) if details else value


def classify_by_class_nodes(embeddings: np.ndarray, graph: SparseGraph, test_nodes) -> np.ndarray:
    """Predict each test node's class as the class node with the highest dot-product score."""
    offset = graph.meta.get("class_node_offset")
    C = graph.class_count
    if offset is None or not C:
        raise AugmentationMissingError("graph has no class nodes; run class_nodes_augment first")
    emb = np.asarray(embeddings)
    class_emb = emb[offset:offset + C]
    scores = emb[np.asarray(test_nodes, dtype=np.int64)] @ class_emb.T
    return np.argmax(scores, axis=1)  # first maximum = lowest class index


def accuracy_macro_f1(preds, truths, C: int) -> tuple:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError("prediction/truth length mismatch")
    if preds.size and (max(preds.max(), truths.max()) >= C or min(preds.min(), truths.min()) < 0):
        raise IndexError(f"class index outside [0, {C})")
    if preds.size == 0:
        return 0.0, 0.0
    acc = float(np.mean(preds == truths))
    f1s = []
    for c in range(C):
        tp = np.sum((preds == c) & (truths == c))
        fp = np.sum((preds == c) & (truths != c))
        fn = np.sum((preds != c) & (truths == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return acc, float(np.mean(f1s))


def make_k_shot_split(g: SparseGraph, labels=None, k: int = 1, seed: int = 0, task: str = "node"):
    """k-shot training subset.

    node task: ``labels`` is a sequence of (node, class) training pairs; returns
    at most ``k`` pairs per class drawn uniformly. link task: returns a graph
    keeping at most ``k`` training links per node via a greedy pass over a
    shuffled edge order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if task == "node":
        pairs = np.asarray(list(labels), dtype=np.int64).reshape(-1, 2)
        C = g.class_count if g.class_count is not None else (int(pairs[:, 1].max()) + 1 if pairs.size else 0)
        kept = []
        for c in range(C):
            members = pairs[pairs[:, 1] == c]
            if members.shape[0] == 0:
                log.warning("class %d has no training labels", c)
                continue
            pick = rng.permutation(members.shape[0])[:k]
            kept.append(members[np.sort(pick)])
        return np.concatenate(kept) if kept else np.zeros((0, 2), dtype=np.int64)
    if task == "link":
        edges = g.edge_array()
        order = rng.permutation(edges.shape[0])
        count = np.zeros(g.num_nodes, dtype=np.int64)
        keep = []
        for i in order:
            u, v = edges[i]
            if count[u] < k and count[v] < k:
                count[u] += 1
                count[v] += 1
                keep.append(i)
        return g.with_edges(g.num_nodes, edges[np.sort(np.asarray(keep, dtype=np.int64))])
    raise ValueError(f"unknown task {task!r}")


def split_edges(g: SparseGraph, test_fraction: float, seed: int = 0) -> tuple:
    """Random train/test edge split; returns (train graph, test edge array)."""
    edges = g.edge_array()
    rng = np.random.default_rng(seed)
    order = rng.permutation(edges.shape[0])
    n_test = int(round(test_fraction * edges.shape[0]))
    test = edges[np.sort(order[:n_test])]
    train = edges[np.sort(order[n_test:])]
    return g.with_edges(g.num_nodes, train), test


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)  # dataset -> {metric: value}
    settings: dict = field(default_factory=dict)

    def has_nan(self) -> bool:
        return any(isinstance(v, float) and math.isnan(v) for m in self.metrics.values() for v in m.values())

    def to_json(self) -> str:
        return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "metrics": self.metrics,
                           "settings": self.settings}, indent=2, sort_keys=True)

    def table(self) -> str:
        cols = sorted({k for m in self.metrics.values() for k in m})
        width = max([len("dataset")] + [len(d) for d in self.metrics]) + 2
        lines = ["dataset".ljust(width) + "".join(c.rjust(12) for c in cols)]
        for name, m in sorted(self.metrics.items()):
            cells = "".join((f"{m[c]:.4f}" if c in m else "-").rjust(12) for c in cols)
            lines.append(name.ljust(width) + cells)
        return "\n".join(lines)
