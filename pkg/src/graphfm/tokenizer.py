"""Graph tokenizer: high-order smoothing plus an SVD-based projection into d dims.

The smoothed matrix sum_{l=1..L} Abar^l is only ever applied as an operator,
never materialized.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .graph import NormalizedAdjacency, ShapeError, SparseGraph, normalize_adjacency, spmm, degree_vector

LN_EPS = 1e-8
ONE_HOT_TABLE_SIZE = 100_000
DEGREE_TABLE_SIZE = 4096

TOKEN_MAGIC = b"GFMTOK01"
_TOKEN_HEADER = struct.Struct("<8sIIIq")  # magic, n, d, L, seed


class InvalidOrderError(ValueError):
    pass


class RankError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DimensionError(ValueError):
    pass


class DuplicateLabelError(ValueError):
    pass


def smooth_apply(adj: NormalizedAdjacency, x: np.ndarray, L: int) -> np.ndarray:
    """(Abar + Abar^2 + ... + Abar^L) @ x via L sparse products and a running sum."""
    if L < 1:
        raise InvalidOrderError(f"smoothing order must be >= 1, got {L}")
    cur = spmm(adj, x)
    total = cur.copy()
    for _ in range(L - 1):
        cur = spmm(adj, cur)
        total += cur
    return total


def _orthonormalize(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y, mode="reduced")
    return q


def _sign_convention(u: np.ndarray) -> np.ndarray:
    # project on a fixed generic vector; argmax-style rules flip on near-ties
    ref = np.sqrt(np.arange(1, u.shape[0] + 1, dtype=np.float64))
    flip = np.sign(ref @ u)
    flip[flip == 0] = 1.0
    return flip


def randomized_svd(matmul: Callable[[np.ndarray], np.ndarray], n: int, rank: int,
                   power_iters: int = 2, seed: int = 0, oversample: int = 8,
                   rmatmul: Optional[Callable[[np.ndarray], np.ndarray]] = None):
    """Truncated SVD of a square n x n operator given only its action on blocks.

    ``rmatmul`` applies the transpose; it defaults to ``matmul`` (symmetric operator).
    Returns (U, s, V) with s descending.
    """
    if rank > n:
        raise RankError(f"rank {rank} exceeds matrix size {n}")
    if rank < 1:
        raise RankError("rank must be positive")
    rmatmul = rmatmul or matmul
    k = min(n, rank + oversample)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, k))
    q = _orthonormalize(matmul(omega))
    for _ in range(power_iters):
        q = _orthonormalize(rmatmul(q))
        q = _orthonormalize(matmul(q))
    bt = rmatmul(q)  # (Q^T A)^T
    if not np.all(np.isfinite(bt)):
        raise NumericError("non-finite values in projected matrix")
    ub, s, vt = np.linalg.svd(bt.T, full_matrices=False)
    u = q @ ub[:, :rank]
    v = vt[:rank].T
    flip = _sign_convention(u)
    return u * flip, s[:rank], v * flip


def fast_svd(adj: NormalizedAdjacency, L: int, rank: int, power_iters: int = 2, seed: int = 0,
             oversample: int = 8, identity_input: bool = False):
    """Randomized truncated SVD of the smoothed adjacency.

    ``identity_input`` replaces the smoothed matrix by the identity (zero-order ablation).
    """
    if identity_input:
        op = lambda x: np.array(x, copy=True)  # noqa: E731
    else:
        op = lambda x: smooth_apply(adj, x, L)  # noqa: E731
    return randomized_svd(op, adj.num_nodes, rank, power_iters=power_iters, seed=seed, oversample=oversample)


def layer_norm_rows(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Parameter-free row layer norm; identically-zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps)
    out[~np.any(x != 0, axis=1)] = 0.0
    return out


@dataclass(frozen=True, eq=False)
class Projector:
    matrix: np.ndarray  # n x d
    smoothing_order: int
    rank_per_factor: int
    seed: int
    graph_id: str = ""

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class TokenTable:
    """Per-node token rows.

    For the learnable ablation variants ``table``/``lookup`` hold the shared
    embedding table and each node's row index into it.
    """

    matrix: np.ndarray
    graph_id: str = ""
    seed: int = 0
    smoothing_order: int = 0
    kind: str = "svd"
    table: Optional[np.ndarray] = None
    lookup: Optional[np.ndarray] = None

    @property
    def learnable(self) -> bool:
        return self.table is not None

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_projector(u: np.ndarray, lam: np.ndarray, v: np.ndarray, d: int, *, smoothing_order: int = 0,
                    seed: int = 0, graph_id: str = "") -> Projector:
    if d % 2:
        raise DimensionError(f"projection width must be even, got {d}")
    r = d // 2
    if u.shape[1] != r or v.shape[1] != r or len(lam) != r:
        raise DimensionError(f"expected rank {r} factors, got U{u.shape} V{v.shape} lam{len(lam)}")
    root = np.sqrt(np.clip(lam, 0.0, None))
    concat = np.concatenate([u * root, v * root], axis=1)
    return Projector(layer_norm_rows(concat), smoothing_order, r, seed, graph_id)


def make_projector(g: SparseGraph, d: int, L: int, seed: int, power_iters: int = 2,
                   adj: Optional[NormalizedAdjacency] = None, identity_input: bool = False) -> Projector:
    """SVD projector for a whole graph.

    When the graph has fewer than d/2 nodes the factors are zero-padded to width d/2.
    """
    if d % 2:
        raise DimensionError(f"projection width must be even, got {d}")
    adj = adj if adj is not None else normalize_adjacency(g)
    r = d // 2
    rank = min(r, g.num_nodes)
    u, lam, v = fast_svd(adj, L, rank, power_iters=power_iters, seed=seed, identity_input=identity_input)
    if rank < r:
        pad = ((0, 0), (0, r - rank))
        u, v, lam = np.pad(u, pad), np.pad(v, pad), np.pad(lam, (0, r - rank))
    return build_projector(u, lam, v, d, smoothing_order=L, seed=seed, graph_id=g.fingerprint())


def tokenize(g: SparseGraph, p: Projector, adj: Optional[NormalizedAdjacency] = None,
             identity_input: bool = False) -> TokenTable:
    if p.matrix.shape[0] != g.num_nodes:
        raise ShapeError(f"projector has {p.matrix.shape[0]} rows, graph has {g.num_nodes} nodes")
    if identity_input:
        mat = p.matrix.copy()
    else:
        adj = adj if adj is not None else normalize_adjacency(g)
        mat = smooth_apply(adj, p.matrix, p.smoothing_order)
    return TokenTable(mat, graph_id=g.fingerprint(), seed=p.seed, smoothing_order=p.smoothing_order)


def build_tokens(g: SparseGraph, d: int, L: int, seed: int, power_iters: int = 2,
                 adj: Optional[NormalizedAdjacency] = None) -> TokenTable:
    """Projector + tokenization in one call; ``L == 0`` selects the identity-input ablation."""
    identity = L == 0
    adj = adj if adj is not None else normalize_adjacency(g)
    p = make_projector(g, d, L, seed, power_iters=power_iters, adj=adj, identity_input=identity)
    return tokenize(g, p, adj=adj, identity_input=identity)


def _xavier_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def project_variant(g: SparseGraph, kind: str, d: int, seed: int = 0) -> TokenTable:
    """Ablation projections: ``one_hot`` (id mod 100k table), ``degree`` table, or fixed ``random``."""
    rng = np.random.default_rng(seed)
    if kind == "one_hot":
        table = _xavier_uniform(ONE_HOT_TABLE_SIZE, d, rng)
        lookup = np.arange(g.num_nodes) % ONE_HOT_TABLE_SIZE
    elif kind == "degree":
        table = _xavier_uniform(DEGREE_TABLE_SIZE, d, rng)
        lookup = np.minimum(degree_vector(g), DEGREE_TABLE_SIZE - 1)
    elif kind == "random":
        bound = 1.0 / np.sqrt(d)
        mat = rng.uniform(-bound, bound, size=(g.num_nodes, d))
        return TokenTable(mat, graph_id=g.fingerprint(), seed=seed, kind=kind)
    else:
        raise ValueError(f"unknown projection variant {kind!r}")
    return TokenTable(table[lookup], graph_id=g.fingerprint(), seed=seed, kind=kind,
                      table=table, lookup=lookup)


# ----------------------------------------------------------------- structural augmentation

def features_to_edges(features: np.ndarray, batch_size: int, K: int = 5) -> np.ndarray:
    """Top-scoring feature-similarity pairs per batch of query rows.

    Each batch of ``batch_size`` consecutive rows scores its rows against every
    node by dot product; the best ``K`` x (non-zero rows in batch) pairs become
    edges. All-zero rows never participate. Ties break on (i, j).
    """
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    nonzero = np.any(f != 0, axis=1)
    out = []
    for start in range(0, n, batch_size):
        rows = np.arange(start, min(start + batch_size, n))
        rows = rows[nonzero[rows]]
        if rows.size == 0:
            continue
        scores = f[rows] @ f.T
        ii = np.repeat(rows, n)
        jj = np.tile(np.arange(n), rows.size)
        s = scores.ravel()
        # unordered pairs: drop self pairs, zero rows, and the mirrored copy of in-batch pairs
        in_batch = (jj >= start) & (jj < start + batch_size)
        ok = (ii != jj) & nonzero[jj] & ~(in_batch & (jj < ii))
        ii, jj, s = ii[ok], jj[ok], s[ok]
        lo, hi = np.minimum(ii, jj), np.maximum(ii, jj)
        order = np.lexsort((hi, lo, -s))
        take = order[:K * rows.size]
        out.append(np.stack([lo[take], hi[take]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def augment_with_feature_edges(g: SparseGraph, batch_size: int = 1024, K: int = 5) -> SparseGraph:
    if g.features is None:
        return g
    extra = features_to_edges(g.features, batch_size, K)
    return g.with_edges(g.num_nodes, np.concatenate([g.edge_array(), extra]))


def class_nodes_augment(g: SparseGraph, train_labels: Sequence, class_count: Optional[int] = None) -> SparseGraph:
    """Append one node per class and link each labeled training node to its class node.

    Class node c gets index ``num_nodes + c``; the offset is recorded in ``meta``.
    """
    C = class_count if class_count is not None else g.class_count
    if C is None:
        raise ValueError("class_count unknown")
    pairs = np.asarray(list(train_labels), dtype=np.int64).reshape(-1, 2)
    nodes, classes = pairs[:, 0], pairs[:, 1]
    uniq, counts = np.unique(nodes, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateLabelError(f"node {uniq[counts > 1][0]} labeled more than once")
    if classes.size and (classes.min() < 0 or classes.max() >= C):
        raise ValueError(f"class index outside [0, {C})")
    n = g.num_nodes
    class_edges = np.stack([nodes, n + classes], axis=1)
    edges = np.concatenate([g.edge_array(), class_edges])
    meta = dict(g.meta)
    meta["class_node_offset"] = n
    return SparseGraph.from_edges(n + C, edges, features=None, labels=g.labels, class_count=C, meta=meta)


# ----------------------------------------------------------------------------- persistence

def save_tokens(tokens: TokenTable, path) -> None:
    mat = np.ascontiguousarray(tokens.matrix, dtype="<f4")
    n, d = mat.shape
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(TOKEN_MAGIC, n, d, tokens.smoothing_order, tokens.seed))
        fh.write(mat.tobytes())


def load_tokens(path) -> TokenTable:
    blob = Path(path).read_bytes()
    magic, n, d, L, seed = _TOKEN_HEADER.unpack_from(blob)
    if magic != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a token file")
    mat = np.frombuffer(blob[_TOKEN_HEADER.size:], dtype="<f4").reshape(n, d)
    return TokenTable(mat.copy(), seed=seed, smoothing_order=L)


class ProjectorCache:
    """On-disk projector cache keyed by (graph hash, d, L, seed)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, g: SparseGraph, d: int, L: int, seed: int) -> Path:
        key = hashlib.sha256(f"{g.fingerprint()}:{d}:{L}:{seed}".encode()).hexdigest()[:24]
        return self.directory / f"proj-{key}.npy"

    def get(self, g: SparseGraph, d: int, L: int, seed: int, power_iters: int = 2) -> Projector:
        path = self._path(g, d, L, seed)
        if path.exists():
            return Projector(np.load(path), L, d // 2, seed, g.fingerprint())
        p = make_projector(g, d, L, seed, power_iters=power_iters, identity_input=(L == 0))
        np.save(path, p.matrix)
        return p
