"""Sparse undirected graphs in CSR form, symmetric normalization and dataset I/O."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

FEATURE_MAGIC = b"GFMFEAT1"
_FEATURE_HEADER = struct.Struct("<8sII")  # 16 bytes: magic, rows, cols


class GraphFormatError(ValueError):
    """Malformed dataset or edge-list file."""


class GraphBoundsError(IndexError):
    """Node index outside the declared node range."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Immutable undirected simple graph stored as symmetric CSR.

    ``indptr``/``indices`` follow the scipy convention; every undirected edge
    appears twice. Column indices are strictly increasing inside each row.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    class_count: Optional[int] = None
    id_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_edges(cls, num_nodes: int, edges, **kwargs) -> "SparseGraph":
        """Build from an (m, 2) array of node pairs; duplicates and direction are collapsed."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            bad = edges[(edges < 0).any(1) | (edges >= num_nodes).any(1)][0]
            raise GraphBoundsError(f"edge {tuple(bad)} outside node range [0, {num_nodes})")
        edges = edges[edges[:, 0] != edges[:, 1]]
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        # dedup on the flattened key, then sort row-major
        key = np.unique(rows * num_nodes + cols)
        rows, cols = key // num_nodes, key % num_nodes
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        indptr.flags.writeable = False
        cols = cols.astype(np.int64)
        cols.flags.writeable = False
        return cls(num_nodes=int(num_nodes), indptr=indptr, indices=cols, **kwargs)

    @property
    def num_entries(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.num_entries // 2

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with u < v, sorted."""
        rows = self.row_ids()
        mask = rows < self.indices
        return np.stack([rows[mask], self.indices[mask]], axis=1)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.shape[0] and nb[i] == v)

    def has_edges(self, u, v) -> np.ndarray:
        """Vectorized adjacency test for equal-length node arrays."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        keys = self._entry_keys
        q = u * self.num_nodes + v
        if keys.shape[0] == 0:
            return np.zeros(q.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, q), keys.shape[0] - 1)
        return keys[pos] == q

    @cached_property
    def _entry_keys(self) -> np.ndarray:
        # row-major CSR order makes these sorted
        return self.row_ids() * self.num_nodes + self.indices

    def to_scipy(self, dtype=np.float64) -> sp.csr_matrix:
        data = np.ones(self.num_entries, dtype=dtype)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes,) * 2)

    def with_edges(self, num_nodes: int, edges) -> "SparseGraph":
        """New graph on ``num_nodes`` nodes with the given edges, carrying features/labels over."""
        return SparseGraph.from_edges(num_nodes, edges, features=self.features, labels=self.labels,
                                      class_count=self.class_count, meta=dict(self.meta))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<q", self.num_nodes))
        h.update(np.ascontiguousarray(self.indptr, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.indices, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D^-1/2 A D^-1/2 sharing the CSR layout of its source graph."""

    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def degree_vector(g: SparseGraph) -> np.ndarray:
    return np.diff(g.indptr)


def normalize_adjacency(g: SparseGraph, keep: Optional[np.ndarray] = None,
                        dtype=np.float64) -> NormalizedAdjacency:
    """Symmetric normalization; ``keep`` optionally masks CSR entries out (masked edge view).

    Zero-degree nodes keep empty rows.
    """
    if keep is None:
        indptr, indices = g.indptr, g.indices
    else:
        keep = np.asarray(keep, dtype=bool)
        rows = g.row_ids()[keep]
        indices = g.indices[keep]
        indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
    deg = np.diff(indptr).astype(np.float64)
    rows = np.repeat(np.arange(g.num_nodes), np.diff(indptr))
    # one rounding (not two) keeps entries like 1/sqrt(2*2) exact
    vals = (1.0 / np.sqrt(deg[rows] * deg[indices])).astype(dtype)
    mat = sp.csr_matrix((vals, indices, indptr), shape=(g.num_nodes, g.num_nodes))
    return NormalizedAdjacency(mat)


def spmm(m: NormalizedAdjacency, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[0] != m.num_nodes:
        raise ShapeError(f"operand has {x.shape[0] if x.ndim else 0} rows, adjacency has {m.num_nodes}")
    return np.asarray(m.matrix @ x)


# --------------------------------------------------------------------------- I/O

def _parse_edge_lines(lines: Iterable[str], source: str):
    declared = None
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "nodes":
                try:
                    declared = int(parts[1])
                except ValueError:
                    raise GraphFormatError(f"{source}:{lineno}: bad node-count header {line!r}") from None
                continue
            raise GraphFormatError(f"{source}:{lineno}: unrecognized header {line!r}")
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{source}:{lineno}: expected 2 fields, got {len(parts)}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{source}:{lineno}: non-integer node id in {line!r}") from None
        if u < 0 or v < 0:
            raise GraphFormatError(f"{source}:{lineno}: negative node id")
        if declared is not None and (u >= declared or v >= declared):
            raise GraphBoundsError(f"{source}:{lineno}: node {max(u, v)} >= declared count {declared}")
        pairs.append((u, v))
    return declared, np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _graph_from_pairs(declared, pairs) -> SparseGraph:
    if declared is not None:
        return SparseGraph.from_edges(declared, pairs)
    if pairs.size == 0:
        return SparseGraph.from_edges(0, pairs)
    ids = np.unique(pairs)
    if ids[-1] + 1 == ids.shape[0]:
        return SparseGraph.from_edges(int(ids.shape[0]), pairs)
    remapped = np.searchsorted(ids, pairs)
    return SparseGraph.from_edges(int(ids.shape[0]), remapped, id_map=ids)


def load_edge_list(path, format: str = "tsv-edges") -> SparseGraph:
    """Load ``tsv-edges`` (one pair per line, optional ``#nodes N``) or a ``dataset-dir``."""
    path = Path(path)
    if format == "dataset-dir":
        return load_dataset(path)
    if format != "tsv-edges":
        raise ValueError(f"unknown format {format!r}")
    with open(path, encoding="utf-8") as fh:
        declared, pairs = _parse_edge_lines(fh, str(path))
    return _graph_from_pairs(declared, pairs)


def save_edge_list(g: SparseGraph, path) -> None:
    edges = g.edge_array()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#nodes {g.num_nodes}\n")
        for u, v in edges:
            fh.write(f"{u}\t{v}\n")


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, rows, cols))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise GraphFormatError(f"{path}: truncated header")
    magic, rows, cols = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    body = blob[_FEATURE_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise GraphFormatError(f"{path}: expected {rows}x{cols} float32 payload")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def save_dataset(g: SparseGraph, directory, extra_meta: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_edge_list(g, directory / "edges.tsv")
    meta = {"num_nodes": g.num_nodes, "class_count": g.class_count}
    meta.update(g.meta)
    if extra_meta:
        meta.update(extra_meta)
    if g.features is not None:
        write_features(directory / "features.bin", g.features)
    if g.labels is not None:
        with open(directory / "labels.tsv", "w", encoding="utf-8") as fh:
            for node, cls in enumerate(g.labels):
                if cls >= 0:
                    fh.write(f"{node}\t{int(cls)}\n")
    if g.id_map is not None:
        meta["id_map"] = [int(i) for i in g.id_map]
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_dataset(directory) -> SparseGraph:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(directory / "edges.tsv", encoding="utf-8") as fh:
        declared, pairs = _parse_edge_lines(fh, str(directory / "edges.tsv"))
    n = meta.get("num_nodes", declared)
    if n is not None and declared is not None and declared != n:
        raise GraphFormatError(f"{directory}: meta.json says {n} nodes, edges.tsv says {declared}")
    if n is not None and pairs.size and pairs.max() >= n:
        raise GraphBoundsError(f"{directory}: node {pairs.max()} >= declared count {n}")
    base = SparseGraph.from_edges(int(n), pairs) if n is not None else _graph_from_pairs(None, pairs)
    features = labels = None
    if (directory / "features.bin").exists():
        features = read_features(directory / "features.bin")
        if features.shape[0] != base.num_nodes:
            raise GraphFormatError(f"{directory}: {features.shape[0]} feature rows for {base.num_nodes} nodes")
    class_count = meta.get("class_count")
    if (directory / "labels.tsv").exists():
        labels = np.full(base.num_nodes, -1, dtype=np.int64)
        with open(directory / "labels.tsv", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                parts = raw.split()
                if len(parts) != 2:
                    raise GraphFormatError(f"labels.tsv:{lineno}: expected node<TAB>class")
                node, cls = int(parts[0]), int(parts[1])
                if node >= base.num_nodes:
                    raise GraphBoundsError(f"labels.tsv:{lineno}: node {node} out of range")
                labels[node] = cls
        if class_count is None:
            class_count = int(labels.max()) + 1
    known = {"num_nodes", "class_count", "id_map"}
    id_map = np.asarray(meta["id_map"]) if "id_map" in meta else base.id_map
    return SparseGraph(num_nodes=base.num_nodes, indptr=base.indptr, indices=base.indices,
                       features=features, labels=labels, class_count=class_count, id_map=id_map,
                       meta={k: v for k, v in meta.items() if k not in known})
