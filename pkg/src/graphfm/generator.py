"""Synthetic graph generation from a text provider.

Nodes come from depth-first subdivision of a root entity; edges come from a
Gibbs-style chain whose acceptance probability is the mean embedding of the
current interaction dotted with the candidate's embedding, standardized
against a sliding pool of recent values and decayed by locality distance.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .graph import SparseGraph, save_dataset, write_features
from .provider import ProviderConfigError

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12  # pools flatter than this count as constant


class GeneratorError(RuntimeError):
    pass


class GibbsConfigError(ValueError):
    pass


class EmptyHistoryError(ValueError):
    pass


class InjectionError(ValueError):
    pass


class PartialTreeError(GeneratorError):
    def __init__(self, message: str, leaves: list):
        super().__init__(message)
        self.leaves = leaves


@dataclass
class NodeProfile:
    text: str
    path: tuple = ()
    locality: int = 0
    embedding: Optional[np.ndarray] = None

    def to_json(self) -> dict:
        return {"text": self.text, "path": list(self.path), "locality": int(self.locality)}


@dataclass
class GibbsConfig:
    localities: int = 7
    decay: float = 0.95
    window: int = 5000
    thin: int = 1000
    burn_in: int = 5000
    shift_period: int = 1000
    max_steps: int = 105_000
    initial_edges: int = 6
    seed: int = 0
    sigma_fallback: float = 0.5
    restart: bool = True  # False keeps one continuous chain across emissions
    mode: str = "person"  # person-entity incidence sets, or "entity" pairs

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise GibbsConfigError("decay must lie in (0, 1]")
        if self.window < 1 or self.thin < 1 or self.shift_period < 1 or self.localities < 1:
            raise GibbsConfigError("window, thin, shift_period and localities must be positive")
        if self.max_steps < self.burn_in:
            raise GibbsConfigError(f"max_steps {self.max_steps} < burn_in {self.burn_in}: nothing would be emitted")
        if self.mode not in ("person", "entity"):
            raise GibbsConfigError(f"unknown mode {self.mode!r}")
        if self.initial_edges < 1:
            raise GibbsConfigError("initial_edges must be >= 1")


@dataclass
class GeneratedGraph:
    profiles: list
    interactions: list  # index arrays (person mode) or (s, t) pairs (entity mode)
    mode: str = "person"
    meta: dict = field(default_factory=dict)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([p.embedding for p in self.profiles])

    def edge_array(self) -> np.ndarray:
        """Edges over a unified node set; person nodes follow the entity nodes."""
        n = len(self.profiles)
        if self.mode == "entity":
            return np.asarray(self.interactions, dtype=np.int64).reshape(-1, 2)
        parts = [np.stack([np.asarray(s, dtype=np.int64), np.full(len(s), n + k, dtype=np.int64)], 1)
                 for k, s in enumerate(self.interactions) if len(s)]
        return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return len(self.profiles) + (len(self.interactions) if self.mode == "person" else 0)

    def to_sparse_graph(self) -> SparseGraph:
        meta = {"mode": self.mode, "entity_count": len(self.profiles)}
        meta.update(self.meta)
        return SparseGraph.from_edges(self.num_nodes, self.edge_array(), meta=meta)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


# ------------------------------------------------------------------------------ nodes

def generate_nodes(root: str, scenario: str, max_depth: int, provider, localities: int = 7,
                   seed: int = 0, embed: bool = True) -> list:
    """Depth-first subdivision; nodes reaching ``max_depth`` (root has depth 1) become leaves."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    leaves: list = []

    def expand(text: str, path: tuple, depth: int) -> None:
        if depth >= max_depth:
            leaves.append((text, path))
            return
        try:
            children = provider.subdivide(text, scenario)
        except ProviderConfigError:
            raise
        except Exception as e:
            raise PartialTreeError(f"subdivision of {text!r} failed: {e}", [t for t, _ in leaves]) from e
        if not children:
            leaves.append((text, path))
            return
        for child in children:
            expand(child, path + (text,), depth + 1)

    expand(root, (), 1)
    rng = np.random.default_rng(seed)
    locs = rng.integers(0, localities, size=len(leaves))
    emb = _unit(provider.embed([t for t, _ in leaves])) if embed else [None] * len(leaves)
    return [NodeProfile(t, p, int(l), e) for (t, p), l, e in zip(leaves, locs, emb)]


# ------------------------------------------------------------------------------ probabilities

def edge_probability(a, H: np.ndarray, candidate: int) -> float:
    """Mean embedding of the nodes set in incidence vector ``a``, dotted with the candidate's embedding."""
    idx = np.flatnonzero(np.asarray(a))
    if idx.size == 0:
        raise EmptyHistoryError("interaction has no selected nodes; seed it with initial edges")
    return float(H[idx].mean(axis=0) @ H[candidate])


def normalize_probability(pool: deque, p: float, window: int, sigma_fallback: float = 0.5) -> float:
    """Standardize ``p`` against the pool, then append it and trim to ``window``.

    Stats use the pool as it stood before ``p`` arrives.
    """
    if not pool:
        raise EmptyHistoryError("normalization pool is empty")
    values = np.fromiter(pool, dtype=np.float64, count=len(pool))
    mu, sigma = values.mean(), values.std()
    pbar = sigma_fallback if sigma <= SIGMA_FLOOR else min(max((p - mu) / (4 * sigma), 0.0), 1.0)
    pool.append(p)
    while len(pool) > window:
        pool.popleft()
    return float(pbar)


def apply_locality(pbar: float, current: int, candidate: int, decay: float) -> float:
    return pbar * decay ** abs(current - candidate)


class _RollingPool:
    """Running-sum version of the pool used inside the chain."""

    def __init__(self, window: int):
        self.buf = np.zeros(window)
        self.size = self.head = 0
        self.total = self.total_sq = 0.0
        self.since_rebuild = 0

    def stats(self) -> tuple:
        mu = self.total / self.size
        var = max(self.total_sq / self.size - mu * mu, 0.0)
        return mu, var ** 0.5

    def push(self, p: float) -> None:
        w = self.buf.shape[0]
        if self.size == w:
            old = self.buf[self.head]
            self.total -= old
            self.total_sq -= old * old
        else:
            self.size += 1
        self.buf[self.head] = p
        self.head = (self.head + 1) % w
        self.total += p
        self.total_sq += p * p
        self.since_rebuild += 1
        if self.since_rebuild >= w:  # bound drift of the running sums
            live = self.buf[:self.size]
            self.total, self.total_sq = float(live.sum()), float((live * live).sum())
            self.since_rebuild = 0


def _as_arrays(profiles) -> tuple:
    if isinstance(profiles, tuple) and len(profiles) == 2:
        H, loc = profiles
        return _unit(H), np.asarray(loc, dtype=np.int64)
    H = _unit(np.stack([p.embedding for p in profiles]))
    return H, np.array([p.locality for p in profiles], dtype=np.int64)


def gibbs_sample(profiles, cfg: GibbsConfig, trace: Optional[list] = None) -> list:
    """Run the edge chain and return the emitted interactions.

    ``profiles`` is a NodeProfile list or an (embeddings, localities) pair.
    When ``trace`` is a list, one dict per step is appended to it.
    """
    H, loc = _as_arrays(profiles)
    V = H.shape[0]
    if V < 2:
        raise GeneratorError("need at least two nodes")
    if cfg.max_steps < cfg.burn_in:
        raise GibbsConfigError("max_steps < burn_in")
    init_rng, accept_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    k0 = 1 if cfg.mode == "entity" else min(cfg.initial_edges, V)
    decay_table = cfg.decay ** np.arange(max(cfg.localities, int(loc.max()) + 1) + 1, dtype=np.float64)

    def fresh():
        a = np.zeros(V, dtype=bool)
        a[init_rng.choice(V, size=k0, replace=False)] = True
        return a

    a = fresh()
    sel_sum = H[a].sum(axis=0)
    count = int(a.sum())
    source = int(np.flatnonzero(a)[0])
    pool = _RollingPool(cfg.window)
    current = 0
    out = []
    block = 4096
    uniforms = np.empty(0)
    for t in range(1, cfg.max_steps + 1):
        if (t - 1) % block == 0:
            uniforms = accept_rng.random(min(block, cfg.max_steps - t + 1))
        if t % cfg.shift_period == 0:
            current = (current + 1) % cfg.localities
        i = t % V
        p = float(sel_sum @ H[i]) / count
        if pool.size == 0:
            pbar = cfg.sigma_fallback
        else:
            mu, sigma = pool.stats()
            pbar = cfg.sigma_fallback if sigma <= SIGMA_FLOOR else min(max((p - mu) / (4 * sigma), 0.0), 1.0)
        pool.push(p)
        phat = pbar * decay_table[abs(current - loc[i])]
        u = uniforms[(t - 1) % block]
        accepted = u < phat
        if accepted and not a[i]:
            a[i] = True
            sel_sum = sel_sum + H[i]
            count += 1
        if trace is not None:
            trace.append({"t": t, "candidate": i, "p": p, "pbar": pbar, "phat": phat, "u": float(u),
                          "accepted": bool(accepted), "locality": current})
        if t >= cfg.burn_in and t % cfg.thin == 0:
            if cfg.mode == "entity":
                targets = np.flatnonzero(a)
                targets = targets[targets != source]
                out.extend((source, int(j)) for j in targets)
            else:
                out.append(np.flatnonzero(a))
            if cfg.restart:
                a = fresh()
                sel_sum = H[a].sum(axis=0)
                count = int(a.sum())
                source = int(np.flatnonzero(a)[0])
    return out


# ------------------------------------------------------------------------------ topology injection

def _gcn_propagation(n: int, edges: np.ndarray) -> torch.Tensor:
    e = torch.as_tensor(edges, dtype=torch.long).reshape(-1, 2)
    loops = torch.arange(n)
    rows = torch.cat([e[:, 0], e[:, 1], loops])
    cols = torch.cat([e[:, 1], e[:, 0], loops])
    deg = torch.bincount(rows, minlength=n).double()
    vals = deg[rows].rsqrt() * deg[cols].rsqrt()
    return torch.sparse_coo_tensor(torch.stack([rows, cols]), vals, (n, n), check_invariants=True).coalesce()


def inject_topology(H: np.ndarray, edges, epochs: int = 100, lr: float = 1e-2, seed: int = 0,
                    negatives: int = 1) -> np.ndarray:
    """Refresh embeddings with a 2-layer GCN trained on a pairwise link loss.

    The node table starts at ``H`` and the second layer starts at zero, so the
    output equals the input until training moves it.
    """
    H = np.asarray(H, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] == 0:
        raise InjectionError("generated graph has no edges")
    if epochs == 0:
        return H.copy()
    n, d = H.shape
    gen = torch.Generator().manual_seed(seed)
    A = _gcn_propagation(n, edges)
    x0 = torch.nn.Parameter(torch.as_tensor(H).clone())
    w1 = torch.nn.Parameter(torch.empty(d, d, dtype=torch.float64))
    torch.nn.init.xavier_uniform_(w1, generator=gen)
    w2 = torch.nn.Parameter(torch.zeros(d, d, dtype=torch.float64))
    opt = torch.optim.Adam([x0, w1, w2], lr=lr)
    src = torch.as_tensor(np.concatenate([edges[:, 0], edges[:, 1]]))
    dst = torch.as_tensor(np.concatenate([edges[:, 1], edges[:, 0]]))

    def forward():
        h = torch.relu(torch.sparse.mm(A, x0 @ w1))
        return x0 + torch.sparse.mm(A, h @ w2)

    for _ in range(epochs):
        opt.zero_grad()
        z = torch.nn.functional.normalize(forward(), dim=1)
        neg = torch.randint(0, n, (negatives, src.shape[0]), generator=gen)
        pos = (z[src] * z[dst]).sum(1)
        loss = sum(torch.nn.functional.softplus(-(pos - (z[src] * z[k]).sum(1))).mean() for k in neg)
        loss.backward()
        opt.step()
    with torch.no_grad():
        return _unit(forward().numpy())


# ------------------------------------------------------------------------------ densify

def densify(g: SparseGraph, min_degree: int = 10) -> tuple:
    """Peel nodes of degree < min_degree until none remain; returns (graph, kept ids, removed count)."""
    deg = np.diff(g.indptr).astype(np.int64)
    alive = np.ones(g.num_nodes, dtype=bool)
    stack = list(np.flatnonzero(deg < min_degree))
    alive[stack] = False
    while stack:
        u = stack.pop()
        for v in g.neighbors(u):
            if alive[v]:
                deg[v] -= 1
                if deg[v] < min_degree:
                    alive[v] = False
                    stack.append(int(v))
    kept = np.flatnonzero(alive)
    removed = g.num_nodes - kept.size
    if kept.size == 0:
        log.warning("densify removed every node (min_degree=%d)", min_degree)
    remap = -np.ones(g.num_nodes, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    edges = g.edge_array()
    edges = edges[alive[edges[:, 0]] & alive[edges[:, 1]]]
    meta = dict(g.meta)
    if "entity_count" in meta:
        # entities precede persons, so survivors stay a contiguous prefix
        meta["entity_count"] = int((kept < meta["entity_count"]).sum())
    out = SparseGraph.from_edges(kept.size, remap[edges], meta=meta)
    return out, kept, removed


# ------------------------------------------------------------------------------ pipeline

@dataclass
class GenerationResult:
    gen0: GeneratedGraph
    final: GeneratedGraph
    graph: SparseGraph
    kept: np.ndarray


def generate_dataset(root: str, scenario: str, depth: int, provider, cfg: GibbsConfig,
                     inject_epochs: int = 0, min_degree: int = 0) -> GenerationResult:
    """Gen0 from text embeddings; optionally re-run the chain on injected embeddings, then densify."""
    profiles = generate_nodes(root, scenario, depth, provider, localities=cfg.localities, seed=cfg.seed)
    gen0 = GeneratedGraph(profiles, gibbs_sample(profiles, cfg), cfg.mode)
    final = gen0
    if inject_epochs > 0:
        g0 = gen0.to_sparse_graph()
        n = len(profiles)
        H = gen0.embeddings
        if gen0.mode == "person":
            # a person's starting vector is the mean of the entities it touched
            persons = [H[s].mean(0) if len(s) else np.zeros(H.shape[1]) for s in gen0.interactions]
            H = np.vstack([H] + ([np.stack(persons)] if persons else []))
        H1 = inject_topology(H, g0.edge_array(), epochs=inject_epochs, seed=cfg.seed)[:n]
        refreshed = [NodeProfile(p.text, p.path, p.locality, h) for p, h in zip(profiles, H1)]
        final = GeneratedGraph(refreshed, gibbs_sample(refreshed, cfg), cfg.mode, {"injected": True})
    graph = final.to_sparse_graph()
    kept = np.arange(graph.num_nodes)
    if min_degree > 0:
        graph, kept, removed = densify(graph, min_degree)
        log.info("densify removed %d nodes", removed)
    return GenerationResult(gen0, final, graph, kept)


def save_generated(result: GenerationResult, directory, extra_meta: Optional[dict] = None) -> Path:
    """Dataset directory plus profiles.jsonl and embeddings.bin for the surviving entity nodes."""
    directory = Path(directory)
    meta = {"kept_ids": [int(k) for k in result.kept]}
    meta.update(extra_meta or {})
    save_dataset(result.graph, directory, meta)
    n_ent = len(result.final.profiles)
    ents = [int(k) for k in result.kept if k < n_ent]
    with open(directory / "profiles.jsonl", "w", encoding="utf-8") as fh:
        for k in ents:
            fh.write(json.dumps(result.final.profiles[k].to_json()) + "\n")
    if ents:
        write_features(directory / "embeddings.bin", result.final.embeddings[ents])
    return directory


def gibbs_config_dict(cfg: GibbsConfig) -> dict:
    return asdict(cfg)
