"""Ablation runs: efficiency toggles, smoothing order and projection sweeps with memory peaks."""
from __future__ import annotations

import logging
import multiprocessing as mp
import resource
import threading
import time
from dataclasses import replace
from typing import Optional

import numpy as np
import psutil
import torch

from .evaluation import recall_at_n, embedding_scorer
from .graph import SparseGraph
from .pretrain import TrainConfig, train_loop
from .tokenizer import build_tokens, project_variant
from .transformer import encode_all

log = logging.getLogger(__name__)

# name -> (token-sequence sampling, anchor sampling)
VARIANTS = {
    "full": (True, True),
    "-S-A": (False, False),
    "-Anc": (True, False),
    "-Seq": (False, True),
}
MIB = 1 << 20


class PeakMemory:
    """Resident-set peak of this process, sampled on a background thread."""

    def __init__(self, interval: float = 0.1):
        self.interval = interval
        self.proc = psutil.Process()
        self.peak = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def sample(self) -> None:
        self.peak = max(self.peak, self.proc.memory_info().rss)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self.sample()

    def __enter__(self) -> "PeakMemory":
        self.sample()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._stop.set()
        self._thread.join()
        self.sample()

    @property
    def peak_mib(self) -> float:
        return self.peak / MIB


def attention_bytes(seq_len: int, cfg: TrainConfig, anchors: bool) -> int:
    """Rough size of one layer's attention weights, used to skip runs that cannot fit."""
    width = min(cfg.anchors, seq_len) if anchors else seq_len
    itemsize = 8 if cfg.dtype == "float64" else 4
    return cfg.heads * seq_len * width * itemsize


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    seq, anc = VARIANTS[variant]
    return replace(cfg, sequence_sampling=seq, use_anchors=anc)


def run_one(train_graph: SparseGraph, test_edges: Optional[np.ndarray], cfg: TrainConfig, label: str,
            N: int = 20, budget_mib: float = 2048.0, eval_limit: int = 2000) -> dict:
    """Train, then encode the whole graph and score held-out edges."""
    torch.set_num_threads(1)
    row = {"label": label, "smoothing": cfg.smoothing_order, "projection": cfg.projection,
           "sequence_sampling": cfg.sequence_sampling, "anchors": cfg.use_anchors}
    train_len = 3 * cfg.batch_size if cfg.sequence_sampling else train_graph.num_nodes
    need = attention_bytes(train_len, cfg, cfg.use_anchors) / MIB
    if need > budget_mib:
        row["status"] = f"skipped: attention needs ~{need:.0f} MiB"
        return row
    t0 = time.perf_counter()
    with PeakMemory() as mem:
        state = train_loop([train_graph], cfg)
    row["train_seconds"] = time.perf_counter() - t0
    row["peak_rss_mib"] = mem.peak_mib
    row["final_loss"] = state.history[-1][1] if state.history else float("nan")
    if test_edges is None:
        row["status"] = "ok"
        return row
    need = attention_bytes(train_graph.num_nodes, cfg, cfg.use_anchors) / MIB
    if need > budget_mib:
        row["status"] = f"test skipped: attention needs ~{need:.0f} MiB"
        return row
    t0 = time.perf_counter()
    with PeakMemory() as mem:
        if state.table is not None:
            tokens = state.table.detach().numpy()[state.slots[0].tokens.lookup]
        else:
            tokens = state.slots[0].tokens.matrix
        emb = encode_all(state.model, tokens, np.random.default_rng(cfg.seed + 1), cfg.use_anchors)
    row["test_seconds"] = time.perf_counter() - t0
    row["test_peak_rss_mib"] = mem.peak_mib
    edges = np.asarray(test_edges)
    if edges.shape[0] > eval_limit:
        edges = edges[np.random.default_rng(cfg.seed).choice(edges.shape[0], eval_limit, replace=False)]
    row[f"recall@{N}"] = recall_at_n(embedding_scorer(emb), train_graph, edges, N)
    row["status"] = "ok"
    return row


def _child(queue, args, kwargs) -> None:
    try:
        row = run_one(*args, **kwargs)
        row["lifetime_maxrss_mib"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
        queue.put(row)
    except BaseException as e:  # surface the failure to the parent
        queue.put({"label": args[3], "status": f"failed: {type(e).__name__}: {e}"})


def run_isolated(*args, **kwargs) -> dict:
    """``run_one`` in a fresh interpreter so each memory peak starts from a clean process."""
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    proc = ctx.Process(target=_child, args=(queue, args, kwargs))
    proc.start()
    row = queue.get()
    proc.join()
    return row


def plan_runs(cfg: TrainConfig, variants=("full",), smoothing=(), projections=(), layer_counts=(),
              dims=()) -> list:
    """(label, config) pairs for every requested toggle."""
    runs = [(v, variant_config(cfg, v)) for v in variants]
    runs += [(f"L={L}", replace(cfg, smoothing_order=L)) for L in smoothing]
    runs += [(f"proj={p}", replace(cfg, projection=p)) for p in projections]
    runs += [(f"layers={k}", replace(cfg, layers=k)) for k in layer_counts]
    runs += [(f"d={d}", replace(cfg, d=d)) for d in dims]
    return runs


def format_table(rows: list, metric: str = "recall@20") -> str:
    lines = ["label\t" + metric + "\tpeak_rss_mib\ttrain_seconds\tstatus"]
    for r in rows:
        cells = [f"{r[k]:.4f}" if isinstance(r.get(k), float) else "-"
                 for k in (metric, "peak_rss_mib", "train_seconds")]
        lines.append("\t".join([r["label"], *cells, r.get("status", "-")]))
    return "\n".join(lines)


def raw_token_recall(train_graph: SparseGraph, test_edges: np.ndarray, cfg: TrainConfig, N: int = 20) -> float:
    """Recall of the tokens alone, a model-free reference point."""
    if cfg.projection == "svd":
        tokens = build_tokens(train_graph, cfg.d, cfg.smoothing_order, cfg.seed, power_iters=cfg.power_iters)
    else:
        tokens = project_variant(train_graph, cfg.projection, cfg.d, seed=cfg.seed)
    return recall_at_n(embedding_scorer(tokens.matrix), train_graph, test_edges, N)
