"""Masked-edge pretraining of the graph transformer over one or more graphs."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .graph import SparseGraph, normalize_adjacency
from .tokenizer import TokenTable, build_tokens, make_projector, project_variant, tokenize
from .transformer import (GraphTransformer, load_checkpoint, pairwise_loss, sample_edges, sample_negatives,
                          save_checkpoint)

log = logging.getLogger(__name__)


class MaskError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    l2_lambda: float = 1e-6
    batch_size: int = 1024
    d: int = 1024
    smoothing_order: int = 3
    layers: int = 3
    heads: int = 4
    anchors: int = 256
    scale: float = 10.0
    projector_refresh_every: int = 10
    max_steps: int = 1000
    checkpoint_every: int = 0
    seed: int = 0
    power_iters: int = 2
    dtype: str = "float32"
    projection: str = "svd"  # svd | one_hot | degree | random
    use_anchors: bool = True
    sequence_sampling: bool = True
    strict_mae: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "d", "heads", "anchors", "scale",
                     "projector_refresh_every", "power_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("l2_lambda", "smoothing_order", "layers", "max_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.projection not in ("svd", "one_hot", "degree", "random"):
            raise ValueError(f"unknown projection {self.projection!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MaskedView:
    """A graph with some undirected edges hidden; ``keep`` flags surviving CSR entries."""

    graph: SparseGraph
    keep: np.ndarray

    def degrees(self) -> np.ndarray:
        return np.bincount(self.graph.row_ids()[self.keep], minlength=self.graph.num_nodes)

    def normalized(self):
        return normalize_adjacency(self.graph, keep=self.keep)


def mask_edges(g: SparseGraph, batch_edges) -> MaskedView:
    edges = np.asarray(batch_edges, dtype=np.int64).reshape(-1, 2)
    keep = np.ones(g.num_entries, dtype=bool)
    if edges.shape[0] == 0:
        return MaskedView(g, keep)
    present = g.has_edges(edges[:, 0], edges[:, 1])
    if not present.all():
        u, v = edges[~present][0]
        raise MaskError(f"edge ({u}, {v}) not in graph")
    keys = g.row_ids() * g.num_nodes + g.indices
    drop = np.concatenate([edges[:, 0] * g.num_nodes + edges[:, 1], edges[:, 1] * g.num_nodes + edges[:, 0]])
    keep[np.isin(keys, drop)] = False
    return MaskedView(g, keep)


@dataclass
class GraphSlot:
    """A training graph plus its current projector seed and tokens."""

    name: str
    graph: SparseGraph
    projector_seed: int = 0
    tokens: Optional[TokenTable] = None
    refreshes: int = 0


@dataclass
class TrainState:
    model: GraphTransformer
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    slots: list
    step: int = 0
    table: Optional[torch.nn.Parameter] = None  # learnable projection variants only
    history: list = field(default_factory=list)


def _projector_seed(base: int, graph_index: int, refresh: int) -> int:
    return int((base * 1_000_003 + graph_index * 7919 + refresh * 104_729) % (2**31 - 1))


def refresh_tokens(slot: GraphSlot, cfg: TrainConfig, index: int) -> None:
    slot.projector_seed = _projector_seed(cfg.seed, index, slot.refreshes)
    if cfg.projection == "svd":
        slot.tokens = build_tokens(slot.graph, cfg.d, cfg.smoothing_order, slot.projector_seed,
                                   power_iters=cfg.power_iters)
    else:
        # the ablation variants are fixed per graph; learnable tables are shared model parameters
        slot.tokens = project_variant(slot.graph, cfg.projection, cfg.d, seed=cfg.seed)


def init_state(graphs: Sequence, cfg: TrainConfig, names: Optional[Sequence[str]] = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = GraphTransformer(cfg.d, cfg.layers, cfg.heads, cfg.anchors, cfg.scale).to(cfg.torch_dtype)
    names = list(names) if names is not None else [f"graph{i}" for i in range(len(graphs))]
    slots = [GraphSlot(n, g) for n, g in zip(names, graphs)]
    for i, slot in enumerate(slots):
        refresh_tokens(slot, cfg, i)
    table = None
    params = list(model.parameters())
    if slots and slots[0].tokens.learnable:
        table = torch.nn.Parameter(torch.as_tensor(slots[0].tokens.table, dtype=cfg.torch_dtype))
        params.append(table)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return TrainState(model, opt, np.random.default_rng(cfg.seed), slots, table=table)


def _batch_tokens(state: TrainState, slot: GraphSlot, cfg: TrainConfig, nodes: np.ndarray,
                  view: Optional[MaskedView]) -> torch.Tensor:
    dtype = cfg.torch_dtype
    if state.table is not None:
        return state.table[torch.as_tensor(slot.tokens.lookup[nodes])]
    if cfg.strict_mae and view is not None and cfg.projection == "svd":
        adj = view.normalized()
        p = make_projector(slot.graph, cfg.d, cfg.smoothing_order, slot.projector_seed,
                           power_iters=cfg.power_iters, adj=adj)
        mat = tokenize(slot.graph, p, adj=adj).matrix
    else:
        mat = slot.tokens.matrix
    return torch.as_tensor(mat[nodes], dtype=dtype)


def train_step(state: TrainState, slot_index: int, cfg: TrainConfig) -> float:
    slot = state.slots[slot_index]
    g = slot.graph
    rng = state.rng
    B = cfg.batch_size
    centric, positive = sample_edges(g, B, rng)
    negative = sample_negatives(g, centric, rng)
    batch_nodes = np.concatenate([centric, positive, negative])
    view = mask_edges(g, np.stack([centric, positive], 1)) if cfg.strict_mae else None

    if cfg.sequence_sampling:
        seq_nodes = batch_nodes
        gather = None
    else:
        seq_nodes = np.arange(g.num_nodes)
        gather = torch.as_tensor(batch_nodes)
    x = _batch_tokens(state, slot, cfg, seq_nodes, view)
    anchors = state.model.draw_anchors(x.shape[0], rng, cfg.use_anchors)

    state.optimizer.zero_grad(set_to_none=True)
    out = state.model(x, anchors)
    if gather is not None:
        out = out[gather]
    loss = pairwise_loss(out, B)
    if cfg.l2_lambda:
        loss = loss + cfg.l2_lambda * state.model.l2_penalty()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss at step {state.step + 1} on graph {slot.name!r} "
                                 f"(rng state {rng.bit_generator.state['state']})")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return value


# ----------------------------------------------------------------------------- persistence

def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_state(state: TrainState, path, cfg: TrainConfig, extra: Optional[dict] = None) -> None:
    tensors = {}
    params = dict(state.model.named_parameters())
    if state.table is not None:
        tensors["variant.table"] = state.table.detach()
        params["variant.table"] = state.table
    for name, p in params.items():
        st = state.optimizer.state.get(p)
        if st:
            tensors[f"adam.m.{name}"] = st["exp_avg"]
            tensors[f"adam.v.{name}"] = st["exp_avg_sq"]
    meta = {
        "step": state.step,
        "rng": _rng_state_json(state.rng),
        "config": cfg.to_dict(),
        "graphs": [{"name": s.name, "fingerprint": s.graph.fingerprint(), "refreshes": s.refreshes,
                    "projector_seed": s.projector_seed} for s in state.slots],
    }
    meta.update(extra or {})
    save_checkpoint(path, state.model, tensors, meta)


def restore_state(path, graphs: Sequence, names: Optional[Sequence[str]] = None) -> tuple:
    """Rebuild (state, cfg) from a checkpoint written by :func:`save_state`."""
    model, tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(graphs, cfg, names)
    with torch.no_grad():
        for p_new, p_old in zip(state.model.parameters(), model.parameters()):
            p_new.copy_(p_old.to(cfg.torch_dtype))
    params = dict(state.model.named_parameters())
    if state.table is not None:
        with torch.no_grad():
            state.table.copy_(torch.from_numpy(tensors["variant.table"]))
        params["variant.table"] = state.table
    step = meta["step"]
    for name, p in params.items():
        if f"adam.m.{name}" in tensors:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(tensors[f"adam.m.{name}"]).to(cfg.torch_dtype),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam.v.{name}"]).to(cfg.torch_dtype),
            }
    state.step = step
    state.rng.bit_generator.state = meta["rng"]
    for i, (slot, info) in enumerate(zip(state.slots, meta["graphs"])):
        if info["fingerprint"] != slot.graph.fingerprint():
            raise ValueError(f"graph {i} does not match the checkpoint's training graph {info['name']!r}")
        slot.refreshes = info["refreshes"]
        refresh_tokens(slot, cfg, i)
    return state, cfg


def train_loop(graphs: Sequence, cfg: TrainConfig, out_dir=None, names: Optional[Sequence[str]] = None,
               resume: Optional[str] = None, steps: Optional[int] = None,
               on_step: Optional[Callable] = None) -> TrainState:
    """Run up to ``cfg.max_steps`` steps (or ``steps`` more when resuming).

    Each step trains on a uniformly drawn graph; every ``projector_refresh_every``
    steps that graph's projector is rebuilt with a fresh seed. Checkpoints go to
    ``out_dir/model.ckpt`` and the loss curve to ``out_dir/loss.csv``.
    """
    if not graphs:
        raise ValueError("need at least one training graph")
    if resume:
        state, _ = restore_state(resume, graphs, names)
    else:
        state = init_state(graphs, cfg, names)
    target = state.step + steps if steps is not None else cfg.max_steps
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "a" if resume else "w", newline="")
        writer = csv.writer(fh)
        if not resume:
            writer.writerow(["step", "loss", "graph_id"])
    try:
        while state.step < target:
            gi = int(state.rng.integers(len(state.slots)))
            slot = state.slots[gi]
            if (state.step + 1) % cfg.projector_refresh_every == 0 and cfg.projection == "svd":
                slot.refreshes += 1
                refresh_tokens(slot, cfg, gi)
            loss = train_step(state, gi, cfg)
            state.history.append((state.step, loss, slot.name))
            if writer is not None:
                writer.writerow([state.step, repr(loss), slot.name])
            if on_step is not None:
                on_step(state, loss)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / "model.ckpt", cfg)
        if out is not None:
            save_state(state, out / "model.ckpt", cfg)
    finally:
        if writer is not None:
            fh.close()
    return state


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    data = tomllib.loads(text)
    return data.get("train", data)
