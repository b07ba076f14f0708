"""Scalable graph transformer with two-stage anchor attention."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .graph import SparseGraph
from .tokenizer import LN_EPS, NumericError, TokenTable

CKPT_MAGIC = b"GFMCKPT1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIIfI")  # magic, version, d, L', H, S, K, d_ff
NEG_REJECTION_CAP = 100


class SamplingError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class TokenBatch:
    """3B token rows ordered centric | positive | negative."""

    nodes: np.ndarray  # (3B,) node ids
    sequence: np.ndarray  # (3B, d)

    @property
    def size(self) -> int:
        return self.nodes.shape[0] // 3

    @property
    def centric(self) -> np.ndarray:
        return self.nodes[:self.size]

    @property
    def positive(self) -> np.ndarray:
        return self.nodes[self.size:2 * self.size]

    @property
    def negative(self) -> np.ndarray:
        return self.nodes[2 * self.size:]


def sample_edges(g: SparseGraph, B: int, rng: np.random.Generator,
                 keep: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """B directed CSR entries drawn uniformly with replacement -> (centric, positive)."""
    pool = np.flatnonzero(keep) if keep is not None else None
    total = g.num_entries if pool is None else pool.shape[0]
    if total == 0:
        raise SamplingError("graph has no edges to sample")
    if B < 1:
        raise SamplingError("batch size must be >= 1")
    picks = rng.integers(0, total, size=B)
    if pool is not None:
        picks = pool[picks]
    rows = np.searchsorted(g.indptr, picks, side="right") - 1
    return rows, g.indices[picks]


def sample_negatives(g: SparseGraph, centric: np.ndarray, rng: np.random.Generator,
                     cap: int = NEG_REJECTION_CAP) -> np.ndarray:
    """Uniform nodes, re-drawn while equal or adjacent to their centric node (at most ``cap`` times)."""
    neg = rng.integers(0, g.num_nodes, size=centric.shape[0])
    for _ in range(cap):
        bad = (neg == centric) | g.has_edges(centric, neg)
        if not bad.any():
            break
        neg[bad] = rng.integers(0, g.num_nodes, size=int(bad.sum()))
    return neg


def sample_token_batch(tokens, g: SparseGraph, B: int, rng: np.random.Generator) -> TokenBatch:
    centric, positive = sample_edges(g, B, rng)
    negative = sample_negatives(g, centric, rng)
    nodes = np.concatenate([centric, positive, negative])
    mat = tokens.matrix if isinstance(tokens, TokenTable) else tokens
    return TokenBatch(nodes, None if mat is None else mat[nodes])


def sample_anchors(batch_len: int, S: int, rng: np.random.Generator) -> np.ndarray:
    if S > batch_len:
        raise ConfigError(f"{S} anchors requested from a sequence of {batch_len}")
    if S < 1:
        raise ConfigError("anchor count must be >= 1")
    return rng.choice(batch_len, size=S, replace=False)


class AnchorAttention(nn.Module):
    """Multi-head attention routed through a sampled subset of anchor tokens.

    Stage 1 lets each anchor attend over every token; stage 2 lets every token
    attend over the anchors, whose values are the (concatenated) stage-1
    outputs passed through the same value map. ``anchors=None`` falls back to
    plain full self-attention.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} not divisible by H={heads}")
        self.d, self.heads, self.head_dim = d, heads, d // heads
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(x.shape[0], self.heads, self.head_dim).transpose(0, 1)  # H x n x dh

    def _softmax(self, logits: torch.Tensor, layer: int) -> torch.Tensor:
        if not torch.isfinite(logits).all():
            raise NumericError(f"non-finite attention logits in layer {layer}")
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, anchors: Optional[torch.Tensor] = None, layer: int = 0,
                return_weights: bool = False):
        n = x.shape[0]
        scale = 1.0 / math.sqrt(self.head_dim)
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        if anchors is None:
            alpha = self._softmax(q @ k.transpose(1, 2) * scale, layer)
            mixed = (alpha @ v).transpose(0, 1).reshape(n, self.d)
            weights = (alpha,)
        else:
            qa, ka = q[:, anchors], k[:, anchors]
            alpha_in = self._softmax(qa @ k.transpose(1, 2) * scale, layer)  # H x S x n
            anchor_emb = (alpha_in @ v).transpose(0, 1).reshape(-1, self.d)  # S x d
            va = self._split(self.wv(anchor_emb))
            alpha_out = self._softmax(q @ ka.transpose(1, 2) * scale, layer)  # H x n x S
            mixed = (alpha_out @ va).transpose(0, 1).reshape(n, self.d)
            weights = (alpha_in, alpha_out)
        y = x + self.out(mixed)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_ff: int):
        super().__init__()
        self.attn = AnchorAttention(d, heads)
        self.norm1 = nn.LayerNorm(d, eps=LN_EPS)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.norm2 = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, x, anchors, scale: float, layer: int = 0):
        h = self.norm1(self.attn(x, anchors, layer))
        h = self.norm2(h + self.ff2(F.relu(self.ff1(h))))
        return h / scale


class GraphTransformer(nn.Module):
    def __init__(self, d: int = 1024, layers: int = 3, heads: int = 4, anchors: Optional[int] = 256,
                 scale: float = 10.0, d_ff: Optional[int] = None):
        super().__init__()
        self.d, self.num_layers, self.heads = d, layers, heads
        self.num_anchors = anchors if anchors is not None else d // heads
        self.scale = float(scale)
        self.d_ff = d_ff or 2 * d
        self.layers = nn.ModuleList(TransformerLayer(d, heads, self.d_ff) for _ in range(layers))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for name, p in self.named_parameters():
            if name.endswith("weight") and p.dim() == 2:
                nn.init.xavier_uniform_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() == 1:
                nn.init.ones_(p)

    def draw_anchors(self, seq_len: int, rng: np.random.Generator, use_anchors: bool = True) -> list:
        """Fresh anchor set per layer; sequences shorter than S use every position."""
        if not use_anchors:
            return [None] * self.num_layers
        S = min(self.num_anchors, seq_len)
        return [torch.as_tensor(sample_anchors(seq_len, S, rng)) for _ in range(self.num_layers)]

    def forward(self, x: torch.Tensor, anchors: Sequence[Optional[torch.Tensor]]) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ConfigError(f"token width {x.shape[-1]} != model width {self.d}")
        for i, layer in enumerate(self.layers):
            x = layer(x, anchors[i], self.scale, layer=i)
        return x

    def l2_penalty(self) -> torch.Tensor:
        return sum((p * p).sum() for p in self.parameters())


def link_scores(emb, pairs):
    """Dot-product scores for (u, v) pairs; works on numpy arrays and torch tensors."""
    if isinstance(emb, torch.Tensor):
        pairs = torch.as_tensor(np.asarray(pairs), dtype=torch.long).reshape(-1, 2)
        if pairs.numel() and (pairs.min() < 0 or pairs.max() >= emb.shape[0]):
            raise LookupError("unknown node id in pair list")
        return (emb[pairs[:, 0]] * emb[pairs[:, 1]]).sum(-1)
    emb = np.asarray(emb)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= emb.shape[0]):
        raise LookupError("unknown node id in pair list")
    return np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])


def pairwise_loss(out: torch.Tensor, B: int) -> torch.Tensor:
    """softplus(-(s(c,p) - s(c,n))) averaged over the batch; ``out`` is the 3B-row model output."""
    c, p, n = out[:B], out[B:2 * B], out[2 * B:3 * B]
    margin = (c * p).sum(-1) - (c * n).sum(-1)
    return F.softplus(-margin).mean()


def gradients(model: nn.Module, loss: torch.Tensor) -> dict:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    A loss that does not depend on the parameters yields all-zero gradients.
    """
    if not isinstance(loss, torch.Tensor):
        raise StateError("no forward result to differentiate; run forward first")
    params = dict(model.named_parameters())
    if not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in params.items()}
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(params.items(), grads)}


@torch.no_grad()
def encode_all(model: GraphTransformer, tokens: np.ndarray, rng: np.random.Generator,
               use_anchors: bool = True) -> np.ndarray:
    """Refine the full |V|-token sequence in one pass (test-time inference)."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(tokens), dtype=dtype)
    return model(x, model.draw_anchors(x.shape[0], rng, use_anchors)).numpy()


# ------------------------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: GraphTransformer, extra_tensors: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Header + name-length-prefixed float32 tensors + optional JSON trailer.

    Written to a temp file and renamed, so an interrupted write never clobbers
    the previous good checkpoint.
    """
    path = Path(path)
    tensors = {name: p.detach() for name, p in model.named_parameters()}
    tensors.update(extra_tensors or {})
    chunks = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.d, model.num_layers, model.heads,
                                model.num_anchors, model.scale, model.d_ff),
              struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    trailer = json.dumps(extra or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(trailer)) + trailer)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path):
    """Returns (header dict, ordered tensor dict of float32 arrays, extra dict)."""
    blob = Path(path).read_bytes()
    magic, version, d, layers, heads, S, K, d_ff = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    (tlen,) = struct.unpack_from("<Q", blob, off)
    extra = json.loads(blob[off + 8:off + 8 + tlen].decode("utf-8")) if tlen else {}
    header = dict(d=d, layers=layers, heads=heads, anchors=S, scale=K, d_ff=d_ff)
    return header, tensors, extra


def load_checkpoint(path):
    """Rebuild the model; returns (model, extra tensors, extra dict)."""
    header, tensors, extra = read_checkpoint(path)
    model = GraphTransformer(header["d"], header["layers"], header["heads"], header["anchors"],
                             header["scale"], header["d_ff"])
    own = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.from_numpy(tensors.pop(name)))
    return model, tensors, extra
