import time

import numpy as np
import pytest
import torch

from graphfm.graph import SparseGraph
from graphfm.tokenizer import NumericError, TokenTable
from graphfm.transformer import (AnchorAttention, ConfigError, GraphTransformer, SamplingError, StateError,
                                 gradients, link_scores, load_checkpoint, pairwise_loss, read_checkpoint,
                                 sample_anchors, sample_token_batch, save_checkpoint)
from oracles import anchor_attention_oracle, random_graph_edges, transformer_oracle

torch.set_num_threads(1)


def small_model(d=8, layers=2, heads=2, anchors=2, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    m = GraphTransformer(d=d, layers=layers, heads=heads, anchors=anchors, scale=10.0).to(dtype)
    # randomize LN affine and biases so their gradients are exercised
    with torch.no_grad():
        for name, p in m.named_parameters():
            if p.dim() == 1:
                p.add_(0.1 * torch.randn_like(p))
    return m


def np_params(model):
    return {k: v.detach().numpy().astype(np.float64) for k, v in model.named_parameters()}


# ------------------------------------------------------------------------------ sampling

def test_batch_k2_forced_fallback():
    k2 = SparseGraph.from_edges(2, [(0, 1)])
    b = sample_token_batch(np.eye(2), k2, 1, np.random.default_rng(0))
    assert set(b.nodes[:2]) == {0, 1}
    assert b.nodes[2] in (0, 1)


def test_batch_path_negative_rejection():
    path = SparseGraph.from_edges(3, [(0, 1), (1, 2)])
    rng = np.random.default_rng(1)
    for _ in range(50):
        b = sample_token_batch(np.eye(3), path, 8, rng)
        for c, n in zip(b.centric, b.negative):
            if c == 0:
                assert n == 2


def test_batch_large_graph_positives_adjacent():
    rng = np.random.default_rng(2)
    g = SparseGraph.from_edges(1000, random_graph_edges(1000, 0.01, rng))
    tokens = TokenTable(rng.standard_normal((1000, 16)))
    b = sample_token_batch(tokens, g, 128, rng)
    assert b.sequence.shape == (384, 16)
    for c, p in zip(b.centric, b.positive):
        assert p in set(g.neighbors(c))
    assert not any(n in set(g.neighbors(c)) or n == c for c, n in zip(b.centric, b.negative))


def test_batch_edgeless():
    with pytest.raises(SamplingError):
        sample_token_batch(np.eye(3), SparseGraph.from_edges(3, []), 2, np.random.default_rng(0))


def test_anchor_sampling():
    rng = np.random.default_rng(0)
    assert sorted(sample_anchors(6, 6, rng)) == list(range(6))
    one = sample_anchors(6, 1, rng)
    assert one.shape == (1,)
    a = sample_anchors(30, 5, np.random.default_rng(3))
    b = sample_anchors(30, 5, np.random.default_rng(3))
    assert np.array_equal(a, b) and len(set(a)) == 5
    with pytest.raises(ConfigError):
        sample_anchors(3, 4, rng)


# ------------------------------------------------------------------------------ attention

def identity_attention(d=4, heads=1):
    att = AnchorAttention(d, heads).double()
    with torch.no_grad():
        att.wq.weight.zero_()
        att.wk.weight.zero_()
        att.wv.weight.copy_(torch.eye(d))
        att.out.weight.copy_(torch.eye(d))
    return att


def test_single_token_single_anchor():
    att = identity_attention()
    e = torch.tensor([[1.0, -2.0, 0.5, 3.0]], dtype=torch.float64)
    out = att(e, torch.tensor([0]))
    assert torch.allclose(out, 2 * e)


def test_uniform_attention_three_tokens():
    att = identity_attention()
    x = torch.randn(3, 4, dtype=torch.float64)
    out, (w_in, w_out) = att(x, torch.tensor([0, 2]), return_weights=True)
    assert torch.allclose(w_in, torch.full_like(w_in, 1 / 3))
    pre = out - x
    assert torch.allclose(pre, x.mean(0, keepdim=True).expand(3, 4))


def test_attention_matches_dense_oracle_and_rows_simplex():
    torch.manual_seed(4)
    att = AnchorAttention(8, 2).double()
    x = torch.randn(12, 8, dtype=torch.float64)
    anchors = torch.tensor([3, 9])
    out, (w_in, w_out) = att(x, anchors, return_weights=True)
    ref, rin, rout = anchor_attention_oracle(x.numpy(), [3, 9], att.wq.weight.detach().numpy(),
                                             att.wk.weight.detach().numpy(), att.wv.weight.detach().numpy(),
                                             att.out.weight.detach().numpy(), 2)
    assert np.abs(out.detach().numpy() - ref).max() < 1e-10
    for w in (w_in, w_out):
        assert (w >= 0).all()
        assert (w.sum(-1) - 1).abs().max() < 1e-12
    assert np.abs(w_in.detach().numpy().reshape(-1, 12) - np.array(rin)).max() < 1e-12


def test_attention_single_precision_simplex():
    torch.manual_seed(5)
    att = AnchorAttention(16, 4)
    _, (w_in, w_out) = att(torch.randn(30, 16), torch.tensor([0, 5, 7, 20]), return_weights=True)
    assert (w_in.sum(-1) - 1).abs().max() < 1e-5 and (w_out.sum(-1) - 1).abs().max() < 1e-5


def test_non_finite_logits_carry_layer():
    m = small_model()
    x = torch.full((6, 8), float("inf"), dtype=torch.float64)
    with pytest.raises(NumericError, match="layer 0"):
        m(x, m.draw_anchors(6, np.random.default_rng(0)))


def test_head_divisibility():
    with pytest.raises(ConfigError):
        AnchorAttention(10, 3)


# ------------------------------------------------------------------------------ forward

def test_zero_layers_identity():
    m = GraphTransformer(d=8, layers=0, heads=2, anchors=2)
    x = torch.randn(6, 8)
    assert torch.equal(m(x, []), x)


def test_zero_input_zero_output():
    m = small_model()
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    x = torch.zeros(12, 8, dtype=torch.float64)
    assert torch.equal(m(x, m.draw_anchors(12, np.random.default_rng(0))), torch.zeros_like(x))


# golden output of transformer_oracle for (small_model seed 0, x seed 7, anchors [[1, 8], [4, 10]]) row 0
GOLDEN_ROW0 = np.array([
    -0.07069483935754964, 0.14055231675684227, 0.0380410846929192, -0.15078736557809824,
    0.03050169767178179, -0.0078018237799660824, -0.06676598416498716, 0.127085522379659,
])


def test_forward_matches_oracle_and_golden():
    m = small_model()
    x = np.random.default_rng(7).standard_normal((12, 8))
    anchors = [[1, 8], [4, 10]]
    out = m(torch.as_tensor(x), [torch.tensor(a) for a in anchors]).detach().numpy()
    ref = transformer_oracle(x, anchors, np_params(m), 2, 2, 10.0)
    assert np.abs(out - ref).max() < 1e-10
    assert np.abs(ref[0] - GOLDEN_ROW0).max() < 1e-12


def test_forward_deterministic_given_seed():
    m = small_model()
    x = torch.randn(12, 8, dtype=torch.float64)
    a = m(x, m.draw_anchors(12, np.random.default_rng(3)))
    b = m(x, m.draw_anchors(12, np.random.default_rng(3)))
    assert torch.equal(a, b)


def test_link_scores():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert link_scores(e, [(0, 1)])[0] == 1.0
    assert link_scores(e, [(0, 2)])[0] == 0.0
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((10, 4))
    pairs = rng.integers(0, 10, size=(10, 2))
    naive = [sum(emb[u, k] * emb[v, k] for k in range(4)) for u, v in pairs]
    assert np.allclose(link_scores(emb, pairs), naive, rtol=0, atol=1e-15)
    with pytest.raises(LookupError):
        link_scores(emb, [(0, 10)])


# ------------------------------------------------------------------------------ gradients

def test_constant_loss_zero_gradients():
    m = small_model()
    grads = gradients(m, torch.tensor(3.0, dtype=torch.float64))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_missing_forward_state_error():
    with pytest.raises(StateError):
        gradients(small_model(), None)


def test_single_linear_squared_loss_closed_form():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 2, bias=False).double()
    x = torch.randn(5, 3, dtype=torch.float64)
    y = torch.randn(5, 2, dtype=torch.float64)
    loss = ((lin(x) - y) ** 2).sum()
    g = gradients(lin, loss)["weight"]
    w = lin.weight.detach().T  # x @ W form
    closed = 2 * x.T @ (x @ w - y)
    assert torch.allclose(g.T, closed, atol=1e-12)


def finite_difference_check(model, x, anchors, B, step=1e-5):
    def loss_fn():
        return pairwise_loss(model(x, anchors), B) + 1e-3 * model.l2_penalty()

    grads = gradients(model, loss_fn())
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                fd[i] = (up - down) / (2 * step)
            g = grads[name].view(-1)
            rel = ((g - fd).norm() / max(fd.norm().item(), g.norm().item(), 1e-12)).item()
            worst = max(worst, rel)
    return worst


def test_full_model_gradients_match_finite_differences():
    t0 = time.time()
    m = small_model(d=8, layers=2, heads=2, anchors=2)
    x = torch.randn(12, 8, dtype=torch.float64)  # B = 4
    anchors = m.draw_anchors(12, np.random.default_rng(1))
    worst = finite_difference_check(m, x, anchors, 4)
    assert worst < 1e-4
    assert time.time() - t0 < 30


# ------------------------------------------------------------------------------ checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    torch.manual_seed(0)
    m = GraphTransformer(d=16, layers=2, heads=4, anchors=4, scale=10.0)
    save_checkpoint(tmp_path / "m.ckpt", m, extra={"step": 3})
    back, extra_tensors, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"step": 3} and not extra_tensors
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    header, _, _ = read_checkpoint(tmp_path / "m.ckpt")
    assert header == dict(d=16, layers=2, heads=4, anchors=4, scale=10.0, d_ff=32)
    save_checkpoint(tmp_path / "again.ckpt", back, extra={"step": 3})
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()
