import json
import logging

import httpx
import numpy as np
import pytest

from graphfm.provider import (HttpProvider, MockProvider, MockSpec, ProviderConfig, ProviderConfigError,
                              ProviderError, ProviderFormatError, RateLimiter, make_provider, parse_completion,
                              render_prompt)

KEY = "sk-test-secret-123"


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, s):
        self.sleeps.append(s)
        self.now += s


def chat_reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def http_provider(handler, tmp_path=None, **cfg):
    clock = FakeClock()
    config = ProviderConfig(backend="http", base_url="http://llm.test/v1", max_retries=cfg.pop("retries", 2),
                            cache_dir=str(tmp_path) if tmp_path else None, **cfg)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpProvider(config, client=client, clock=clock, sleep=clock.sleep), clock


# ------------------------------------------------------------------------------ mock

def test_mock_subdivide_contract():
    assert MockProvider(MockSpec(children_per_node=3)).subdivide("products") == [
        "products/sub-0", "products/sub-1", "products/sub-2"]


def test_mock_embed_deterministic_and_ordered():
    m = MockProvider()
    texts = [f"t{i}" for i in range(8)]
    e = m.embed(texts + ["t3"])
    assert np.array_equal(e[3], e[8])
    perm = np.random.default_rng(0).permutation(8)
    assert np.array_equal(m.embed([texts[i] for i in perm]), e[:8][perm])
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)


def test_mock_clusters_exhaustive():
    m = MockProvider(MockSpec(cluster_count=2, embedding_dim=16))
    texts = [f"item-{i}" for i in range(20)]
    e = m.embed(texts)
    cl = [m.cluster_of(t) for t in texts]
    assert len(set(cl)) == 2
    within = [e[i] @ e[j] for i in range(20) for j in range(i + 1, 20) if cl[i] == cl[j]]
    across = [e[i] @ e[j] for i in range(20) for j in range(i + 1, 20) if cl[i] != cl[j]]
    assert min(within) > max(across)


def test_mock_same_seed_same_output():
    a = MockProvider(MockSpec(seed=4)).embed(["x", "y"])
    b = MockProvider(MockSpec(seed=4)).embed(["x", "y"])
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------------------ parsing

def test_prompt_contains_scenario_verbatim():
    p = render_prompt("products", "e-commerce platform like Amazon")
    assert p.startswith("List sub-categories of products on e-commerce platform like Amazon")


@pytest.mark.parametrize("text, expected", [
    ('["clothing", "electronics"]', ["clothing", "electronics"]),
    ('Sure:\n["a", "b"]', ["a", "b"]),
    ("- clothing\n- electronics\n", ["clothing", "electronics"]),
    ("1. shoes\n2) hats", ["shoes", "hats"]),
])
def test_parse_completion(text, expected):
    assert parse_completion(text) == expected


def test_parse_completion_rejects_prose():
    with pytest.raises(ProviderFormatError) as info:
        parse_completion("I think clothing and electronics")
    assert "clothing" in info.value.raw


# ------------------------------------------------------------------------------ http

def test_retry_after_timeout(monkeypatch):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return chat_reply('["a", "b"]')

    prov, _ = http_provider(handler)
    assert prov.subdivide("products", "shop") == ["a", "b"]
    assert prov.retries == 1
    assert calls[1].headers["authorization"] == f"Bearer {KEY}"
    body = json.loads(calls[1].content)
    assert "List sub-categories of products on shop" in body["messages"][0]["content"]


def test_non_2xx_after_retries(monkeypatch):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    prov, _ = http_provider(lambda r: httpx.Response(503), retries=2)
    with pytest.raises(ProviderError, match="3 attempts"):
        prov.subdivide("x")
    assert prov.retries == 2


def test_client_error_not_retried(monkeypatch):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    prov, _ = http_provider(lambda r: httpx.Response(401))
    with pytest.raises(ProviderError, match="401"):
        prov.subdivide("x")
    assert prov.retries == 0


def test_missing_key_read_at_call_time(monkeypatch):
    monkeypatch.delenv("GRAPHFM_API_KEY", raising=False)
    prov, _ = http_provider(lambda r: chat_reply('["a"]'))
    with pytest.raises(ProviderConfigError, match="GRAPHFM_API_KEY"):
        prov.subdivide("x")
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    assert prov.subdivide("x") == ["a"]


def test_key_never_logged(monkeypatch, caplog, tmp_path):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        return httpx.Response(500) if state["n"] == 1 else chat_reply('["a"]')

    prov, _ = http_provider(handler, tmp_path=tmp_path / "cache")
    with caplog.at_level(logging.DEBUG):
        prov.subdivide("x")
    assert KEY not in caplog.text
    assert all(KEY not in p.read_text() for p in (tmp_path / "cache").iterdir())


def test_embed_batches_in_order(monkeypatch):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)

    def handler(request):
        inputs = json.loads(request.content)["input"]
        data = [{"index": i, "embedding": [float(t[1:]), 1.0]} for i, t in enumerate(inputs)]
        return httpx.Response(200, json={"data": data[::-1]})

    prov, _ = http_provider(handler, embed_batch_size=3)
    out = prov.embed([f"t{i}" for i in range(7)])
    assert out[:, 0].tolist() == list(range(7))


def test_embed_partial_batch_is_error(monkeypatch):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    prov, _ = http_provider(lambda r: httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0]}]}))
    with pytest.raises(ProviderError):
        prov.embed(["a", "b"])


def test_cache_avoids_repeat_requests(monkeypatch, tmp_path):
    monkeypatch.setenv("GRAPHFM_API_KEY", KEY)
    calls = []

    def handler(request):
        calls.append(1)
        return chat_reply('["a"]')

    prov, _ = http_provider(handler, tmp_path=tmp_path)
    prov.subdivide("x", "s")
    prov.subdivide("x", "s")
    assert len(calls) == 1
    prov.subdivide("y", "s")
    assert len(calls) == 2


def test_rate_limiter_sliding_window():
    clock = FakeClock()
    lim = RateLimiter(5, clock=clock, sleep=clock.sleep)
    stamps = []
    rng = np.random.default_rng(0)
    for _ in range(40):
        clock.now += float(rng.exponential(3.0))
        lim.acquire()
        stamps.append(clock.now)
    stamps = np.array(stamps)
    for t in stamps:
        assert ((stamps >= t) & (stamps < t + 60.0)).sum() <= 5


def test_http_config_requires_base_url():
    with pytest.raises(ProviderConfigError):
        ProviderConfig(backend="http")
    assert isinstance(make_provider(ProviderConfig()), MockProvider)
