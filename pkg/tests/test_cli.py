import json
import time

import numpy as np
import pytest
import torch

import graphfm.cli as cli
from graphfm.cli import main
from graphfm.generator import GeneratedGraph, GibbsConfig, generate_nodes, gibbs_sample
from graphfm.graph import SparseGraph, load_dataset, save_dataset
from graphfm.manifest import RunManifest
from graphfm.provider import MockProvider, MockSpec
from oracles import random_graph_edges

torch.set_num_threads(1)

SMALL_GEN = ["--depth", "3", "--children", "6", "--max-steps", "3000", "--burn-in", "500", "--thin", "100",
             "--window", "500", "--shift-period", "100"]
TINY_TRAIN = ["--d", "16", "--layers", "1", "--heads", "2", "--anchors", "8", "--batch-size", "16"]


def tiny_dataset(path, seed=0, n=40):
    g = SparseGraph.from_edges(n, random_graph_edges(n, 0.15, np.random.default_rng(seed)))
    save_dataset(g, path)
    return path


def test_generate_writes_dataset_and_manifest(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--out", str(out), "--seed", "4", *SMALL_GEN]) == 0
    g = load_dataset(out)
    assert g.num_nodes > 36 and g.meta["entity_count"] == 36
    m = RunManifest.read(out)
    assert m.status == "complete" and m.seeds == {"seed": 4}
    assert set(m.outputs) == {"edges.tsv", "meta.json", "profiles.jsonl", "embeddings.bin"}
    assert "nodes\tedges" in capsys.readouterr().out


def test_generate_without_injection_is_gen0(tmp_path):
    out = tmp_path / "gen"
    main(["generate", "--out", str(out), "--seed", "2", "--mode", "entity", *SMALL_GEN])
    cfg = GibbsConfig(max_steps=3000, burn_in=500, thin=100, window=500, shift_period=100, seed=2, mode="entity")
    profiles = generate_nodes("products", "an online shopping platform", 3, MockProvider(MockSpec(6, seed=2)),
                              seed=2)
    expected = GeneratedGraph(profiles, gibbs_sample(profiles, cfg), "entity").to_sparse_graph()
    assert np.array_equal(load_dataset(out).edge_array(), expected.edge_array())

    injected = tmp_path / "inj"
    main(["generate", "--out", str(injected), "--seed", "2", "--mode", "entity", "--inject-topology", "20",
          *SMALL_GEN])
    assert load_dataset(injected).meta.get("injected") is True


def test_mock_thousand_nodes_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    assert main(["generate", "--out", str(tmp_path / "k"), "--depth", "4", "--children", "10",
                 "--max-steps", "30000"]) == 0
    assert time.perf_counter() - t0 < 60
    assert load_dataset(tmp_path / "k").meta["entity_count"] == 1000


def test_http_without_key_names_variable(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("GFM_TEST_KEY", raising=False)
    code = main(["generate", "--out", str(tmp_path / "h"), "--provider", "http", "--base-url", "http://localhost:9",
                 "--api-key-env", "GFM_TEST_KEY"])
    assert code == 1
    assert "GFM_TEST_KEY" in capsys.readouterr().err
    assert RunManifest.read(tmp_path / "h").status.startswith("config error")


def test_same_seed_same_bytes_other_seed_differs(tmp_path):
    for name, seed in (("a", "1"), ("b", "1"), ("c", "9")):
        main(["generate", "--out", str(tmp_path / name), "--seed", seed, *SMALL_GEN])
    read = lambda n: (tmp_path / n / "edges.tsv").read_bytes()  # noqa: E731
    assert read("a") == read("b") != read("c")


def test_pretrain_defaults_echo_and_zero_steps(tmp_path, capsys):
    data = tiny_dataset(tmp_path / "g")
    out = tmp_path / "m"
    assert main(["pretrain", "--data", str(data), "--out", str(out), "--steps", "0"]) == 0
    err = capsys.readouterr().err
    for item in ("d=1024", "layers=3", "heads=4", "anchors=256", "batch_size=1024"):
        assert f"#   {item}\n" in err
    assert err.count("# pretrain config") == 1
    assert (out / "model.ckpt").exists()
    assert (out / "loss.csv").read_text().strip() == "step,loss,graph_id"
    assert not (out / "loss.png").exists()


def test_config_precedence(tmp_path, capsys):
    data = tiny_dataset(tmp_path / "g")
    conf = tmp_path / "c.toml"
    conf.write_text("seed = 5\n[pretrain]\nd = 32\nheads = 2\nlayers = 1\n")
    main(["pretrain", "--config", str(conf), "--data", str(data), "--out", str(tmp_path / "a"), "--steps", "0"])
    err = capsys.readouterr().err
    assert "#   d=32\n" in err and "#   seed=5\n" in err
    main(["pretrain", "--config", str(conf), "--data", str(data), "--out", str(tmp_path / "b"), "--steps", "0",
          "--d", "16", "--seed", "6"])
    err = capsys.readouterr().err
    assert "#   d=16\n" in err and "#   seed=6\n" in err and "#   layers=1\n" in err


def test_bad_config_exits_one(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text('{"bogus": 1}')
    assert main(["pretrain", "--config", str(conf), "--out", str(tmp_path / "x")]) == 1
    assert main(["pretrain", "--data", str(tiny_dataset(tmp_path / "g")), "--out", str(tmp_path / "y"),
                 "--d", "10", "--heads", "4"]) == 1
    assert RunManifest.read(tmp_path / "y").status.startswith("config error")


def test_runtime_failure_exits_two(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train_loop", boom)
    out = tmp_path / "m"
    assert main(["pretrain", "--data", str(tiny_dataset(tmp_path / "g")), "--out", str(out)]) == 2
    assert "disk on fire" in RunManifest.read(out).status


@pytest.fixture
def trained(tmp_path):
    a = tiny_dataset(tmp_path / "a", seed=1)
    b = tiny_dataset(tmp_path / "b", seed=2)
    c = tiny_dataset(tmp_path / "c", seed=3)
    ckpt_dir = tmp_path / "m"
    assert main(["pretrain", "--data", f"{a},{b}", "--out", str(ckpt_dir), "--steps", "6", *TINY_TRAIN]) == 0
    return tmp_path, ckpt_dir / "model.ckpt"


def test_evaluate_report(trained, capsys):
    root, ckpt = trained
    out = root / "e"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(root / "c"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1
    assert set(report["metrics"]["c"]) == {"recall@20", "recall@40"}
    assert "checkpoint" not in report["settings"] and len(report["settings"]["checkpoint_sha256"]) == 64
    assert (out / "report.png").exists()
    assert "recall@20" in capsys.readouterr().out


def test_leakage_guard(trained, capsys):
    root, ckpt = trained
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(root / "a"), "--out", str(root / "e")]) == 1
    assert "zero-shot" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(root / "a"), "--out", str(root / "e2"),
                 "--allow-seen"]) == 0


def test_nan_metric_exits_two(trained, monkeypatch):
    root, ckpt = trained
    monkeypatch.setattr(cli, "recall_at_n", lambda *a, **k: float("nan"))
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(root / "c"), "--out", str(root / "e")]) == 2


def test_resume_continues(trained):
    root, ckpt = trained
    out = root / "r"
    assert main(["pretrain", "--data", f"{root / 'a'},{root / 'b'}", "--out", str(out), "--resume", str(ckpt),
                 "--steps", "9", *TINY_TRAIN]) == 0
    full = root / "full"
    main(["pretrain", "--data", f"{root / 'a'},{root / 'b'}", "--out", str(full), "--steps", "9", *TINY_TRAIN])
    assert (out / "model.ckpt").read_bytes() == (full / "model.ckpt").read_bytes()


def test_replay_is_bit_identical(trained, capsys):
    root, ckpt = trained
    assert main(["replay", str(ckpt.parent), "--out", str(root / "again"), "--check"]) == 0
    assert "identical" in capsys.readouterr().out
    for f in ("model.ckpt", "loss.csv", "loss.png"):
        assert (root / "again" / f).read_bytes() == (ckpt.parent / f).read_bytes()


def test_replay_refuses_changed_inputs(trained, capsys):
    root, ckpt = trained
    save_dataset(SparseGraph.from_edges(5, [(0, 1)]), root / "a")
    assert main(["replay", str(ckpt.parent), "--out", str(root / "again")]) == 1
    assert "inputs changed" in capsys.readouterr().err


def test_ablate_small(tmp_path, capsys):
    data = tiny_dataset(tmp_path / "g", n=60)
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(data), "--out", str(out), "--variant", "full,-Seq", "--smoothing", "0..1",
                 "--no-isolate", "--steps", "3", *TINY_TRAIN]) == 0
    rows = json.loads((out / "ablation.json").read_text())["runs"]
    assert [r["label"] for r in rows] == ["full", "-Seq", "L=0", "L=1"]
    assert all(r["status"] == "ok" and r["peak_rss_mib"] > 0 for r in rows)
    assert rows[1]["sequence_sampling"] is False and rows[1]["anchors"] is True
    assert (out / "ablation.png").exists()
    assert "peak_rss_mib" in capsys.readouterr().out


def test_ablate_rejects_unknown_variant(tmp_path):
    data = tiny_dataset(tmp_path / "g")
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path / "x"), "--variant=-Foo"]) == 1
    assert main(["ablate", "--no-such-flag"]) == 1


def test_ablate_skips_runs_over_budget(tmp_path):
    data = tiny_dataset(tmp_path / "g", n=60)
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(data), "--out", str(out), "--variant=-S-A", "--no-isolate",
                 "--budget-mib", "1e-6", "--steps", "2", *TINY_TRAIN]) == 0
    (row,) = json.loads((out / "ablation.json").read_text())["runs"]
    assert row["status"].startswith("skipped")
