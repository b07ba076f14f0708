"""``graphfm`` command line: generate, pretrain, evaluate, ablate and replay.

Settings resolve as flag > config file > built-in default. Each run writes a
``manifest.json`` into its output directory before any work starts, so an
interrupted run still leaves a record, and ``graphfm replay`` can rerun it.

Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import ablation, plotting
from .evaluation import (EvalReport, accuracy_macro_f1, classify_by_class_nodes, embedding_scorer,
                         make_k_shot_split, recall_at_n, split_edges)
from .generator import GibbsConfig, GibbsConfigError, generate_dataset, gibbs_config_dict, save_generated
from .graph import GraphFormatError, load_dataset, load_edge_list
from .manifest import MANIFEST_NAME, RunManifest, hash_path
from .pretrain import TrainConfig, restore_state, train_loop
from .provider import DEFAULT_KEY_ENV, MockSpec, ProviderConfig, ProviderConfigError, make_provider
from .tokenizer import build_tokens, class_nodes_augment, project_variant
from .transformer import ConfigError, load_checkpoint, encode_all

log = logging.getLogger("graphfm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad configuration or inputs; maps to exit code 1."""


class LeakageError(UsageError):
    pass


CONFIG_ERRORS = (UsageError, ProviderConfigError, GibbsConfigError, ConfigError, GraphFormatError,
                 FileNotFoundError)

# ------------------------------------------------------------------------------ defaults

GIBBS_KEYS = [f.name for f in fields(GibbsConfig) if f.name != "seed"]
TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]

DEFAULTS = {
    "generate": {
        "root": "products",
        "scenario": "an online shopping platform",
        "depth": 5,
        "inject_epochs": 0,
        "min_degree": 0,
        "provider": "mock",
        "base_url": None,
        "api_key_env": DEFAULT_KEY_ENV,
        "chat_model": "chat-default",
        "embed_model": "embed-default",
        "cache_dir": None,
        "children": 3,
        "embedding_dim": 32,
        "clusters": 2,
        "jitter": 0.35,
        "mock_seed": None,  # follows --seed when unset
        **{k: v for k, v in gibbs_config_dict(GibbsConfig()).items() if k != "seed"},
    },
    "pretrain": {
        "data": [],
        "resume": None,
        **{k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    },
    "evaluate": {
        "checkpoint": None,
        "data": [],
        "n": [20, 40],
        "micro": False,
        "test_fraction": 0.2,
        "label_fraction": 0.2,
        "shots": 0,  # 0 uses label_fraction instead of a k-shot draw
        "bipartite": False,
        "allow_seen": False,
    },
    "ablate": {
        "data": None,
        "variants": ["full", "-S-A", "-Anc", "-Seq"],
        "smoothing": [],
        "projections": [],
        "layer_counts": [],
        "dims": [],
        "test_fraction": 0.2,
        "n": 20,
        "isolate": True,
        "budget_mib": 2048.0,
        "eval_limit": 2000,
        **{**{k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
           "d": 128, "layers": 2, "anchors": 64, "batch_size": 256, "max_steps": 200,
           "learning_rate": 1e-3},
    },
}


# ------------------------------------------------------------------------------ parsing

def _csv(cast):
    def parse(text):
        return [cast(x) for x in text.split(",") if x != ""]
    return parse


def _range_list(text: str) -> list:
    """``0..3`` or ``0,1,3``."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return _csv(int)(text)


def _bool_flag(p, name, dest, help):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_const", const=True, help=help)
    g.add_argument(f"--no-{name}", dest=dest, action="store_const", const=False)


def _train_flags(p) -> None:
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--l2", dest="l2_lambda", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--d", "--dim", dest="d", type=int)
    p.add_argument("--smoothing-order", dest="smoothing_order", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--anchors", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--refresh-every", dest="projector_refresh_every", type=int)
    p.add_argument("--steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--power-iters", dest="power_iters", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--projection", choices=["svd", "one_hot", "degree", "random"])
    _bool_flag(p, "anchor-sampling", "use_anchors", "route attention through sampled anchors")
    _bool_flag(p, "sequence-sampling", "sequence_sampling", "train on 3B-token sequences, not all nodes")
    _bool_flag(p, "strict-mae", "strict_mae", "rebuild tokens with the batch edges masked")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file; a [<command>] table overrides top-level keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--provider", choices=["mock", "http"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graphfm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="build a synthetic dataset")
    g.add_argument("--root")
    g.add_argument("--scenario")
    g.add_argument("--depth", type=int)
    g.add_argument("--mode", choices=["person", "entity"])
    g.add_argument("--localities", type=int)
    g.add_argument("--decay", type=float)
    g.add_argument("--window", type=int)
    g.add_argument("--thin", type=int)
    g.add_argument("--burn-in", dest="burn_in", type=int)
    g.add_argument("--shift-period", dest="shift_period", type=int)
    g.add_argument("--max-steps", dest="max_steps", type=int)
    g.add_argument("--initial-edges", dest="initial_edges", type=int)
    g.add_argument("--sigma-fallback", dest="sigma_fallback", type=float)
    _bool_flag(g, "restart", "restart", "fresh initial edges after every emission")
    g.add_argument("--inject-topology", dest="inject_epochs", type=int, metavar="EPOCHS")
    g.add_argument("--min-degree", dest="min_degree", type=int)
    g.add_argument("--base-url", dest="base_url")
    g.add_argument("--api-key-env", dest="api_key_env")
    g.add_argument("--chat-model", dest="chat_model")
    g.add_argument("--embed-model", dest="embed_model")
    g.add_argument("--cache-dir", dest="cache_dir")
    g.add_argument("--children", type=int, help="mock: children per node")
    g.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    g.add_argument("--clusters", type=int)
    g.add_argument("--jitter", type=float)
    g.add_argument("--mock-seed", dest="mock_seed", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="train on one or more datasets")
    p.add_argument("--data", type=_csv(str), help="comma-separated dataset directories")
    p.add_argument("--resume", help="checkpoint to continue from")
    _train_flags(p)

    e = sub.add_parser("evaluate", parents=[common], help="zero-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data", type=_csv(str))
    e.add_argument("--n", type=_csv(int), help="cutoffs, default 20,40")
    _bool_flag(e, "micro", "micro", "pool hits over all queries instead of averaging")
    e.add_argument("--test-fraction", dest="test_fraction", type=float)
    e.add_argument("--label-fraction", dest="label_fraction", type=float)
    e.add_argument("--shots", type=int)
    _bool_flag(e, "bipartite", "bipartite", "rank only the other side of a person-entity graph")
    _bool_flag(e, "allow-seen", "allow_seen", "skip the zero-shot leakage guard")

    a = sub.add_parser("ablate", parents=[common], help="efficiency and design ablations")
    a.add_argument("--data")
    a.add_argument("--variant", "--variants", dest="variants", type=_csv(str))
    a.add_argument("--smoothing", type=_range_list, help="e.g. 0..3")
    a.add_argument("--projections", type=_csv(str))
    a.add_argument("--layer-counts", dest="layer_counts", type=_csv(int))
    a.add_argument("--dims", type=_csv(int))
    a.add_argument("--test-fraction", dest="test_fraction", type=float)
    a.add_argument("--n", type=int)
    _bool_flag(a, "isolate", "isolate", "one subprocess per run for clean memory peaks")
    a.add_argument("--budget-mib", dest="budget_mib", type=float)
    a.add_argument("--eval-limit", dest="eval_limit", type=int)
    _train_flags(a)

    r = sub.add_parser("replay", help="rerun a manifest into a new directory")
    r.add_argument("manifest", help="manifest.json or the run directory holding it")
    r.add_argument("--out", required=True)
    r.add_argument("--check", action="store_true", help="exit 2 if outputs differ from the original run")
    r.add_argument("-v", "--verbose", action="store_true")
    return parser


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from e


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    cfg["seed"] = 0
    if args.config:
        data = read_config_file(args.config)
        section = data.get(command, {})
        layered = {k: v for k, v in data.items() if not isinstance(v, dict)}
        layered.update(section)
        unknown = set(layered) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(layered)
    for key in list(cfg):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "provider", None) and "provider" in cfg:
        cfg["provider"] = args.provider
    # paths are pinned so a replay from another directory sees the same inputs
    for key in ("data", "checkpoint", "resume", "cache_dir"):
        v = cfg.get(key)
        if isinstance(v, list):
            cfg[key] = [str(Path(x).resolve()) for x in v]
        elif isinstance(v, str):
            cfg[key] = str(Path(v).resolve())
    return cfg


def echo_config(command: str, cfg: dict) -> None:
    lines = [f"# {command} config"] + [f"#   {k}={cfg[k]}" for k in sorted(cfg)]
    print("\n".join(lines), file=sys.stderr)


# ------------------------------------------------------------------------------ commands

def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg["seed"], **{k: cfg[k] for k in TRAIN_KEYS})
    except ValueError as e:
        raise UsageError(str(e)) from e


def _inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        if not Path(p).exists():
            raise UsageError(f"input {p} does not exist")
        out[p] = hash_path(p)
    return out


def _names(dirs) -> list:
    names = [Path(d).name for d in dirs]
    return [n if names.count(n) == 1 else f"{n}.{i}" for i, n in enumerate(names)]


def plan_generate(cfg: dict) -> tuple:
    gibbs = GibbsConfig(seed=cfg["seed"], **{k: cfg[k] for k in GIBBS_KEYS})
    mock_seed = cfg["seed"] if cfg["mock_seed"] is None else cfg["mock_seed"]
    pconf = ProviderConfig(backend=cfg["provider"], base_url=cfg["base_url"], api_key_env=cfg["api_key_env"],
                           chat_model=cfg["chat_model"], embed_model=cfg["embed_model"], cache_dir=cfg["cache_dir"],
                           mock=MockSpec(cfg["children"], cfg["embedding_dim"], cfg["clusters"], mock_seed,
                                         cfg["jitter"]))
    if pconf.backend == "http" and not os.environ.get(pconf.api_key_env):
        raise ProviderConfigError(f"environment variable {pconf.api_key_env} is not set")
    if cfg["depth"] < 1:
        raise UsageError("depth must be >= 1")
    return gibbs, pconf


def run_generate(cfg: dict, out: Path) -> dict:
    gibbs, pconf = plan_generate(cfg)
    result = generate_dataset(cfg["root"], cfg["scenario"], cfg["depth"], make_provider(pconf), gibbs,
                              inject_epochs=cfg["inject_epochs"], min_degree=cfg["min_degree"])
    save_generated(result, out, {"root": cfg["root"], "scenario": cfg["scenario"]})
    g = result.graph
    print(f"nodes\tedges\tentities\n{g.num_nodes}\t{g.num_edges}\t{g.meta.get('entity_count', g.num_nodes)}")
    return {"files": ["edges.tsv", "meta.json", "profiles.jsonl", "embeddings.bin"]}


def run_pretrain(cfg: dict, out: Path) -> dict:
    tcfg = _train_config(cfg)
    if not cfg["data"]:
        raise UsageError("pretrain needs --data")
    graphs = [load_dataset(d) for d in cfg["data"]]
    names = _names(cfg["data"])

    def progress(state, loss):
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, loss)

    state = train_loop(graphs, tcfg, out_dir=out, names=names, resume=cfg["resume"], on_step=progress)
    files = ["model.ckpt", "loss.csv"]
    if state.history:
        steps, losses, _ = zip(*state.history)
        plotting.loss_curve(steps, losses, out / "loss.png")
        files.append("loss.png")
        print(f"step\tloss\n{state.step}\t{losses[-1]:.6f}")
    else:
        print(f"step\tloss\n{state.step}\t-")
    return {"files": files}


def _eval_tokens(g, meta: dict, tensors: dict) -> np.ndarray:
    c = TrainConfig.from_dict(meta["config"])
    if c.projection == "svd":
        return build_tokens(g, c.d, c.smoothing_order, c.seed, power_iters=c.power_iters).matrix
    table = project_variant(g, c.projection, c.d, seed=c.seed)
    if not table.learnable:
        return table.matrix
    learned = tensors.get("variant.table")
    if learned is None or table.lookup.max() >= learned.shape[0]:
        raise UsageError(f"checkpoint's {c.projection} table does not cover this graph")
    return learned[table.lookup]


def _check_leakage(meta: dict, ckpt: str, data_dir: str, g) -> None:
    seen = {info["fingerprint"] for info in meta.get("graphs", [])}
    if g.fingerprint() in seen:
        raise LeakageError(f"{data_dir} was a training graph of {ckpt}; zero-shot evaluation refused")
    mpath = Path(ckpt).parent / MANIFEST_NAME
    if mpath.exists():
        trained = RunManifest.read(mpath).config.get("data", [])
        if data_dir in trained:
            raise LeakageError(f"{data_dir} is listed among the training inputs of {ckpt}")


def evaluate_dataset(model, meta, tensors, data_dir: str, cfg: dict) -> dict:
    g = load_dataset(data_dir)
    if not cfg["allow_seen"]:
        _check_leakage(meta, cfg["checkpoint"], data_dir, g)
    seed = cfg["seed"]
    test_path = Path(data_dir) / "test_edges.tsv"
    if test_path.exists():
        train, test = g, load_edge_list(test_path).edge_array()
    else:
        train, test = split_edges(g, cfg["test_fraction"], seed=seed)
    partition = None
    if cfg["bipartite"]:
        if "entity_count" not in g.meta:
            raise UsageError(f"{data_dir}: --bipartite needs entity_count in meta.json")
        partition = (np.arange(g.num_nodes) >= g.meta["entity_count"]).astype(np.int64)
    use_anchors = TrainConfig.from_dict(meta["config"]).use_anchors
    row = {}
    if test.shape[0]:
        emb = encode_all(model, _eval_tokens(train, meta, tensors), np.random.default_rng(seed), use_anchors)
        for N in cfg["n"]:
            row[f"recall@{N}"] = recall_at_n(embedding_scorer(emb), train, test, N, micro=cfg["micro"],
                                             partition=partition)
    if g.labels is not None and (g.labels >= 0).any():
        labelled = [(int(i), int(c)) for i, c in enumerate(g.labels) if c >= 0]
        rng = np.random.default_rng(seed)
        if cfg["shots"]:
            picked = make_k_shot_split(g, labelled, k=cfg["shots"], seed=seed)
        else:
            order = rng.permutation(len(labelled))[:max(1, int(round(cfg["label_fraction"] * len(labelled))))]
            picked = np.array([labelled[i] for i in sorted(order)])
        chosen = {int(u) for u in picked[:, 0]}
        test_nodes = [i for i, _ in labelled if i not in chosen]
        if test_nodes:
            aug = class_nodes_augment(g, [tuple(map(int, r)) for r in picked], g.class_count)
            emb = encode_all(model, _eval_tokens(aug, meta, tensors), np.random.default_rng(seed), use_anchors)
            preds = classify_by_class_nodes(emb, aug, test_nodes)
            acc, f1 = accuracy_macro_f1(preds, g.labels[test_nodes], g.class_count)
            row["accuracy"], row["macro_f1"] = acc, f1
    return row


def run_evaluate(cfg: dict, out: Path) -> dict:
    if not cfg["checkpoint"]:
        raise UsageError("evaluate needs --checkpoint")
    if not cfg["data"]:
        raise UsageError("evaluate needs --data")
    model, tensors, meta = load_checkpoint(cfg["checkpoint"])
    model.eval()
    names = _names(cfg["data"])
    metrics = {name: evaluate_dataset(model, meta, tensors, d, cfg, ) for name, d in zip(names, cfg["data"])}
    settings = {k: v for k, v in cfg.items() if k not in ("checkpoint", "data")}
    settings["checkpoint_sha256"] = hash_path(cfg["checkpoint"])
    settings["datasets"] = names
    report = EvalReport(metrics, settings)
    (out / "report.json").write_text(report.to_json())
    print(report.table())
    files = ["report.json"]
    if any(metrics.values()):
        plotting.metric_bars(metrics, out / "report.png")
        files.append("report.png")
    return {"files": files, "nan": report.has_nan()}


def run_ablate(cfg: dict, out: Path) -> dict:
    tcfg = _train_config(cfg)
    if not cfg["data"]:
        raise UsageError("ablate needs --data")
    bad = set(cfg["variants"]) - set(ablation.VARIANTS)
    if bad:
        raise UsageError(f"unknown variants {sorted(bad)}; choose from {sorted(ablation.VARIANTS)}")
    g = load_dataset(cfg["data"])
    train, test = split_edges(g, cfg["test_fraction"], seed=cfg["seed"])
    runs = ablation.plan_runs(tcfg, cfg["variants"], cfg["smoothing"], cfg["projections"],
                              cfg["layer_counts"], cfg["dims"])
    runner = ablation.run_isolated if cfg["isolate"] else ablation.run_one
    rows = []
    for label, rc in runs:
        log.info("ablation run %s", label)
        rows.append(runner(train, test, rc, label, N=cfg["n"], budget_mib=cfg["budget_mib"],
                           eval_limit=cfg["eval_limit"]))
    (out / "ablation.json").write_text(json.dumps({"schema_version": 1, "runs": rows}, indent=2, sort_keys=True))
    metric = f"recall@{cfg['n']}"
    print(ablation.format_table(rows, metric))
    plotting.ablation_panels(rows, out / "ablation.png", metric=metric)
    return {"files": ["ablation.json", "ablation.png"]}


RUNNERS = {"generate": run_generate, "pretrain": run_pretrain, "evaluate": run_evaluate, "ablate": run_ablate}
INPUT_KEYS = {"generate": (), "pretrain": ("data", "resume"), "evaluate": ("checkpoint", "data"),
              "ablate": ("data",)}


def _input_paths(command: str, cfg: dict) -> list:
    paths = []
    for key in INPUT_KEYS[command]:
        v = cfg.get(key)
        paths += v if isinstance(v, list) else [v]
    return paths


def execute(command: str, cfg: dict, out: Path, argv: list) -> int:
    """Write the manifest, run, record outputs. Returns the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=command, argv=argv, config=cfg, seeds={"seed": cfg["seed"]})
    manifest.write(out)
    try:
        manifest.inputs = _inputs(_input_paths(command, cfg))
        manifest.write(out)
        result = RUNNERS[command](cfg, out)
    except CONFIG_ERRORS as e:
        manifest.finish(out, status=f"config error: {e}")
        print(f"graphfm: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        manifest.finish(out, status=f"failed: {type(e).__name__}: {e}")
        print(f"graphfm: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    outputs = {f: hash_path(out / f) for f in result["files"] if (out / f).exists()}
    if result.get("nan"):
        manifest.finish(out, status="failed: NaN metric", outputs=outputs)
        print("graphfm: runtime error: report contains NaN", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.finish(out, outputs=outputs)
    return EXIT_OK


def replay(args) -> int:
    try:
        original = RunManifest.read(args.manifest)
    except (OSError, ValueError, TypeError) as e:
        print(f"graphfm: error: cannot read manifest: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stale = original.stale_inputs()
    if stale:
        print(f"graphfm: error: inputs changed since the recorded run: {', '.join(stale)}", file=sys.stderr)
        return EXIT_CONFIG
    echo_config(original.command, original.config)
    out = Path(args.out)
    code = execute(original.command, original.config, out, ["replay", str(args.manifest)])
    if code or not args.check:
        return code
    fresh = RunManifest.read(out)
    differ = sorted(f for f in original.outputs if fresh.outputs.get(f) != original.outputs[f])
    for f in differ:
        print(f"differs: {f}", file=sys.stderr)
    print(f"replay\t{'identical' if not differ else 'differs'}\t{len(original.outputs)} outputs")
    return EXIT_RUNTIME if differ else EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage mistakes are configuration errors, not runtime failures
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "replay":
        return replay(args)
    try:
        cfg = resolve_config(args.command, args)
    except UsageError as e:
        print(f"graphfm: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    echo_config(args.command, cfg)
    out = Path(args.out) if args.out else Path("runs") / args.command
    return execute(args.command, cfg, out, argv)


if __name__ == "__main__":
    sys.exit(main())
