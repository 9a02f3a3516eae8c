"""Command-line entry point: ``siger <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (MODALITIES, DatasetSplit, SyntheticSpec, generate_synthetic, kcore_filter, kcore_keep,
                      load_interactions, load_modality_features, load_pairs, save_interactions,
                      save_modality_features, save_pairs, split_cold_start, split_general)
from .evaluation import evaluate
from .graphs import collaborative_coverage
from .model import GraphTensors, feature_tensors, load_checkpoint, save_checkpoint
from .trainer import (SWEEP_KEYS, COMPONENT_VARIANTS, MODALITY_VARIANTS, VARIANT_LABELS, VARIANTS, PreparedData,
                      TrainConfig, apply_ablation, evaluate_fit, fit, history_csv, prepare_graphs, sweep)

logger = logging.getLogger("siger")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Files and manifests


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config: dict, inputs: list[Path] = (), seed=None,
                   graph_keys=(), artifacts=()) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "dataset_hashes": {p.name: _sha256(p) for p in inputs if p.exists()},
        "graph_cache_keys": list(graph_keys),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _feature_path(data: Path, m: str) -> Path:
    return data / f"feat_{m}.bin"


def load_prepared(data: Path, modalities=MODALITIES) -> PreparedData:
    """Read a ``prepare`` output directory, touching only the requested modalities."""
    meta_path = data / "split.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{data} is not a prepared dataset (no split.json); run 'prepare'")
    meta = json.loads(meta_path.read_text())
    cold = np.asarray(meta["cold_items"], dtype=np.int64) if meta.get("cold_items") is not None else None
    split = DatasetSplit(load_pairs(data / "train.tsv"), load_pairs(data / "valid.tsv"),
                         load_pairs(data / "test.tsv"), meta["mode"], meta["seed"], meta["n_users"],
                         meta["n_items"], cold, meta.get("dropped_users", 0))
    feats = {}
    for m in modalities:
        path = _feature_path(data, m)
        if not path.exists():
            raise FileNotFoundError(f"missing feature file for modality '{m}': {path}")
        feats[m] = load_modality_features(path, m)
        if feats[m].data.shape[0] != split.n_items:
            raise ValueError(f"modality '{m}' has {feats[m].data.shape[0]} rows, expected {split.n_items}")
    return PreparedData(split, feats)


# --------------------------------------------------------------------------
# Configuration


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict:
    """``key = value`` file with ``[section]`` headers or dotted keys; also accepts a run manifest."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        return doc.get("config", doc)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text if text.lstrip().startswith("[") else "[train]\n" + text)
    out: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            dotted = key if "." in key else (key if section == "train" else f"{section}.{key}")
            node = out
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = _parse_value(raw)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


FLAG_MAP = {
    "beta": ("graph", "beta"), "kc": ("graph", "kc"), "km": ("graph", "km"),
    "layers_ui": ("model", "layers_ui"), "layers_ii": ("model", "layers_ii"),
    "epsilon": ("model", "epsilon"), "dim": ("model", "dim"), "activation": ("model", "activation"),
    "tau0": ("loss", "tau0"), "tau1": ("loss", "tau1"), "tau2": ("loss", "tau2"),
    "lambda_p": ("loss", "lambda_p"), "lambda_a": ("loss", "lambda_a"), "lambda_r": ("loss", "lambda_r"),
    "universe": ("loss", "universe"),
    "lr": (None, "lr"), "batch": (None, "batch_size"), "patience": (None, "patience"),
    "max_epochs": (None, "max_epochs"), "seed": (None, "seed"), "deterministic": (None, "deterministic"),
}


def resolve_config(args) -> TrainConfig:
    cfg = TrainConfig().to_dict()
    if getattr(args, "config", None):
        cfg = _merge(cfg, read_config_file(args.config))
    for flag, (section, key) in FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            cfg[key] = value
        else:
            cfg.setdefault(section, {})[key] = value
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (or a run manifest.json)")
    p.add_argument("--beta", type=float)
    p.add_argument("--kc", type=int)
    p.add_argument("--km", type=int)
    p.add_argument("--layers-ui", dest="layers_ui", type=int)
    p.add_argument("--layers-ii", dest="layers_ii", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--activation", choices=["sigmoid", "leaky_relu"])
    for t in ("tau0", "tau1", "tau2"):
        p.add_argument(f"--{t}", type=float)
    for lam in ("p", "a", "r"):
        p.add_argument(f"--lambda-{lam}", dest=f"lambda_{lam}", type=float)
    p.add_argument("--universe", choices=["batch", "full"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    out = _prepare_out(args.out, args.force)
    spec = SyntheticSpec(args.users, args.items, args.latent_dim, args.per_user, args.noise, args.clusters,
                         args.seed)
    table, vis, txt = generate_synthetic(spec)
    save_interactions(table, out / "interactions.tsv")
    save_modality_features(vis, _feature_path(out, "v"))
    save_modality_features(txt, _feature_path(out, "t"))
    files = [out / "interactions.tsv", _feature_path(out, "v"), _feature_path(out, "t")]
    write_manifest(out, "synth", {"synthetic": {k: getattr(spec, k) for k in spec.__dataclass_fields__}},
                   files, args.seed, artifacts=[f.name for f in files])
    print(f"wrote {len(table)} interactions, {table.n_users} users, {table.n_items} items to {out}")
    return 0


def cmd_prepare(args) -> int:
    src = Path(args.data)
    out = _prepare_out(args.out, args.force)
    table = load_interactions(src / "interactions.tsv")
    keep_items = np.arange(table.n_items)
    if args.kcore > 1:
        _, keep_items = kcore_keep(table, args.kcore)
        table = kcore_filter(table, args.kcore)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if args.mode == "general":
        split = split_general(table, ratios, args.seed)
    else:
        split = split_cold_start(table, args.cold_fraction, args.seed, ratios)
    save_interactions(table, out / "interactions.tsv")
    files = [src / "interactions.tsv"]
    for m in MODALITIES:
        path = _feature_path(src, m)
        if path.exists():
            save_modality_features(load_modality_features(path, m).select_rows(keep_items), _feature_path(out, m))
            files.append(path)
    for part in ("train", "valid", "test"):
        save_pairs(split.part(part), out / f"{part}.tsv")
    meta = {"mode": split.mode, "seed": split.seed, "n_users": split.n_users, "n_items": split.n_items,
            "cold_items": None if split.cold_items is None else split.cold_items.tolist(),
            "dropped_users": split.dropped_users, "ratios": list(ratios), "kcore": args.kcore}
    (out / "split.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "prepare", meta, files, args.seed)
    print(f"{split.mode} split: train {len(split.train)}, valid {len(split.valid)}, test {len(split.test)}"
          + (f", cold items {len(split.cold_items)}" if split.cold_items is not None else ""))
    return 0


def _graph_dirs(args, data: Path) -> Path:
    return Path(args.cache) if getattr(args, "cache", None) else data / "graphs"


def cmd_build_graphs(args) -> int:
    data = Path(args.data)
    config = resolve_config(args)
    prepared = load_prepared(data, config.modalities)
    cache = _graph_dirs(args, data)
    graphs = prepare_graphs(prepared, config, cache)
    out = cache / graphs.key
    for m, hist in graphs.coverage.items():
        (out / f"coverage_{m}.csv").write_text(hist.to_csv())
    write_manifest(out, "build-graphs", config.to_dict(), [data / "train.tsv"], config.seed, [graphs.key],
                   sorted(p.name for p in out.iterdir() if p.name != "manifest.json"))
    for name, mat in graphs.files().items():
        print(f"{name:12s} {mat.shape[0]}x{mat.shape[1]} nnz={mat.nnz}")
    for m, hist in graphs.coverage.items():
        print(f"coverage[{m}] bins={list(hist.counts)} items={hist.total}")
    print(f"graphs: {out}")
    return 0


def cmd_diagnose_coverage(args) -> int:
    data = Path(args.data)
    config = resolve_config(args)
    modalities = tuple(args.modality.split(",")) if args.modality else config.modalities
    config = replace(config, modalities=tuple(sorted(modalities)))
    prepared = load_prepared(data, config.modalities)
    graphs = prepare_graphs(prepared, config, _graph_dirs(args, data))
    lines = ["modality,n_covered,items"]
    for m in config.modalities:
        hist = collaborative_coverage(graphs.knn[m], graphs.counts, args.top_n, m)
        lines += hist.to_csv().splitlines()[1:]
        print(f"{m}: " + " ".join(f"{n}:{c}" for n, c in enumerate(hist.counts)) + f" (items={hist.total})")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _train_one(prepared: PreparedData, config: TrainConfig, cache: Path, out: Path, data: Path) -> dict:
    result = fit(prepared, config, cache_dir=cache)
    (out / "history.csv").write_text(history_csv(result.history))
    save_checkpoint(result.model, out / "best.ckpt",
                    {"config": result.config.to_dict(), "best_epoch": result.best_epoch,
                     "best_valid_R@20": result.best_valid})
    report = evaluate_fit(result, prepared, "test")
    (out / "test_metrics.csv").write_text(report.to_csv())
    write_manifest(out, "train", result.config.to_dict(), [data / "train.tsv", data / "valid.tsv",
                   data / "test.tsv"] + [_feature_path(data, m) for m in result.config.modalities],
                   result.config.seed, [result.graphs.key],
                   ["history.csv", "best.ckpt", "best.json", "test_metrics.csv"])
    return {"result": result, "report": report}


def cmd_train(args) -> int:
    data = Path(args.data)
    config = apply_ablation(resolve_config(args), args.variant)
    out = _prepare_out(args.out, args.force)
    prepared = load_prepared(data, config.modalities)
    run = _train_one(prepared, config, _graph_dirs(args, data), out, data)
    res = run["result"]
    print(f"variant {config.variant}: {len(res.history)} epochs, best epoch {res.best_epoch}, "
          f"valid R@20 {res.best_valid:.4f}")
    sys.stdout.write(run["report"].to_table())
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, manifest = load_checkpoint(ckpt)
    config = TrainConfig.from_dict(manifest["config"])
    data = Path(args.data)
    prepared = load_prepared(data, config.modalities)
    graphs = prepare_graphs(prepared, config, _graph_dirs(args, data))
    report = evaluate(model, GraphTensors.from_graphs(graphs),
                      feature_tensors({m: prepared.features[m] for m in config.modalities}),
                      prepared.split, args.split, tuple(args.ks), config.variant)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"metrics_{report.split}"
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.txt").write_text(report.to_table())
    sys.stdout.write(report.to_table())
    return 0


def ablation_table(rows: list[dict], variants, metrics=("R@10", "R@20", "N@10", "N@20")) -> str:
    """Metric x variant table of seed means (and standard errors)."""
    head = ["metric"] + [VARIANT_LABELS[v] for v in variants]
    body = []
    for metric in metrics:
        line = [metric]
        for v in variants:
            vals = np.array([r[metric] for r in rows if r["variant"] == v], dtype=float)
            se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
            line.append(f"{vals.mean():.4f}±{se:.4f}" if len(vals) else "n/a")
        body.append(line)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    return "\n".join("  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip()
                     for line in [head] + body) + "\n"


def cmd_ablate(args) -> int:
    data = Path(args.data)
    base = resolve_config(args)
    out = _prepare_out(args.out, args.force)
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; valid: {', '.join(VARIANTS)}")
    prepared = load_prepared(data, base.modalities)
    rows, keys = [], set()
    for seed in args.seeds:
        for v in variants:
            config = apply_ablation(replace(base, seed=seed), v)
            result = fit(prepared, config, cache_dir=_graph_dirs(args, data))
            keys.add(result.graphs.key)
            report = evaluate_fit(result, prepared, "test")
            rows.append({"variant": v, "seed": seed, "best_epoch": result.best_epoch, **report.columns()})
            logger.info("seed %d %s: test R@20 %.4f", seed, v, report.recall[20] or 0.0)
    (out / "ablation.csv").write_text(history_csv(rows))
    tables = []
    for title, group in (("components", COMPONENT_VARIANTS), ("modalities", MODALITY_VARIANTS)):
        group = [v for v in group if v in variants]
        if group:
            tables.append(f"[{title}] test split, mean±se over {len(args.seeds)} seeds\n"
                          + ablation_table(rows, group))
    text = "\n".join(tables)
    (out / "ablation.txt").write_text(text)
    write_manifest(out, "ablate", base.to_dict(), [data / "train.tsv"], args.seeds, sorted(keys),
                   ["ablation.csv", "ablation.txt"])
    sys.stdout.write(text)
    return 0


def read_grid(path) -> dict[str, list]:
    """``key = v1, v2, ...`` per line; ``#`` comments allowed."""
    grid = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = v1, v2, ...'")
        key, values = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SWEEP_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown sweep key {key!r}; valid: {', '.join(SWEEP_KEYS)}")
        vals = [_parse_value(v) for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"{path}:{lineno}: no values for {key}")
        grid[key] = vals
    if not grid:
        raise UsageError(f"{path}: sweep grid is empty")
    return grid


def cmd_sweep(args) -> int:
    data = Path(args.data)
    grid = read_grid(args.grid)
    config = resolve_config(args)
    out = _prepare_out(args.out, args.force)
    prepared = load_prepared(data, config.modalities)
    rows = sweep(grid, prepared, config, _graph_dirs(args, data), jobs=args.jobs)
    (out / "sweep.csv").write_text(history_csv(rows))
    write_manifest(out, "sweep", {"base": config.to_dict(), "grid": grid}, [data / "train.tsv"], config.seed,
                   sorted({r["graph_key"] for r in rows}), ["sweep.csv"])
    print(f"{len(rows)} grid points; best: " + ", ".join(f"{k}={rows[0][k]}" for k in grid)
          + f" (valid R@20 {rows[0]['valid_R@20']:.4f})")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siger", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=16)
    p.add_argument("--per-user", dest="per_user", type=int, default=15)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="k-core filter and split a dataset")
    p.add_argument("--data", required=True, help="directory with interactions.tsv and feat_{v,t}.bin")
    p.add_argument("--out", required=True)
    p.add_argument("--kcore", type=int, default=1)
    p.add_argument("--mode", choices=["general", "cold-start"], default="general")
    p.add_argument("--cold-fraction", dest="cold_fraction", type=float, default=0.2)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    for name, func, text in (("build-graphs", cmd_build_graphs, "build and cache all graphs"),
                             ("diagnose-coverage", cmd_diagnose_coverage, "collaborative coverage histogram")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--cache", help="graph cache directory (default <data>/graphs)")
        _add_config_flags(p)
        if name == "diagnose-coverage":
            p.add_argument("--modality", help="comma-separated subset of v,t")
            p.add_argument("--top-n", dest="top_n", type=int, default=5)
            p.add_argument("--out", help="write the histogram CSV here")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--cache")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--ks", type=_int_list, default=[10, 20])
    p.add_argument("--out")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train all ablation variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--cache")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid search")
    p.add_argument("--grid", required=True, help="file of 'key = v1, v2, ...' lines")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"siger: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"siger: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
