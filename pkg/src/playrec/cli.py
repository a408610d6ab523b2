"""Command-line entry point.

Every command reads its inputs from files under ``--out`` and writes its own
artifacts there, so the stages can be run one at a time and resumed:

    fit -> walk -> train -> eval
    analyze, verify-theory, sweep   (standalone)
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .betamix import EmConfig, InterestAssignment, summarize, write_models_jsonl
from .dataio import Dataset, NormalizationConfig, generate_synthetic, load_dataset, split_dataset, write_dataset
from .divtheory import verify_diversity_identities
from .evalmetrics import DEFAULT_KS, evaluate, geometric_mean, modal_category_analysis, write_analysis_csv
from .interestgraphs import SslConfig, build_graph_views
from .mrw import WalkConfig, WalkEngine, augmented_graph, read_walk_edges, run_walks, write_edges
from .pipeline import Experiment, fit_stage
from .propagation import GcnConfig
from .training import BalanceConfig, Graphs, configs_from_meta, load_checkpoint, save_checkpoint, train

log = logging.getLogger("playrec")

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "data": {
        "interactions": None,
        "categories": None,
        "embeddings": None,
        "synthetic": {"num_users": 500, "num_items": 200, "num_categories": 8},
        "split": [0.8, 0.1, 0.1],
    },
    "normalization": asdict(NormalizationConfig()),
    "em": asdict(EmConfig()),
    "fit": {"min_interactions": 1, "report_min_interactions": 10},
    "walk": asdict(WalkConfig()),
    "gcn": asdict(GcnConfig()),
    "ssl": asdict(SslConfig()),
    "balance": asdict(BalanceConfig()),
    "eval": {"ks": list(DEFAULT_KS)},
    "theory": {"trials": 10000, "z_threshold": 3.0},
}

SPLITS = ("train", "valid", "test")


class CliError(Exception):
    pass


# ------------------------------------------------------------------- config


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out:
            raise CliError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise CliError(f"--set expects section.key=value, got {assignment!r}")
    nested: dict = {}
    cursor = nested
    parts = key.split(".")
    for p in parts[:-1]:
        cursor[p] = {}
        cursor = cursor[p]
    cursor[parts[-1]] = _parse_value(value)
    return _merge(config, nested)


def load_config(args) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if args.config:
        config = _merge(config, json.loads(Path(args.config).read_text()))
    for item in args.set or ():
        config = apply_override(config, item)
    if args.seed is not None:
        config["seed"] = args.seed
    threads = args.threads or os.environ.get("PLAYREC_THREADS") or config["threads"]
    config["threads"] = 1 if args.deterministic else int(threads)
    for key in ("interactions", "categories", "embeddings"):
        if getattr(args, key, None):
            config["data"][key] = getattr(args, key)
    return config


def module_configs(config: dict):
    seed = config["seed"]
    return (
        EmConfig(**config["em"]),
        replace(WalkConfig(**config["walk"]), seed=seed, threads=config["threads"]),
        GcnConfig(**config["gcn"]),
        SslConfig(**config["ssl"]),
        replace(BalanceConfig(**config["balance"]), seed=seed),
    )


# ---------------------------------------------------------------- artifacts


class Outputs:
    """Tracks files written by one command so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.created: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        if not p.exists():
            self.created.append(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rollback(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(root: Path) -> Path:
    entries = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[p.relative_to(root).as_posix()] = _sha256(p)
    path = root / "manifest.json"
    path.write_text(json.dumps({"artifacts": entries}, indent=2, sort_keys=True) + "\n")
    return path


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


# --------------------------------------------------------------------- data


def ensure_data(config: dict, args, out: Outputs) -> Dataset:
    """Load the interaction data, materializing synthetic inputs under ``out/data`` once."""
    data = config["data"]
    local = out.root / "data"
    if all(data[k] for k in ("interactions", "categories", "embeddings")):
        paths = {k: Path(data[k]) for k in ("interactions", "categories", "embeddings")}
    elif (local / "interactions.csv").exists():
        paths = {"interactions": local / "interactions.csv", "categories": local / "categories.csv",
                 "embeddings": local / "embeddings.csv"}
    elif getattr(args, "synthetic", False):
        syn = data["synthetic"]
        ds = generate_synthetic(syn["num_users"], syn["num_items"], syn["num_categories"], seed=config["seed"])
        out.path("data")
        paths = write_dataset(ds, local)
    else:
        raise CliError("no input data: pass --synthetic or --interactions/--categories/--embeddings")
    for p in paths.values():
        if not p.exists():
            raise CliError(f"missing input file {p}")
    norm = NormalizationConfig(**config["normalization"])
    return load_dataset(paths["interactions"], paths["categories"], paths["embeddings"], norm)


def ensure_split(ds: Dataset, config: dict, out: Outputs) -> tuple[Dataset, Dataset, Dataset]:
    path = out.root / "split.tsv"
    if path.exists():
        label = {}
        ulook, ilook = ds.user_lookup(), ds.item_lookup()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                u, i, s = line.rstrip("\n").split("\t")
                label[(ulook[u], ilook[i])] = SPLITS.index(s)
        tags = np.array([label[(int(u), int(i))] for u, i in zip(ds.users, ds.items)])
        return tuple(ds.with_rows(np.flatnonzero(tags == k)) for k in range(3))
    parts = split_dataset(ds, config["data"]["split"], seed=config["seed"])
    rows = []
    for name, part in zip(SPLITS, parts):
        rows.extend((ds.user_ids[u], ds.item_ids[i], name) for u, i in zip(part.users, part.items))
    with open(out.path("split.tsv"), "w", encoding="utf-8") as fh:
        for r in sorted(rows):
            fh.write("\t".join(r) + "\n")
    return parts


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CliError(f"{path.name} not found in {path.parent}; run `playrec {producer}` first")
    return path


def load_assignment(train_set: Dataset, out: Outputs) -> InterestAssignment:
    return InterestAssignment.from_tsv(_require(out.root / "assignment.tsv", "fit"), train_set)


# ----------------------------------------------------------------- commands


def cmd_fit(args, config, out: Outputs) -> dict:
    em, *_ = module_configs(config)
    ds = ensure_data(config, args, out)
    train_set, _, _ = ensure_split(ds, config, out)
    stage = fit_stage(train_set, em, config["fit"]["min_interactions"], config["threads"])
    write_models_jsonl(out.path("models.jsonl"), stage.fits, train_set.user_ids)
    stage.assignment.to_tsv(out.path("assignment.tsv"), train_set.user_ids, train_set.item_ids)
    floor = config["fit"]["report_min_interactions"]
    report = summarize({u: f for u, f in stage.fits.items() if f.n_samples >= floor})
    write_json(out.path("fit_report.json"), report.to_dict())
    return {"users_fit": len(stage.fits), "strong_edges": int(stage.assignment.strong.sum()),
            "report": report.to_dict()}


def cmd_walk(args, config, out: Outputs) -> dict:
    _, walk, *_ = module_configs(config)
    ds = ensure_data(config, args, out)
    train_set, _, _ = ensure_split(ds, config, out)
    assignment = load_assignment(train_set, out)
    result = run_walks(train_set, assignment, walk, threads=config["threads"])
    write_edges(out.path("walk_edges.tsv"), train_set, result.edges)
    return {"walk_edges": len(result.edges), "Q": walk.Q,
            "users_augmented": len({e.user for e in result.edges})}


def _graphs(train_set: Dataset, out: Outputs) -> Graphs:
    assignment = load_assignment(train_set, out)
    views = build_graph_views(train_set, assignment)
    edges = read_walk_edges(_require(out.root / "walk_edges.tsv", "walk"), train_set)
    return Graphs.from_views(views, augmented_graph(train_set, edges))


def cmd_train(args, config, out: Outputs) -> dict:
    _, _, gcn, ssl, balance = module_configs(config)
    ds = ensure_data(config, args, out)
    train_set, _, _ = ensure_split(ds, config, out)
    graphs = _graphs(train_set, out)
    ckpt = out.root / "checkpoint"
    state = None
    if args.resume and (ckpt / "checkpoint.json").exists():
        state, saved = load_checkpoint(ckpt)
        gcn, ssl, saved_balance = configs_from_meta(saved)
        balance = replace(saved_balance, epochs=max(0, balance.epochs - state.epoch))
        log.info("resuming from epoch %d", state.epoch)
    state, model = train(train_set, graphs, gcn, ssl, balance, state)
    save_checkpoint(out.path("checkpoint"), state, model)
    return {"epochs": state.epoch, "final_loss": state.loss_history[-1] if state.loss_history else None,
            "loss_history": state.loss_history}


def cmd_eval(args, config, out: Outputs) -> dict:
    ckpt = out.root / "checkpoint"
    if not (ckpt / "checkpoint.json").exists():
        raise CliError(f"no model found in {ckpt}; run `playrec train` first")
    ds = ensure_data(config, args, out)
    train_set, valid_set, test_set = ensure_split(ds, config, out)
    target = valid_set if args.split == "valid" else test_set
    user = np.load(ckpt / "fused_user.npy")
    item = np.load(ckpt / "fused_item.npy")
    report = evaluate(user, item, train_set, target, config["eval"]["ks"])
    report.write_csv(out.path("metrics.csv"))
    out.path("metrics.txt").write_text(report.to_table())
    return {"split": args.split, **report.to_dict()}


def cmd_analyze(args, config, out: Outputs) -> dict:
    ds = ensure_data(config, args, out)
    rows = modal_category_analysis(ds.modal, ds.categories, args.top_n)
    write_analysis_csv(out.path("analysis.csv"), rows, ds.categories.names)
    mean = np.mean([[r.exact, r.partial, r.disjoint] for r in rows], axis=0) if rows else np.zeros(3)
    return {"categories": len(rows), "top_n": args.top_n,
            "mean_exact": float(mean[0]), "mean_partial": float(mean[1]), "mean_disjoint": float(mean[2])}


def cmd_verify_theory(args, config, out: Outputs) -> dict:
    _, walk, *_ = module_configs(config)
    ds = ensure_data(config, args, out)
    train_set, _, _ = ensure_split(ds, config, out)
    engine = WalkEngine(train_set, load_assignment(train_set, out), walk)
    trials = args.trials or config["theory"]["trials"]
    report = verify_diversity_identities(engine, trials, config["seed"], config["theory"]["z_threshold"])
    write_json(out.path("theory.json"), report.to_dict())
    if not report.passed:
        log.warning("drift identity check failed: z = %.3f", report.z_score)
    return report.to_dict()


def parse_grid(text: str, integer: bool = False) -> list:
    """``a:b:s`` (inclusive), ``a:b`` (unit step) or a comma list."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise CliError(f"bad grid {text!r}")
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) == 3 else 1.0
        if step <= 0 or stop < start:
            raise CliError(f"bad grid {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        values = [round(start + k * step, 10) for k in range(n)]
    else:
        values = [float(p) for p in text.split(",") if p.strip()]
    return [int(v) for v in values] if integer else values


def cmd_sweep(args, config, out: Outputs) -> dict:
    em, walk, gcn, ssl, balance = module_configs(config)
    ds = ensure_data(config, args, out)
    train_set, _, test_set = ensure_split(ds, config, out)
    alphas = parse_grid(args.alpha)
    qs = parse_grid(args.Q, integer=True)
    exp = Experiment.prepare(train_set, test_set, em, gcn, ssl, balance, walk, threads=config["threads"])
    cells = []
    for q in qs:
        for a in alphas:
            r = exp.run(a, q, ks=(5,))
            ndcg, cov = r[("NDCG", 5)], r[("Coverage", 5)]
            cells.append((a, q, ndcg, cov, geometric_mean(ndcg, cov)))
            log.info("alpha=%g Q=%d ndcg5=%.4f coverage5=%.3f", a, q, ndcg, cov)
    cells.sort(key=lambda c: (c[0], c[1]))
    with open(out.path("sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "Q", "ndcg5", "coverage5", "gm"])
        for a, q, n, c, g in cells:
            w.writerow([repr(a), q, repr(n), repr(c), repr(g)])
    best = max(cells, key=lambda c: c[4])
    return {"cells": len(cells), "best": {"alpha": best[0], "Q": best[1], "gm": best[4]}}


COMMANDS = {
    "fit": cmd_fit,
    "walk": cmd_walk,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "verify-theory": cmd_verify_theory,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--config", help="JSON config file with one section per module")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (value parsed as JSON); repeatable")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (fallback: $PLAYREC_THREADS, then 1)")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded reductions")
    common.add_argument("--synthetic", action="store_true", help="generate synthetic inputs under OUT/data")
    common.add_argument("--interactions", help="interactions CSV (user_id,item_id,playtime_minutes)")
    common.add_argument("--categories", help="categories CSV (item_id,category)")
    common.add_argument("--embeddings", help="item embeddings (CSV or PREC binary)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="playrec", description="Playtime-aware game recommendation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit per-user dual-beta mixtures and label interactions")
    sub.add_parser("walk", parents=[common], help="run multimodal random walks and write augmentation edges")
    p = sub.add_parser("train", parents=[common], help="train the fused model")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint up to balance.epochs")
    p = sub.add_parser("eval", parents=[common], help="rank and score held-out items")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p = sub.add_parser("analyze", parents=[common], help="category overlap of modal nearest neighbors")
    p.add_argument("--top-n", type=int, default=10)
    p = sub.add_parser("verify-theory", parents=[common], help="Monte-Carlo check of the coverage drift identity")
    p.add_argument("--trials", type=int)
    p = sub.add_parser("sweep", parents=[common], help="grid over alpha and Q")
    p.add_argument("--alpha", default="0.4:1.6:0.2")
    p.add_argument("--Q", default="0:4")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    out = Outputs(args.out)
    summary_name = f"{args.command}.summary.json"
    try:
        config = load_config(args)
        summary = COMMANDS[args.command](args, config, out)
        summary = {"command": args.command, "seed": config["seed"], **summary}
        write_json(out.path(summary_name), summary)
        write_manifest(args.out)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        out.rollback()
        print(f"playrec {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
