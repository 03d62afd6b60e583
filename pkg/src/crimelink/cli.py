"""Command-line entry point: ``crimelink gen|experiment|ablate|rank``.

Exit codes: 0 success, 2 configuration or argument error, 3 I/O or
malformed input file, 4 leakage-guard violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    format_value,
    gen_snapshot,
    load_gen_config,
    load_run_config,
    read_kv,
)
from .dataset import CaseTable, DatasetError, load_cases, save_cases
from .evaluation import (
    METHODS,
    METRICS,
    all_pairs,
    pair_distances,
    pair_labels,
    resolve_method,
    run_cross_validation,
    similarity,
)
from .mapping import REFERENCE_MAP_SIZES, MappingError, apply_mapping, load_bundled_map, parse_mapping
from .network import load_params, save_params
from .synthgen import GenConfig, calibrate_imbalance, generate, summarize
from .training import LeakageError, write_history

log = logging.getLogger("crimelink")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_LEAKAGE = 0, 2, 3, 4
ABLATION_AXES = ("fusion", "skip_connections", "depth", "activation")
FUSION_ALIASES = {"concat": "input_concat", "decoder": "decoder_add"}


class UsageError(Exception):
    """Bad argument value; reported with exit code 2."""


# -- helpers ---------------------------------------------------------------------------


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_manifest(out: Path, command: str, snapshot: dict, inputs: dict, outputs: dict, seed, **extra) -> Path:
    manifest = {
        **extra,
        "command": command,
        "config": {k: snapshot[k] for k in sorted(snapshot)},
        "config_hash": config_hash(snapshot),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
    }
    path = out / "manifest.json"
    _write_json(manifest, path)
    return path


def _load_mapping(arg: Optional[str]):
    if arg is None:
        return None
    p = Path(arg)
    if p.exists():
        return parse_mapping(p)
    if arg in REFERENCE_MAP_SIZES:
        return load_bundled_map(arg)
    raise FileNotFoundError(f"mapping file not found: {arg}")


def _load_dataset(args) -> CaseTable:
    table = load_cases(args.dataset, schema_path=args.schema)
    spec = _load_mapping(getattr(args, "mapping", None))
    return apply_mapping(table, spec) if spec is not None else table


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.fixed_fp_rate is not None:
        if not 0 < args.fixed_fp_rate < 1:
            raise ConfigError("fixed_fp_rate", "must lie in (0, 1)")
        cfg = cfg.replace(fixed_fp_rate=args.fixed_fp_rate)
    return cfg


def _resolved_snapshot(cfg: RunConfig, method: str, dims: int) -> dict:
    """Snapshot of what is actually trained; method overrides are folded in."""
    net, loss = resolve_method(method, cfg.net_config(dims), cfg.loss)
    snap = {**dataclasses.asdict(net), **dataclasses.asdict(loss), **dataclasses.asdict(cfg.train)}
    snap["folds"] = cfg.folds
    snap["fixed_fp_rate"] = cfg.fixed_fp_rate
    return snap


def _check_jobs(jobs: int) -> int:
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return jobs


# -- gen ---------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    gen_cfg, target = load_gen_config(args.config) if args.config else (GenConfig(), None)
    if args.seed is not None:
        gen_cfg = gen_cfg.replace(seed=args.seed)
    if target is not None:
        gen_cfg = calibrate_imbalance(gen_cfg, target)
    table = generate(gen_cfg)
    stats = summarize(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"dataset": out / "cases.csv", "schema": out / "schema.csv", "stats": out / "stats.json"}
    save_cases(table, outputs["dataset"], outputs["schema"])
    _write_json(stats.to_json_dict(), outputs["stats"])
    _write_manifest(out, "gen", gen_snapshot(gen_cfg, target), {"config": args.config}, outputs, gen_cfg.seed)
    log.info("wrote %d cases to %s", len(table), outputs["dataset"])
    return EXIT_OK


# -- experiment ---------------------------------------------------------------------------


def _write_scores(path: Path, table: CaseTable, ia, ib, dist, sim, labels) -> None:
    ids = table.case_ids
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_a", "case_b", "distance", "similarity", "label"])
        for a, b, d, s, y in zip(ia.tolist(), ib.tolist(), dist.tolist(), sim.tolist(), labels.tolist()):
            ca, cb = sorted((ids[a], ids[b]))
            w.writerow([ca, cb, repr(d), repr(s), y])


def cmd_experiment(args) -> int:
    cfg = _run_config(args)
    jobs = _check_jobs(args.jobs)
    table = _load_dataset(args)
    snap = _resolved_snapshot(cfg, args.method, table.dims)
    h = config_hash(snap)
    run = run_cross_validation(
        table, cfg.folds, cfg.net_config(table.dims), cfg.train, cfg.loss,
        args.method, cfg.fixed_fp_rate, jobs, h,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"metrics": out / "metrics.json"}
    _write_json(run.report.to_json_dict(), outputs["metrics"])
    for fr in run.folds:
        if fr.params is not None:
            p = out / f"params_fold{fr.fold}.lfnp"
            save_params(fr.params, run.net_cfg, p)
            outputs[f"params_fold{fr.fold}"] = p
            hp = out / f"history_fold{fr.fold}.csv"
            write_history(fr.history, hp)
            outputs[f"history_fold{fr.fold}"] = hp
        if args.write_scores and fr.params is not None:
            val = run.assignment.indices(fr.fold)
            a, b = all_pairs(len(val))
            ia, ib = val[a], val[b]
            dist = pair_distances(fr.params, table, run.net_cfg, ia, ib)
            sp = out / f"scores_fold{fr.fold}.csv"
            _write_scores(sp, table, ia, ib, dist, np.atleast_1d(similarity(dist, run.loss_cfg.margin)),
                          pair_labels(table, ia, ib))
            outputs[f"scores_fold{fr.fold}"] = sp
    inputs = {"dataset": args.dataset, "schema": args.schema, "mapping": args.mapping, "config": args.config}
    # method stays out of the snapshot; its effect shows up as the resolved fusion and recon fields
    _write_manifest(out, "experiment", snap, inputs, outputs, cfg.train.seed, method=args.method)
    for m in METRICS:
        log.info("%s %s: %.2f +/- %.2f", args.method, m, run.report.mean(m), run.report.std(m))
    return EXIT_OK


# -- ablate ---------------------------------------------------------------------------------


def parse_grid(path) -> dict[str, list]:
    raw = read_kv(path)
    if not raw:
        raise ConfigError("grid", "grid is empty")
    grid: dict[str, list] = {}
    for key, value in raw.items():
        if key not in ABLATION_AXES:
            raise ConfigError(key, f"grid axes must be a subset of {', '.join(ABLATION_AXES)}")
        items = [v.strip() for v in value.split(",") if v.strip()]
        if not items:
            raise ConfigError(key, "axis has no values")
        if key == "fusion":
            items = [FUSION_ALIASES.get(v, v) for v in items]
        elif key == "depth":
            try:
                items = [int(v) for v in items]
            except ValueError:
                raise ConfigError(key, "depth values must be integers") from None
        elif key == "skip_connections":
            conv = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}
            if any(v.lower() not in conv for v in items):
                raise ConfigError(key, "skip_connections values must be true/false")
            items = [conv[v.lower()] for v in items]
        grid[key] = list(dict.fromkeys(items))
    return grid


def grid_cells(grid: dict[str, list]) -> list[dict]:
    keys = [k for k in ABLATION_AXES if k in grid]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


ABLATION_HEADER = ["fusion", "skip", "depth", "activation"] + [
    f"{m}_{s}" for m in METRICS for s in ("mean", "std")
] + ["config_hash"]


def cmd_ablate(args) -> int:
    base = _run_config(args)
    jobs = _check_jobs(args.jobs)
    grid = parse_grid(args.grid)
    cells = grid_cells(grid)
    for cell in cells:
        base.replace(**cell).net_config(1 << 20)
    table = _load_dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in cells:
        cfg = base.replace(**cell)
        snap = _resolved_snapshot(cfg, "ours", table.dims)
        h = config_hash(snap)
        report = run_cross_validation(
            table, cfg.folds, cfg.net_config(table.dims), cfg.train, cfg.loss,
            "ours", cfg.fixed_fp_rate, jobs, h,
        ).report
        net = cfg.net_config(table.dims)
        row = [net.fusion, format_value(net.skip_connections), net.depth, net.activation]
        for m in METRICS:
            row += [repr(report.mean(m)), repr(report.std(m))]
        rows.append(row + [h])
        log.info("cell %s: auc %.2f", cell, report.mean("auc"))
    path = out / "ablation.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
    snap = base.snapshot(table.dims)
    snap["grid"] = ";".join(f"{k}={','.join(format_value(v) for v in grid[k])}" for k in grid)
    inputs = {"dataset": args.dataset, "schema": args.schema, "mapping": args.mapping,
              "config": args.config, "grid": args.grid}
    _write_manifest(out, "ablate", snap, inputs, {"ablation": path}, base.train.seed)
    return EXIT_OK


# -- rank --------------------------------------------------------------------------------------


def rank_matches(table: CaseTable, params, net_cfg, query: str, k: int, margin: float = 5.0):
    """``(rank, case_id, similarity, distance)`` rows, best first; ties by case id."""
    if k < 1:
        raise UsageError("k must be at least 1")
    try:
        q = table.position(query)
    except KeyError:
        raise UsageError(f"unknown case id {query!r}") from None
    others = np.array([i for i in range(len(table)) if i != q], dtype=np.int64)
    dist = pair_distances(params, table, net_cfg, np.full(len(others), q), others)
    sim = np.atleast_1d(similarity(dist, margin))
    ids = [table.case_ids[i] for i in others]
    order = sorted(range(len(others)), key=lambda j: (-sim[j], ids[j]))[:k]
    return [(r + 1, ids[j], float(sim[j]), float(dist[j])) for r, j in enumerate(order)]


def cmd_rank(args) -> int:
    params, net_cfg = load_params(args.params)
    table = _load_dataset(args)
    if table.dims != net_cfg.input_dim:
        raise UsageError(f"params expect {net_cfg.input_dim} features, dataset has {table.dims}")
    margin = load_run_config(args.config).loss.margin if args.config else args.margin
    rows = rank_matches(table, params, net_cfg, args.query, args.k, margin)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "case_id", "similarity", "distance"])
    for r, cid, s, d in rows:
        w.writerow([r, cid, repr(s), repr(d)])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        snap = {**dataclasses.asdict(net_cfg), "margin": margin, "k": args.k, "query": args.query}
        inputs = {"dataset": args.dataset, "schema": args.schema, "mapping": args.mapping,
                  "params": args.params, "config": args.config}
        _write_manifest(out, "rank", snap, inputs, {}, None)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crimelink", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=True):
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="concurrent folds (default 1)")
        p.add_argument("--fixed-fp-rate", type=float, default=None, help="operating point for TP@FP")

    def data(p):
        p.add_argument("--dataset", required=True)
        p.add_argument("--schema", default=None, help="schema sidecar (default: schema.csv beside dataset)")
        p.add_argument("--mapping", default=None, help="mapping CSV or bundled map name (map1..map5)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", default=None)
    shared(g)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("experiment", help="cross-validate one method")
    data(e)
    e.add_argument("--config", default=None)
    e.add_argument("--method", choices=METHODS, default="ours")
    e.add_argument("--write-scores", action="store_true", help="also write per-fold scored pairs")
    shared(e)
    e.set_defaults(func=cmd_experiment)

    a = sub.add_parser("ablate", help="cross-validate every cell of an architecture grid")
    data(a)
    a.add_argument("--grid", required=True)
    a.add_argument("--config", default=None)
    shared(a)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("rank", help="top-k most similar cases for a query")
    data(r)
    r.add_argument("--params", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("-k", type=int, default=10)
    r.add_argument("--config", default=None, help="run config supplying the margin")
    r.add_argument("--margin", type=float, default=5.0)
    shared(r, out_required=False)
    r.set_defaults(func=cmd_rank)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except LeakageError as exc:
        print(f"error: leakage guard: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (ConfigError, MappingError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
