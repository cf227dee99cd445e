"""Command line entry point: ``cpr simulate | train | evaluate | explain | grid-search | bootstrap``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from cpr import __version__
from cpr.config import KEYS, ConfigError, config_hash, parse_split, read_config, sim_spec, train_config, write_config
from cpr.data import DatasetError, load_dataset, save_dataset
from cpr.metrics import EvalReport, MetricError, evaluate
from cpr.policy import (CPRGlobalModel, coefficient_rows, explain_global, write_coefficients_csv,
                        write_contributions_csv)
from cpr.simulator import simulate
from cpr.training import (bootstrap_eval, grid_search, load_model, save_model, split_patients, train_model)

log = logging.getLogger("cpr")


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value run configuration file")
    for key, typ in KEYS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=typ, default=None)


def _values(args) -> dict:
    values = read_config(args.config) if args.config else {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values.setdefault("seed", 0)
    return values


def _out_dir(values) -> Path:
    out = Path(values.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, values: dict, outputs: list, extra: dict | None = None):
    doc = {
        "command": command,
        "version": __version__,
        "seed": values.get("seed", 0),
        "config": values,
        "config_hash": config_hash(values),
        "outputs": sorted(str(o) for o in outputs),
        **(extra or {}),
    }
    with open(out / f"manifest_{command}.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)


def _require(values, key):
    if not values.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return values[key]


def cmd_simulate(values):
    spec = sim_spec(values)
    out = _out_dir(values)
    path = out / "trajectories.jsonl"
    save_dataset(simulate(spec), path)
    _manifest(out, "simulate", values, [path])
    print(path)


def cmd_train(values):
    data = load_dataset(_require(values, "data"))
    cfg = train_config(values)
    out = _out_dir(values)
    train, val, test = split_patients(data, cfg.split, cfg.seed)
    model, res = train_model(train, val or train, cfg)
    ckpt = out / "checkpoint.json"
    save_model(model, ckpt, {"train_config": cfg.to_dict()})
    curve = out / "curve.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in res.curve_rows():
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    meta = out / "fit.json"
    with open(meta, "w") as fh:
        json.dump({"config": cfg.to_dict(), "seed": cfg.seed, "epochs_run": res.epochs_run,
                   "best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss}, fh, indent=2)
    outputs = [ckpt, curve, meta]
    for name, part in (("train", train), ("val", val), ("test", test)):
        if part:
            save_dataset(part, out / f"{name}.jsonl")
            outputs.append(out / f"{name}.jsonl")
    _manifest(out, "train", values, outputs)
    print(ckpt)


def cmd_evaluate(values):
    model, _ = load_model(_require(values, "checkpoint"))
    data = load_dataset(_require(values, "data"))
    out = _out_dir(values)
    report = EvalReport()
    report.merge(evaluate(model, data))
    path = out / "report.json"
    report.to_json(path)
    _manifest(out, "evaluate", values, [path])
    print(path)


def cmd_explain(values, use_global: bool):
    model, _ = load_model(_require(values, "checkpoint"))
    data = load_dataset(_require(values, "data"))
    names = values["features"].split(",") if values.get("features") else None
    out = _out_dir(values)
    path = out / "coefficients.csv"
    write_coefficients_csv(path, coefficient_rows(model, data, names))
    outputs = [path]
    if use_global:
        if not isinstance(model, CPRGlobalModel):
            raise ConfigError("--global needs a cpr-global checkpoint")
        traces = {t.id: model.trace(t) for t in data}
        contrib = out / "contributions.csv"
        write_contributions_csv(contrib, {tid: explain_global(tr, names) for tid, tr in traces.items()})
        logodds = out / "logodds.csv"
        with open(logodds, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory_id", "t", "logodds"])
            for tid, tr in traces.items():
                for t, z in enumerate(tr.logodds, 1):
                    w.writerow([tid, t, repr(float(z))])
        outputs += [contrib, logodds]
    _manifest(out, "explain", values, outputs)
    print(path)


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, _, raw = item.partition("=")
        if key not in KEYS or not raw:
            raise ConfigError(f"bad --grid entry {item!r}; expected key=v1,v2")
        grid[key] = [KEYS[key](v) for v in raw.split(",")]
    return grid


def cmd_grid_search(values, grid_items, n_seeds: int):
    data = load_dataset(_require(values, "data"))
    base = train_config(values)
    out = _out_dir(values)
    train, val, _ = split_patients(data, base.split, base.seed)
    seeds = [base.seed + i for i in range(n_seeds)]
    res = grid_search(train, val or train, _parse_grid(grid_items), base, seeds)
    table = out / "grid.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hidden_dim", "lam", "learning_rate", "cell", "alpha", "val_loss"])
        for cfg, loss in res.table:
            w.writerow([cfg.hidden_dim, cfg.lam, cfg.lr, cfg.cell, cfg.alpha, repr(loss)])
    best = out / "best_config.txt"
    best_values = {k: v for k, v in res.best.to_dict().items() if k in KEYS}
    best_values["split"] = ",".join(str(f) for f in res.best.split)
    write_config(best, best_values)
    report = out / "report.json"
    res.report.to_json(report)
    _manifest(out, "grid-search", values, [table, best, report])
    print(best)


def cmd_bootstrap(values):
    data = load_dataset(_require(values, "data"))
    cfg = train_config(values)
    out = _out_dir(values)
    report = bootstrap_eval(data, cfg, runs=values.get("runs") or 10)
    path = out / "bootstrap.json"
    report.to_json(path)
    _manifest(out, "bootstrap", values, [path])
    print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpr", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "evaluate"):
        _add_overrides(sub.add_parser(name))
    p = sub.add_parser("explain")
    _add_overrides(p)
    p.add_argument("--global", dest="use_global", action="store_true",
                   help="also write telescoped per-feature contributions")
    p = sub.add_parser("grid-search")
    _add_overrides(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis; repeatable")
    p.add_argument("--n-seeds", type=int, default=1)
    _add_overrides(sub.add_parser("bootstrap"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        values = _values(args)
        if values.get("split") is not None:
            parse_split(values["split"])
        if args.command == "simulate":
            cmd_simulate(values)
        elif args.command == "train":
            cmd_train(values)
        elif args.command == "evaluate":
            cmd_evaluate(values)
        elif args.command == "explain":
            cmd_explain(values, args.use_global)
        elif args.command == "grid-search":
            cmd_grid_search(values, args.grid, args.n_seeds)
        elif args.command == "bootstrap":
            cmd_bootstrap(values)
    except (ConfigError, DatasetError, MetricError, ValueError, FileNotFoundError) as e:
        print(f"cpr {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
