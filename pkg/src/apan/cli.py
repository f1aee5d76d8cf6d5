"""Command line: ingest, train, eval, bench, explain.

Effective settings come from flags, then a ``--config`` key=value file, then
the defaults; every run echoes them to ``config.resolved`` in the output
directory.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bench import Scenario, ScenarioError, format_table, load_scenario, report, run_scenario
from .datasets import periodic_bipartite
from .engine import Engine
from .events import (EventLog, ParseError, batches, load_jodie_csv, serialize_jodie_csv,
                     split_chronological, write_metadata)
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, test_metrics, train_classifier_head

log = logging.getLogger("apan")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
ASYNC_CAPACITY = 4


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


@dataclass
class RunConfig:
    train: TrainConfig
    dataset: str = "synthetic"
    out: str = "runs/latest"
    task: str = "link"
    mode: str = "deterministic"

    def items(self) -> list[tuple[str, object]]:
        own = [("dataset", self.dataset), ("out", self.out), ("task", self.task), ("mode", self.mode)]
        return own + [(f.name, getattr(self.train, f.name)) for f in fields(self.train)]


# flag dest -> config key
FLAG_KEYS = {"dataset": "dataset", "out": "out", "seed": "seed", "batch": "batch_size",
             "lr": "lr", "epochs": "epochs", "patience": "patience", "heads": "heads",
             "mailbox_slots": "mailbox_slots", "fanout": "fanout", "hops": "hops",
             "task": "task", "loss": "loss", "mode": "mode"}
RUN_KEYS = {"dataset": str, "out": str, "task": str, "mode": str}


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _convert(key: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"bad value {raw!r}") from None
    return raw


def resolve_config(file_values: dict[str, str], flag_values: dict[str, object]) -> RunConfig:
    """Merge with precedence flags > file > defaults and validate."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    train_kinds = {f.name: f.type for f in fields(TrainConfig)}
    run_kw, train_kw = {}, {}
    for key, raw in merged.items():
        if key in RUN_KEYS:
            run_kw[key] = raw
        elif key in train_kinds:
            train_kw[key] = _convert(key, raw, train_kinds[key])
        else:
            raise ConfigError(key, "unknown key")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        name = next((k for k in train_kw if k in str(exc)), "train")
        raise ConfigError(name, str(exc)) from None
    cfg = RunConfig(train, **run_kw)
    if cfg.task not in ("link", "edge", "node"):
        raise ConfigError("task", f"expected link, edge or node, got {cfg.task!r}")
    if cfg.mode not in ("deterministic", "async"):
        raise ConfigError("mode", f"expected deterministic or async, got {cfg.mode!r}")
    return cfg


def write_resolved(cfg: RunConfig, out: Path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.items()]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def load_dataset(spec: str) -> EventLog:
    if spec == "synthetic":
        return periodic_bipartite()
    path = Path(spec)
    if path.is_dir():
        path = path / "events.csv"
    if not path.is_file():
        raise FileNotFoundError(spec)
    return load_jodie_csv(path)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# --- subcommands -------------------------------------------------------------------

def cmd_ingest(args, cfg: RunConfig) -> int:
    src = Path(args.csv)
    if not src.is_file():
        raise FileNotFoundError(args.csv)
    event_log = load_jodie_csv(src)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "events.csv").write_text(serialize_jodie_csv(event_log))
    write_metadata(event_log, out / "metadata.txt")
    write_resolved(cfg, out)
    print(f"{len(event_log)} events, {event_log.num_nodes} nodes, d_e={event_log.d_e} -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if cfg.mode != "deterministic":
        raise ConfigError("mode", "training runs in deterministic mode only")
    event_log = load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    result = fit(event_log, cfg.train)
    result.write_metrics(out / "metrics.csv")
    save_checkpoint(result.model, out / "model.ckpt")
    rows = _test_rows(test_metrics(result.engine, event_log, result.split, cfg.train))
    if cfg.task != "link":
        head = train_classifier_head(result.model, event_log, cfg.train, cfg.task,
                                     split=result.split)
        rows.append([cfg.task, "", "", head["test_auc"]])
        save_checkpoint(result.model, out / "model.ckpt")
    _write_rows(out / "test.csv", ["protocol", "ap", "accuracy", "auc"], rows)
    print(f"best epoch {result.best_epoch}, val ap {result.best_val_ap:.4f}")
    for row in rows:
        print(",".join(map(str, row)))
    return 0


def _test_rows(metrics: dict[str, dict]) -> list[list]:
    return [[name, m["ap"], m["accuracy"], m["auc"]] for name, m in metrics.items()]


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint, dropout=cfg.train.dropout,
                            attn_scale=cfg.train.attn_scale)
    event_log = load_dataset(cfg.dataset)
    _check_compatible(model, event_log)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    split = split_chronological(event_log, cfg.train.train_frac, cfg.train.val_frac)
    engine = Engine.for_log(model, event_log, cfg.train.prop_config())
    capacity = ASYNC_CAPACITY if cfg.mode == "async" else None
    rows = _test_rows(test_metrics(engine, event_log, split, cfg.train, async_capacity=capacity))
    _write_rows(out / "eval.csv", ["protocol", "ap", "accuracy", "auc"], rows)
    for row in rows:
        print(",".join(map(str, row)))
    return 0


def _check_compatible(model, event_log: EventLog) -> None:
    if model.cfg.d_e != event_log.d_e:
        raise ValueError(f"checkpoint expects d_e={model.cfg.d_e}, dataset has {event_log.d_e}")


def cmd_bench(args, cfg: RunConfig) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        raise ConfigError(exc.key, str(exc)) from None
    except OSError:
        raise FileNotFoundError(args.scenario) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.resolved").write_text(
        "\n".join(f"{k} = {v}" for k, v in scenario.as_items()) + "\n")
    stats = run_scenario(scenario)
    report(stats, out / "bench.csv", out / "worker.csv")
    print(format_table(stats))
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint, dropout=cfg.train.dropout,
                            attn_scale=cfg.train.attn_scale)
    event_log = load_dataset(cfg.dataset)
    _check_compatible(model, event_log)
    if not 0 <= args.node < event_log.num_nodes:
        raise ValueError(f"node {args.node} outside [0, {event_log.num_nodes})")
    engine = Engine.for_log(model, event_log, cfg.train.prop_config())
    # everything strictly before t has been propagated
    stop = int(np.searchsorted(event_log.timestamps, args.t, side="left"))
    for r in batches(range(stop), cfg.train.batch_size):
        events = event_log.slice(r.start, r.stop)
        engine.finish_batch(events, engine.forward_batch(events, sample=False))
    engine.embed([args.node], args.t)
    ranked = engine.explain(args.node, args.t)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    _write_rows(out / "explain.csv", ["mail_timestamp", "weight"], [list(r) for r in ranked])
    for ts, w in ranked:
        print(f"{ts}\t{w:.6f}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", help="JODIE-style CSV, an ingest directory, or 'synthetic'")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--mailbox-slots", type=int, dest="mailbox_slots")
    common.add_argument("--fanout", type=int)
    common.add_argument("--hops", type=int)
    common.add_argument("--task", choices=["link", "edge", "node"])
    common.add_argument("--loss", choices=["mlp", "dot"])
    common.add_argument("--mode", choices=["deterministic", "async"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="apan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate and normalise an event CSV")
    p.add_argument("csv")
    p.set_defaults(func=cmd_ingest)
    p = sub.add_parser("train", parents=[common], help="fit on a dataset")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test range")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("bench", parents=[common], help="sync versus async latency")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("explain", parents=[common], help="rank a node's mails by attention")
    p.add_argument("node", type=int)
    p.add_argument("t", type=float)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS}
        cfg = resolve_config(file_values, flags)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
