"""Inference-path latency of the asynchronous pipeline against a query-then-infer baseline.

Graph-database round trips are simulated by :class:`MockGraphDB`. In the
default virtual-time mode nothing sleeps and compute is charged through a
fixed per-node cost model, so runs are deterministic; ``clock="wall"`` sleeps
for real and times compute with ``perf_counter``.
"""

from __future__ import annotations

import csv
import io
import math
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .engine import Engine
from .events import EventLog, TemporalAdjacency, batches
from .model import APAN, NodeStateStore
from .propagator import PropagationConfig, PropagationWorker

REPORT_FIELDS = ("pipeline", "hops", "fanout", "batch", "p50_ms", "p95_ms", "p99_ms",
                 "events_per_s", "lag_batches")
WORKER_FIELDS = ("pipeline", "hops", "jobs_applied", "mails_delivered", "max_lag",
                 "blocked_ms", "worker_db_ms", "queries")


class ScenarioError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class Scenario:
    mu_ms: float = 2.0
    sigma: float = 0.0
    hops: tuple[int, ...] = (2,)
    fanout: int = 10
    batch: int = 200
    seed: int = 0
    clock: str = "virtual"
    # virtual compute model
    node_ms: float = 0.05
    pair_ms: float = 0.01
    record_ms: float = 0.002
    # arrivals and worker queue
    interval_ms: float = 1000.0
    capacity: int = 4
    # generated load
    users: int = 4000
    items: int = 1000
    events: int = 6000
    warmup_events: int = 3000
    d_e: int = 172
    mailbox_slots: int = 10
    heads: int = 2
    hidden: int = 80

    def __post_init__(self):
        if self.clock not in ("virtual", "wall"):
            raise ScenarioError("clock", f"expected virtual or wall, got {self.clock!r}")
        for name in ("fanout", "batch", "capacity", "users", "items", "events", "d_e",
                     "mailbox_slots", "heads", "hidden"):
            if getattr(self, name) <= 0:
                raise ScenarioError(name, "must be positive")
        if any(h < 0 for h in self.hops) or not self.hops:
            raise ScenarioError("hops", "need one or more non-negative values")
        if not 0 <= self.warmup_events < self.events:
            raise ScenarioError("warmup_events", "must lie in [0, events)")
        for name in ("mu_ms", "sigma", "node_ms", "pair_ms", "record_ms", "interval_ms"):
            if getattr(self, name) < 0:
                raise ScenarioError(name, "must be non-negative")

    def as_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, ",".join(map(str, v)) if isinstance(v, tuple) else str(v)))
        return out


def parse_scenario(text: str) -> Scenario:
    """``key = value`` lines, ``#`` comments; ``hops`` may be a comma list."""
    kinds = {f.name: f.type for f in fields(Scenario)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ScenarioError(key, "unknown scenario key")
        kind = kinds[key]
        try:
            if key == "hops":
                values[key] = tuple(int(v) for v in value.split(","))
            elif kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ScenarioError(key, f"bad value {value!r}") from None
    return Scenario(**values)


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(Path(path).read_text())


class MockGraphDB:
    """Neighbour-list queries over an adjacency index with a latency model.

    Each query costs ``mu_ms`` (or a lognormal draw with that mean when
    ``sigma > 0``). Results are exactly the adjacency's. Costs are tallied
    per calling thread so the inference path can prove it never waited.
    """

    def __init__(self, adj: TemporalAdjacency, mu_ms: float = 2.0, sigma: float = 0.0,
                 seed: int = 0, clock: str = "virtual"):
        self.adj = adj
        self.mu_ms, self.sigma, self.clock = mu_ms, sigma, clock
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self.queries = 0
        self.waited_ms = 0.0
        self._per_thread: dict[int, float] = {}

    def latency(self) -> float:
        if self.sigma == 0:
            return self.mu_ms
        with self._lock:
            draw = self._rng.normal()
        return self.mu_ms * math.exp(self.sigma * draw - 0.5 * self.sigma ** 2)

    def query(self, node: int, n: int, t: float) -> list[tuple[int, float, int]]:
        cost = self.latency()
        if self.clock == "wall" and cost > 0:
            time.sleep(cost / 1000.0)
        ident = threading.get_ident()
        with self._lock:
            self.queries += 1
            self.waited_ms += cost
            self._per_thread[ident] = self._per_thread.get(ident, 0.0) + cost
        return self.adj.recent_edges(node, n, t)

    def waited_by(self, ident: int | None = None) -> float:
        with self._lock:
            return self._per_thread.get(threading.get_ident() if ident is None else ident, 0.0)


def nearest_rank(samples, p: float) -> float:
    """Smallest sample with at least ``p`` percent of the data at or below it."""
    xs = sorted(samples)
    if not xs:
        return float("nan")
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return float(xs[rank - 1])


@dataclass
class PipelineStats:
    pipeline: str
    hops: int
    fanout: int
    batch: int
    latencies_ms: list[float] = field(default_factory=list)
    events: int = 0
    blocked_ms: float = 0.0
    lag_batches: int = 0
    mails_delivered: int = 0
    jobs_applied: int = 0
    queries: int = 0
    worker_db_ms: float = 0.0
    scores: list[np.ndarray] = field(default_factory=list, repr=False)

    def percentile(self, p: float) -> float:
        return nearest_rank(self.latencies_ms, p)

    @property
    def events_per_s(self) -> float:
        busy = sum(self.latencies_ms) + self.blocked_ms
        return self.events / busy * 1000.0 if busy > 0 else float("nan")

    def row(self) -> dict:
        return {"pipeline": self.pipeline, "hops": self.hops, "fanout": self.fanout,
                "batch": self.batch, "p50_ms": self.percentile(50), "p95_ms": self.percentile(95),
                "p99_ms": self.percentile(99), "events_per_s": self.events_per_s,
                "lag_batches": self.lag_batches}

    def worker_row(self) -> dict:
        return {"pipeline": self.pipeline, "hops": self.hops, "jobs_applied": self.jobs_applied,
                "mails_delivered": self.mails_delivered, "max_lag": self.lag_batches,
                "blocked_ms": self.blocked_ms, "worker_db_ms": self.worker_db_ms,
                "queries": self.queries}


class _Timer:
    """Compute-time accounting: real elapsed time, or the virtual cost model."""

    def __init__(self, scenario: Scenario):
        self.s = scenario

    def measure(self, fn, *, nodes: int, pairs: int, records: int = 0):
        if self.s.clock == "wall":
            start = time.perf_counter()
            out = fn()
            return out, (time.perf_counter() - start) * 1000.0
        cost = self.s.node_ms * nodes + self.s.pair_ms * pairs + self.s.record_ms * records
        return fn(), cost


def _timed_ranges(log_: EventLog, scenario: Scenario) -> tuple[list[range], int]:
    warm = batches(range(0, scenario.warmup_events), scenario.batch)
    timed = batches(range(scenario.warmup_events, len(log_)), scenario.batch)
    return warm + timed, len(warm)


def frontier_queries(db: MockGraphDB, nodes, hops: int, fanout: int, t: float
                     ) -> tuple[dict[int, list[tuple[int, float, int]]], int]:
    """One query per distinct node per frontier level, for ``hops`` levels.

    Returns the level-0 answers (keyed by node) and the number of queries.
    """
    first: dict[int, list] = {}
    seen = set(int(v) for v in nodes)
    frontier = sorted(seen)
    count = 0
    for level in range(hops):
        nxt = set()
        for v in frontier:
            edges = db.query(v, fanout, t)
            count += 1
            if level == 0:
                first[v] = edges
            nxt.update(u for u, _, _ in edges)
        frontier = sorted(nxt - seen)
        seen |= nxt
        if not frontier:
            break
    return first, count


def assemble_mailboxes(nodes: np.ndarray, fetched: dict, states: NodeStateStore,
                       edge_feats: np.ndarray, m: int) -> tuple[np.ndarray, int]:
    """Build ``(B, m, d)`` mail matrices from fetched records, oldest first, zero-filled."""
    d = states.z.shape[1]
    out = np.zeros((len(nodes), m, d))
    records = 0
    for r, v in enumerate(nodes.tolist()):
        edges = fetched.get(v, [])[:m]
        records += len(edges)
        for slot, (u, _, eid) in enumerate(reversed(edges)):
            out[r, m - len(edges) + slot] = states.z[v] + edge_feats[eid] + states.z[u]
    return out, records


def run_sync(log_: EventLog, model: APAN, hops: int, scenario: Scenario) -> PipelineStats:
    """Query the graph first, then encode: the neighbourhood is fetched on the inference path."""
    stats = PipelineStats("sync", hops, scenario.fanout, scenario.batch)
    adj = TemporalAdjacency(log_.num_nodes)
    db = MockGraphDB(adj, scenario.mu_ms, scenario.sigma, scenario.seed, scenario.clock)
    states = NodeStateStore(log_.num_nodes, model.cfg.d)
    feats = model.project_edges(np.asarray(log_.edge_feats, dtype=np.float64))
    timer = _Timer(scenario)
    ranges, n_warm = _timed_ranges(log_, scenario)
    for k, r in enumerate(ranges):
        ev = log_.slice(r.start, r.stop)
        t0 = float(ev.timestamps[0])
        nodes, inverse = np.unique(np.concatenate([ev.src, ev.dst]), return_inverse=True)
        before = db.waited_by()
        fetched, count = frontier_queries(db, nodes, hops, scenario.fanout, t0)
        query_ms = db.waited_by() - before
        mails, records = assemble_mailboxes(nodes, fetched, states, feats, model.cfg.m)

        def infer():
            z, _ = model.encode(states.get(nodes), mails)
            b = len(ev)
            return z.data, model.decode_link(z.data[inverse[:b]], z.data[inverse[b:]]).data

        (z, scores), compute_ms = timer.measure(infer, nodes=len(nodes), pairs=len(ev),
                                                records=records)
        for i in range(len(ev)):
            adj.record(int(ev.src[i]), int(ev.dst[i]), float(ev.timestamps[i]), r.start + i)
        states.update(nodes, z, t0)
        if k >= n_warm:
            stats.latencies_ms.append(query_ms + compute_ms)
            stats.events += len(ev)
            stats.queries += count
            stats.scores.append(scores)
    return stats


def run_async(log_: EventLog, model: APAN, hops: int, scenario: Scenario,
              engine: Engine | None = None) -> PipelineStats:
    """Infer from mailboxes first; neighbour queries happen on the propagation worker.

    In virtual time the worker applies each job immediately (values equal the
    lag-0 training path) while a queue model tracks when it would finish, the
    resulting lag and any producer blocking.
    """
    stats = PipelineStats("async", hops, scenario.fanout, scenario.batch)
    prop_cfg = PropagationConfig(hops, scenario.fanout, scenario.clock == "virtual")
    if engine is None:
        engine = Engine.for_log(model, log_, prop_cfg, keep_attention=False)
    engine.reset()
    db = MockGraphDB(engine.adj, scenario.mu_ms, scenario.sigma, scenario.seed, scenario.clock)
    timer = _Timer(scenario)
    ranges, n_warm = _timed_ranges(log_, scenario)
    me = threading.get_ident()

    def neighbor_fn(v, n, t):
        return db.query(v, n, t)

    worker = None
    if scenario.clock == "wall":
        worker = PropagationWorker(engine.propagator, scenario.capacity, deterministic=False,
                                   neighbor_fn=neighbor_fn)
    finish_times: list[float] = []  # virtual completion time per submitted job
    producer_at = 0.0
    try:
        for k, r in enumerate(ranges):
            ev = log_.slice(r.start, r.stop)
            waited = db.waited_by(me)

            def infer():
                out = engine.forward_batch(ev, sample=False)
                z = out.z.data
                return out, model.decode_link(z[out.src_rows], z[out.dst_rows]).data

            (out, scores), compute_ms = timer.measure(infer, nodes=len(out_nodes(ev)),
                                                      pairs=len(ev))
            if db.waited_by(me) != waited:
                raise AssertionError("inference path waited on the graph database")
            arrival = k * scenario.interval_ms
            start = max(arrival, producer_at)
            done_at = start + compute_ms
            blocked = 0.0
            if worker is not None:
                t_block = worker.blocked_seconds
                engine.finish_batch(ev, out, submit=worker.submit)
                blocked = (worker.blocked_seconds - t_block) * 1000.0
                lag = worker.lag
            else:
                q_before = db.queries
                w_before = db.waited_ms
                engine.finish_batch(ev, out,
                                    submit=lambda job: engine.propagator.apply(job, neighbor_fn))
                job_ms = db.waited_ms - w_before
                pending = sorted(f for f in finish_times if f > done_at)
                if len(pending) >= scenario.capacity:
                    release = pending[len(pending) - scenario.capacity]
                    blocked = release - done_at
                    pending = [f for f in pending if f > release]
                submit_at = done_at + blocked
                worker_free = finish_times[-1] if finish_times else 0.0
                finish_times.append(max(submit_at, worker_free) + job_ms)
                lag = len(pending) + 1
                if k >= n_warm:
                    stats.queries += db.queries - q_before
                    stats.worker_db_ms += job_ms
            producer_at = done_at + blocked
            if k >= n_warm:
                stats.latencies_ms.append(compute_ms)
                stats.events += len(ev)
                stats.blocked_ms += blocked
                stats.lag_batches = max(stats.lag_batches, lag)
                stats.scores.append(scores)
    finally:
        if worker is not None:
            worker.close()
    stats.jobs_applied = engine.propagator.counters.jobs_applied
    stats.mails_delivered = engine.propagator.counters.mails_delivered
    if worker is not None:
        # the threaded worker cannot attribute queries to batches; report the whole run
        stats.worker_db_ms = db.waited_ms
        stats.lag_batches = max(stats.lag_batches, engine.propagator.counters.max_lag)
        stats.queries = db.queries
    return stats


def out_nodes(ev) -> np.ndarray:
    return np.unique(np.concatenate([ev.src, ev.dst]))


def scenario_model(scenario: Scenario, d_e: int) -> APAN:
    from .model import ModelConfig
    cfg = ModelConfig(d=d_e, d_e=d_e, m=scenario.mailbox_slots, heads=scenario.heads,
                      hidden=scenario.hidden, dropout=0.0)
    return APAN(cfg, seed=scenario.seed)


def scenario_log(scenario: Scenario) -> EventLog:
    from .datasets import random_bipartite
    return random_bipartite(scenario.users, scenario.items, scenario.events, scenario.d_e,
                            seed=scenario.seed)


def run_scenario(scenario: Scenario, log_: EventLog | None = None,
                 model: APAN | None = None) -> list[PipelineStats]:
    """Sync then async rows for every hop count in the scenario."""
    log_ = scenario_log(scenario) if log_ is None else log_
    model = scenario_model(scenario, log_.d_e) if model is None else model
    rows = []
    for hops in scenario.hops:
        rows.append(run_sync(log_, model, hops, scenario))
        rows.append(run_async(log_, model, hops, scenario))
    return rows


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def report(stats: list[PipelineStats], path: str | Path | None = None,
           worker_path: str | Path | None = None) -> str:
    """CSV text of one row per run; optionally written to ``path``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for s in stats:
        row = s.row()
        writer.writerow([_fmt(row[k]) for k in REPORT_FIELDS])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    if worker_path is not None:
        wbuf = io.StringIO()
        w = csv.writer(wbuf, lineterminator="\n")
        w.writerow(WORKER_FIELDS)
        for s in stats:
            row = s.worker_row()
            w.writerow([_fmt(row[k]) for k in WORKER_FIELDS])
        Path(worker_path).write_text(wbuf.getvalue())
    return text


def format_table(stats: list[PipelineStats]) -> str:
    head = f"{'pipeline':<8} {'hops':>4} {'p50_ms':>10} {'p95_ms':>10} {'p99_ms':>10} {'events/s':>12} {'lag':>4}"
    lines = [head]
    for s in stats:
        r = s.row()
        lines.append(f"{r['pipeline']:<8} {r['hops']:>4} {r['p50_ms']:>10.2f} {r['p95_ms']:>10.2f} "
                     f"{r['p99_ms']:>10.2f} {r['events_per_s']:>12.1f} {r['lag_batches']:>4}")
    return "\n".join(lines)
