"""Asynchronous mail propagation.

A batch of completed interactions (plus value snapshots of both endpoint
embeddings) becomes one mail per event. Each mail is delivered to the event's
endpoints and their most-recent temporal neighbours, mails landing on the same
node within a batch are mean-reduced, and only then are the batch's events
recorded into the adjacency index.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .events import TemporalAdjacency
from .mailbox import Mail, MailboxStore

log = logging.getLogger(__name__)

NeighborFn = Callable[[int, int, float], Sequence[tuple]]


class OrderingError(RuntimeError):
    """A propagation job arrived out of batch-sequence order."""


@dataclass(frozen=True)
class PropagationConfig:
    """``hops`` counts frontier expansions.

    With ``hop_mode="layers"`` (default) the recipients are frontiers
    ``0..hops-1``; ``"distance"`` delivers out to frontier ``hops``.
    ``hops=0`` disables propagation entirely (ablation only).
    """

    hops: int = 2
    fanout: int = 10
    deterministic: bool = True
    hop_mode: str = "layers"

    def __post_init__(self):
        if self.hops < 0 or self.fanout < 1:
            raise ValueError(f"need hops >= 0 and fanout >= 1, got {self.hops}, {self.fanout}")
        if self.hop_mode not in ("layers", "distance"):
            raise ValueError(f"unknown hop_mode {self.hop_mode!r}")

    @property
    def expansions(self) -> int:
        if self.hops == 0:
            return 0
        return self.hops - 1 if self.hop_mode == "layers" else self.hops


@dataclass
class PropagationJob:
    seq: int
    src: np.ndarray
    dst: np.ndarray
    timestamps: np.ndarray
    edge_feats: np.ndarray
    z_src: np.ndarray
    z_dst: np.ndarray
    eids: np.ndarray | None = None

    @classmethod
    def from_batch(cls, seq: int, events, z_src, z_dst) -> "PropagationJob":
        # value snapshots: nothing here may alias live tensors
        eids = getattr(events, "indices", None)
        return cls(seq, np.array(events.src, dtype=np.int64), np.array(events.dst, dtype=np.int64),
                   np.array(events.timestamps, dtype=np.float64), np.array(events.edge_feats),
                   np.array(z_src, dtype=np.float64), np.array(z_dst, dtype=np.float64),
                   None if eids is None else np.asarray(eids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.src)


def generate_mail(z_i, e_ij, z_j, t: float) -> Mail:
    z_i, e_ij, z_j = (np.asarray(x, dtype=np.float64) for x in (z_i, e_ij, z_j))
    if not (z_i.shape == e_ij.shape == z_j.shape):
        raise ValueError(f"mail inputs disagree in shape: {z_i.shape}, {e_ij.shape}, {z_j.shape}")
    return Mail(z_i + e_ij + z_j, float(t))


def pass_mail(mail: Mail) -> Mail:
    return mail


def reduce_mails(mails: Sequence[Mail]) -> Mail:
    """Elementwise mean (accumulated in input order) stamped with the latest time."""
    if not mails:
        raise ValueError("cannot reduce an empty mail list")
    total = np.array(mails[0].vector, dtype=np.float64)
    for mail in mails[1:]:
        if mail.vector.shape != total.shape:
            raise ValueError("mails differ in dimension")
        total = total + mail.vector
    return Mail(total / len(mails), max(m.timestamp for m in mails))


def recipients(adj: TemporalAdjacency, src: int, dst: int, t: float, cfg: PropagationConfig,
               neighbor_fn: NeighborFn | None = None) -> set[int]:
    if cfg.hops == 0:
        return set()
    fetch = neighbor_fn or adj.recent_neighbors
    frontier = {src, dst}
    found = set(frontier)
    for _ in range(cfg.expansions):
        nxt = set()
        for v in frontier:
            nxt.update(entry[0] for entry in fetch(v, cfg.fanout, t))
        found |= nxt
        frontier = nxt
        if not frontier:
            break
    return found


@dataclass
class PropagationPlan:
    """Reduced mails per recipient for one job, computed without mutation."""

    job: PropagationJob
    nodes: np.ndarray
    vectors: np.ndarray
    timestamps: np.ndarray
    mails_generated: int = 0


def plan_batch(adj: TemporalAdjacency, job: PropagationJob, cfg: PropagationConfig,
               neighbor_fn: NeighborFn | None = None) -> PropagationPlan:
    inbox: dict[int, list[Mail]] = {}
    for k in range(len(job)):
        mail = generate_mail(job.z_src[k], job.edge_feats[k], job.z_dst[k], job.timestamps[k])
        for v in recipients(adj, int(job.src[k]), int(job.dst[k]), float(job.timestamps[k]),
                            cfg, neighbor_fn):
            inbox.setdefault(v, []).append(pass_mail(mail))
    nodes = np.array(sorted(inbox), dtype=np.int64)
    d = job.z_src.shape[1] if job.z_src.ndim == 2 else 0
    vectors = np.zeros((len(nodes), d))
    stamps = np.zeros(len(nodes))
    for r, v in enumerate(nodes):
        merged = reduce_mails(inbox[int(v)])
        vectors[r] = merged.vector
        stamps[r] = merged.timestamp
    return PropagationPlan(job, nodes, vectors, stamps, len(job))


def commit_plan(store: MailboxStore, adj: TemporalAdjacency, plan: PropagationPlan) -> int:
    store.push_many(plan.nodes, plan.vectors, plan.timestamps)
    job = plan.job
    for k in range(len(job)):
        eid = -1 if job.eids is None else int(job.eids[k])
        adj.record(int(job.src[k]), int(job.dst[k]), float(job.timestamps[k]), eid)
    return len(plan.nodes)


def apply_batch(store: MailboxStore, adj: TemporalAdjacency, job: PropagationJob,
                cfg: PropagationConfig) -> int:
    """Deliver one batch's mails and record its events. Returns mails delivered."""
    return commit_plan(store, adj, plan_batch(adj, job, cfg))


@dataclass
class WorkerCounters:
    jobs_applied: int = 0
    mails_delivered: int = 0
    max_lag: int = 0


class Propagator:
    """Single writer over a mailbox store and adjacency index.

    ``lock`` guards whole-batch application; inference readers take it too so
    they never see a half-applied batch.
    """

    def __init__(self, store: MailboxStore, adj: TemporalAdjacency, cfg: PropagationConfig):
        self.store, self.adj, self.cfg = store, adj, cfg
        self.lock = threading.RLock()
        self.next_seq = 0
        self.counters = WorkerCounters()

    def apply(self, job: PropagationJob, neighbor_fn: NeighborFn | None = None) -> int:
        plan = self.plan(job, neighbor_fn)
        return self.commit(plan)

    def plan(self, job: PropagationJob, neighbor_fn: NeighborFn | None = None) -> PropagationPlan:
        if job.seq != self.next_seq:
            raise OrderingError(f"expected job {self.next_seq}, got {job.seq}")
        # planning only reads, and this object is the sole writer
        return plan_batch(self.adj, job, self.cfg, neighbor_fn)

    def commit(self, plan: PropagationPlan) -> int:
        if plan.job.seq != self.next_seq:
            raise OrderingError(f"expected job {self.next_seq}, got {plan.job.seq}")
        with self.lock:
            delivered = commit_plan(self.store, self.adj, plan)
            self.next_seq += 1
        self.counters.jobs_applied += 1
        self.counters.mails_delivered += delivered
        return delivered


_STOP = object()


class PropagationWorker:
    """Background consumer feeding jobs to a :class:`Propagator` in order.

    In deterministic mode ``submit`` returns only after the job is applied
    (lag 0). In async mode it blocks only while ``capacity`` jobs are
    outstanding, so readers trail by at most ``capacity`` batches.
    """

    def __init__(self, propagator: Propagator, capacity: int = 4, deterministic: bool = True,
                 neighbor_fn: NeighborFn | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.propagator = propagator
        self.capacity = capacity
        self.deterministic = deterministic
        self.neighbor_fn = neighbor_fn
        self._queue: queue.Queue = queue.Queue()
        self._slots = threading.BoundedSemaphore(capacity)
        self._count_lock = threading.Lock()
        self._outstanding = 0
        self._error: BaseException | None = None
        self._closed = False
        self.blocked_seconds = 0.0
        self.lag_samples: list[int] = []
        self._thread = threading.Thread(target=self._run, name="apan-propagation", daemon=True)
        self._thread.start()

    @property
    def lag(self) -> int:
        with self._count_lock:
            return self._outstanding

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            job, done = item
            try:
                if self._error is None:
                    self.propagator.apply(job, self.neighbor_fn)
            except BaseException as exc:  # surfaced to the producer
                log.exception("propagation job %d failed", job.seq)
                self._error = exc
            finally:
                with self._count_lock:
                    self._outstanding -= 1
                self._slots.release()
                done.set()

    def _raise_pending(self) -> None:
        if self._error is not None:
            raise self._error

    def submit(self, job: PropagationJob) -> None:
        self._raise_pending()
        if self._closed:
            raise RuntimeError("worker is closed")
        start = time.perf_counter()
        self._slots.acquire()
        self.blocked_seconds += time.perf_counter() - start
        with self._count_lock:
            self._outstanding += 1
            lag = self._outstanding
        self.propagator.counters.max_lag = max(self.propagator.counters.max_lag, lag)
        done = threading.Event()
        self._queue.put((job, done))
        if self.deterministic:
            done.wait()
            self._raise_pending()

    def close(self) -> None:
        """Drain outstanding jobs, then stop the thread."""
        if not self._closed:
            self._closed = True
            self._queue.put(_STOP)
            self._thread.join()
        self._raise_pending()

    def __enter__(self) -> "PropagationWorker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def run_worker(jobs: Sequence[PropagationJob], propagator: Propagator, capacity: int = 4,
               deterministic: bool = True) -> WorkerCounters:
    """Feed ``jobs`` through a worker and wait for the drain."""
    with PropagationWorker(propagator, capacity, deterministic) as worker:
        for job in jobs:
            worker.submit(job)
    return propagator.counters
