"""Stateful streaming engine: per-batch inference followed by mail propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .events import EventLog, EventSlice, TemporalAdjacency
from .mailbox import MailboxStore
from .model import APAN, NodeStateStore, decode_dot
from .propagator import PropagationConfig, PropagationJob, Propagator


class NegativePool:
    """Nodes eligible as negatives, in first-seen order.

    Bipartite logs only admit destinations; other logs admit both endpoints.
    """

    def __init__(self, bipartite: bool = True):
        self.bipartite = bipartite
        self._order: list[int] = []
        self._index: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, node: int) -> bool:
        return node in self._index

    def as_set(self) -> set[int]:
        return set(self._order)

    def add(self, node: int) -> None:
        if node not in self._index:
            self._index[node] = len(self._order)
            self._order.append(node)

    def observe(self, src: int, dst: int) -> None:
        if not self.bipartite:
            self.add(src)
        self.add(dst)

    def sample(self, rng: np.random.Generator, exclude: int | None = None) -> int | None:
        """Uniform draw from the pool minus ``exclude``; ``None`` if nothing is left."""
        skip = self._index.get(exclude, -1) if exclude is not None else -1
        size = len(self._order) - (skip >= 0)
        if size <= 0:
            return None
        r = int(rng.integers(size))
        if 0 <= skip <= r:
            r += 1
        return self._order[r]


def sample_negative(pool: NegativePool, rng: np.random.Generator, exclude: int | None) -> int | None:
    return pool.sample(rng, exclude)


@dataclass
class BatchOutput:
    nodes: np.ndarray
    z: Tensor
    src_rows: np.ndarray
    dst_rows: np.ndarray
    neg_rows: np.ndarray
    has_neg: np.ndarray
    negatives: np.ndarray


class Engine:
    """Model plus the mutable streaming state it reads and the propagator writes."""

    def __init__(self, model: APAN, num_nodes: int, prop_cfg: PropagationConfig,
                 bipartite: bool = True, keep_attention: bool = True):
        self.model = model
        self.num_nodes = num_nodes
        self.prop_cfg = prop_cfg
        self.bipartite = bipartite
        self.keep_attention = keep_attention
        self.reset()

    @classmethod
    def for_log(cls, model: APAN, log: EventLog, prop_cfg: PropagationConfig, **kw) -> "Engine":
        return cls(model, log.num_nodes, prop_cfg, bipartite=log.bipartite, **kw)

    def reset(self) -> None:
        cfg = self.model.cfg
        self.store = MailboxStore(self.num_nodes, cfg.m, cfg.d)
        self.adj = TemporalAdjacency(self.num_nodes)
        self.states = NodeStateStore(self.num_nodes, cfg.d)
        self.propagator = Propagator(self.store, self.adj, self.prop_cfg)
        self.pool = NegativePool(self.bipartite)
        self.encoded_rows = 0
        self.batches_seen = 0
        self._attention: dict[int, tuple[float, np.ndarray, np.ndarray]] = {}

    @property
    def lock(self):
        return self.propagator.lock

    # --- synchronous link ------------------------------------------------------

    def read(self, nodes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Snapshot ``z(t-)`` and sorted mailboxes; never observes a half-applied batch."""
        with self.lock:
            z_prev = self.states.get(nodes)
            mails, stamps = self.store.read_many(nodes)
        return z_prev, mails, stamps

    def embed(self, nodes, t: float, *, training: bool = False, rng=None) -> Tensor:
        """Encode each node in ``nodes`` once; rows follow the order of ``nodes``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= self.num_nodes):
            raise IndexError(f"node id outside [0, {self.num_nodes})")
        z_prev, mails, stamps = self.read(nodes)
        z, weights = self.model.encode(z_prev, mails, training=training, rng=rng)
        self.encoded_rows += len(nodes)
        if self.keep_attention:
            for r, v in enumerate(nodes.tolist()):
                self._attention[v] = (t, weights[r], stamps[r])
        return z

    def explain(self, node: int, t: float | None = None) -> list[tuple[float, float]]:
        """Mails ranked by head-averaged attention weight from the last encoding of ``node``."""
        cached = self._attention.get(int(node))
        if cached is None or (t is not None and cached[0] != t):
            raise LookupError(f"no cached encoding for node {node} at t={t}")
        _, weights, stamps = cached
        per_mail = weights.mean(axis=0)
        order = np.argsort(-per_mail, kind="stable")
        return [(float(stamps[k]), float(per_mail[k])) for k in order]

    def draw_negatives(self, events, rng: np.random.Generator | None) -> np.ndarray:
        """One negative per event (``-1`` when the pool is empty), updating the pool as it goes."""
        negs = np.full(len(events), -1, dtype=np.int64)
        for k, (s, d) in enumerate(zip(events.src.tolist(), events.dst.tolist())):
            if rng is not None:
                n = self.pool.sample(rng, exclude=d)
                if n is not None:
                    negs[k] = n
            self.pool.observe(s, d)
        return negs

    def forward_batch(self, events, *, training: bool = False, rng=None,
                      neg_rng=None, sample: bool = True) -> BatchOutput:
        negs = self.draw_negatives(events, neg_rng if sample else None)
        has_neg = negs >= 0
        nodes, inverse = np.unique(np.concatenate([events.src, events.dst, negs[has_neg]]),
                                   return_inverse=True)
        b = len(events)
        t0 = float(events.timestamps[0]) if b else 0.0
        z = self.embed(nodes, t0, training=training, rng=rng)
        neg_rows = np.full(b, -1, dtype=np.int64)
        neg_rows[has_neg] = inverse[2 * b:]
        return BatchOutput(nodes, z, inverse[:b], inverse[b:2 * b], neg_rows, has_neg, negs)

    def link_logits(self, out: BatchOutput, loss: str = "mlp", *, training=False, rng=None):
        mask = out.has_neg
        zs = ad.take(out.z, out.src_rows[mask])
        zd = ad.take(out.z, out.dst_rows[mask])
        zn = ad.take(out.z, out.neg_rows[mask])
        if loss == "dot":
            return decode_dot(zs, zd), decode_dot(zs, zn)
        pos = self.model.decode_link(zs, zd, training=training, rng=rng)
        neg = self.model.decode_link(zs, zn, training=training, rng=rng)
        return pos, neg

    # --- asynchronous link -------------------------------------------------------

    def make_job(self, events, z_src: np.ndarray, z_dst: np.ndarray) -> PropagationJob:
        job = PropagationJob.from_batch(self.batches_seen, events, z_src, z_dst)
        job.edge_feats = self.model.project_edges(job.edge_feats)
        return job

    def finish_batch(self, events, out: BatchOutput, submit=None) -> PropagationJob:
        """Snapshot embeddings, hand the mail job to the propagator, then update node states."""
        z = out.z.data
        z_src, z_dst = z[out.src_rows], z[out.dst_rows]
        job = self.make_job(events, z_src, z_dst)
        if submit is None:
            self.propagator.apply(job)
        else:
            submit(job)
        self.batches_seen += 1
        self.commit_states(events, z_src, z_dst)
        return job

    def commit_states(self, events, z_src: np.ndarray, z_dst: np.ndarray) -> None:
        # every row for a node holds the same embedding (one encoding per batch)
        nodes = np.concatenate([events.src, events.dst])
        zs = np.concatenate([z_src, z_dst])
        ts = np.concatenate([events.timestamps, events.timestamps])
        with self.lock:
            self.states.z[nodes] = zs
            np.maximum.at(self.states.last_update, nodes, ts)


def event_slice(log: EventLog, r: range) -> EventSlice:
    return log.slice(r.start, r.stop)
