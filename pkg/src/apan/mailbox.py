"""Fixed-capacity per-node mail FIFOs.

Every mailbox starts full of zero mails stamped at t=0, so a readout is
always an ``m x d`` matrix. Eviction follows push order; sorting by
timestamp only happens on read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np


@dataclass(frozen=True)
class Mail:
    vector: np.ndarray
    timestamp: float


class MailboxStore:
    """Ring buffers for ``num_nodes`` mailboxes sharing capacity ``m`` and width ``d``."""

    def __init__(self, num_nodes: int, m: int, d: int):
        if m < 1 or d < 1:
            raise ValueError(f"mailbox needs m >= 1 and d >= 1, got m={m} d={d}")
        self.num_nodes, self.m, self.d = num_nodes, m, d
        self.vectors = np.zeros((num_nodes, m, d))
        self.timestamps = np.zeros((num_nodes, m))
        # next slot to overwrite == oldest slot, since buffers start full
        self.head = np.zeros(num_nodes, dtype=np.int64)

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise IndexError(f"node {node} outside [0, {self.num_nodes})")

    def push(self, node: int, mail: Mail) -> None:
        self._check_node(node)
        vec = np.asarray(mail.vector, dtype=np.float64)
        if vec.shape != (self.d,):
            raise ValueError(f"mail has shape {vec.shape}, store expects ({self.d},)")
        slot = self.head[node]
        self.vectors[node, slot] = vec
        self.timestamps[node, slot] = mail.timestamp
        self.head[node] = (slot + 1) % self.m

    def push_many(self, nodes: np.ndarray, vectors: np.ndarray, timestamps: np.ndarray) -> None:
        """Push one mail to each of ``nodes`` (which must be distinct)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            return
        if vectors.shape != (len(nodes), self.d):
            raise ValueError(f"mail block has shape {vectors.shape}, expected ({len(nodes)}, {self.d})")
        slots = self.head[nodes]
        self.vectors[nodes, slots] = vectors
        self.timestamps[nodes, slots] = timestamps
        self.head[nodes] = (slots + 1) % self.m

    def read_many(self, nodes) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(B, m, d)`` matrices and ``(B, m)`` timestamps, rows sorted by time.

        Ties keep push order.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        in_push_order = (self.head[nodes, None] + np.arange(self.m)) % self.m
        ts = np.take_along_axis(self.timestamps[nodes], in_push_order, axis=1)
        order = np.argsort(ts, axis=1, kind="stable")
        slots = np.take_along_axis(in_push_order, order, axis=1)
        rows = nodes[:, None]
        return self.vectors[rows, slots], self.timestamps[rows, slots]

    def read_matrix(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_node(node)
        mats, ts = self.read_many([node])
        return mats[0], ts[0]

    def mailbox(self, node: int) -> "Mailbox":
        self._check_node(node)
        return Mailbox(self, node)

    def copy(self) -> "MailboxStore":
        other = MailboxStore(self.num_nodes, self.m, self.d)
        other.vectors[...] = self.vectors
        other.timestamps[...] = self.timestamps
        other.head[...] = self.head
        return other

    def state_equal(self, other: "MailboxStore") -> bool:
        """Bitwise equality of every mailbox's readout."""
        if (self.num_nodes, self.m, self.d) != (other.num_nodes, other.m, other.d):
            return False
        nodes = np.arange(self.num_nodes)
        a, ta = self.read_many(nodes)
        b, tb = other.read_many(nodes)
        return np.array_equal(a, b) and np.array_equal(ta, tb)

    # snapshot layout: <qqq num_nodes m d, then per node: <q count, count x (<d t, d x <d)
    def dump(self, fh: BinaryIO) -> None:
        fh.write(struct.pack("<qqq", self.num_nodes, self.m, self.d))
        # push order (oldest first) so a reloaded store evicts identically
        for v in range(self.num_nodes):
            slots = (self.head[v] + np.arange(self.m)) % self.m
            fh.write(struct.pack("<q", self.m))
            block = np.concatenate([self.timestamps[v, slots][:, None], self.vectors[v, slots]], axis=1)
            fh.write(block.astype("<f8").tobytes())

    @classmethod
    def load(cls, fh: BinaryIO) -> "MailboxStore":
        num_nodes, m, d = struct.unpack("<qqq", fh.read(24))
        store = cls(num_nodes, m, d)
        for v in range(num_nodes):
            (count,) = struct.unpack("<q", fh.read(8))
            if count > m:
                raise ValueError(f"node {v}: {count} mails exceed capacity {m}")
            block = np.frombuffer(fh.read(8 * count * (d + 1)), dtype="<f8").reshape(count, d + 1)
            for row in block:
                store.push(v, Mail(row[1:].copy(), float(row[0])))
        return store

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            self.dump(fh)


class Mailbox:
    """View of a single node's FIFO inside a :class:`MailboxStore`."""

    def __init__(self, store: MailboxStore, node: int):
        self.store, self.node = store, node

    @property
    def m(self) -> int:
        return self.store.m

    def push(self, mail: Mail) -> "Mailbox":
        self.store.push(self.node, mail)
        return self

    def read_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        return self.store.read_matrix(self.node)


def new_store(num_nodes: int, m: int, d: int) -> MailboxStore:
    return MailboxStore(num_nodes, m, d)
