"""Event logs, chronological splits and the temporal adjacency index."""

from __future__ import annotations

import io
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class ParseError(ValueError):
    """Raised for malformed interaction logs; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TemporalEvent:
    src: int
    dst: int
    edge_feat: np.ndarray
    timestamp: float
    label: int | None = None


@dataclass(frozen=True, eq=False)
class EventLog:
    """Timestamp-ordered interaction log stored column-wise.

    ``num_users`` is set for bipartite logs (JODIE layout), where ids below it
    are users and the rest are items.
    """

    src: np.ndarray
    dst: np.ndarray
    timestamps: np.ndarray
    edge_feats: np.ndarray
    labels: np.ndarray | None
    num_nodes: int
    num_users: int | None = None

    def __post_init__(self):
        m = len(self.src)
        if not (len(self.dst) == len(self.timestamps) == self.edge_feats.shape[0] == m):
            raise ValueError("event columns have different lengths")
        if self.edge_feats.ndim != 2:
            raise ValueError("edge_feats must be a 2-D array")
        if m and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if m and max(int(self.src.max()), int(self.dst.max())) >= self.num_nodes:
            raise ValueError("node id out of range")
        for arr in (self.src, self.dst, self.timestamps, self.edge_feats):
            arr.setflags(write=False)

    @classmethod
    def from_events(cls, events: Sequence[TemporalEvent], num_nodes: int | None = None,
                    d_e: int | None = None, num_users: int | None = None) -> "EventLog":
        if d_e is None:
            if not events:
                raise ValueError("d_e is required for an empty log")
            d_e = len(events[0].edge_feat)
        src = np.array([e.src for e in events], dtype=np.int64)
        dst = np.array([e.dst for e in events], dtype=np.int64)
        ts = np.array([e.timestamp for e in events], dtype=np.float64)
        feats = np.zeros((len(events), d_e))
        for k, e in enumerate(events):
            if len(e.edge_feat) != d_e:
                raise ValueError(f"event {k}: edge feature length {len(e.edge_feat)} != {d_e}")
            feats[k] = e.edge_feat
        labels = None
        if events and all(e.label is not None for e in events):
            labels = np.array([e.label for e in events], dtype=np.int64)
        if num_nodes is None:
            num_nodes = int(max(src.max(), dst.max())) + 1 if len(events) else 0
        return cls(src, dst, ts, feats, labels, num_nodes, num_users)

    def __len__(self) -> int:
        return len(self.src)

    @property
    def d_e(self) -> int:
        return self.edge_feats.shape[1]

    @property
    def bipartite(self) -> bool:
        return self.num_users is not None

    def event(self, k: int) -> TemporalEvent:
        label = None if self.labels is None else int(self.labels[k])
        return TemporalEvent(int(self.src[k]), int(self.dst[k]), self.edge_feats[k],
                             float(self.timestamps[k]), label)

    def __iter__(self) -> Iterator[TemporalEvent]:
        return (self.event(k) for k in range(len(self)))

    def slice(self, start: int, stop: int) -> "EventSlice":
        return EventSlice(self, start, stop)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.num_nodes == other.num_nodes and self.num_users == other.num_users
                and np.array_equal(self.src, other.src) and np.array_equal(self.dst, other.dst)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.edge_feats, other.edge_feats) and same_labels)


@dataclass(frozen=True)
class EventSlice:
    """A contiguous ``[start, stop)`` window onto an EventLog."""

    log: EventLog
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def src(self) -> np.ndarray:
        return self.log.src[self.start:self.stop]

    @property
    def dst(self) -> np.ndarray:
        return self.log.dst[self.start:self.stop]

    @property
    def timestamps(self) -> np.ndarray:
        return self.log.timestamps[self.start:self.stop]

    @property
    def edge_feats(self) -> np.ndarray:
        return self.log.edge_feats[self.start:self.stop]

    @property
    def labels(self) -> np.ndarray | None:
        return None if self.log.labels is None else self.log.labels[self.start:self.stop]

    @property
    def indices(self) -> range:
        return range(self.start, self.stop)

    def __iter__(self) -> Iterator[TemporalEvent]:
        return (self.log.event(k) for k in self.indices)


# --- CSV ingest ------------------------------------------------------------

def parse_jodie_csv(text: str | Iterable[str]) -> EventLog:
    """Parse a JODIE-layout CSV (``user,item,timestamp,label,f_1..f_d``).

    Items are remapped after users: ``item_node = item_id + max_user_id + 1``.
    """
    lines = io.StringIO(text) if isinstance(text, str) else iter(text)
    header = next(lines, None)
    if header is None:
        raise ParseError(1, "missing header")
    users, items, ts, labels, feats = [], [], [], [], []
    d_e = None
    prev_t = -math.inf
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        fields = line.split(",")
        if len(fields) < 4:
            raise ParseError(lineno, f"expected at least 4 fields, got {len(fields)}")
        n_feat = len(fields) - 4
        if d_e is None:
            d_e = n_feat
        elif n_feat != d_e:
            raise ParseError(lineno, f"ragged row: {n_feat} features, expected {d_e}")
        try:
            u, i = int(fields[0]), int(fields[1])
            t = float(fields[2])
            lab = int(float(fields[3]))
            f = [float(x) for x in fields[4:]]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if u < 0 or i < 0:
            raise ParseError(lineno, "negative node id")
        if t < prev_t:
            raise ParseError(lineno, f"timestamp {t} precedes previous {prev_t}")
        prev_t = t
        users.append(u)
        items.append(i)
        ts.append(t)
        labels.append(lab)
        feats.append(f)
    if d_e is None:
        raise ParseError(2, "no data rows")
    users_a = np.array(users, dtype=np.int64)
    num_users = int(users_a.max()) + 1
    dst = np.array(items, dtype=np.int64) + num_users
    num_nodes = int(dst.max()) + 1
    return EventLog(users_a, dst, np.array(ts, dtype=np.float64),
                    np.array(feats, dtype=np.float64).reshape(len(users), d_e),
                    np.array(labels, dtype=np.int64), num_nodes, num_users)


def serialize_jodie_csv(log: EventLog) -> str:
    """Inverse of :func:`parse_jodie_csv` for bipartite logs.

    Floats are written with ``repr`` so a parse round-trip is exact.
    """
    if log.num_users is None:
        raise ValueError("only bipartite logs have a JODIE layout")
    header = ",".join(["user_id", "item_id", "timestamp", "state_label"]
                      + [f"f{k}" for k in range(log.d_e)])
    out = [header]
    labels = log.labels if log.labels is not None else np.zeros(len(log), dtype=np.int64)
    for k in range(len(log)):
        row = [str(int(log.src[k])), str(int(log.dst[k]) - log.num_users),
               repr(float(log.timestamps[k])), str(int(labels[k]))]
        row.extend(repr(float(x)) for x in log.edge_feats[k])
        out.append(",".join(row))
    return "\n".join(out) + "\n"


def load_jodie_csv(path: str | Path) -> EventLog:
    with open(path, "r", newline="") as fh:
        return parse_jodie_csv(fh)


def metadata(log: EventLog) -> dict[str, int]:
    num_users = log.num_users if log.num_users is not None else log.num_nodes
    return {
        "num_users": num_users,
        "num_items": log.num_nodes - num_users,
        "d_e": log.d_e,
        "num_events": len(log),
    }


def write_metadata(log: EventLog, path: str | Path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in metadata(log).items()))


# --- splits and batching ---------------------------------------------------

@dataclass(frozen=True)
class DataSplit:
    train: range
    val: range
    test: range
    seen_nodes: frozenset = field(default_factory=frozenset)


def split_chronological(log: EventLog, train_frac: float = 0.70,
                        val_frac: float = 0.15) -> DataSplit:
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise ValueError(f"invalid split fractions train={train_frac} val={val_frac}")
    m = len(log)
    a = math.floor(train_frac * m)
    b = math.floor((train_frac + val_frac) * m)
    seen = frozenset(np.unique(np.concatenate([log.src[:a], log.dst[:a]])).tolist())
    return DataSplit(range(0, a), range(a, b), range(b, m), seen)


def batches(index_range: range, batch_size: int) -> list[range]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    start, stop = index_range.start, index_range.stop
    return [range(k, min(k + batch_size, stop)) for k in range(start, stop, batch_size)]


def unseen_nodes(log: EventLog, split: DataSplit) -> set[int]:
    """Node ids that occur in val or test but never in train."""
    lo = split.val.start
    later = np.unique(np.concatenate([log.src[lo:], log.dst[lo:]])).tolist()
    return set(later) - split.seen_nodes


# --- temporal adjacency ----------------------------------------------------

class TemporalAdjacency:
    """Per-node append-only neighbour history, kept timestamp-sorted.

    Recording is only valid in timestamp order; ``record`` enforces it so that
    ``recent_neighbors`` can bisect.
    """

    def __init__(self, num_nodes: int):
        self.num_nodes = num_nodes
        self._nbrs: list[list[int]] = [[] for _ in range(num_nodes)]
        self._times: list[list[float]] = [[] for _ in range(num_nodes)]
        self._eids: list[list[int]] = [[] for _ in range(num_nodes)]
        self.num_recorded = 0

    def _append(self, node: int, nbr: int, t: float, eid: int) -> None:
        times = self._times[node]
        if times and t < times[-1]:
            raise ValueError(f"out-of-order record for node {node}: {t} < {times[-1]}")
        self._nbrs[node].append(nbr)
        times.append(t)
        self._eids[node].append(eid)

    def record(self, src: int, dst: int, t: float, eid: int = -1) -> None:
        self._append(src, dst, t, eid)
        self._append(dst, src, t, eid)
        self.num_recorded += 1

    def history(self, node: int) -> list[tuple[int, float]]:
        if not 0 <= node < self.num_nodes:
            return []
        return list(zip(self._nbrs[node], self._times[node]))

    def degree(self, node: int) -> int:
        return len(self._nbrs[node]) if 0 <= node < self.num_nodes else 0

    def recent_edges(self, node: int, n: int, t: float) -> list[tuple[int, float, int]]:
        """Like :meth:`recent_neighbors` but also returns the event id of each entry."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= node < self.num_nodes:
            return []
        times = self._times[node]
        hi = bisect_left(times, t)
        lo = max(0, hi - n)
        nbrs, eids = self._nbrs[node], self._eids[node]
        return [(nbrs[k], times[k], eids[k]) for k in range(hi - 1, lo - 1, -1)]

    def recent_neighbors(self, node: int, n: int, t: float) -> list[tuple[int, float]]:
        """Up to ``n`` entries strictly before ``t``, most recent first."""
        return [(v, ts) for v, ts, _ in self.recent_edges(node, n, t)]

    def snapshot(self) -> tuple:
        return tuple(tuple(zip(self._nbrs[v], self._times[v], self._eids[v]))
                     for v in range(self.num_nodes))


def recent_neighbors(adj: TemporalAdjacency, node: int, n: int, t: float) -> list[tuple[int, float]]:
    return adj.recent_neighbors(node, n, t)
