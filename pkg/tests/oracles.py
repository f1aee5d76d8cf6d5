"""Independent reference implementations used as test oracles.

Nothing here imports the package's own algorithms: each oracle is a plain
list-and-loop restatement of the behaviour under test.
"""

from __future__ import annotations

import math

import numpy as np


def brute_recent(events, node, n, t):
    """Most-recent ``n`` (neighbour, time) entries of ``node`` strictly before ``t``.

    ``events`` is the list of recorded (src, dst, t) in record order.
    """
    entries = []
    for s, d, te in events:
        if te >= t:
            continue
        if s == node:
            entries.append((d, te))
        if d == node:
            entries.append((s, te))
    return list(reversed(entries))[:n]


class PropagationSimulator:
    """Single-threaded mail propagation over Python lists.

    Mailboxes keep their full push history (seeded with ``m`` zero mails at
    time 0); a readout is the last ``m`` pushes sorted by time, ties in push
    order. ``layers`` hop semantics: frontiers ``0..hops-1`` receive mail.
    """

    def __init__(self, num_nodes, m, d, hops, fanout, hop_mode="layers"):
        self.m, self.d, self.hops, self.fanout = m, d, hops, fanout
        self.levels = 0 if hops == 0 else (hops - 1 if hop_mode == "layers" else hops)
        self.boxes = [[(np.zeros(d), 0.0)] * m for _ in range(num_nodes)]
        self.recorded = []

    def recipients(self, s, d, t):
        if self.hops == 0:
            return set()
        frontier = {s, d}
        found = set(frontier)
        for _ in range(self.levels):
            nxt = set()
            for v in frontier:
                nxt.update(u for u, _ in brute_recent(self.recorded, v, self.fanout, t))
            found |= nxt
            frontier = nxt
        return found

    def apply(self, src, dst, ts, feats, z_src, z_dst):
        inbox = {}
        for k in range(len(src)):
            mail = z_src[k] + feats[k] + z_dst[k]
            for v in self.recipients(int(src[k]), int(dst[k]), float(ts[k])):
                inbox.setdefault(v, []).append((mail, float(ts[k])))
        for v, mails in inbox.items():
            total = mails[0][0].copy()
            for vec, _ in mails[1:]:
                total = total + vec
            self.boxes[v].append((total / len(mails), max(t for _, t in mails)))
        for k in range(len(src)):
            self.recorded.append((int(src[k]), int(dst[k]), float(ts[k])))

    def readout(self, node):
        window = self.boxes[node][-self.m:]
        order = sorted(range(len(window)), key=lambda i: window[i][1])
        vecs = np.stack([window[i][0] for i in order])
        stamps = np.array([window[i][1] for i in order])
        return vecs, stamps


def ap_oracle(labels, scores):
    """Mean over positives of precision among all items scoring at least as high."""
    labels = list(map(bool, labels))
    scores = list(map(float, scores))
    pos = [i for i, y in enumerate(labels) if y]
    total = 0.0
    for i in pos:
        at_least = [j for j in range(len(scores)) if scores[j] >= scores[i]]
        hits = sum(1 for j in at_least if labels[j])
        total += hits / len(at_least)
    return total / len(pos)


def auc_oracle(labels, scores):
    """Probability a random positive outranks a random negative, ties counting half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def bce_oracle(pos_logits, neg_logits):
    total = 0.0
    for x in pos_logits:
        total += -math.log(1.0 / (1.0 + math.exp(-x)))
    for x in neg_logits:
        total += -math.log(1.0 - 1.0 / (1.0 + math.exp(-x)))
    return total / len(pos_logits)


def random_log_arrays(rng, num_events, num_nodes, d, tie_prob=0.3):
    """Random multigraph log with repeated timestamps and occasional self-loops."""
    src = rng.integers(0, num_nodes, size=num_events)
    dst = rng.integers(0, num_nodes, size=num_events)
    steps = np.where(rng.random(num_events) < tie_prob, 0.0, rng.random(num_events) + 0.1)
    ts = np.cumsum(steps) + 1.0
    feats = rng.normal(size=(num_events, d))
    return src.astype(np.int64), dst.astype(np.int64), ts, feats
