"""Chronological training, evaluation replay and early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .engine import Engine
from .events import DataSplit, EventLog, batches, split_chronological, unseen_nodes
from .metrics import UndefinedMetric, link_metrics, roc_auc
from .model import APAN, ModelConfig
from .propagator import PropagationConfig, PropagationWorker

log = logging.getLogger(__name__)

# offsets keep the evaluation negative stream independent of the training stream
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class TrainConfig:
    batch_size: int = 200
    lr: float = 1e-4
    dropout: float = 0.1
    patience: int = 5
    epochs: int = 50
    seed: int = 0
    hops: int = 2
    fanout: int = 10
    mailbox_slots: int = 10
    heads: int = 2
    hidden: int = 80
    loss: str = "mlp"
    hop_mode: str = "layers"
    attn_scale: str = "head"
    train_frac: float = 0.70
    val_frac: float = 0.15

    def __post_init__(self):
        positive = ("batch_size", "lr", "epochs", "fanout", "mailbox_slots", "heads", "hidden")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience < 0 or self.hops < 0 or not 0 <= self.dropout < 1:
            raise ValueError("patience and hops must be >= 0 and dropout in [0, 1)")
        if self.loss not in ("mlp", "dot"):
            raise ValueError(f"loss must be 'mlp' or 'dot', got {self.loss!r}")

    def model_config(self, d_e: int) -> ModelConfig:
        return ModelConfig(d=d_e, d_e=d_e, m=self.mailbox_slots, heads=self.heads,
                           hidden=self.hidden, dropout=self.dropout, attn_scale=self.attn_scale)

    def prop_config(self, deterministic: bool = True) -> PropagationConfig:
        return PropagationConfig(self.hops, self.fanout, deterministic, self.hop_mode)


def link_loss(pos_logits: Tensor, neg_logits: Tensor) -> Tensor:
    """Mean over pairs of ``-log s(pos) - log(1 - s(neg))``."""
    if pos_logits.shape != neg_logits.shape:
        raise ValueError(f"need one negative per positive: {pos_logits.shape} vs {neg_logits.shape}")
    per_pair = ad.add(ad.log_sigmoid(pos_logits), ad.log_sigmoid(ad.neg(neg_logits)))
    return ad.neg(ad.mean_all(per_pair))


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    terms = ad.add(ad.mul(ad.log_sigmoid(logits), y),
                   ad.mul(ad.log_sigmoid(ad.neg(logits)), 1.0 - y))
    return ad.neg(ad.mean_all(terms))


@dataclass
class EpochStats:
    loss: float
    batches: int
    skipped_pairs: int
    seconds: float


def train_epoch(engine: Engine, log_: EventLog, index_range: range, cfg: TrainConfig,
                adam: AdamState, rng: np.random.Generator) -> EpochStats:
    """One chronological pass from a fresh state: infer, step, then propagate each batch."""
    engine.reset()
    params = engine.model.parameters("link", cfg.loss)
    start = time.perf_counter()
    losses, skipped = [], 0
    for r in batches(index_range, cfg.batch_size):
        events = log_.slice(r.start, r.stop)
        out = engine.forward_batch(events, training=True, rng=rng, neg_rng=rng)
        skipped += int((~out.has_neg).sum())
        if out.has_neg.any():
            pos, neg = engine.link_logits(out, cfg.loss, training=True, rng=rng)
            loss = link_loss(pos, neg)
            ad.backward(loss)
            ad.adam_step(params, adam)
            losses.append(float(loss.data))
        engine.finish_batch(events, out)
    return EpochStats(float(np.mean(losses)) if losses else float("nan"), len(losses), skipped,
                      time.perf_counter() - start)


def replay(engine: Engine, log_: EventLog, index_range: range, batch_size: int,
           submit=None) -> None:
    """Advance streaming state over a range with inference only (no scoring, no updates)."""
    for r in batches(index_range, batch_size):
        events = log_.slice(r.start, r.stop)
        out = engine.forward_batch(events, sample=False)
        engine.finish_batch(events, out, submit)


def evaluate(engine: Engine, log_: EventLog, index_range: range, cfg: TrainConfig, *,
             warmup: range | None = None, only_nodes: set[int] | None = None,
             seed: int | None = None, async_capacity: int | None = None) -> dict[str, float]:
    """Reset, replay ``warmup`` (default: everything before the range), then score the range.

    ``only_nodes`` restricts scoring (not propagation) to events touching those
    nodes, which gives the inductive protocol. ``async_capacity`` hands
    propagation to a background worker allowed to trail by that many batches.
    """
    engine.reset()
    warmup = range(0, index_range.start) if warmup is None else warmup
    neg_rng = np.random.default_rng((cfg.seed if seed is None else seed) + EVAL_SEED_OFFSET)
    worker = None
    if async_capacity is not None:
        worker = PropagationWorker(engine.propagator, async_capacity, deterministic=False)
    submit = worker.submit if worker is not None else None
    try:
        pos_v, neg_v = _score_range(engine, log_, index_range, cfg, warmup, only_nodes,
                                    neg_rng, submit)
    finally:
        if worker is not None:
            worker.close()
    if len(pos_v) == 0:
        raise UndefinedMetric("no scorable pairs in range")
    return link_metrics(pos_v, neg_v)


def _score_range(engine, log_, index_range, cfg, warmup, only_nodes, neg_rng, submit):
    # the pool still has to see the warm-up destinations
    replay(engine, log_, warmup, cfg.batch_size, submit)
    pos_all, neg_all = [], []
    for r in batches(index_range, cfg.batch_size):
        events = log_.slice(r.start, r.stop)
        out = engine.forward_batch(events, neg_rng=neg_rng)
        pos, neg = engine.link_logits(out, cfg.loss)
        keep = np.ones(int(out.has_neg.sum()), dtype=bool)
        if only_nodes is not None:
            src, dst = events.src[out.has_neg], events.dst[out.has_neg]
            keep = np.array([s in only_nodes or d in only_nodes for s, d in zip(src, dst)], dtype=bool)
        pos_all.append(pos.data[keep])
        neg_all.append(neg.data[keep])
        engine.finish_batch(events, out, submit)
    pos_v = np.concatenate(pos_all) if pos_all else np.zeros(0)
    neg_v = np.concatenate(neg_all) if neg_all else np.zeros(0)
    return pos_v, neg_v


class EarlyStopping:
    """Tracks the best score; ``step`` returns True once training should stop.

    Stops after ``patience`` consecutive non-improving epochs (patience 0 stops
    at the first one). An improving epoch never triggers a stop.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= max(self.patience, 1)


METRIC_FIELDS = ["epoch", "split", "loss", "ap", "accuracy", "auc", "seconds"]


@dataclass
class FitResult:
    model: APAN
    engine: Engine
    split: DataSplit
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ap: float = float("nan")

    def write_metrics(self, path: str | Path) -> None:
        write_metrics_csv(self.history, path)


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_FIELDS})


def fit(log_: EventLog, cfg: TrainConfig, *, split: DataSplit | None = None,
        model: APAN | None = None, max_epochs: int | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with early stopping on validation AP and keep the best-epoch weights."""
    split = split or split_chronological(log_, cfg.train_frac, cfg.val_frac)
    model = model or APAN(cfg.model_config(log_.d_e), seed=cfg.seed)
    engine = Engine.for_log(model, log_, cfg.prop_config())
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    result = FitResult(model, engine, split)
    best_state = model.state_dict()
    for epoch in range(max_epochs or cfg.epochs):
        stats = train_epoch(engine, log_, split.train, cfg, adam, rng)
        t0 = time.perf_counter()
        val = evaluate(engine, log_, split.val, cfg, warmup=split.train)
        row_train = {"epoch": epoch, "split": "train", "loss": stats.loss, "ap": "",
                     "accuracy": "", "auc": "", "seconds": round(stats.seconds, 6)}
        row_val = {"epoch": epoch, "split": "val", "loss": "", **val,
                   "seconds": round(time.perf_counter() - t0, 6)}
        result.history += [row_train, row_val]
        log.info("epoch %d loss %.4f val ap %.4f auc %.4f", epoch, stats.loss, val["ap"], val["auc"])
        if on_epoch:
            on_epoch(row_val | {"loss": stats.loss})
        improved = val["ap"] > stopper.best
        stop = stopper.step(epoch, val["ap"])
        if improved:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    result.best_epoch, result.best_val_ap = stopper.best_epoch, stopper.best
    return result


def test_metrics(engine: Engine, log_: EventLog, split: DataSplit, cfg: TrainConfig,
                 async_capacity: int | None = None) -> dict[str, dict]:
    """Transductive and inductive scores on the test range after replaying train+val."""
    warm = range(0, split.test.start)
    out = {"transductive": evaluate(engine, log_, split.test, cfg, warmup=warm,
                                    async_capacity=async_capacity)}
    new_nodes = unseen_nodes(log_, split)
    try:
        out["inductive"] = evaluate(engine, log_, split.test, cfg, warmup=warm,
                                    only_nodes=new_nodes, async_capacity=async_capacity)
    except UndefinedMetric:
        log.info("no test events touch unseen nodes; inductive metrics skipped")
    return out


# --- classification heads on frozen embeddings -------------------------------------

def collect_embeddings(engine: Engine, log_: EventLog, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Replay the whole log in eval mode; return ``z_src`` and ``z_dst`` at every event."""
    engine.reset()
    d = engine.model.cfg.d
    z_src = np.zeros((len(log_), d))
    z_dst = np.zeros((len(log_), d))
    for r in batches(range(len(log_)), batch_size):
        events = log_.slice(r.start, r.stop)
        out = engine.forward_batch(events, sample=False)
        z_src[r.start:r.stop] = out.z.data[out.src_rows]
        z_dst[r.start:r.stop] = out.z.data[out.dst_rows]
        engine.finish_batch(events, out)
    return z_src, z_dst


def fit_head(model: APAN, task: str, inputs: tuple[np.ndarray, ...], labels: np.ndarray,
             train_idx: np.ndarray, *, epochs: int = 50, lr: float = 1e-3,
             batch_size: int = 200, seed: int = 0) -> list[float]:
    """Train the node or edge head by BCE on precomputed (frozen) inputs."""
    params = model.parameters(task)
    adam = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for k in range(0, len(order), batch_size):
            idx = order[k:k + batch_size]
            logits = _head_logits(model, task, inputs, idx, training=True, rng=rng)
            loss = bce_loss(logits, labels[idx])
            ad.backward(loss)
            ad.adam_step(params, adam)
            total += float(loss.data) * len(idx)
        losses.append(total / max(len(order), 1))
    return losses


def _head_logits(model: APAN, task: str, inputs, idx, *, training=False, rng=None) -> Tensor:
    if task == "node":
        return model.decode_node(Tensor(inputs[0][idx]), training=training, rng=rng)
    z_i, e, z_j = inputs
    return model.decode_edge(Tensor(z_i[idx]), Tensor(e[idx]), Tensor(z_j[idx]),
                             training=training, rng=rng)


def head_auc(model: APAN, task: str, inputs, labels: np.ndarray, idx: np.ndarray) -> float:
    logits = _head_logits(model, task, inputs, idx).data
    return roc_auc(labels[idx], logits)


def train_classifier_head(model: APAN, log_: EventLog, cfg: TrainConfig, task: str = "node", *,
                          split: DataSplit | None = None, epochs: int = 50,
                          lr: float = 1e-3) -> dict[str, float]:
    """Dynamic node (or edge) classification on a frozen link-prediction encoder.

    Labels are taken at each event; the head trains on the train range and
    AUC is reported on the chronological test range.
    """
    if task not in ("node", "edge"):
        raise ValueError(f"task must be 'node' or 'edge', got {task!r}")
    if log_.labels is None or not len(log_):
        raise ValueError("log has no labeled events")
    split = split or split_chronological(log_, cfg.train_frac, cfg.val_frac)
    engine = Engine.for_log(model, log_, cfg.prop_config())
    z_src, z_dst = collect_embeddings(engine, log_, cfg.batch_size)
    labels = np.asarray(log_.labels)
    inputs = (z_src,) if task == "node" else (z_src, np.asarray(log_.edge_feats), z_dst)
    train_idx = np.arange(split.train.start, split.train.stop)
    test_idx = np.arange(split.test.start, split.test.stop)
    if labels[test_idx].min() == labels[test_idx].max():
        raise UndefinedMetric("test labels are all one class; AUC is undefined")
    fit_head(model, task, inputs, labels, train_idx, epochs=epochs, lr=lr,
             batch_size=cfg.batch_size, seed=cfg.seed)
    return {"train_auc": head_auc(model, task, inputs, labels, train_idx),
            "test_auc": head_auc(model, task, inputs, labels, test_idx),
            "labeled_events": int(labels.sum())}


def train_node_head(model: APAN, log_: EventLog, cfg: TrainConfig, **kw) -> dict[str, float]:
    return train_classifier_head(model, log_, cfg, "node", **kw)


def config_items(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}

