"""Acceptance criteria 1-10. Each test prints one ``CRITERION n: PASS|FAIL`` line.

Run standalone with ``python tests/test_acceptance.py``; criteria 5-7 are
marked ``slow`` and criterion 9 is skipped unless ``APAN_WIKIPEDIA`` names the
public Wikipedia CSV.
"""

from __future__ import annotations

import itertools
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from apan import autodiff as ad
from apan.autodiff import Tensor, gradcheck
from apan.bench import load_scenario, run_scenario
from apan.datasets import periodic_bipartite
from apan.events import TemporalAdjacency, batches, load_jodie_csv
from apan.mailbox import MailboxStore
from apan.metrics import average_precision, roc_auc
from apan.model import APAN, ModelConfig, layer_norm_residual, multi_head
from apan.propagator import PropagationConfig, PropagationWorker, Propagator
from apan.training import TrainConfig, fit, link_loss
from apan import training

from harness import BATCH_SIZES, D, async_drain_equal, oracle_run, random_case, small_engine
from oracles import ap_oracle, auc_oracle

ROOT = Path(__file__).resolve().parents[1]


def record(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_criterion_1_gradient_oracle(capsys):
    start = time.perf_counter()
    cfg = ModelConfig(d=8, d_e=8, m=4, heads=2, hidden=16, dropout=0.0)
    model = APAN(cfg, seed=0)
    rng = np.random.default_rng(0)
    # move every parameter off its structured init (zero biases, unit gain, zero positions)
    for p in model.params.values():
        p.data[...] = p.data + rng.normal(scale=0.3, size=p.shape)
    b = 6
    z_prev = rng.normal(size=(b, 8))
    mails = rng.normal(size=(b, 4, 8))
    src, dst, neg = np.array([0, 1, 2]), np.array([3, 4, 5]), np.array([4, 5, 3])

    def loss():
        z, _ = model.encode(z_prev, mails)
        pos_logit = model.decode_link(ad.take(z, src), ad.take(z, dst))
        neg_logit = model.decode_link(ad.take(z, src), ad.take(z, neg))
        return link_loss(pos_logit, neg_logit)

    params = model.parameters("link")
    report = gradcheck(loss, params, h=1e-5)
    worst = max(report, key=report.get)
    elapsed = time.perf_counter() - start
    ok = report[worst] < 1e-4 and len(report) == len(params) and elapsed < 60
    record(capsys, 1, ok, f"{len(report)} tensors, max rel err {report[worst]:.2e} ({worst}), {elapsed:.1f}s")


def test_criterion_2_propagator_oracle(capsys):
    start = time.perf_counter()
    failures, settings = [], set()
    for k in range(50):
        log, (hops, fanout, m) = random_case(k)
        settings.add((hops, fanout, m))
        for bs in BATCH_SIZES:
            ok, _ = oracle_run(log, hops, fanout, m, bs)
            if not ok:
                failures.append((k, bs))
    elapsed = time.perf_counter() - start
    ok = not failures and len(settings) == 18 and elapsed < 60
    record(capsys, 2, ok, f"50 logs x {len(BATCH_SIZES)} batch sizes over {len(settings)} (H,n,m) settings, "
                          f"mismatches {failures[:5]}, {elapsed:.1f}s")


def _async_engine_run(log, hops, fanout, m, bs):
    """Drive the engine with a lagging worker and check the drained state."""
    engine = small_engine(log, hops, fanout, m)
    emitted = []
    worker = PropagationWorker(engine.propagator, capacity=4, deterministic=False)

    def submit(job):
        emitted.append(job)
        worker.submit(job)

    try:
        for r in batches(range(len(log)), bs):
            events = log.slice(r.start, r.stop)
            engine.finish_batch(events, engine.forward_batch(events, sample=False), submit)
    finally:
        worker.close()
    ref = Propagator(MailboxStore(log.num_nodes, m, D), TemporalAdjacency(log.num_nodes),
                     PropagationConfig(hops, fanout))
    for job in emitted:
        ref.apply(job)
    return engine.store.state_equal(ref.store) and engine.adj.snapshot() == ref.adj.snapshot()


def test_criterion_3_async_equals_deterministic(capsys):
    replay_bad, engine_bad = [], []
    for k in range(50):
        log, (hops, fanout, m) = random_case(k)
        for bs in BATCH_SIZES:
            _, jobs = oracle_run(log, hops, fanout, m, bs)
            if not async_drain_equal(log, hops, fanout, m, jobs):
                replay_bad.append((k, bs))
            if not _async_engine_run(log, hops, fanout, m, bs):
                engine_bad.append((k, bs))
    ok = not replay_bad and not engine_bad
    record(capsys, 3, ok, f"150 runs; job-stream mismatches {replay_bad[:5]}, "
                          f"live-engine mismatches {engine_bad[:5]}")


def test_criterion_4_attention_and_norm_invariants(capsys):
    rng = np.random.default_rng(4)
    cfg = ModelConfig(d=16, d_e=16, m=10, heads=2, hidden=8, dropout=0.0)
    model = APAN(cfg, seed=1)
    for k in range(cfg.heads):
        model.params[f"wq.{k}"].data *= 5.0
    _, weights = multi_head(Tensor(rng.normal(size=(500, 16))), Tensor(rng.normal(scale=3, size=(500, 10, 16))),
                            model.params, cfg)
    row_err = float(np.max(np.abs(weights.sum(axis=-1) - 1)))
    a = rng.normal(loc=2.0, scale=4.0, size=(10_000, 16))
    one, zero = Tensor(np.ones(16)), Tensor(np.zeros(16))
    normed = layer_norm_residual(Tensor(a), Tensor(np.zeros_like(a)), one, zero).data
    mean_err = float(np.max(np.abs(normed.mean(axis=1))))
    var_err = float(np.max(np.abs(normed.var(axis=1) - 1)))
    ok = row_err < 1e-9 and mean_err < 1e-9 and var_err < 1e-4
    record(capsys, 4, ok, f"attention row-sum err {row_err:.1e}, LN |mean| {mean_err:.1e}, "
                          f"|var-1| {var_err:.1e}")


@pytest.mark.slow
def test_criterion_5_synthetic_learnability(capsys):
    start = time.perf_counter()
    cfg = TrainConfig()
    result = fit(periodic_bipartite(), cfg, max_epochs=20)
    control = fit(periodic_bipartite(control=True), cfg, max_epochs=20)
    elapsed = time.perf_counter() - start
    ok = result.best_val_ap >= 0.85 and control.best_val_ap < 0.6 and elapsed < 600
    record(capsys, 5, ok, f"val AP {result.best_val_ap:.3f} (epoch {result.best_epoch}), "
                          f"control {control.best_val_ap:.3f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_batch_size_robustness(capsys):
    start = time.perf_counter()
    log = periodic_bipartite()
    aps = {bs: fit(log, TrainConfig(batch_size=bs)).best_val_ap for bs in (100, 1000)}
    gap = abs(aps[1000] - aps[100])
    elapsed = time.perf_counter() - start
    ok = gap <= 0.03 and elapsed < 1200
    record(capsys, 6, ok, f"val AP batch 100 {aps[100]:.3f}, batch 1000 {aps[1000]:.3f}, "
                          f"gap {gap:.3f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_mailbox_fanout_grid(capsys):
    start = time.perf_counter()
    log = periodic_bipartite()
    aps = {}
    for m, n in itertools.product((2, 5, 10, 20), repeat=2):
        aps[(m, n)] = fit(log, TrainConfig(mailbox_slots=m, fanout=n)).best_val_ap
    spread = max(aps.values()) - min(aps.values())
    lo, hi = min(aps, key=aps.get), max(aps, key=aps.get)
    elapsed = time.perf_counter() - start
    ok = spread <= 0.05 and elapsed < 3600
    record(capsys, 7, ok, f"16 cells, min {aps[lo]:.3f} at (m,n)={lo}, max {aps[hi]:.3f} at {hi}, "
                          f"spread {spread:.3f}, {elapsed:.0f}s")


def test_criterion_8_latency_direction(capsys):
    start = time.perf_counter()
    scenario = load_scenario(ROOT / "default.scenario")
    assert (scenario.mu_ms, scenario.fanout, scenario.batch, scenario.clock) == (2.0, 10, 200, "virtual")
    rows = run_scenario(scenario)
    sync = {s.hops: s.percentile(50) for s in rows if s.pipeline == "sync"}
    asyn = {s.hops: s.percentile(50) for s in rows if s.pipeline == "async"}
    ratio = sync[2] / asyn[2]
    async_spread = (max(asyn.values()) - min(asyn.values())) / min(asyn.values())
    increasing = sync[1] < sync[2] < sync[3]
    again = {s.hops: s.percentile(50) for s in run_scenario(scenario) if s.pipeline == "sync"}
    elapsed = time.perf_counter() - start
    ok = ratio >= 5 and async_spread <= 0.10 and increasing and again == sync and elapsed < 120
    record(capsys, 8, ok, f"hops-2 p50 sync {sync[2]:.1f} ms vs async {asyn[2]:.2f} ms ({ratio:.0f}x); "
                          f"async spread {async_spread:.1%}; sync p50 by hops "
                          f"{[round(sync[h], 1) for h in (1, 2, 3)]}; {elapsed:.0f}s")


@pytest.mark.extended
@pytest.mark.skipif(not os.environ.get("APAN_WIKIPEDIA"), reason="set APAN_WIKIPEDIA to the wikipedia.csv path")
def test_criterion_9_wikipedia(capsys):
    log = load_jodie_csv(os.environ["APAN_WIKIPEDIA"])
    assert len(log) == 157474
    result = fit(log, TrainConfig())
    cfg = TrainConfig()
    val = result.best_val_ap
    test = training.test_metrics(result.engine, log, result.split, cfg)["transductive"]["ap"]
    ok = val >= 0.95 and test >= 0.95
    record(capsys, 9, ok, f"val AP {val:.4f}, test AP {test:.4f}")


def test_criterion_10_metric_oracles(capsys):
    rng = np.random.default_rng(10)
    worst_ap = worst_auc = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 1, 0
        # coarse rounding on a third of the sets forces ties
        scores = rng.normal(size=n)
        if k % 3 == 0:
            scores = np.round(scores, 1)
        worst_ap = max(worst_ap, abs(average_precision(labels, scores) - ap_oracle(labels, scores)))
        worst_auc = max(worst_auc, abs(roc_auc(labels, scores) - auc_oracle(labels, scores)))
    ok = worst_ap < 1e-9 and worst_auc < 1e-9
    record(capsys, 10, ok, f"1000 score sets, max |AP err| {worst_ap:.1e}, max |AUC err| {worst_auc:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
