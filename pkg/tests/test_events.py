import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apan.events import (EventLog, ParseError, TemporalAdjacency, TemporalEvent, batches,
                         metadata, parse_jodie_csv, serialize_jodie_csv, split_chronological,
                         unseen_nodes)

from oracles import brute_recent, random_log_arrays


def test_parse_single_row_applies_item_offset():
    log = parse_jodie_csv("user,item,ts,label,a,b\n0,0,1.0,0,0.5,0.5\n")
    ev = log.event(0)
    assert (ev.src, ev.dst, ev.timestamp, ev.label) == (0, 1, 1.0, 0)
    assert ev.edge_feat.tolist() == [0.5, 0.5]
    assert log.num_nodes == 2 and log.d_e == 2 and log.num_users == 1


def test_parse_remaps_items_after_max_user():
    text = "h\n2,0,1,0,0\n0,3,2,1,0\n"
    log = parse_jodie_csv(text)
    assert log.src.tolist() == [2, 0]
    assert log.dst.tolist() == [3, 6]
    assert log.num_nodes == 7


def test_parse_ragged_row_names_line():
    with pytest.raises(ParseError) as err:
        parse_jodie_csv("h\n0,0,1,0,1,2\n0,1,2,0,1,2,3\n")
    assert err.value.line == 3


def test_parse_rejects_decreasing_timestamp():
    with pytest.raises(ParseError) as err:
        parse_jodie_csv("h\n0,0,5,0,1\n0,1,4,0,1\n")
    assert err.value.line == 3


def test_parse_rejects_bad_number():
    with pytest.raises(ParseError):
        parse_jodie_csv("h\n0,x,5,0,1\n")


def test_parse_empty_body():
    with pytest.raises(ParseError):
        parse_jodie_csv("h\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 5), st.integers(0, 10_000))
def test_csv_round_trip(n, d_e, seed):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, 5, size=n)
    users[0] = 4
    items = rng.integers(0, 4, size=n)
    ts = np.sort(rng.random(n) * 100)
    feats = rng.normal(size=(n, d_e))
    labels = rng.integers(0, 2, size=n)
    log = EventLog(users, items + 5, ts, feats, labels, int(items.max()) + 6, 5)
    again = parse_jodie_csv(serialize_jodie_csv(log))
    # item ids are renumbered from the max item seen, which matches here
    assert again == log


def test_metadata_counts():
    log = parse_jodie_csv("h\n0,0,1,0,1,2\n1,2,2,0,1,2\n")
    assert metadata(log) == {"num_users": 2, "num_items": 3, "d_e": 2, "num_events": 2}


def test_eventlog_validation():
    feats = np.zeros((2, 1))
    with pytest.raises(ValueError):
        EventLog(np.array([0, 1]), np.array([1, 0]), np.array([2.0, 1.0]), feats, None, 2)
    with pytest.raises(ValueError):
        EventLog(np.array([0, 5]), np.array([1, 0]), np.array([1.0, 2.0]), feats, None, 2)
    with pytest.raises(ValueError):
        EventLog(np.array([0]), np.array([1, 0]), np.array([1.0, 2.0]), feats, None, 2)


def test_from_events_checks_feature_length():
    events = [TemporalEvent(0, 1, np.zeros(2), 1.0), TemporalEvent(1, 0, np.zeros(3), 2.0)]
    with pytest.raises(ValueError):
        EventLog.from_events(events)


def test_self_loop_accepted():
    log = EventLog.from_events([TemporalEvent(3, 3, np.ones(1), 1.0)])
    adj = TemporalAdjacency(log.num_nodes)
    adj.record(3, 3, 1.0)
    assert adj.recent_neighbors(3, 5, 2.0) == [(3, 1.0), (3, 1.0)]


@pytest.mark.parametrize("m, expect", [
    (100, (range(0, 70), range(70, 85), range(85, 100))),
    (10, (range(0, 7), range(7, 8), range(8, 10))),
])
def test_split_boundaries(m, expect):
    log = EventLog(np.zeros(m, dtype=np.int64), np.ones(m, dtype=np.int64), np.arange(m, dtype=float),
                   np.zeros((m, 1)), None, 2)
    s = split_chronological(log, 0.7, 0.15)
    assert (s.train, s.val, s.test) == expect


@pytest.mark.parametrize("fracs", [(0.0, 0.1), (0.7, 0.3), (0.5, -0.1), (1.2, 0.1)])
def test_split_rejects_bad_fractions(fracs):
    log = EventLog(np.zeros(4, dtype=np.int64), np.ones(4, dtype=np.int64), np.arange(4.0),
                   np.zeros((4, 1)), None, 2)
    with pytest.raises(ValueError):
        split_chronological(log, *fracs)


def test_split_partitions_and_seen_nodes():
    rng = np.random.default_rng(3)
    src, dst, ts, feats = random_log_arrays(rng, 57, 20, 2)
    log = EventLog(src, dst, ts, feats, None, 20)
    s = split_chronological(log)
    assert list(s.train) + list(s.val) + list(s.test) == list(range(57))
    assert s.seen_nodes == set(src[:s.train.stop].tolist()) | set(dst[:s.train.stop].tolist())
    later = set(src[s.val.start:].tolist()) | set(dst[s.val.start:].tolist())
    assert unseen_nodes(log, s) == later - s.seen_nodes


def test_batches_sizes():
    assert [len(b) for b in batches(range(5), 2)] == [2, 2, 1]
    assert [len(b) for b in batches(range(200), 200)] == [200]
    assert batches(range(10, 15), 2)[0] == range(10, 12)
    assert batches(range(10, 15), 2)[-1] == range(14, 15)


def test_batches_train_count_from_event_total():
    train = split_chronological(_dummy_log(157474)).train
    assert len(train) == 110231
    assert len(batches(train, 200)) == 552


def _dummy_log(m):
    z = np.zeros(m, dtype=np.int64)
    return EventLog(z, z + 1, np.arange(m, dtype=float), np.zeros((m, 1)), None, 2)


def test_batches_rejects_zero():
    with pytest.raises(ValueError):
        batches(range(3), 0)


def test_recent_neighbors_examples():
    adj = TemporalAdjacency(4)
    a, b, v = 1, 2, 0
    adj.record(v, a, 1.0)
    adj.record(v, b, 2.0)
    adj.record(v, a, 3.0)
    assert adj.recent_neighbors(v, 2, 4.0) == [(a, 3.0), (b, 2.0)]
    assert adj.recent_neighbors(v, 2, 2.0) == [(a, 1.0)]
    assert adj.recent_neighbors(99, 2, 4.0) == []
    with pytest.raises(ValueError):
        adj.recent_neighbors(v, 0, 4.0)


def test_record_out_of_order_rejected():
    adj = TemporalAdjacency(3)
    adj.record(0, 1, 5.0)
    with pytest.raises(ValueError):
        adj.record(0, 2, 4.0)


@pytest.mark.parametrize("seed", range(5))
def test_recent_neighbors_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    src, dst, ts, _ = random_log_arrays(rng, 50, 8, 1)
    adj = TemporalAdjacency(8)
    recorded = []
    for k in range(50):
        adj.record(int(src[k]), int(dst[k]), float(ts[k]))
        recorded.append((int(src[k]), int(dst[k]), float(ts[k])))
        for node in range(8):
            for n in (1, 3, 50):
                for t in (float(ts[k]), float(ts[k]) + 0.05, float(ts[0])):
                    assert adj.recent_neighbors(node, n, t) == brute_recent(recorded, node, n, t)
