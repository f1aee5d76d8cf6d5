"""Synthetic interaction logs for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .events import EventLog


def periodic_bipartite(num_users: int = 20, num_items: int = 10, prefs: int = 3,
                       num_events: int = 5000, d_e: int = 172, dwell: int = 500,
                       noise: float = 0.1, user_weight: float = 0.5, seed: int = 0, control: bool = False) -> EventLog:
    """Users cycling through a fixed preference list of items.

    Each user owns ``prefs`` distinct items and keeps returning to the current
    one for ``dwell`` of its own interactions before moving to the next,
    wrapping around. Preference slots are spread evenly over items so no item
    is globally more popular than another. The acting user is drawn uniformly
    per event. Edge features are the item's prototype plus the user's
    prototype plus noise.

    ``control`` redraws every item uniformly at random after generation
    (features stay put), so items carry no user, time or popularity signal.
    """
    if prefs > num_items:
        raise ValueError("prefs cannot exceed num_items")
    rng = np.random.default_rng(seed)
    pref = _balanced_preferences(rng, num_users, num_items, prefs)
    item_proto = rng.normal(size=(num_items, d_e))
    user_proto = user_weight * rng.normal(size=(num_users, d_e))
    phase = rng.integers(0, prefs * dwell, size=num_users)
    users = rng.integers(0, num_users, size=num_events)
    counts = phase.copy()
    items = np.empty(num_events, dtype=np.int64)
    for k, u in enumerate(users):
        items[k] = pref[u, (counts[u] // dwell) % prefs]
        counts[u] += 1
    feats = item_proto[items] + user_proto[users] + noise * rng.normal(size=(num_events, d_e))
    if control:
        items = rng.integers(0, num_items, size=num_events)
    timestamps = np.arange(num_events, dtype=np.float64) + 1.0
    labels = np.zeros(num_events, dtype=np.int64)
    return EventLog(users.astype(np.int64), items + num_users, timestamps, feats, labels,
                    num_users + num_items, num_users)


def _balanced_preferences(rng: np.random.Generator, num_users: int, num_items: int,
                          prefs: int) -> np.ndarray:
    """Rows of distinct items where item frequencies differ by at most one."""
    slots = num_users * prefs
    pool = np.concatenate([rng.permutation(num_items) for _ in range(-(-slots // num_items))])[:slots]
    for _ in range(1000):
        table = rng.permutation(pool).reshape(num_users, prefs)
        if all(len(set(row)) == prefs for row in table.tolist()):
            return table
    raise RuntimeError("could not draw duplicate-free preference lists")


def random_bipartite(num_users: int = 4000, num_items: int = 1000, num_events: int = 6000,
                     d_e: int = 172, item_skew: float = 1.0, seed: int = 0) -> EventLog:
    """Uniform users, Zipf-like items, Gaussian edge features; a load generator for benchmarks."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, num_items + 1) ** item_skew
    users = rng.integers(0, num_users, size=num_events)
    items = rng.choice(num_items, size=num_events, p=weights / weights.sum())
    feats = rng.normal(size=(num_events, d_e))
    timestamps = np.arange(num_events, dtype=np.float64) + 1.0
    labels = np.zeros(num_events, dtype=np.int64)
    return EventLog(users.astype(np.int64), items + num_users, timestamps, feats, labels,
                    num_users + num_items, num_users)
