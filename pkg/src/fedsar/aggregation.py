"""Server aggregation rules over full client parameter vectors.

Every rule reduces clients in ascending id order, so results do not
depend on the order in which updates arrive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsar.errors import ConfigurationError, ContractViolation

RULES = ("fedavg", "krum", "median", "nadafd")


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    num_samples: int = 1
    weight: float | None = None


def _sorted(inputs) -> list[ClientUpdate]:
    items = sorted(inputs, key=lambda u: u.client_id)
    if not items:
        raise ContractViolation("aggregation needs at least one client")
    ids = [u.client_id for u in items]
    if len(set(ids)) != len(ids):
        raise ContractViolation(f"duplicate client ids in {ids}")
    d = np.asarray(items[0].params).shape
    if any(np.asarray(u.params).shape != d for u in items):
        raise ContractViolation("client parameter vectors differ in length")
    return items


def _weighted_sum(items, weights) -> np.ndarray:
    total = 0.0
    for w in weights:
        total += w
    out = np.zeros_like(np.asarray(items[0].params, dtype=np.float64))
    for u, w in zip(items, weights):
        out += (w / total) * np.asarray(u.params, dtype=np.float64)
    return out


def fedavg(inputs) -> np.ndarray:
    """Sample-count weighted mean."""
    items = _sorted(inputs)
    return _weighted_sum(items, [float(u.num_samples) for u in items])


def weighted_aggregate(inputs) -> np.ndarray:
    """Mean weighted by each client's health weight."""
    items = _sorted(inputs)
    weights = [float(u.weight) for u in items]
    if any(w < 0 for w in weights):
        raise ContractViolation("health weights must be non-negative")
    if sum(weights) <= 0:
        raise ContractViolation("all health weights are zero")
    return _weighted_sum(items, weights)


def krum_scores(stack: np.ndarray, f: int) -> np.ndarray:
    n = stack.shape[0]
    sq = np.sum(stack * stack, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * stack @ stack.T, 0.0)
    keep = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(dist[i], i)
        scores[i] = np.sort(others)[:keep].sum()
    return scores


def krum(inputs, f: int) -> np.ndarray:
    """The candidate closest to its ``n - f - 2`` nearest peers."""
    items = _sorted(inputs)
    n = len(items)
    if n < f + 3:
        raise ConfigurationError(f"Krum needs n >= f + 3, got n={n}, f={f}")
    stack = np.stack([np.asarray(u.params, dtype=np.float64) for u in items])
    scores = krum_scores(stack, f)
    best = int(np.argmin(scores))  # first minimum = smallest id
    return stack[best].copy()


def coordinate_median(inputs) -> np.ndarray:
    items = _sorted(inputs)
    stack = np.stack([np.asarray(u.params, dtype=np.float64) for u in items])
    return np.median(stack, axis=0)


def aggregate(rule: str, inputs, krum_f: int = 1) -> np.ndarray:
    if rule == "fedavg":
        return fedavg(inputs)
    if rule == "krum":
        return krum(inputs, krum_f)
    if rule == "median":
        return coordinate_median(inputs)
    if rule == "nadafd":
        return weighted_aggregate(inputs)
    raise ConfigurationError(f"unknown aggregator {rule!r}; expected one of {RULES}")
