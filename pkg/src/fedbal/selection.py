"""Cluster-and-utility client selection that balances energy drain across a fleet.

Devices are split into high and low uplink-cost clusters (exact 1-D two-means
by threshold scan) and each round's picks are spread across both clusters,
ranked by a utility that favours devices whose next round is cheap relative
to their battery and sensitivity, and that decays geometrically with how
often a device has already been picked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .allocation import cost_coefficient
from .devices import ChannelEnv, Device, comm_energy, training_energy
from .errors import InvalidDeviceError


@dataclass
class ClusterSplit:
    """Device ids split at a threshold in full-bandwidth uplink energy."""

    low: tuple
    high: tuple
    threshold: float


@dataclass
class SelectionPolicyState:
    """Per-device selection counters plus the decay factor of the utility."""

    selection_counts: np.ndarray
    efficiency_factor: float = 0.9

    def __post_init__(self):
        self.selection_counts = np.asarray(self.selection_counts, dtype=np.int64)
        if np.any(self.selection_counts < 0):
            raise InvalidDeviceError("selection counts must be non-negative")
        if not 0 < self.efficiency_factor < 1:
            raise InvalidDeviceError("efficiency factor must be in (0, 1)")

    @classmethod
    def fresh(cls, n: int, efficiency_factor: float = 0.9):
        return cls(np.zeros(n, dtype=np.int64), efficiency_factor)


def ideal_energy(d: Device, env: ChannelEnv) -> float:
    """Uplink energy in J if the device received the whole band (beta = 1)."""
    return cost_coefficient(d, env)


def split_values(values) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact 1-D two-means split of `values`.

    Scans every threshold between consecutive distinct sorted values plus the
    no-split option and keeps the split with the smallest total within-cluster
    sum of squares (ties prefer the no-split / larger-low option).  Returns
    (low indices, high indices, threshold).
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0:
        raise InvalidDeviceError("cannot cluster an empty set")
    order = np.lexsort((np.arange(n), values))
    v = values[order]
    if n == 1 or v[0] == v[-1]:
        return order, np.array([], dtype=int), float(v[-1])
    csum = np.cumsum(v)
    csq = np.cumsum(v * v)
    total_sum, total_sq = csum[-1], csq[-1]
    # sse(i): low = v[:i+1], high = v[i+1:].  i = n-1 is the no-split option.
    idx = np.arange(n)
    low_cnt = idx + 1.0
    sse_low = csq[idx] - csum[idx] ** 2 / low_cnt
    high_cnt = n - low_cnt
    with np.errstate(divide="ignore", invalid="ignore"):
        sse_high = np.where(
            high_cnt > 0,
            (total_sq - csq[idx]) - (total_sum - csum[idx]) ** 2 / np.maximum(high_cnt, 1),
            0.0,
        )
    sse = sse_low + sse_high
    # Only cut between distinct values; keep the no-split candidate at n-1.
    valid = np.zeros(n, dtype=bool)
    valid[:-1] = v[:-1] < v[1:]
    valid[-1] = True
    sse[~valid] = np.inf
    ties = np.flatnonzero(np.isclose(sse, sse.min(), rtol=1e-12, atol=1e-300))
    best = int(ties[-1])  # widest low cluster / no split on exact ties
    if best == n - 1:
        return order, np.array([], dtype=int), float(v[-1])
    threshold = float((v[best] + v[best + 1]) / 2)
    return order[: best + 1], order[best + 1 :], threshold


def cluster_by_ideal_energy(fleet, env: ChannelEnv) -> ClusterSplit:
    """Two-means split of the fleet on full-bandwidth uplink energy."""
    energies = np.array([ideal_energy(d, env) for d in fleet])
    ids = np.array([d.id for d in fleet])
    low_idx, high_idx, threshold = split_values(energies)
    return ClusterSplit(
        low=tuple(sorted(ids[low_idx].tolist())),
        high=tuple(sorted(ids[high_idx].tolist())),
        threshold=threshold,
    )


def utility(phi: int, e_trans: float, e_train: float, alpha: float) -> float:
    """Selection score alpha^phi / (e_trans + e_train).

    phi is how often the device was already selected; alpha in (0, 1) makes
    repeat picks progressively less attractive.
    """
    if not 0 < alpha < 1:
        raise InvalidDeviceError("alpha must be in (0, 1)")
    total = e_trans + e_train
    if total <= 0:
        raise InvalidDeviceError("total energy in the utility must be > 0")
    return alpha**phi / total


def round_cost_estimate(d: Device, env: ChannelEnv, k: int) -> tuple[float, float]:
    """(training, uplink) energy in J assuming an even 1/k bandwidth share."""
    trans_e, _ = comm_energy(d, 1.0 / k, env)
    return training_energy(d), trans_e

def _scores(fleet, env, k, state):
    # Utility over battery- and sensitivity-normalized energies, so the
    # rotation equalizes drain relative to what each device can afford.
    scores = {}
    for d in fleet:
        train_e, trans_e = round_cost_estimate(d, env, k)
        denom = d.battery_capacity * d.sensitivity
        scores[d.id] = utility(
            int(state.selection_counts[d.id]),
            trans_e / denom,
            train_e / denom,
            state.efficiency_factor,
        )
    return scores


def select_clients(fleet, k: int, split: ClusterSplit, state: SelectionPolicyState,
                   env: ChannelEnv) -> list[int]:
    """Pick k clients: ceil(k/2) from the low cluster, floor(k/2) from the high.

    Within a cluster, devices are ranked by utility with lower id breaking
    ties; when one cluster runs out the remainder comes from the other.
    Selected devices' counters in `state` are incremented.
    """
    if not 1 <= k <= len(fleet):
        raise InvalidDeviceError(f"cannot select {k} of {len(fleet)} devices")
    scores = _scores(fleet, env, k, state)

    def ranked(ids):
        return sorted(ids, key=lambda i: (-scores[i], i))

    low_ranked, high_ranked = ranked(split.low), ranked(split.high)
    take_low = min(math.ceil(k / 2), len(low_ranked))
    take_high = min(k // 2, len(high_ranked))
    chosen = low_ranked[:take_low] + high_ranked[:take_high]
    short = k - len(chosen)
    if short > 0:
        leftovers = ranked(
            [i for i in low_ranked[take_low:] + high_ranked[take_high:]]
        )
        chosen += leftovers[:short]
    chosen = sorted(chosen)
    for i in chosen:
        state.selection_counts[i] += 1
    return chosen
