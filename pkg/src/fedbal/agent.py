"""Learned per-device scheduler: shared scoring network, replay and pretraining.

Each device is described by 7 features (latencies, per-round energies, total
energy so far, local loss, dataset size).  A small shared multilayer
perceptron maps one standardized feature row to a scalar score; the k
highest-scoring devices form the round's action.  Temporal-difference
updates run against a periodically synced target copy of the network, and
the network can be warm-started by imitating a reference selection policy.

Energy features are expressed relative to each device's battery capacity and
sensitivity, the same normalization the balancing objective uses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .devices import ChannelEnv, Device, EnergyReport, device_report
from .errors import FedbalError

NUM_FEATURES = 7


@dataclass
class DeviceState:
    """One device's observation: latencies (s), normalized energies, loss, size."""

    train_latency: float
    trans_latency: float
    train_energy: float
    trans_energy: float
    total_energy: float
    loss: float
    data_size: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.train_latency,
                self.trans_latency,
                self.train_energy,
                self.trans_energy,
                self.total_energy,
                self.loss,
                self.data_size,
            ],
            dtype=float,
        )


def states_matrix(states) -> np.ndarray:
    """Stack DeviceStates into an (n, 7) float matrix."""
    m = np.array([s.as_vector() for s in states], dtype=float)
    if not np.all(np.isfinite(m)):
        raise FedbalError("device state features must be finite")
    return m


def build_state(fleet, env: ChannelEnv, k: int, reports=None, losses=None,
                fallback_loss: float = 0.0) -> list[DeviceState]:
    """Observations for the whole fleet.

    Devices with a report from the previous round use those measured values;
    everyone else gets the cost model's prediction at an even 1/k bandwidth
    share.  `losses` maps device id to its last known local loss; devices
    without one use fallback_loss (typically the global loss).
    """
    reports = reports or {}
    losses = losses or {}
    states = []
    for d in fleet:
        rep = reports.get(d.id)
        if rep is None:
            rep = device_report(d, 1.0 / k, env)
        denom = d.battery_capacity * d.sensitivity
        states.append(
            DeviceState(
                train_latency=rep.train_latency,
                trans_latency=rep.trans_latency,
                train_energy=rep.train_energy / denom,
                trans_energy=rep.trans_energy / denom,
                total_energy=d.cumulative_energy / denom,
                loss=losses.get(d.id, fallback_loss),
                data_size=float(d.dataset_size),
            )
        )
    return states


class RunningScaler:
    """Per-feature running mean/variance standardizer (batched Welford)."""

    def __init__(self, num_features: int = NUM_FEATURES):
        self.count = 0.0
        self.mean = np.zeros(num_features)
        self.m2 = np.zeros(num_features)

    def update(self, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=float)
        b = len(matrix)
        if b == 0:
            return
        batch_mean = matrix.mean(axis=0)
        batch_m2 = ((matrix - batch_mean) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = float(b), batch_mean, batch_m2
            return
        delta = batch_mean - self.mean
        total = self.count + b
        self.mean = self.mean + delta * (b / total)
        self.m2 = self.m2 + batch_m2 + delta**2 * (self.count * b / total)
        self.count = total

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        if self.count == 0:
            raise FedbalError("scaler has seen no data")
        std = np.sqrt(self.m2 / self.count)
        # A feature that never varied carries no scale information; dividing
        # by its epsilon-floored std would blow up the first real deviation.
        divisor = np.where(std > 1e-8 * (1.0 + np.abs(self.mean)), std, 1.0)
        return (np.asarray(matrix, dtype=float) - self.mean) / divisor


class QNetwork:
    """Multilayer perceptron scoring one feature row to one scalar.

    tanh hidden activations, linear output, weights initialized uniformly in
    +/- 1/sqrt(fan_in).  The same network is applied to every device row.
    """

    def __init__(self, layer_sizes=(NUM_FEATURES, 32, 32, 1), seed=None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=float)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = np.tanh(h)
        return h[:, 0]

    def _forward_cached(self, X):
        h = np.asarray(X, dtype=float)
        activations = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = np.tanh(h)
            activations.append(h)
        return h[:, 0], activations

    def gradients(self, X, dscores):
        """Parameter gradients for d(loss)/d(score) per row; returns (dWs, dbs)."""
        _, acts = self._forward_cached(X)
        dWs = [np.zeros_like(W) for W in self.weights]
        dbs = [np.zeros_like(b) for b in self.biases]
        delta = np.asarray(dscores, dtype=float)[:, None]
        for i in range(len(self.weights) - 1, -1, -1):
            dWs[i] = acts[i].T @ delta
            dbs[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return dWs, dbs

    def step(self, dWs, dbs, lr: float) -> None:
        for W, dW in zip(self.weights, dWs):
            W -= lr * dW
        for b, db in zip(self.biases, dbs):
            b -= lr * db

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [W.ravel() for W in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.get_params().size:
            raise FedbalError("parameter vector has the wrong length")
        pos = 0
        for W in self.weights:
            W[...] = flat[pos : pos + W.size].reshape(W.shape)
            pos += W.size
        for b in self.biases:
            b[...] = flat[pos : pos + b.size]
            pos += b.size

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.layer_sizes, seed=0)
        twin.set_params(self.get_params().copy())
        return twin


def q_scores(net: QNetwork, states: np.ndarray) -> np.ndarray:
    """One score per standardized device row."""
    return net.forward(states)


@dataclass
class ActionVector:
    """Binary participation vector with exactly k ones."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if self.bits.ndim != 1 or not np.all((self.bits == 0) | (self.bits == 1)):
            raise FedbalError("action bits must be a flat 0/1 vector")

    @property
    def k(self) -> int:
        return int(self.bits.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @classmethod
    def from_indices(cls, n: int, indices) -> "ActionVector":
        bits = np.zeros(n, dtype=np.int8)
        bits[np.asarray(indices, dtype=int)] = 1
        return cls(bits)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, lower index winning ties."""
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def select_action(scores: np.ndarray, k: int, epsilon: float, rng) -> ActionVector:
    """Greedy top-k by score, or k uniform devices with probability epsilon."""
    n = len(scores)
    if k > n:
        raise FedbalError(f"cannot pick {k} of {n} devices")
    if not 0 <= epsilon <= 1:
        raise FedbalError("epsilon must be in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        chosen = rng.choice(n, size=k, replace=False)
    else:
        chosen = top_k(scores, k)
    return ActionVector.from_indices(n, chosen)


@dataclass
class RewardParams:
    """Penalty thresholds and tolerance exponents for the round reward."""

    latency_threshold: float   # s
    energy_threshold: float    # J
    variance_threshold: float  # (relative energy)^2
    latency_exp: float = 1.0
    energy_exp: float = 1.0
    variance_exp: float = 1.0

    def __post_init__(self):
        if min(self.latency_threshold, self.energy_threshold, self.variance_threshold) <= 0:
            raise FedbalError("penalty thresholds must be > 0")
        if min(self.latency_exp, self.energy_exp, self.variance_exp) < 0:
            raise FedbalError("tolerance exponents must be >= 0")


def _penalty(threshold: float, measured: float, exponent: float) -> float:
    if measured <= 0:
        raise FedbalError("measured round values must be > 0")
    if measured <= threshold:
        return 1.0
    return (threshold / measured) ** exponent


def reward(delta_acc: float, latency: float, energy: float, variance: float,
           p: RewardParams) -> float:
    """Accuracy gain scaled down when latency/energy/variance exceed thresholds.

    Each factor is 1 while the measured value stays at or under its threshold
    and (threshold/measured)^exponent < 1 above it.  A negative accuracy gain
    is divided by the penalties instead, so constraint violations never make
    a bad round look better.
    """
    factor = (
        _penalty(p.latency_threshold, latency, p.latency_exp)
        * _penalty(p.energy_threshold, energy, p.energy_exp)
        * _penalty(p.variance_threshold, variance, p.variance_exp)
    )
    return delta_acc * factor if delta_acc >= 0 else delta_acc / factor


@dataclass
class Transition:
    """(state, action, reward, next state) for the replay buffer."""

    state: np.ndarray
    action: ActionVector
    reward: float
    next_state: np.ndarray

    def __post_init__(self):
        n = len(self.action.bits)
        if len(self.state) != n or len(self.next_state) != n:
            raise FedbalError("state and action sizes disagree")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform no-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise FedbalError("capacity must be >= 1")
        self.capacity = capacity
        self._items = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng) -> list[Transition]:
        if not self._items:
            raise FedbalError("cannot sample from an empty buffer")
        if batch_size > len(self._items):
            raise FedbalError("batch larger than the buffer contents")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def td_update(main: QNetwork, target: QNetwork, batch, discount: float, lr: float) -> float:
    """One gradient step on the mean squared TD error; returns the pre-step loss.

    Per transition the predicted value is the sum of the main network's scores
    over the acted-on devices, and the bootstrap target is the reward plus
    discount times the target network's top-k score sum on the next state.
    """
    if not batch:
        raise FedbalError("batch must be non-empty")
    preds = np.empty(len(batch))
    targets = np.empty(len(batch))
    rows = []
    row_owner = []
    for t, tr in enumerate(batch):
        sel = tr.action.indices
        preds[t] = main.forward(tr.state[sel]).sum()
        nxt = target.forward(tr.next_state)
        best = top_k(nxt, tr.action.k)
        targets[t] = tr.reward + discount * nxt[best].sum()
        rows.append(tr.state[sel])
        row_owner.extend([t] * len(sel))
    errors = preds - targets
    loss = float(np.mean(errors**2))
    dscores = (2.0 / len(batch)) * errors[np.asarray(row_owner)]
    dWs, dbs = main.gradients(np.vstack(rows), dscores)
    main.step(dWs, dbs, lr)
    return loss


def sync_target(main: QNetwork, target: QNetwork, round_index: int, every: int) -> bool:
    """Copy main parameters into target every `every` rounds; returns True on sync."""
    if every < 1:
        raise FedbalError("sync period must be >= 1")
    if round_index % every == 0:
        target.set_params(main.get_params().copy())
        return True
    return False


def imitation_loss(net: QNetwork, states: np.ndarray, masks: np.ndarray,
                   margin: float) -> tuple[float, np.ndarray]:
    """Pairwise ranking hinge over records; also returns d(loss)/d(scores).

    states is (records, n, features), masks (records, n) with ones on the
    chosen devices.  Every (chosen, unchosen) pair whose score gap falls short
    of `margin` contributes to the loss, which is averaged per pair within a
    record and then over records.
    """
    r, n, f = states.shape
    scores = net.forward(states.reshape(r * n, f)).reshape(r, n)
    chosen = masks.astype(bool)
    loss = 0.0
    dscores = np.zeros_like(scores)
    for t in range(r):
        q_c = scores[t, chosen[t]]
        q_u = scores[t, ~chosen[t]]
        if q_c.size == 0 or q_u.size == 0:
            continue
        gap = margin - (q_c[:, None] - q_u[None, :])
        active = gap > 0
        pairs = q_c.size * q_u.size
        loss += float(gap[active].sum()) / pairs
        dscores[t, chosen[t]] -= active.sum(axis=1) / pairs
        dscores[t, ~chosen[t]] += active.sum(axis=0) / pairs
    return loss / r, (dscores / r).reshape(r * n)


def _hinge_step_gradients(net: QNetwork, states: np.ndarray, masks: np.ndarray,
                          margin: float):
    """Pairwise hinge loss plus parameter gradients for one record batch."""
    r, n, f = states.shape
    flat = states.reshape(r * n, f)
    loss, dscores = imitation_loss(net, states, masks, margin)
    rows = np.flatnonzero(dscores)
    if rows.size == 0:
        zero = ([np.zeros_like(W) for W in net.weights],
                [np.zeros_like(b) for b in net.biases])
        return loss, zero
    return loss, net.gradients(flat[rows], dscores[rows])


def topk_agreement(net: QNetwork, trajectories) -> float:
    """Mean overlap fraction between the network's top-k and reference actions."""
    if not trajectories:
        raise FedbalError("need at least one trajectory record")
    overlaps = []
    for state, action in trajectories:
        k = action.k
        picked = set(top_k(net.forward(state), k).tolist())
        overlaps.append(len(picked & set(action.indices.tolist())) / k)
    return float(np.mean(overlaps))


class _Adam:
    """Adam updates over a QNetwork's parameter lists."""

    def __init__(self, net: QNetwork, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m_w = [np.zeros_like(W) for W in net.weights]
        self.v_w = [np.zeros_like(W) for W in net.weights]
        self.m_b = [np.zeros_like(b) for b in net.biases]
        self.v_b = [np.zeros_like(b) for b in net.biases]
        self.t = 0

    def step(self, net: QNetwork, dWs, dbs, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i in range(len(net.weights)):
            self.m_w[i] = self.beta1 * self.m_w[i] + (1 - self.beta1) * dWs[i]
            self.v_w[i] = self.beta2 * self.v_w[i] + (1 - self.beta2) * dWs[i] ** 2
            self.m_b[i] = self.beta1 * self.m_b[i] + (1 - self.beta1) * dbs[i]
            self.v_b[i] = self.beta2 * self.v_b[i] + (1 - self.beta2) * dbs[i] ** 2
            net.weights[i] -= lr * (self.m_w[i] / c1) / (np.sqrt(self.v_w[i] / c2) + self.eps)
            net.biases[i] -= lr * (self.m_b[i] / c1) / (np.sqrt(self.v_b[i] / c2) + self.eps)


def pretrain_imitation(net: QNetwork, trajectories, epochs: int, lr: float,
                       margin: float = 0.5, holdout_fraction: float = 0.2,
                       batch_size: int = 32, seed: int = 0) -> float:
    """Fit the network to rank a reference policy's picks above its leftovers.

    trajectories is a sequence of (standardized state matrix, ActionVector)
    records; the trailing holdout_fraction of them is kept out of training and
    used for the returned top-k agreement rate.  Training runs Adam over
    shuffled record mini-batches with the learning rate decayed linearly to
    10%, which keeps the worst-pair hinge from oscillating late in training.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise FedbalError("need at least one trajectory record")
    n_hold = int(len(trajectories) * holdout_fraction)
    train = trajectories[: len(trajectories) - n_hold]
    hold = trajectories[len(trajectories) - n_hold :] or train
    states = np.stack([s for s, _ in train])
    masks = np.stack([a.bits for _, a in train])
    rng = np.random.default_rng(seed)
    opt = _Adam(net)
    for epoch in range(epochs):
        current_lr = lr * (1.0 - 0.9 * epoch / max(1, epochs - 1))
        order = rng.permutation(len(train))
        for lo in range(0, len(order), batch_size):
            chunk = order[lo : lo + batch_size]
            _, (dWs, dbs) = _hinge_step_gradients(net, states[chunk], masks[chunk], margin)
            opt.step(net, dWs, dbs, current_lr)
    return topk_agreement(net, hold)


def rescale_scores(net: QNetwork, states: np.ndarray, target_std: float) -> float:
    """Scale the output layer so scores over `states` have roughly target_std.

    Rescaling the final linear layer multiplies every score by the same
    factor, so rankings are untouched; it matters when a ranking-pretrained
    network hands over to value learning, whose targets live on the reward
    scale.  Returns the factor applied.
    """
    if target_std <= 0:
        raise FedbalError("target_std must be > 0")
    spread = float(np.std(net.forward(states)))
    if spread <= 0:
        return 1.0
    factor = target_std / spread
    net.weights[-1] *= factor
    net.biases[-1] *= factor
    return factor


def save_trajectories(path, trajectories) -> None:
    """Write (state matrix, action) records as one JSON object per line."""
    with open(path, "w") as fh:
        for state, action in trajectories:
            fh.write(
                json.dumps(
                    {
                        "state": np.asarray(state, dtype=float).tolist(),
                        "action": action.bits.astype(int).tolist(),
                    }
                )
                + "\n"
            )


def load_trajectories(path) -> list[tuple[np.ndarray, ActionVector]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            (np.asarray(obj["state"], dtype=float), ActionVector(np.asarray(obj["action"])))
        )
    return records


def save_checkpoint(net: QNetwork, path) -> None:
    """Store the network as a JSON shape header plus one parameter per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"layer_sizes": list(net.layer_sizes)}) + "\n")
        for value in net.get_params():
            fh.write(f"{float(value)!r}\n")


def load_checkpoint(path) -> QNetwork:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    net = QNetwork(tuple(header["layer_sizes"]), seed=0)
    net.set_params(np.array([float(v) for v in lines[1:] if v.strip()]))
    return net
