"""Experiment orchestration: policies, round loop, metrics and file outputs.

One experiment is fully determined by a RunConfig: it builds a seeded fleet
and data partition, then per round resamples device frequencies, picks k
clients under the configured policy, splits the uplink band over them,
trains and aggregates the model, and logs accuracy, energy, latency and the
energy-balance variance.  Five policies share the loop: uniform random,
loss-weighted sampling, random with proximal local training, the
cluster-and-utility heuristic, and the learned scheduler warm-started by
imitating the heuristic.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import agent as rl
from .allocation import AllocationProblem, solve_analytic, solve_sqp
from .devices import (
    DEFAULT_PROFILES,
    ChannelEnv,
    device_report,
    load_profiles,
    resample_frequencies,
    sample_fleet,
)
from .errors import ConfigError, ExperimentAborted, SolverFailure
from .fl import (
    ClientDataset,
    aggregate,
    evaluate,
    init_model,
    load_columnar,
    local_train,
    make_synthetic,
    partition_dirichlet,
    partition_iid,
)
from .selection import SelectionPolicyState, cluster_by_ideal_energy, select_clients

POLICIES = ("random", "loss_weighted", "proximal", "heuristic", "rl")
PARTITIONS = ("iid", "dirichlet")
SOLVERS = ("analytic", "sqp")

# Seed-stream tags; per-round frequency draws use (seed, round) directly and
# stay below these by construction.
_STREAM_DATA = 1_000_001
_STREAM_PARTITION = 1_000_002
_STREAM_FLEET = 1_000_003
_STREAM_POLICY = 1_000_004
_STREAM_AGENT = 1_000_005
_STREAM_OFFLINE = 1_000_006


@dataclass
class RunConfig:
    """Complete description of one experiment; every default is overridable."""

    seed: int = 0
    rounds: int = 100
    clients: int = 100
    per_round: int = 10
    policy: str = "random"
    # channel
    bandwidth_hz: float = 10e6
    noise_psd_w: float = 1e-3
    model_bits: float | None = None      # default: 32 bits per model parameter
    time_limit_s: float = 1e15
    solver: str = "analytic"
    profiles_path: str | None = None
    # data
    partition: str = "iid"
    concentration: float = 0.5
    samples: int = 4000
    test_samples: int = 1000
    dims: int = 60
    classes: int = 6
    separation: float = 6.5
    data_path: str | None = None
    # local training
    local_iterations: int = 5
    learning_rate: float = 0.1
    prox_mu: float = 0.1
    # heuristic
    heuristic_alpha: float = 0.9
    # reward shaping; None thresholds are calibrated from a short random-policy
    # prefix run with the same seed
    latency_threshold_s: float | None = None
    energy_threshold_j: float | None = None
    variance_threshold: float | None = None
    latency_exp: float = 1.0
    energy_exp: float = 1.0
    variance_exp: float = 1.0
    calibration_rounds: int = 10
    calibration_factor: float = 1.5
    target_accuracy: float = 0.9
    # learned scheduler
    discount: float = 0.9
    eps_start: float = 0.2
    eps_end: float = 0.01
    target_sync_every: int = 5
    replay_capacity: int = 2000
    batch_size: int = 32
    agent_lr: float = 0.0005
    q_value_scale: float = 0.02
    pretrain_rounds: int = 625
    pretrain_episode_length: object = 5
    pretrain_start_picks: int = 30
    pretrain_epochs: int = 250
    pretrain_lr: float = 0.005
    pretrain_margin: float = 1.0
    imitation_holdout: float = 0.2

    def validate(self) -> None:
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if not 1 <= self.per_round <= self.clients:
            raise ConfigError("need 1 <= per_round <= clients")
        if self.time_limit_s <= 0:
            raise ConfigError("time_limit_s must be > 0")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; pick one of {POLICIES}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.partition!r}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.target_sync_every < 1:
            raise ConfigError("target_sync_every must be >= 1")
        if self.batch_size < 1 or self.batch_size > self.replay_capacity:
            raise ConfigError("need 1 <= batch_size <= replay_capacity")
        if self.calibration_rounds < 1:
            raise ConfigError("calibration_rounds must be >= 1")
        lengths = self.pretrain_episode_length
        if isinstance(lengths, (int, float)):
            lengths = [lengths]
        if lengths is not None and any(int(v) < 1 for v in lengths):
            raise ConfigError("pretrain episode lengths must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


@dataclass
class RoundMetrics:
    """Everything logged for one round."""

    round: int
    accuracy: float
    loss: float
    energy_j: float
    latency_s: float
    variance: float
    selected: tuple
    betas: np.ndarray
    relative_energies: np.ndarray | None = None  # cumulative per-device snapshot


@dataclass
class RunSummary:
    """End-of-run roll-up; every field is recomputable from the round log."""

    final_accuracy: float
    rounds_to_target: int | None
    total_energy_j: float
    energy_variance: float
    max_relative_energy: float
    total_latency_s: float
    feasible: bool
    extras: dict = field(default_factory=dict)


@dataclass
class _Setup:
    fleet: list
    env: ChannelEnv
    shards: list
    test: ClientDataset
    model: object
    initial_accuracy: float
    initial_loss: float


def _resolve_profiles(cfg: RunConfig):
    if cfg.profiles_path:
        return load_profiles(cfg.profiles_path)
    return DEFAULT_PROFILES


def _build(cfg: RunConfig) -> _Setup:
    if cfg.data_path:
        full = load_columnar(cfg.data_path)
        if full.size <= cfg.test_samples:
            raise ConfigError("data file smaller than test_samples")
        pool = ClientDataset(full.features[: -cfg.test_samples],
                             full.labels[: -cfg.test_samples])
        test = ClientDataset(full.features[-cfg.test_samples :],
                             full.labels[-cfg.test_samples :])
        dims = pool.features.shape[1]
        classes = int(max(pool.labels.max(), test.labels.max())) + 1
    else:
        full = make_synthetic(cfg.samples + cfg.test_samples, cfg.dims, cfg.classes,
                              cfg.separation, [cfg.seed, _STREAM_DATA])
        pool = ClientDataset(full.features[: cfg.samples], full.labels[: cfg.samples])
        test = ClientDataset(full.features[cfg.samples :], full.labels[cfg.samples :])
        dims, classes = cfg.dims, cfg.classes
    if cfg.partition == "iid":
        shards = partition_iid(pool, cfg.clients, [cfg.seed, _STREAM_PARTITION])
    else:
        shards = partition_dirichlet(pool, cfg.clients, cfg.concentration,
                                     [cfg.seed, _STREAM_PARTITION])
    model = init_model(dims, classes)
    bits = cfg.model_bits if cfg.model_bits else 32.0 * model.parameter_count
    env = ChannelEnv(cfg.bandwidth_hz, cfg.noise_psd_w, float(bits))
    fleet = sample_fleet(_resolve_profiles(cfg), cfg.clients, [cfg.seed, _STREAM_FLEET])
    for d, shard in zip(fleet, shards):
        d.dataset_size = shard.size
        d.local_iterations = cfg.local_iterations
    acc0, loss0 = evaluate(model, test)
    return _Setup(fleet, env, shards, test, model, acc0, loss0)


def _epsilon(cfg: RunConfig, round_index: int) -> float:
    half = max(1, cfg.rounds // 2)
    t = min(1.0, (round_index - 1) / half)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t


def _solve_allocation(cfg: RunConfig, fleet, selected, env):
    problem = AllocationProblem.from_devices([fleet[i] for i in selected], env)
    if cfg.solver == "sqp":
        return problem, solve_sqp(problem)
    return problem, solve_analytic(problem)


def _reward_params(cfg: RunConfig) -> rl.RewardParams:
    missing = (cfg.latency_threshold_s is None or cfg.energy_threshold_j is None
               or cfg.variance_threshold is None)
    lat, ene, var = cfg.latency_threshold_s, cfg.energy_threshold_j, cfg.variance_threshold
    if missing:
        probe = replace(cfg, policy="random", rounds=cfg.calibration_rounds,
                        latency_threshold_s=1.0, energy_threshold_j=1.0,
                        variance_threshold=1.0)
        _, log = run_experiment(probe)
        factor = cfg.calibration_factor
        lat = lat if lat is not None else factor * float(np.median([m.latency_s for m in log]))
        ene = ene if ene is not None else factor * float(np.median([m.energy_j for m in log]))
        var = var if var is not None else factor * float(np.median([m.variance for m in log]))
    return rl.RewardParams(lat, ene, var, cfg.latency_exp, cfg.energy_exp, cfg.variance_exp)


def generate_heuristic_trajectories(fleet, env, k: int, rounds: int, alpha: float,
                                    seed, loss_fill: float = 0.0, scaler=None,
                                    episode_length=15, start_picks: int = 30):
    """Roll the balancing heuristic on fleet copies, recording (state, action).

    Energies accrue from the cost model at an even 1/k share, so no actual
    training is involved.  The rollout restarts every episode_length rounds
    from randomized ledgers: each device begins an episode as if it had
    already been picked uniform-[0, start_picks] times.  Decorrelating the
    cumulative-energy feature from device quality this way is what lets a
    learner pick up the rotation (devices with a large spent budget must
    rank below otherwise-equal peers) instead of memorizing a static
    favourite set.  Returns the records plus the running scaler that
    standardized them.
    """
    base_seed = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    if episode_length is None:
        lengths = [rounds]
    elif isinstance(episode_length, (int, float)):
        lengths = [int(episode_length)]
    else:
        lengths = [int(v) for v in episode_length]
    scaler = scaler if scaler is not None else rl.RunningScaler()
    records = []
    episode = 0
    while len(records) < rounds:
        sim = copy.deepcopy(list(fleet))
        counts = SelectionPolicyState.fresh(len(sim), alpha)
        split = cluster_by_ideal_energy(sim, env)
        rng = np.random.default_rng(base_seed + [episode])
        if start_picks > 0:
            resample_frequencies(sim, base_seed + [episode], 0)
            prior = rng.integers(0, start_picks + 1, size=len(sim))
            counts.selection_counts += prior
            for d, picks in zip(sim, prior):
                rep = device_report(d, 1.0 / k, env)
                d.cumulative_energy = float(picks) * (rep.train_energy + rep.trans_energy)
                d.selection_count = int(picks)
        length = lengths[episode % len(lengths)]
        for h in range(1, min(length, rounds - len(records)) + 1):
            resample_frequencies(sim, base_seed + [episode], h)
            raw = rl.states_matrix(rl.build_state(sim, env, k, None, None, loss_fill))
            scaler.update(raw)
            standardized = scaler.transform(raw)
            chosen = select_clients(sim, k, split, counts, env)
            for i in chosen:
                device_report(sim[i], 1.0 / k, env, ledger=True)
                sim[i].selection_count += 1
            records.append((standardized, rl.ActionVector.from_indices(len(sim), chosen)))
        episode += 1
    return records, scaler


def run_experiment(cfg: RunConfig):
    """Run one experiment; returns (RunSummary, [RoundMetrics])."""
    cfg.validate()
    setup = _build(cfg)
    fleet, env, shards, test = setup.fleet, setup.env, setup.shards, setup.test
    n, k = cfg.clients, cfg.per_round
    rng_policy = np.random.default_rng([cfg.seed, _STREAM_POLICY])
    rng_agent = np.random.default_rng([cfg.seed, _STREAM_AGENT])

    heuristic_state = SelectionPolicyState.fresh(n, cfg.heuristic_alpha)
    split = cluster_by_ideal_energy(fleet, env)

    main_net = target_net = buffer = scaler = params = None
    pending = None
    extras = {}
    if cfg.policy == "rl":
        params = _reward_params(cfg)
        extras["reward_thresholds"] = {
            "latency_s": params.latency_threshold,
            "energy_j": params.energy_threshold,
            "variance": params.variance_threshold,
        }
        main_net = rl.QNetwork(seed=rng_agent)
        loss_fill = math.log(max(2, setup.model.classes))
        trajectories, scaler = generate_heuristic_trajectories(
            fleet, env, k, cfg.pretrain_rounds, cfg.heuristic_alpha,
            [cfg.seed, _STREAM_OFFLINE], loss_fill,
            episode_length=cfg.pretrain_episode_length,
            start_picks=cfg.pretrain_start_picks)
        if cfg.pretrain_rounds > 0 and cfg.pretrain_epochs > 0:
            extras["imitation_agreement"] = rl.pretrain_imitation(
                main_net, trajectories, cfg.pretrain_epochs, cfg.pretrain_lr,
                margin=cfg.pretrain_margin, holdout_fraction=cfg.imitation_holdout)
            # Ranking training leaves scores at an arbitrary magnitude; bring
            # them onto the reward scale before value learning starts so the
            # first TD steps refine the warm start instead of erasing it.
            rl.rescale_scores(main_net,
                              np.vstack([s for s, _ in trajectories[-20:]]),
                              cfg.q_value_scale)
        target_net = main_net.clone()
        buffer = rl.ReplayBuffer(cfg.replay_capacity)
        if scaler is None:
            scaler = rl.RunningScaler()

    model = setup.model
    prev_acc = setup.initial_accuracy
    global_loss = setup.initial_loss
    reports: dict = {}
    losses: dict = {}
    log: list[RoundMetrics] = []
    cumulative_latency = 0.0

    for h in range(1, cfg.rounds + 1):
        resample_frequencies(fleet, cfg.seed, h)
        raw_states = rl.states_matrix(rl.build_state(fleet, env, k, reports, losses,
                                                     global_loss))
        action = None
        standardized = None
        if cfg.policy == "random" or cfg.policy == "proximal":
            selected = sorted(rng_policy.choice(n, size=k, replace=False).tolist())
        elif cfg.policy == "loss_weighted":
            weights = np.array([losses.get(i, global_loss) for i in range(n)])
            weights = np.maximum(weights, 0.0) + 1e-12
            probs = weights / weights.sum()
            selected = sorted(rng_policy.choice(n, size=k, replace=False, p=probs).tolist())
        elif cfg.policy == "heuristic":
            selected = select_clients(fleet, k, split, heuristic_state, env)
        else:  # rl
            scaler.update(raw_states)
            standardized = scaler.transform(raw_states)
            scores = rl.q_scores(main_net, standardized)
            action = rl.select_action(scores, k, _epsilon(cfg, h), rng_policy)
            selected = action.indices.tolist()

        try:
            _, allocation = _solve_allocation(cfg, fleet, selected, env)
        except SolverFailure as e:
            raise ExperimentAborted(f"allocation failed in round {h}: {e}",
                                    partial_log=log) from e

        locals_ = []
        for i in selected:
            prox = cfg.prox_mu if cfg.policy == "proximal" else 0.0
            trained, local_loss = local_train(model, shards[i],
                                              fleet[i].local_iterations,
                                              cfg.learning_rate, prox_mu=prox,
                                              anchor=model)
            locals_.append(trained)
            losses[i] = local_loss
        model = aggregate(locals_, [shards[i].size for i in selected])
        accuracy, global_loss = evaluate(model, test)

        reports = {}
        round_energy = 0.0
        round_latency = 0.0
        for i, beta in zip(selected, allocation.betas):
            rep = device_report(fleet[i], float(beta), env, ledger=True)
            fleet[i].selection_count += 1
            reports[i] = rep
            round_energy += rep.train_energy + rep.trans_energy
            round_latency = max(round_latency, rep.train_latency + rep.trans_latency)
        cumulative_latency += round_latency
        ledger = np.array([d.cumulative_energy / (d.battery_capacity * d.sensitivity)
                           for d in fleet])
        variance = float(np.var(ledger))

        if cfg.policy == "rl":
            gain = accuracy - prev_acc
            round_reward = rl.reward(gain, round_latency, round_energy, variance, params)
            if pending is not None:
                buffer.push(rl.Transition(pending[0], pending[1], pending[2],
                                          standardized))
                if len(buffer) >= cfg.batch_size:
                    rl.td_update(main_net, target_net,
                                 buffer.sample(cfg.batch_size, rng_agent),
                                 cfg.discount, cfg.agent_lr)
            rl.sync_target(main_net, target_net, h, cfg.target_sync_every)
            pending = (standardized, action, round_reward)

        log.append(RoundMetrics(h, accuracy, global_loss, round_energy, round_latency,
                                variance, tuple(selected),
                                np.asarray(allocation.betas, dtype=float), ledger))
        prev_acc = accuracy
        if cumulative_latency > cfg.time_limit_s:
            break

    if not log:
        summary = RunSummary(setup.initial_accuracy, None, 0.0, 0.0, 0.0, 0.0, True,
                             extras)
        return summary, log
    summary = compute_summary(log, cfg.target_accuracy, cfg.time_limit_s)
    summary.extras.update(extras)
    return summary, log


def compute_summary(log, target_accuracy: float, time_limit_s: float = math.inf) -> RunSummary:
    """Roll a round log up into the end-of-run metrics."""
    if not log:
        raise ConfigError("cannot summarize an empty round log")
    rounds_to_target = None
    for m in log:
        if m.accuracy >= target_accuracy:
            rounds_to_target = m.round
            break
    final = log[-1]
    total_latency = float(sum(m.latency_s for m in log))
    return RunSummary(
        final_accuracy=final.accuracy,
        rounds_to_target=rounds_to_target,
        total_energy_j=float(sum(m.energy_j for m in log)),
        energy_variance=float(np.var(final.relative_energies)),
        max_relative_energy=float(np.max(final.relative_energies)),
        total_latency_s=total_latency,
        feasible=total_latency <= time_limit_s,
    )


CSV_HEADER = ("round", "acc", "loss", "energy_J", "latency_s", "variance",
              "selected_ids", "betas")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _round9(obj):
    if isinstance(obj, float):
        return float(_fmt(obj))
    if isinstance(obj, dict):
        return {key: _round9(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round9(value) for value in obj]
    return obj


def emit_outputs(summary: RunSummary, log, out_dir, config: dict | None = None):
    """Write rounds.csv and summary.json under out_dir; returns their paths.

    Numbers are serialized with 9 significant digits, so identical runs emit
    byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "rounds.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for m in log:
            writer.writerow([
                m.round,
                _fmt(m.accuracy),
                _fmt(m.loss),
                _fmt(m.energy_j),
                _fmt(m.latency_s),
                _fmt(m.variance),
                ";".join(str(i) for i in m.selected),
                ";".join(_fmt(b) for b in m.betas),
            ])
    json_path = out / "summary.json"
    payload = {
        "config": _round9(config) if config is not None else None,
        "final_accuracy": summary.final_accuracy,
        "rounds_to_target": summary.rounds_to_target,
        "total_energy_j": summary.total_energy_j,
        "energy_variance": summary.energy_variance,
        "max_relative_energy": summary.max_relative_energy,
        "total_latency_s": summary.total_latency_s,
        "feasible": summary.feasible,
        "extras": summary.extras,
    }
    json_path.write_text(json.dumps(_round9(payload), indent=2) + "\n")
    return csv_path, json_path


def read_rounds_csv(path) -> list[RoundMetrics]:
    """Parse rounds.csv back into RoundMetrics (without the ledger snapshots)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}")
        for rec in reader:
            rows.append(RoundMetrics(
                round=int(rec[0]),
                accuracy=float(rec[1]),
                loss=float(rec[2]),
                energy_j=float(rec[3]),
                latency_s=float(rec[4]),
                variance=float(rec[5]),
                selected=tuple(int(v) for v in rec[6].split(";") if v != ""),
                betas=np.array([float(v) for v in rec[7].split(";") if v != ""]),
            ))
    return rows


def audit_round_log(cfg: RunConfig, log, rel_tol: float = 1e-6) -> None:
    """Recompute each logged round's physics from the config and cross-check.

    Verifies per round: bandwidth fractions lie in (0, 1] and sum to at most
    1 + 1e-9; logged latency equals the max of training plus upload latency
    over the selected devices; logged energy equals the selected devices'
    training plus upload energy.  Raises ConfigError on the first mismatch.
    """
    setup = _build(cfg)
    fleet, env = setup.fleet, setup.env
    for m in log:
        betas = np.asarray(m.betas, dtype=float)
        if np.any(betas <= 0) or np.any(betas > 1):
            raise ConfigError(f"round {m.round}: beta outside (0, 1]")
        if betas.sum() > 1 + 1e-9:
            raise ConfigError(f"round {m.round}: betas sum to {betas.sum()}")
        resample_frequencies(fleet, cfg.seed, m.round)
        energy = 0.0
        latency = 0.0
        for i, beta in zip(m.selected, betas):
            rep = device_report(fleet[i], float(beta), env)
            energy += rep.train_energy + rep.trans_energy
            latency = max(latency, rep.train_latency + rep.trans_latency)
        if abs(energy - m.energy_j) > rel_tol * max(energy, 1e-300):
            raise ConfigError(f"round {m.round}: energy mismatch "
                              f"{energy} vs {m.energy_j}")
        if abs(latency - m.latency_s) > rel_tol * max(latency, 1e-300):
            raise ConfigError(f"round {m.round}: latency mismatch "
                              f"{latency} vs {m.latency_s}")
