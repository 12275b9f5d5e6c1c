"""Hardware catalog and per-device latency/energy models for a simulated edge fleet.

Local training time scales with cycles-per-sample, iterations and dataset size
and inversely with clock frequency; training energy follows the effective
switched-capacitance model (quadratic in frequency); uplink cost follows the
Shannon rate over the allocated band fraction.  Core count multiplies both
training time and training energy in this model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InfeasibleTransmissionError,
    InvalidAllocationError,
    InvalidDeviceError,
)

# Fleet sampling constants.  All per-device quantities are drawn once at fleet
# creation from a seeded generator; frequency is redrawn every round.
KAPPA = 1e-28                    # effective switched capacitance, J*s^2/cycle
CYCLES_PER_SAMPLE = (5e4, 2e5)   # uniform range, cycles
LOCAL_ITERATIONS = 5
TX_POWER_W = (0.2, 1.0)          # uniform range
CHANNEL_GAIN_SQ = (0.1, 1.0)     # uniform range for g^2
BATTERY_J = (5e3, 5e4)           # uniform range
SENSITIVITY_MEAN = 0.5
SENSITIVITY_STD = 0.15
SENSITIVITY_MIN = 0.05           # redraw below this so energy ratios stay bounded
DEFAULT_BANDWIDTH_HZ = 10e6
DEFAULT_NOISE_W = 1e-3           # peak SNR ~1000 when g^2 * P = 1
_FREQ_FLOOR_HZ = 1e8             # effective minimum for profiles whose range starts at 0


@dataclass(frozen=True)
class HardwareProfile:
    """Clock-speed range and core count for one processor model."""

    name: str
    freq_min: float  # Hz
    freq_max: float  # Hz
    cores: int
    price_band: str = ""

    def __post_init__(self):
        if not 0 <= self.freq_min <= self.freq_max:
            raise InvalidDeviceError(
                f"profile {self.name!r}: need 0 <= freq_min <= freq_max"
            )
        if self.cores < 1:
            raise InvalidDeviceError(f"profile {self.name!r}: cores must be >= 1")


DEFAULT_PROFILES = (
    HardwareProfile("MediaTek Dimensity 9200", 1.8e9, 3.05e9, 8, "3000-5000"),
    HardwareProfile("Qualcomm Snapdragon 8 Gen 1", 1.8e9, 3.0e9, 8, "3000-5000"),
    HardwareProfile("Intel Core i5-1240P", 1.2e9, 4.4e9, 12, "8000-24000"),
    HardwareProfile("AMD Ryzen 7 5800U", 1.9e9, 4.4e9, 8, "8000-24000"),
    HardwareProfile("Intel Core i7-12700H", 1.7e9, 4.7e9, 14, "8000-24000"),
    HardwareProfile("Qualcomm Snapdragon 820A", 1.6e9, 2.15e9, 6, "100-500"),
    HardwareProfile("MediaTek MT2601", 0.0, 1.2e9, 2, "100-500"),
    HardwareProfile("Apple A15 Bionic", 0.0, 3.23e9, 6, "4000-8000"),
    HardwareProfile("Qualcomm Snapdragon 7c", 0.0, 2.5e9, 8, "4000-8000"),
)


@dataclass
class ChannelEnv:
    """Shared uplink parameters: total bandwidth, noise power, payload size."""

    bandwidth: float       # Hz
    noise_psd: float       # W, used directly as the noise term in the SNR ratio
    model_bits: float      # payload per upload, bits

    def __post_init__(self):
        if self.bandwidth <= 0 or self.noise_psd <= 0 or self.model_bits < 0:
            raise InvalidDeviceError("channel parameters must be positive")


@dataclass
class Device:
    """One simulated edge client with its hardware constants and energy ledger."""

    id: int
    profile: HardwareProfile
    kappa: float              # J*s^2/cycle
    cycles_per_sample: float  # cycles
    local_iterations: int
    dataset_size: int         # samples; set by the data partitioner
    cpu_freq: float           # Hz, redrawn every round
    cores: int
    tx_power: float           # W
    channel_gain: float       # dimensionless amplitude gain
    battery_capacity: float   # J
    sensitivity: float        # (0, 1]; lower means energy spend hurts more
    cumulative_energy: float = 0.0   # J consumed since the start of the run
    selection_count: int = 0

    def __post_init__(self):
        positive = (
            ("kappa", self.kappa),
            ("cycles_per_sample", self.cycles_per_sample),
            ("local_iterations", self.local_iterations),
            ("dataset_size", self.dataset_size),
            ("cpu_freq", self.cpu_freq),
            ("cores", self.cores),
            ("tx_power", self.tx_power),
            ("battery_capacity", self.battery_capacity),
        )
        for name, value in positive:
            if value <= 0:
                raise InvalidDeviceError(f"device {self.id}: {name} must be > 0")
        if self.channel_gain < 0:
            raise InvalidDeviceError(f"device {self.id}: channel_gain must be >= 0")
        if not 0 < self.sensitivity <= 1:
            raise InvalidDeviceError(f"device {self.id}: sensitivity must be in (0, 1]")
        if not self.profile.freq_min <= self.cpu_freq <= self.profile.freq_max:
            raise InvalidDeviceError(
                f"device {self.id}: cpu_freq outside the profile range"
            )


@dataclass
class EnergyReport:
    """Per-round cost of one device: energies, latencies and the relative ratio."""

    train_energy: float    # J
    trans_energy: float    # J
    train_latency: float   # s
    trans_latency: float   # s
    relative_energy: float # (train+trans) / (battery * sensitivity)


def training_latency(d: Device) -> float:
    """Seconds of local training: iterations * cycles/sample * samples * cores / freq."""
    if d.cpu_freq <= 0:
        raise InvalidDeviceError(f"device {d.id}: non-positive cpu frequency")
    return d.local_iterations * d.cycles_per_sample * d.dataset_size * d.cores / d.cpu_freq


def training_energy(d: Device) -> float:
    """Joules of local training: kappa * iterations * cycles * samples * freq^2 * cores."""
    return (
        d.kappa
        * d.local_iterations
        * d.cycles_per_sample
        * d.dataset_size
        * d.cpu_freq**2
        * d.cores
    )


def comm_rate(d: Device, beta: float, env: ChannelEnv) -> float:
    """Uplink rate in bit/s for a bandwidth fraction beta in (0, 1]."""
    if not 0 < beta <= 1:
        raise InvalidAllocationError(f"bandwidth fraction {beta} outside (0, 1]")
    snr = d.channel_gain**2 * d.tx_power / env.noise_psd
    return beta * env.bandwidth * math.log2(1.0 + snr)


def comm_energy(d: Device, beta: float, env: ChannelEnv) -> tuple[float, float]:
    """(energy J, latency s) of one upload at bandwidth fraction beta."""
    if env.model_bits == 0:
        return 0.0, 0.0
    rate = comm_rate(d, beta, env)
    if rate <= 0:
        raise InfeasibleTransmissionError(
            f"device {d.id}: zero uplink rate with {env.model_bits} bits pending"
        )
    latency = env.model_bits / rate
    return d.tx_power * latency, latency


def relative_energy(train_e: float, trans_e: float, d: Device, ledger: bool = False) -> float:
    """Energy normalized by battery capacity times sensitivity.

    With ledger=True the absolute energy is also added to the device's
    cumulative ledger.
    """
    denom = d.battery_capacity * d.sensitivity
    if denom <= 0:
        raise InvalidDeviceError(f"device {d.id}: battery*sensitivity must be > 0")
    total = train_e + trans_e
    if ledger:
        d.cumulative_energy += total
    return total / denom


def device_report(d: Device, beta: float, env: ChannelEnv, ledger: bool = False) -> EnergyReport:
    """Full cost report for one round at bandwidth fraction beta."""
    train_e = training_energy(d)
    train_t = training_latency(d)
    trans_e, trans_t = comm_energy(d, beta, env)
    rel = relative_energy(train_e, trans_e, d, ledger=ledger)
    return EnergyReport(train_e, trans_e, train_t, trans_t, rel)


def _truncated(rng, mean, std, low, high, low_open=False):
    """Normal draw truncated to [low, high] (or (low, high]) by redraw."""
    if std == 0:
        return float(min(max(mean, low), high))
    for _ in range(1000):
        x = rng.normal(mean, std)
        if (x > low if low_open else x >= low) and x <= high:
            return float(x)
    return float(min(max(mean, low), high))


def _freq_bounds(profile: HardwareProfile) -> tuple[float, float]:
    # Profiles with a 0 GHz floor still need a positive operating frequency.
    lo = profile.freq_min
    if lo <= 0:
        lo = min(_FREQ_FLOOR_HZ, profile.freq_max / 2)
    return lo, profile.freq_max


def _draw_freq(profile: HardwareProfile, rng) -> float:
    lo, hi = _freq_bounds(profile)
    mean = (profile.freq_min + profile.freq_max) / 2
    std = (profile.freq_max - profile.freq_min) / 6
    return _truncated(rng, mean, std, lo, hi)


def sample_fleet(profiles, n: int, seed) -> list[Device]:
    """Build a deterministic fleet of n devices, profiles assigned round-robin.

    Per-device constants (cycles/sample, transmit power, channel gain, battery,
    sensitivity) are drawn once; cpu frequency gets an initial draw and should
    be refreshed per round with resample_frequencies.  dataset_size starts at 1
    until a partitioner assigns real sizes.
    """
    profiles = list(profiles)
    if n < 1:
        raise InvalidDeviceError("fleet size must be >= 1")
    if not profiles:
        raise InvalidDeviceError("need at least one hardware profile")
    rng = np.random.default_rng(seed)
    fleet = []
    for i in range(n):
        profile = profiles[i % len(profiles)]
        fleet.append(
            Device(
                id=i,
                profile=profile,
                kappa=KAPPA,
                cycles_per_sample=float(rng.uniform(*CYCLES_PER_SAMPLE)),
                local_iterations=LOCAL_ITERATIONS,
                dataset_size=1,
                cpu_freq=_draw_freq(profile, rng),
                cores=profile.cores,
                tx_power=float(rng.uniform(*TX_POWER_W)),
                channel_gain=float(np.sqrt(rng.uniform(*CHANNEL_GAIN_SQ))),
                battery_capacity=float(rng.uniform(*BATTERY_J)),
                sensitivity=_truncated(
                    rng, SENSITIVITY_MEAN, SENSITIVITY_STD, SENSITIVITY_MIN, 1.0, low_open=True
                ),
            )
        )
    return fleet


def resample_frequencies(fleet, seed, round_index: int) -> None:
    """Redraw every device's cpu frequency; deterministic per (seed, round)."""
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    rng = np.random.default_rng(base + [int(round_index)])
    for d in fleet:
        d.cpu_freq = _draw_freq(d.profile, rng)


def load_profiles(path) -> list[HardwareProfile]:
    """Read hardware profiles from a JSON file.

    Schema: a list of records with keys "name" (str), "freq_min_hz" (number),
    "freq_max_hz" (number), "cores" (int) and optional "price_band" (str).
    """
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list) or not records:
        raise InvalidDeviceError(f"{path}: expected a non-empty JSON list")
    profiles = []
    for rec in records:
        try:
            profiles.append(
                HardwareProfile(
                    name=str(rec["name"]),
                    freq_min=float(rec["freq_min_hz"]),
                    freq_max=float(rec["freq_max_hz"]),
                    cores=int(rec["cores"]),
                    price_band=str(rec.get("price_band", "")),
                )
            )
        except KeyError as e:
            raise InvalidDeviceError(f"{path}: profile record missing key {e}") from e
    return profiles
