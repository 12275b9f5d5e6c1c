import json
import math

import numpy as np
import pytest

from fedbal.devices import (
    DEFAULT_PROFILES,
    ChannelEnv,
    Device,
    HardwareProfile,
    comm_energy,
    comm_rate,
    device_report,
    load_profiles,
    relative_energy,
    resample_frequencies,
    sample_fleet,
    training_energy,
    training_latency,
)
from fedbal.errors import (
    InfeasibleTransmissionError,
    InvalidAllocationError,
    InvalidDeviceError,
)


def make_device(**kw):
    profile = kw.pop("profile", HardwareProfile("test", 1e8, 5e9, kw.get("cores", 1)))
    base = dict(
        id=0, profile=profile, kappa=1e-28, cycles_per_sample=1e5,
        local_iterations=5, dataset_size=500, cpu_freq=2e9, cores=1,
        tx_power=0.5, channel_gain=1.0, battery_capacity=1e4, sensitivity=0.5,
    )
    base.update(kw)
    return Device(**base)


def env_with(snr=1023.0, bandwidth=1e7, bits=1e7, power=0.5, gain=1.0):
    # noise chosen so gain^2 * power / noise equals the requested SNR
    return ChannelEnv(bandwidth, gain**2 * power / snr, bits)


class TestTrainingModel:
    def test_all_ones_identity(self):
        d = make_device(local_iterations=1, cycles_per_sample=1.0, dataset_size=1,
                        cpu_freq=1.0, cores=1,
                        profile=HardwareProfile("unit", 0.0, 10.0, 1))
        assert training_latency(d) == 1.0

    def test_latency_hand_values(self):
        d = make_device(local_iterations=5, cycles_per_sample=1e5, dataset_size=500,
                        cpu_freq=2e9, cores=4)
        assert training_latency(d) == pytest.approx(0.5, rel=1e-12)
        d.cpu_freq = 4e9
        assert training_latency(d) == pytest.approx(0.25, rel=1e-12)

    def test_energy_zero_capacitance(self):
        d = make_device()
        d.kappa = 0.0
        assert training_energy(d) == 0.0

    def test_energy_hand_values(self):
        d = make_device(kappa=1e-28, local_iterations=5, cycles_per_sample=1e5,
                        dataset_size=500, cpu_freq=2e9, cores=4)
        assert training_energy(d) == pytest.approx(0.4, rel=1e-12)
        d.cpu_freq = 4e9
        assert training_energy(d) == pytest.approx(1.6, rel=1e-12)

    def test_latency_energy_identities_random_devices(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            d = make_device(
                cycles_per_sample=float(rng.uniform(5e4, 2e5)),
                dataset_size=int(rng.integers(1, 2000)),
                cpu_freq=float(rng.uniform(2e8, 5e9)),
                cores=int(rng.integers(1, 16)),
            )
            lat, ene = training_latency(d), training_energy(d)
            work = d.local_iterations * d.cycles_per_sample * d.dataset_size
            assert lat * d.cpu_freq / d.cores == pytest.approx(work, rel=1e-12)
            assert ene / lat == pytest.approx(d.kappa * d.cpu_freq**3, rel=1e-12)

    def test_nonpositive_frequency_rejected(self):
        with pytest.raises(InvalidDeviceError):
            make_device(cpu_freq=0.0)


class TestCommModel:
    def test_rate_hand_values(self):
        d = make_device()
        env = env_with(snr=1023.0)
        assert comm_rate(d, 1.0, env) == pytest.approx(1e8, rel=1e-12)
        assert comm_rate(d, 0.1, env) == pytest.approx(1e7, rel=1e-12)

    def test_zero_gain_zero_rate(self):
        d = make_device(channel_gain=0.0)
        env = ChannelEnv(1e7, 1e-3, 1e7)
        assert comm_rate(d, 0.5, env) == 0.0
        with pytest.raises(InfeasibleTransmissionError):
            comm_energy(d, 0.5, env)

    def test_invalid_beta(self):
        d = make_device()
        env = env_with()
        for beta in (0.0, -0.1, 1.5):
            with pytest.raises(InvalidAllocationError):
                comm_rate(d, beta, env)

    def test_energy_hand_values(self):
        d = make_device(tx_power=0.5)
        env = env_with(snr=1023.0, bandwidth=1e7, bits=1e7)
        energy, latency = comm_energy(d, 0.1, env)  # rate 1e7 bit/s
        assert latency == pytest.approx(1.0, rel=1e-12)
        assert energy == pytest.approx(0.5, rel=1e-12)

    def test_nothing_to_send(self):
        d = make_device()
        assert comm_energy(d, 0.5, env_with(bits=0.0)) == (0.0, 0.0)

    def test_energy_inverse_in_beta(self):
        d = make_device()
        env = env_with()
        e1, t1 = comm_energy(d, 0.4, env)
        e2, t2 = comm_energy(d, 0.2, env)
        assert e2 == pytest.approx(2 * e1, rel=1e-12)
        assert t2 == pytest.approx(2 * t1, rel=1e-12)
        # energy * beta is constant in beta
        rng = np.random.default_rng(1)
        betas = rng.uniform(0.01, 1.0, size=20)
        products = [comm_energy(d, float(b), env)[0] * b for b in betas]
        assert np.ptp(products) <= 1e-12 * products[0]


class TestRelativeEnergy:
    def test_unit_case(self):
        d = make_device(battery_capacity=1.0, sensitivity=1.0)
        assert relative_energy(0.5, 0.5, d) == pytest.approx(1.0, rel=1e-12)

    def test_hand_value(self):
        d = make_device(battery_capacity=1000.0, sensitivity=0.5)
        assert relative_energy(0.7, 0.3, d) == pytest.approx(0.002, rel=1e-12)

    def test_monotone(self):
        lo = make_device(sensitivity=0.2)
        hi = make_device(sensitivity=0.9)
        assert relative_energy(1.0, 0.0, lo) > relative_energy(1.0, 0.0, hi)
        small = make_device(battery_capacity=1e3)
        big = make_device(battery_capacity=1e5)
        assert relative_energy(1.0, 0.0, small) > relative_energy(1.0, 0.0, big)
        d = make_device()
        assert relative_energy(2.0, 0.0, d) > relative_energy(1.0, 0.0, d)

    def test_ledger_mode_accumulates(self):
        d = make_device()
        relative_energy(1.0, 0.5, d, ledger=True)
        relative_energy(0.5, 0.0, d, ledger=True)
        assert d.cumulative_energy == pytest.approx(2.0, rel=1e-12)
        relative_energy(1.0, 0.0, d)  # default does not touch the ledger
        assert d.cumulative_energy == pytest.approx(2.0, rel=1e-12)

    def test_report_consistency(self):
        d = make_device()
        env = env_with()
        rep = device_report(d, 0.3, env)
        denom = d.battery_capacity * d.sensitivity
        expected = (rep.train_energy + rep.trans_energy) / denom
        assert rep.relative_energy == pytest.approx(expected, rel=1e-12)
        assert rep.trans_energy == pytest.approx(d.tx_power * rep.trans_latency, rel=1e-12)

    def test_invalid_sensitivity(self):
        with pytest.raises(InvalidDeviceError):
            make_device(sensitivity=0.0)
        with pytest.raises(InvalidDeviceError):
            make_device(sensitivity=1.5)


class TestFleetSampling:
    def test_same_seed_identical(self):
        a = sample_fleet(DEFAULT_PROFILES, 30, 42)
        b = sample_fleet(DEFAULT_PROFILES, 30, 42)
        for d1, d2 in zip(a, b):
            assert d1 == d2

    def test_different_seed_differs(self):
        a = sample_fleet(DEFAULT_PROFILES, 30, 42)
        b = sample_fleet(DEFAULT_PROFILES, 30, 43)
        assert any(d1.cpu_freq != d2.cpu_freq for d1, d2 in zip(a, b))

    def test_round_robin_profiles(self):
        profiles = DEFAULT_PROFILES[:4]
        fleet = sample_fleet(profiles, 100, 0)
        names = {d.profile.name for d in fleet}
        assert names == {p.name for p in profiles}
        counts = [sum(1 for d in fleet if d.profile.name == p.name) for p in profiles]
        assert all(c >= 1 for c in counts)

    def test_sampled_ranges(self):
        fleet = sample_fleet(DEFAULT_PROFILES, 200, 7)
        for d in fleet:
            assert 0.05 < d.sensitivity <= 1.0
            assert d.profile.freq_min <= d.cpu_freq <= d.profile.freq_max
            assert d.cpu_freq > 0

    def test_empty_fleet_rejected(self):
        with pytest.raises(InvalidDeviceError):
            sample_fleet(DEFAULT_PROFILES, 0, 0)
        with pytest.raises(InvalidDeviceError):
            sample_fleet([], 5, 0)

    def test_resample_deterministic_and_varying(self):
        fleet = sample_fleet(DEFAULT_PROFILES, 20, 3)
        resample_frequencies(fleet, 3, 1)
        first = [d.cpu_freq for d in fleet]
        resample_frequencies(fleet, 3, 2)
        second = [d.cpu_freq for d in fleet]
        assert first != second
        resample_frequencies(fleet, 3, 1)
        assert [d.cpu_freq for d in fleet] == first

    def test_zero_sigma_profile_constant(self):
        flat = HardwareProfile("pinned", 2e9, 2e9, 4)
        fleet = sample_fleet([flat], 5, 0)
        resample_frequencies(fleet, 0, 9)
        assert all(d.cpu_freq == 2e9 for d in fleet)


class TestProfileFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "profiles.json"
        path.write_text(json.dumps([
            {"name": "a", "freq_min_hz": 1e9, "freq_max_hz": 2e9, "cores": 4,
             "price_band": "low"},
            {"name": "b", "freq_min_hz": 0.0, "freq_max_hz": 3e9, "cores": 8},
        ]))
        profiles = load_profiles(path)
        assert [p.name for p in profiles] == ["a", "b"]
        assert profiles[0].price_band == "low"
        assert profiles[1].cores == 8
        # loaded profiles must be usable for sampling
        fleet = sample_fleet(profiles, 6, 0)
        assert len(fleet) == 6

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{"name": "x", "cores": 2}]))
        with pytest.raises(InvalidDeviceError):
            load_profiles(path)

    def test_non_list_rejected(self, tmp_path):
        path = tmp_path / "bad2.json"
        path.write_text(json.dumps({"name": "x"}))
        with pytest.raises(InvalidDeviceError):
            load_profiles(path)
