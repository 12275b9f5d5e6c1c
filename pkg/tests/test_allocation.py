import numpy as np
import pytest

from fedbal.allocation import (
    Allocation,
    AllocationProblem,
    cost_coefficient,
    solve_analytic,
    solve_sqp,
    total_comm_energy,
)
from fedbal.devices import ChannelEnv, HardwareProfile, Device
from fedbal.errors import InvalidAllocationError, SolverFailure


def grid_best_two(c, step=1e-4):
    """Brute-force optimum for n=2 over a beta grid."""
    bs = np.arange(step, 1.0, step)
    objs = c[0] / bs + c[1] / (1.0 - bs)
    i = int(np.argmin(objs))
    return np.array([bs[i], 1.0 - bs[i]]), float(objs[i])


def grid_best_three(c, step=5e-3):
    best = (None, np.inf)
    for b0 in np.arange(step, 1.0, step):
        for b1 in np.arange(step, 1.0 - b0, step):
            b2 = 1.0 - b0 - b1
            if b2 <= 0:
                continue
            obj = c[0] / b0 + c[1] / b1 + c[2] / b2
            if obj < best[1]:
                best = (np.array([b0, b1, b2]), float(obj))
    return best


def test_cost_coefficient_matches_full_band_energy():
    profile = HardwareProfile("t", 1e8, 5e9, 4)
    d = Device(id=0, profile=profile, kappa=1e-28, cycles_per_sample=1e5,
               local_iterations=5, dataset_size=100, cpu_freq=2e9, cores=4,
               tx_power=0.5, channel_gain=1.0, battery_capacity=1e4, sensitivity=0.5)
    env = ChannelEnv(1e7, 0.5 / 1023.0, 1e7)  # SNR 1023 -> rate 1e8 at beta 1
    assert cost_coefficient(d, env) == pytest.approx(0.05, rel=1e-12)
    env2 = ChannelEnv(1e7, 0.5 / 1023.0, 2e7)
    assert cost_coefficient(d, env2) == pytest.approx(0.10, rel=1e-12)
    d.channel_gain = 0.0
    from fedbal.errors import InfeasibleTransmissionError
    with pytest.raises(InfeasibleTransmissionError):
        cost_coefficient(d, env)


class TestAnalytic:
    def test_symmetric(self):
        alloc = solve_analytic(AllocationProblem(np.array([1.0, 1.0])))
        assert alloc.betas == pytest.approx([0.5, 0.5], rel=1e-12)

    def test_one_four_against_grid(self):
        c = np.array([1.0, 4.0])
        alloc = solve_analytic(AllocationProblem(c))
        assert alloc.betas == pytest.approx([1 / 3, 2 / 3], rel=1e-9)
        assert alloc.objective_value == pytest.approx(9.0, rel=1e-12)
        betas_g, obj_g = grid_best_two(c)
        assert alloc.objective_value <= obj_g + 1e-6
        assert alloc.betas == pytest.approx(betas_g, abs=2e-4)

    def test_three_against_grid(self):
        c = np.array([1.0, 1.0, 4.0])
        alloc = solve_analytic(AllocationProblem(c))
        assert alloc.betas == pytest.approx([0.25, 0.25, 0.5], rel=1e-9)
        assert alloc.objective_value == pytest.approx(16.0, rel=1e-12)
        betas_g, obj_g = grid_best_three(c)
        assert alloc.objective_value <= obj_g + 1e-6
        assert alloc.betas == pytest.approx(betas_g, abs=2e-2)

    def test_empty_rejected(self):
        with pytest.raises(InvalidAllocationError):
            AllocationProblem(np.array([]))
        with pytest.raises(InvalidAllocationError):
            AllocationProblem(np.array([1.0, -1.0]))

    def test_floor_applied_and_simplex_kept(self):
        # extreme spread pushes the smallest share below the floor
        c = np.array([1e-12, 1.0])
        p = AllocationProblem(c, min_beta=0.01)
        alloc = solve_analytic(p)
        assert alloc.betas.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(alloc.betas >= p.min_beta - 1e-15)


class TestSqp:
    def test_matches_analytic_simple(self):
        p = AllocationProblem(np.array([1.0, 4.0]))
        alloc = solve_sqp(p, tol=1e-12)
        assert alloc.betas == pytest.approx([1 / 3, 2 / 3], abs=1e-6)
        assert alloc.solver == "sqp"

    def test_uniform_for_equal_costs(self):
        for k in (0.003, 1.0, 250.0):
            p = AllocationProblem(np.full(6, k))
            alloc = solve_sqp(p)
            assert alloc.betas == pytest.approx(np.full(6, 1 / 6), abs=1e-9)

    def test_random_instances_match_analytic(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 13))
            c = rng.uniform(1e-3, 1e3, size=n)
            p = AllocationProblem(c)
            a = solve_analytic(p)
            s = solve_sqp(p)
            assert abs(s.objective_value - a.objective_value) <= 1e-6 * a.objective_value
            # simplex invariants
            assert s.betas.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(s.betas >= p.min_beta - 1e-15)

    def test_beats_random_allocations(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(2, 13))
            c = rng.uniform(1e-3, 1e3, size=n)
            p = AllocationProblem(c)
            s = solve_sqp(p)
            draws = rng.exponential(size=(1000, n))
            draws /= draws.sum(axis=1, keepdims=True)
            rand_best = float((c / draws).sum(axis=1).min())
            assert s.objective_value <= rand_best + 1e-9

    def test_feasible_perturbations_increase_objective(self):
        rng = np.random.default_rng(2)
        p = AllocationProblem(rng.uniform(0.1, 10.0, size=6))
        base = solve_analytic(p)
        for _ in range(50):
            direction = rng.standard_normal(6)
            direction -= direction.mean()  # keep the sum constraint
            for eps in (1e-3, 1e-2):
                trial = base.betas + eps * direction / np.linalg.norm(direction)
                if np.any(trial <= 0):
                    continue
                assert total_comm_energy(p, trial) >= base.objective_value - 1e-12

    def test_cost_scaling(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(0.1, 10.0, size=5)
        a1 = solve_sqp(AllocationProblem(c))
        a2 = solve_sqp(AllocationProblem(17.5 * c))
        assert a2.betas == pytest.approx(a1.betas, abs=1e-9)
        assert a2.objective_value == pytest.approx(17.5 * a1.objective_value, rel=1e-9)

    def test_failure_carries_best_iterate(self):
        p = AllocationProblem(np.array([1.0, 4.0]))
        with pytest.raises(SolverFailure) as info:
            solve_sqp(p, tol=1e-12, max_iter=0)
        best = info.value.best
        assert isinstance(best, Allocation)
        assert best.betas.sum() == pytest.approx(1.0, abs=1e-9)

    def test_bad_tol(self):
        with pytest.raises(InvalidAllocationError):
            solve_sqp(AllocationProblem(np.array([1.0])), tol=0.0)


class TestObjective:
    def test_uniform_on_one_four(self):
        p = AllocationProblem(np.array([1.0, 4.0]))
        assert total_comm_energy(p, [0.5, 0.5]) == pytest.approx(10.0, rel=1e-12)

    def test_single_device(self):
        p = AllocationProblem(np.array([2.5]))
        assert total_comm_energy(p, [1.0]) == pytest.approx(2.5, rel=1e-12)
        assert solve_analytic(p).betas == pytest.approx([1.0], rel=1e-12)

    def test_rejects_nonpositive_beta(self):
        p = AllocationProblem(np.array([1.0, 1.0]))
        with pytest.raises(InvalidAllocationError):
            total_comm_energy(p, [0.0, 1.0])


def test_min_beta_validation():
    with pytest.raises(InvalidAllocationError):
        AllocationProblem(np.array([1.0, 1.0]), min_beta=0.6)
