"""Uplink bandwidth-fraction allocation over a selected client set.

Minimizes total transmission energy sum(c_i / beta_i) subject to
sum(beta_i) = 1, where c_i is the device's transmission energy at full
bandwidth.  The problem is strictly convex on the simplex interior, so the
KKT point beta_i = sqrt(c_i) / sum_j sqrt(c_j) is the unique optimum; an
iterative equality-constrained quadratic solver is provided as a second
route and the two are cross-validated in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .devices import ChannelEnv, Device, comm_energy
from .errors import InvalidAllocationError, SolverFailure

SIMPLEX_TOL = 1e-9


def cost_coefficient(d: Device, env: ChannelEnv) -> float:
    """Transmission energy in J at beta = 1; scales as 1/beta for smaller shares."""
    energy, _ = comm_energy(d, 1.0, env)
    if energy <= 0 and env.model_bits > 0:
        raise InvalidAllocationError(f"device {d.id}: no usable channel")
    return energy


@dataclass
class AllocationProblem:
    """Cost coefficients c_i (J) plus a numerical floor for each share."""

    costs: np.ndarray
    min_beta: float = 0.0  # 0 means "use the default floor 1e-6/n"

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float)
        if self.costs.ndim != 1 or self.costs.size == 0:
            raise InvalidAllocationError("costs must be a non-empty 1-D array")
        if np.any(self.costs <= 0):
            raise InvalidAllocationError("all cost coefficients must be > 0")
        if self.min_beta == 0.0:
            self.min_beta = 1e-6 / self.costs.size
        if not 0 < self.min_beta < 1 / self.costs.size:
            raise InvalidAllocationError("min_beta must lie in (0, 1/n)")

    @classmethod
    def from_devices(cls, devices, env: ChannelEnv, min_beta: float = 0.0):
        return cls(np.array([cost_coefficient(d, env) for d in devices]), min_beta)

    @property
    def size(self) -> int:
        return self.costs.size


@dataclass
class Allocation:
    """A feasible bandwidth-fraction vector and its objective value."""

    betas: np.ndarray
    objective_value: float
    solver: str

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)


def total_comm_energy(p: AllocationProblem, betas) -> float:
    """Objective sum(c_i / beta_i) in J."""
    betas = np.asarray(betas, dtype=float)
    if np.any(betas <= 0):
        raise InvalidAllocationError("bandwidth fractions must be positive")
    return float(np.sum(p.costs / betas))


def _clamp_to_floor(betas: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below the floor and redistribute the excess proportionally."""
    betas = betas.copy()
    low = betas < floor
    # Each pass fixes the floored entries and rescales the rest; at most n passes.
    while np.any(low):
        free = ~low
        budget = 1.0 - floor * np.count_nonzero(low)
        betas[low] = floor
        betas[free] *= budget / betas[free].sum()
        newly_low = free & (betas < floor)
        if not np.any(newly_low):
            break
        low |= newly_low
    return betas


def solve_analytic(p: AllocationProblem) -> Allocation:
    """Closed-form optimum: shares proportional to sqrt(c_i)."""
    root = np.sqrt(p.costs)
    betas = root / root.sum()
    if np.any(betas < p.min_beta):
        betas = _clamp_to_floor(betas, p.min_beta)
    return Allocation(betas, total_comm_energy(p, betas), "analytic")


def solve_sqp(p: AllocationProblem, tol: float = 1e-10, max_iter: int = 200) -> Allocation:
    """Iterative solve: Newton steps on the equality-constrained quadratic model.

    Each step solves the local quadratic model of the objective with the
    linearized constraint sum(beta) = 1 (the constraint is eliminated through
    the null space of the all-ones row), then backtracks along the step until
    the Armijo condition holds.  Starts from the uniform feasible point.

    Raises SolverFailure with the best iterate attached if the projected
    gradient has not dropped below tol * (1 + |f|) within max_iter steps.
    """
    if tol <= 0:
        raise InvalidAllocationError("tol must be > 0")
    c = p.costs
    n = c.size
    betas = np.full(n, 1.0 / n)
    f = total_comm_energy(p, betas)
    for _ in range(max_iter):
        grad = -c / betas**2
        hess = 2 * c / betas**3  # diagonal of the true Hessian, positive
        # KKT step for min 0.5 d^T H d + g^T d  s.t.  sum(d) = 0:
        # d = -H^{-1} (g + lam * 1) with lam chosen so the step stays on the simplex.
        inv_h = 1.0 / hess
        lam = -np.dot(inv_h, grad) / inv_h.sum()
        step = -inv_h * (grad + lam)
        # Projected gradient (gradient minus its mean) measures stationarity.
        pgrad = grad - grad.mean()
        if np.max(np.abs(pgrad)) <= tol * (1.0 + abs(f)):
            return Allocation(betas, f, "sqp")
        # Keep strictly inside the floor: shrink toward the boundary at most 99%.
        negative = step < 0
        if np.any(negative):
            limit = np.min((p.min_beta - betas[negative]) / step[negative])
            t = min(1.0, 0.99 * limit)
        else:
            t = 1.0
        slope = float(np.dot(grad, step))
        while t > 1e-16:
            trial = betas + t * step
            f_trial = total_comm_energy(p, trial)
            if f_trial <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        betas = betas + t * step
        f = f_trial
    best = Allocation(betas, f, "sqp")
    grad = -c / betas**2
    pgrad = grad - grad.mean()
    if np.max(np.abs(pgrad)) <= tol * (1.0 + abs(f)):
        return best
    raise SolverFailure(
        f"no convergence within {max_iter} iterations", best=best
    )
