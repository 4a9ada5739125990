"""Utility/customer equilibrium for the charging price and station powers.

The utility side prices the grid and road netloads; each station updates
its charge/discharge power against that price.  Projected gradient steps
drive the pair to the fixed point where the price formula and the
customer stationarity agree.  Powers are MW (discharge positive), prices
$/MWh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CostModel",
    "EquilibriumState",
    "quad",
    "quad_d",
    "utility_cost",
    "customer_cost",
    "price_formula",
    "solve_equilibrium",
]


def quad(coeffs: tuple[float, float, float], x: float) -> float:
    a, b, c = coeffs
    return a * x * x + b * x + c


def quad_d(coeffs: tuple[float, float, float], x: float) -> float:
    a, b, _ = coeffs
    return 2.0 * a * x + b


@dataclass(frozen=True)
class CostModel:
    """Quadratic cost triples (a, b, c) for the grid, road, and waiting
    terms, plus the road weight and station timing constants."""

    fps: tuple[float, float, float]
    futs: tuple[float, float, float]
    fwt: tuple[float, float, float]
    gamma1: float = 1.0
    gamma1_max: float = 10.0
    tau1: float = 1.0
    c1_rate: float = 1.0

    def __post_init__(self):
        for trip in (self.fps, self.futs, self.fwt):
            if trip[0] < 0:
                raise ValueError("quadratic coefficient a must be >= 0")
        if self.c1_rate <= 0:
            raise ValueError("c1_rate must be positive")
        if not 0 <= self.gamma1 <= self.gamma1_max:
            raise ValueError("gamma1 outside [0, gamma1_max]")


@dataclass
class EquilibriumState:
    """Price/power iterate with its projection boxes and convergence flag."""

    price: float
    powers: np.ndarray
    pi_bounds: tuple[float, float]
    p_bounds: tuple[float, float]
    iterations: int = 0
    converged: bool = False

    def project(self) -> None:
        lo, hi = self.pi_bounds
        self.price = min(max(self.price, lo), hi)
        np.clip(self.powers, self.p_bounds[0], self.p_bounds[1], out=self.powers)


def utility_cost(cm: CostModel, q_pds: float, q_uts: float,
                 powers: np.ndarray) -> float:
    """Social cost of one interval at the given station powers.

    Grid term on the shaved netload, weighted road term on the demand
    less the engaged vehicles, and the waiting cost of those vehicles.
    The engaged-vehicle count is powers/c1 summed, tied to the powers.
    """
    p_sum = float(np.sum(powers))
    n_sum = p_sum / cm.c1_rate
    return (
        quad(cm.fps, q_pds - p_sum)
        + cm.gamma1 * quad(cm.futs, q_uts - n_sum)
        + quad(cm.fwt, cm.tau1 * n_sum)
    )


def customer_cost(cm: CostModel, price: float, power: float) -> float:
    """One station's expenditure: waiting cost minus discharge revenue."""
    return quad(cm.fwt, cm.tau1 * power / cm.c1_rate) - price * power


def price_formula(cm: CostModel, q_pds: float, q_uts: float,
                  powers: np.ndarray) -> float:
    """Marginal-cost price at the given powers:
    f_ps'(q_pds - sum P) + (gamma1/c1) f_uts'(q_uts - sum P / c1)."""
    p_sum = float(np.sum(powers))
    return quad_d(cm.fps, q_pds - p_sum) + (cm.gamma1 / cm.c1_rate) * quad_d(
        cm.futs, q_uts - p_sum / cm.c1_rate
    )


def solve_equilibrium(cm: CostModel, q_pds: float, q_uts: float,
                      pi_bounds: tuple[float, float],
                      p_bounds: tuple[float, float],
                      n_cds: int,
                      gamma2: float = 0.05,
                      eps: float = 1e-6,
                      max_iter: int = 10000,
                      p0: np.ndarray | None = None) -> EquilibriumState:
    """Iterate price evaluation and per-station power updates to a fixed
    point, projecting onto the price/power boxes each round.

    Each station descends its own expenditure:
    P <- P + gamma2 * (price - (tau1/c1) fwt'(tau1 * sum P / c1)).
    The step halves when the update direction flips on three consecutive
    iterations, which tames oscillation for too-large gamma2.
    """
    if gamma2 <= 0:
        raise ValueError("gamma2 must be positive")
    if pi_bounds[0] > pi_bounds[1] or p_bounds[0] > p_bounds[1]:
        raise ValueError("empty projection box")
    powers = np.zeros(n_cds) if p0 is None else np.asarray(p0, dtype=float).copy()
    st = EquilibriumState(price=0.0, powers=powers,
                          pi_bounds=pi_bounds, p_bounds=p_bounds)
    st.project()

    step = gamma2
    prev_sign = 0
    flips = 0
    for k in range(1, max_iter + 1):
        price = price_formula(cm, q_pds, q_uts, st.powers)
        price = min(max(price, pi_bounds[0]), pi_bounds[1])

        wait_marg = (cm.tau1 / cm.c1_rate) * quad_d(
            cm.fwt, cm.tau1 * float(np.sum(st.powers)) / cm.c1_rate
        )
        grad = price - wait_marg
        new_powers = np.clip(st.powers + step * grad,
                             p_bounds[0], p_bounds[1])

        dp = new_powers - st.powers
        sign = int(np.sign(np.sum(dp)))
        if sign != 0 and prev_sign != 0 and sign != prev_sign:
            flips += 1
            if flips >= 3:
                step *= 0.5
                flips = 0
        else:
            flips = 0
        if sign != 0:
            prev_sign = sign

        delta = max(abs(price - st.price), float(np.max(np.abs(dp))))
        st.price = price
        st.powers = new_powers
        st.iterations = k
        if delta <= eps and k > 1:
            st.converged = True
            break
    if not math.isfinite(st.price) or not np.all(np.isfinite(st.powers)):
        raise FloatingPointError("equilibrium iteration diverged")
    return st
