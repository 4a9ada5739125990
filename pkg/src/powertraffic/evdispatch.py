"""Parked-vehicle counts and the netload-flattening charging schedule.

The parking rule converts the interval's price, station power, and local
traffic into a vehicle count per station.  The scheduler then spreads
each parked vehicle's charge/discharge energy over the sub-intervals of
the parking window so consecutive netload differences are as small as
possible, under rate boxes, per-vehicle energy totals, and the state of
charge corridor.

Sign convention throughout: discharge positive, charge negative.  Rates
are MW; a vehicle's total is the plain sum of its rates over the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParkingDecision",
    "ChargingSchedule",
    "InfeasibleDemandError",
    "parked_evs",
    "solve_smart_schedule",
    "soc_trajectory",
    "stochastic_baseline",
    "schedule_rows",
]


class InfeasibleDemandError(ValueError):
    """A vehicle's energy total cannot be met under its rate and SOC
    constraints; carries the vehicle index as a certificate."""

    def __init__(self, ev_index: int, message: str):
        self.ev_index = ev_index
        super().__init__(f"infeasible demand for EV {ev_index}: {message}")


@dataclass(frozen=True)
class ParkingDecision:
    """Outcome of the piecewise parking rule at one station."""

    cds_id: str
    parked: int
    regime: str  # high-price | mid-price | no-park
    price: float
    injection: float
    flow_at_node: float


def parked_evs(price: float, injection: float, flow_at_node: float, *,
               cds_id: str = "", capacity: int = 0, avg_rate: float = 1.0,
               rho1: float = 45.0, rho2: float = 2.0,
               rho3: float = 0.8, rho4: float = 0.3) -> ParkingDecision:
    """Piecewise parking count from the price signal.

    At or above rho1 + rho2 a rho3 share of min(|injection|/avg_rate,
    flow) parks; between rho1 and rho1 + rho2 the share drops to rho4;
    below rho1 nobody parks.  The injection magnitude is used so a
    charging station (negative injection) attracts vehicles the same way
    a discharging one does.  The count is capped by the lot capacity and
    floored to a whole vehicle.
    """
    for name, val in (("price", price), ("injection", injection),
                      ("flow", flow_at_node)):
        if not math.isfinite(val):
            raise ValueError(f"non-finite {name}")
    need = min(abs(injection) / avg_rate, flow_at_node)
    if price >= rho1 + rho2:
        regime, n = "high-price", rho3 * need
    elif price >= rho1:
        regime, n = "mid-price", rho4 * need
    else:
        regime, n = "no-park", 0.0
    n = int(min(max(n, 0.0), capacity))
    return ParkingDecision(cds_id=cds_id, parked=n, regime=regime,
                           price=price, injection=injection,
                           flow_at_node=flow_at_node)


@dataclass
class ChargingSchedule:
    """Rates matrix (vehicle x sub-interval), the per-vehicle totals it
    satisfies, the SOC ledger, and the resulting netload trajectory."""

    rates: np.ndarray
    q_ev: np.ndarray
    soc: np.ndarray
    netload: np.ndarray
    baseline: np.ndarray
    objective: float
    iterations: int
    dt1: float
    capacities: np.ndarray


def soc_trajectory(soc0: float, capacity: float, rates: np.ndarray,
                   dt1: float) -> np.ndarray:
    """SOC series under the recursion soc[k+1] = soc[k] - rate*dt1/cap.

    Discharge (positive rate) lowers the state of charge.  ``dt1`` and
    ``capacity`` just need consistent units (hours and MWh here).
    """
    if capacity <= 0:
        raise ValueError("battery capacity must be positive")
    rates = np.asarray(rates, dtype=float)
    out = np.empty(rates.shape[0] + 1)
    out[0] = soc0
    np.cumsum(rates * (dt1 / capacity), out=out[1:])
    out[1:] = soc0 - out[1:]
    return out


def _netload(baseline: np.ndarray, rates: np.ndarray) -> np.ndarray:
    # single definition of the netload identity; never recomputed another way
    return baseline - rates.sum(axis=0)


def _ramp_objective(baseline: np.ndarray, rates: np.ndarray) -> float:
    p = _netload(baseline, rates)
    return float(np.sum(np.diff(p) ** 2))


def _waterfill(u: np.ndarray, q: np.ndarray, lo: np.ndarray,
               hi: np.ndarray) -> np.ndarray:
    """Row-wise projection onto {sum x = q, lo <= x <= hi}.

    The projection is clip(u - nu) with the shift nu solving
    sum clip(u - nu) = q.  The row sum is piecewise linear in nu with
    breakpoints at u - hi and u - lo, so one sort per row finds the
    segment and the exact shift; a mean-shift over the interior slots
    then repairs the last floating-point bits of the sum.
    """
    if u.size == 0:
        return u.copy()
    n, T = u.shape
    span = float(np.max(hi - lo))
    bp = np.concatenate([u - hi, u - lo], axis=1)
    order = np.argsort(bp, axis=1)
    bps = np.take_along_axis(bp, order, axis=1)
    # slope of the row sum drops by 1 past u-hi and recovers past u-lo
    slope = np.cumsum(np.where(order < T, -1.0, 1.0), axis=1)
    s0 = hi.sum(axis=1)
    seg = np.diff(bps, axis=1) * slope[:, :-1]
    s_at = np.concatenate([s0[:, None], s0[:, None] + np.cumsum(seg, axis=1)],
                          axis=1)
    qq = np.clip(q, lo.sum(axis=1), hi.sum(axis=1))
    below = s_at <= qq[:, None]
    first = np.argmax(below, axis=1)
    any_below = below.any(axis=1)
    k = np.where(any_below, first, 2 * T - 1)
    at_left_edge = below[:, 0]
    km1 = np.maximum(k - 1, 0)
    rows = np.arange(n)
    sl = slope[rows, km1]
    sl = np.where(sl >= 0.0, -1.0, sl)  # guard flat segments; value matches there
    nu = bps[rows, km1] + (qq - s_at[rows, km1]) / sl
    nu = np.where(at_left_edge, bps[:, 0] - 1.0, nu)
    nu = np.where(any_below, nu, bps[:, -1] + 1.0)
    x = np.clip(u - nu[:, None], lo, hi)
    resid = qq - x.sum(axis=1)
    interior = (x > lo + 1e-12 * span) & (x < hi - 1e-12 * span)
    n_int = np.maximum(interior.sum(axis=1), 1)
    x += interior * (resid / n_int)[:, None]
    return x


def _corridor_ok(x, cum_lo, cum_hi, tol=1e-10):
    cs = np.cumsum(x, axis=1)
    return bool(np.all(cs >= cum_lo - tol) and np.all(cs <= cum_hi + tol))


def _project_feasible(u, q, lo, hi, cum_lo, cum_hi, skip_corridor=False,
                      max_sweeps: int = 600) -> np.ndarray:
    """Exact projection onto {sum = q} ∩ box ∩ cumsum corridor, row-wise.

    Fast path: the equality/box projection alone, kept when it already
    satisfies the corridor.  Otherwise Dykstra's alternating projections
    between the equality/box set and each prefix slab, which converges to
    the true intersection projection for these polyhedra.
    """
    x = _waterfill(u, q, lo, hi)
    if skip_corridor:
        return x
    cs = np.cumsum(x, axis=1)
    bad = np.any((cs < cum_lo - 1e-12) | (cs > cum_hi + 1e-12), axis=1)
    if not np.any(bad):
        return x
    rows = np.where(bad)[0]
    ub, qb = u[rows], q[rows]
    lob, hib = lo[rows], hi[rows]
    clb, chb = cum_lo[rows], cum_hi[rows]
    T = u.shape[1]
    n_sets = T  # equality/box set + (T - 1) prefix slabs
    mem = np.zeros((n_sets, len(rows), T))
    xb = ub.copy()
    for _ in range(max_sweeps):
        x_prev = xb.copy()
        z = xb + mem[0]
        xb = _waterfill(z, qb, lob, hib)
        mem[0] = z - xb
        for k in range(T - 1):
            z = xb + mem[k + 1]
            pref = z[:, : k + 1].sum(axis=1)
            target = np.clip(pref, clb[:, k], chb[:, k])
            shift = (target - pref) / (k + 1)
            xb = z.copy()
            xb[:, : k + 1] += shift[:, None]
            mem[k + 1] = z - xb
        if np.max(np.abs(xb - x_prev)) < 1e-13:
            break
    x[rows] = xb
    return x


def _check_feasible(q, lo, hi, cum_lo, cum_hi) -> None:
    """Interval propagation along the prefix chain; exact for box +
    corridor + total systems.  Raises naming the first offending EV."""
    n, T = lo.shape
    lo_cum = np.zeros(n)
    hi_cum = np.zeros(n)
    for k in range(T):
        lo_cum = np.maximum(lo_cum + lo[:, k], cum_lo[:, k])
        hi_cum = np.minimum(hi_cum + hi[:, k], cum_hi[:, k])
        bad = lo_cum > hi_cum + 1e-12
        if np.any(bad):
            i = int(np.where(bad)[0][0])
            raise InfeasibleDemandError(
                i, f"empty rate corridor at sub-interval {k}"
            )
    bad = (q < lo_cum - 1e-9) | (q > hi_cum + 1e-9)
    if np.any(bad):
        i = int(np.where(bad)[0][0])
        raise InfeasibleDemandError(
            i, f"total {q[i]:g} outside achievable [{lo_cum[i]:g}, {hi_cum[i]:g}]"
        )


def solve_smart_schedule(baseline: np.ndarray,
                         q_ev: np.ndarray,
                         soc0: np.ndarray,
                         capacities: np.ndarray,
                         rate_bounds: tuple[float, float],
                         soc_bounds: tuple[float, float],
                         dt1: float,
                         *,
                         max_iter: int = 4000,
                         tol: float = 1e-10) -> ChargingSchedule:
    """Minimize the summed squared consecutive netload differences.

    Accelerated projected gradient on the rate matrix: gradient steps on
    the ramp objective, then exact projection onto the per-vehicle
    feasible sets (the energy equality by mean-shift re-centering inside
    the projection, plus the rate box and the SOC corridor).  Momentum
    restarts whenever the objective rises, which keeps the convex QP
    converging monotonically.
    """
    baseline = np.asarray(baseline, dtype=float)
    q_ev = np.atleast_1d(np.asarray(q_ev, dtype=float))
    soc0 = np.atleast_1d(np.asarray(soc0, dtype=float))
    capacities = np.atleast_1d(np.asarray(capacities, dtype=float))
    T = baseline.shape[0]
    n = q_ev.shape[0]
    if T < 2:
        raise ValueError("need at least 2 sub-intervals")
    if np.any(capacities <= 0):
        raise ValueError("battery capacities must be positive")
    c_lo, c_hi = rate_bounds
    soc_lo, soc_hi = soc_bounds
    lo = np.full((n, T), c_lo)
    hi = np.full((n, T), c_hi)
    # SOC corridor as prefix-sum bounds on the rates
    scale = capacities / dt1
    cum_lo = np.tile(((soc0 - soc_hi) * scale)[:, None], (1, T))
    cum_hi = np.tile(((soc0 - soc_lo) * scale)[:, None], (1, T))
    _check_feasible(q_ev, lo, hi, cum_lo, cum_hi)

    # corridor that the rate box can never reach is dropped up front
    k = np.arange(1, T + 1)
    skip_corr = bool(
        np.all(k[None, :] * lo >= cum_lo - 1e-12)
        and np.all(k[None, :] * hi <= cum_hi + 1e-12)
    )

    def project(u, sweeps=80):
        return _project_feasible(u, q_ev, lo, hi, cum_lo, cum_hi,
                                 skip_corridor=skip_corr, max_sweeps=sweeps)

    # start from the uniform schedule, projected to be safe
    x = project(np.tile((q_ev / T)[:, None], (1, T)))
    lip = 8.0 * max(n, 1)  # ||2 D^T D|| <= 8 per vehicle row
    step = 1.0 / lip
    y = x.copy()
    t_momentum = 1.0
    best = x.copy()
    best_obj = _ramp_objective(baseline, x)
    obj_x = best_obj
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        p = _netload(baseline, y)
        g_cols = np.zeros(T)
        dp = np.diff(p)
        g_cols[:-1] += 2.0 * dp
        g_cols[1:] -= 2.0 * dp
        grad = np.tile(g_cols, (n, 1))  # d obj / d rates = -d obj / d netload
        x_new = project(y - step * grad)
        obj = _ramp_objective(baseline, x_new)
        if obj > obj_x + 1e-12 * (1.0 + obj_x) and t_momentum > 1.0:
            # momentum overshoot: restart from the last plain iterate
            y = x.copy()
            t_momentum = 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_momentum * t_momentum))
        y = x_new + ((t_momentum - 1.0) / t_next) * (x_new - x)
        moved = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        x = x_new
        t_momentum = t_next
        if obj < best_obj:
            best_obj, best = obj, x
        stall = stall + 1 if abs(obj_x - obj) <= tol * (1.0 + abs(obj)) else 0
        obj_x = obj
        if stall >= 5 and moved < 1e-9 * (1.0 + float(np.max(np.abs(x)))):
            break

    # polish: a high-precision projection so the constraints hold exactly
    x = project(best, sweeps=3000)
    best_obj = _ramp_objective(baseline, x)
    soc = np.empty((n, T + 1))
    for i in range(n):
        soc[i] = soc_trajectory(soc0[i], capacities[i], x[i], dt1)
    return ChargingSchedule(
        rates=x, q_ev=q_ev.copy(), soc=soc,
        netload=_netload(baseline, x), baseline=baseline.copy(),
        objective=best_obj, iterations=it, dt1=dt1,
        capacities=capacities.copy(),
    )


def stochastic_baseline(rng: np.random.Generator,
                        baseline: np.ndarray,
                        q_ev: np.ndarray,
                        soc0: np.ndarray,
                        capacities: np.ndarray,
                        rate_bounds: tuple[float, float],
                        soc_bounds: tuple[float, float],
                        dt1: float) -> ChargingSchedule:
    """Uncontrolled comparison schedule: uniform draws in the rate box,
    then projected so each vehicle still meets its total and SOC."""
    q_ev = np.atleast_1d(np.asarray(q_ev, dtype=float))
    soc0 = np.atleast_1d(np.asarray(soc0, dtype=float))
    capacities = np.atleast_1d(np.asarray(capacities, dtype=float))
    T = len(baseline)
    n = len(q_ev)
    c_lo, c_hi = rate_bounds
    soc_lo, soc_hi = soc_bounds
    lo = np.full((n, T), c_lo)
    hi = np.full((n, T), c_hi)
    scale = capacities / dt1
    cum_lo = np.tile(((soc0 - soc_hi) * scale)[:, None], (1, T))
    cum_hi = np.tile(((soc0 - soc_lo) * scale)[:, None], (1, T))
    _check_feasible(q_ev, lo, hi, cum_lo, cum_hi)
    draw = rng.uniform(c_lo, c_hi, size=(n, T))
    x = _project_feasible(draw, q_ev, lo, hi, cum_lo, cum_hi)
    soc = np.empty((n, T + 1))
    for i in range(n):
        soc[i] = soc_trajectory(soc0[i], capacities[i], x[i], dt1)
    return ChargingSchedule(
        rates=x, q_ev=q_ev.copy(), soc=soc,
        netload=_netload(np.asarray(baseline, float), x),
        baseline=np.asarray(baseline, float).copy(),
        objective=_ramp_objective(np.asarray(baseline, float), x),
        iterations=0, dt1=dt1, capacities=capacities.copy(),
    )


def schedule_rows(cds_id: str, sched: ChargingSchedule):
    """Flatten a schedule into (cds_id, ev, sub_interval, rate, soc) rows."""
    n, T = sched.rates.shape
    for i in range(n):
        for t1 in range(T):
            yield (cds_id, i, t1, float(sched.rates[i, t1]),
                   float(sched.soc[i, t1 + 1]))
