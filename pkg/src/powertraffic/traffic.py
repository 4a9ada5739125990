"""Per-interval user-equilibrium traffic assignment by Frank-Wolfe.

Each interval solves a static assignment whose link times start from the
previous interval's congested times, which chains the intervals into a
dynamic equilibrium.  Flows live in numpy vectors indexed by link file
order; times are minutes.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .netio import TrafficNetwork

__all__ = [
    "LinkCost",
    "AssignmentResult",
    "UnreachableError",
    "bpr_time",
    "bpr_times",
    "beckmann_objective",
    "shortest_path",
    "all_or_nothing",
    "golden_section",
    "solve_sue_interval",
    "total_delay",
]

BPR_ALPHA = 0.15
BPR_POWER = 4

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class UnreachableError(RuntimeError):
    """No path exists for an OD pair under the given costs."""

    def __init__(self, origin: int, dest: int):
        self.od = (origin, dest)
        super().__init__(f"unreachable destination: OD pair ({origin}, {dest})")


@dataclass(frozen=True)
class LinkCost:
    """Per-link travel times and the base (zero-flow) times they grew from."""

    times: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        if np.any(self.base < 0) or np.any(self.times + 1e-12 < self.base):
            raise ValueError("times must dominate the non-negative base")


@dataclass(frozen=True)
class AssignmentResult:
    """Converged per-interval assignment.

    ``od_times`` maps each OD pair to its equilibrium shortest travel time;
    ``od_paths`` keeps the node sequence of that shortest path for the
    coupling stage.  ``gap`` is the final step-norm relative gap.
    """

    flows: np.ndarray
    iterations: int
    gap: float
    od_times: dict[tuple[int, int], float]
    od_paths: dict[tuple[int, int], tuple[int, ...]]
    objective: float
    converged: bool
    interval: int = 0


def bpr_time(f0: float, capacity: float, flow: float) -> float:
    """Link travel time at one flow level: f0 * (1 + 0.15 (flow/C)^4)."""
    if f0 <= 0 or capacity <= 0 or flow < 0:
        raise ValueError("bpr_time needs f0 > 0, capacity > 0, flow >= 0")
    return f0 * (1.0 + BPR_ALPHA * (flow / capacity) ** BPR_POWER)


def bpr_times(base: np.ndarray, capacity: np.ndarray, flows: np.ndarray) -> np.ndarray:
    """Vectorized congestion curve over all links."""
    return base * (1.0 + BPR_ALPHA * (flows / capacity) ** BPR_POWER)


def _capacities(net: TrafficNetwork) -> np.ndarray:
    return np.array([ln.capacity for ln in net.links], dtype=float)


def _free_flow(net: TrafficNetwork) -> np.ndarray:
    return np.array([ln.free_flow_time for ln in net.links], dtype=float)


def free_flow_cost(net: TrafficNetwork) -> LinkCost:
    f0 = _free_flow(net)
    return LinkCost(times=f0.copy(), base=f0)


def beckmann_objective(net: TrafficNetwork, flows: np.ndarray,
                       base: np.ndarray | None = None) -> float:
    """Sum of per-link travel-time integrals from 0 to the link flow.

    Closed form of the BPR antiderivative:
    f0*x + f0*0.15*x^5 / (5 C^4).  Convex in the flow vector.
    """
    flows = np.asarray(flows, dtype=float)
    if np.any(flows < 0) or not np.all(np.isfinite(flows)):
        raise ValueError("flows must be finite and non-negative")
    f0 = _free_flow(net) if base is None else np.asarray(base, dtype=float)
    cap = _capacities(net)
    return float(np.sum(f0 * flows + f0 * BPR_ALPHA * flows**5 / (5.0 * cap**4)))


def shortest_path(net: TrafficNetwork, costs: np.ndarray, origin: int):
    """Label-setting search from one origin over non-negative link costs.

    Returns (dist, pred) where pred maps node -> incoming Link on the
    shortest tree.  Ties are broken toward the smaller incoming link index
    so identical inputs always produce identical trees.
    """
    dist: dict[int, float] = {origin: 0.0}
    pred: dict[int, object] = {}
    done: set[int] = set()
    adj = net.out_links()
    heap: list[tuple[float, int]] = [(0.0, origin)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for ln in adj[u]:
            nd = d + costs[ln.index]
            v = ln.head
            old = dist.get(v)
            if old is None or nd < old:
                dist[v] = nd
                pred[v] = ln
                heapq.heappush(heap, (nd, v))
            elif nd == old and v not in done and ln.index < pred[v].index:
                pred[v] = ln
    return dist, pred


def _walk_back(pred, origin: int, dest: int) -> list:
    links = []
    cur = dest
    while cur != origin:
        ln = pred[cur]
        links.append(ln)
        cur = ln.tail
    links.reverse()
    return links


def all_or_nothing(net: TrafficNetwork, costs: np.ndarray,
                   demand: dict[tuple[int, int], float]) -> np.ndarray:
    """Load each OD pair's whole demand on its current minimum-cost path.

    The per-origin loadings are accumulated in ascending origin order, so
    the result is a plain order-independent sum of per-OD flow vectors.
    """
    costs = np.asarray(costs, dtype=float)
    if np.any(costs <= 0):
        raise ValueError("all_or_nothing needs strictly positive costs")
    flows = np.zeros(net.n_links)
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (r, s), q in demand.items():
        if q < 0:
            raise ValueError(f"negative demand on OD pair ({r}, {s})")
        if q > 0 and r != s:
            by_origin.setdefault(r, []).append((s, q))
    for origin in sorted(by_origin):
        dist, pred = shortest_path(net, costs, origin)
        for dest, q in sorted(by_origin[origin]):
            if dest not in dist:
                raise UnreachableError(origin, dest)
            for ln in _walk_back(pred, origin, dest):
                flows[ln.index] += q
    return flows


def golden_section(phi, tol: float = 1e-6) -> float:
    """Minimize a unimodal function on [0, 1] by golden-ratio reduction."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    lo, hi = 0.0, 1.0
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = phi(x1), phi(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = phi(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = phi(x2)
    return 0.5 * (lo + hi)


def solve_sue_interval(net: TrafficNetwork,
                       demand: dict[tuple[int, int], float],
                       f_prev: LinkCost | None = None,
                       eps: float = 1e-4,
                       max_iter: int = 500,
                       golden_tol: float = 1e-6,
                       interval: int = 0) -> AssignmentResult:
    """One interval of user-equilibrium assignment by Frank-Wolfe.

    Starts from an all-or-nothing loading on the carried-over times,
    then alternates: retime links, find the all-or-nothing direction,
    golden-section the step on [0, 1], update by convex combination, and
    stop when ||step||_2 / sum(flows) drops below ``eps``.  Passing the
    previous interval's congested times as ``f_prev`` chains intervals.
    """
    cap = _capacities(net)
    base = _free_flow(net) if f_prev is None else np.asarray(f_prev.times, dtype=float)
    if np.any(base <= 0):
        raise ValueError("carried-over base times must be positive")

    demand = {k: v for k, v in demand.items() if v > 0 and k[0] != k[1]}
    if not demand:
        empty = np.zeros(net.n_links)
        return AssignmentResult(flows=empty, iterations=0, gap=0.0, od_times={},
                                od_paths={}, objective=0.0, converged=True,
                                interval=interval)

    flows = all_or_nothing(net, base, demand)
    gap = math.inf
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        times = bpr_times(base, cap, flows)
        target = all_or_nothing(net, times, demand)
        direction = target - flows
        if not np.any(direction):
            gap, converged = 0.0, True
            break

        def beck(z: float) -> float:
            return beckmann_objective(net, flows + z * direction, base)

        zeta = golden_section(beck, golden_tol)
        step = zeta * direction
        total = float(np.sum(flows))
        gap = float(np.linalg.norm(step) / total) if total > 0 else 0.0
        flows = flows + step
        if gap <= eps:
            converged = True
            break

    times = bpr_times(base, cap, flows)
    od_times: dict[tuple[int, int], float] = {}
    od_paths: dict[tuple[int, int], tuple[int, ...]] = {}
    for origin in sorted({r for r, _ in demand}):
        dist, pred = shortest_path(net, times, origin)
        for (r, s), _ in sorted(demand.items()):
            if r != origin:
                continue
            if s not in dist:
                raise UnreachableError(r, s)
            od_times[(r, s)] = dist[s]
            path = [origin] + [ln.head for ln in _walk_back(pred, origin, s)]
            od_paths[(r, s)] = tuple(path)

    return AssignmentResult(
        flows=flows,
        iterations=n_iter,
        gap=gap,
        od_times=od_times,
        od_paths=od_paths,
        objective=beckmann_objective(net, flows, base),
        converged=converged,
        interval=interval,
    )


def total_delay(net: TrafficNetwork, flows: np.ndarray,
                base: np.ndarray | None = None) -> float:
    """Vehicle-hours of delay versus free flow: sum of flow*(time - f0)/60.

    With interval chaining, pass the interval's carried-over ``base`` so
    the realized times are evaluated on the congested curve; the delay
    reference stays the pristine free-flow time either way.
    """
    flows = np.asarray(flows, dtype=float)
    f0 = _free_flow(net)
    b = f0 if base is None else np.asarray(base, dtype=float)
    times = bpr_times(b, _capacities(net), flows)
    return float(np.sum(flows * (times - f0)) / 60.0)
