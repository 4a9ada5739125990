"""Interval-stepping coordinator for the coupled feeder/road scenario.

Each interval runs, in order: the price/power equilibrium on the interval
netload and traffic load, the user-equilibrium assignment with carried
link times, the feeder OPF with the equilibrium powers as injection caps,
and the parking plus smart-charging stage.  The stage outputs feed the
next interval: scheduled charger power adjusts the netload, and planned
parking counts divert road trips to station nodes, re-entering after the
parking window.

An uncoordinated twin (no station power, no diversions) is stepped
alongside so every reported series has its baseline.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import evdispatch, market, powerflow, traffic
from .netio import CdsSite, PowerNetwork, ScenarioConfig, TrafficNetwork

__all__ = [
    "IntervalInputs",
    "IntervalState",
    "ScenarioReport",
    "run_interval",
    "run_scenario",
    "write_report",
]


@dataclass
class IntervalInputs:
    """Everything one interval consumes: the adjusted netload, the OD
    table with diversions and re-entries applied, and the shared RNG."""

    index: int
    netload_mw: float
    demand: dict[tuple[int, int], float]
    next_netload_mw: float
    rng: np.random.Generator


@dataclass
class IntervalState:
    """One interval's results plus the feedback terms for the next."""

    index: int
    q_pds: float
    q_uts: float
    equilibrium: market.EquilibriumState
    powers: dict[str, float]
    traffic_result: traffic.AssignmentResult
    opf: powerflow.OpfSolution
    injections: dict[str, float]
    decisions: dict[str, evdispatch.ParkingDecision]
    schedules: dict[str, evdispatch.ChargingSchedule]
    feedback_power_mw: float
    parked_by_cds: dict[str, int]
    base_times: np.ndarray
    flags: dict[str, bool] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class ScenarioReport:
    """Per-interval series for the coordinated run and its baseline twin."""

    horizon: int
    interval_minutes: float
    seed: int
    netload_before: list[float] = field(default_factory=list)
    netload_after: list[float] = field(default_factory=list)
    delay_before_h: list[float] = field(default_factory=list)
    delay_after_h: list[float] = field(default_factory=list)
    prices: list[float] = field(default_factory=list)
    social_before: list[float] = field(default_factory=list)
    social_after: list[float] = field(default_factory=list)
    parked: list[int] = field(default_factory=list)
    diverted: list[float] = field(default_factory=list)
    resumed: list[float] = field(default_factory=list)
    injections: list[dict[str, float]] = field(default_factory=list)
    counts: list[dict[str, int]] = field(default_factory=list)
    iterations: list[dict[str, int]] = field(default_factory=list)
    flags: list[dict[str, bool]] = field(default_factory=list)
    schedule_rows: list[tuple] = field(default_factory=list)
    pending_at_end: float = 0.0
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "horizon": self.horizon,
            "interval_minutes": self.interval_minutes,
            "seed": self.seed,
            "peak_netload_before_mw": max(self.netload_before),
            "peak_netload_after_mw": max(self.netload_after),
            "valley_netload_before_mw": min(self.netload_before),
            "valley_netload_after_mw": min(self.netload_after),
            "total_delay_before_h": sum(self.delay_before_h),
            "total_delay_after_h": sum(self.delay_after_h),
            "social_cost_before": sum(self.social_before),
            "social_cost_after": sum(self.social_after),
            "total_parked": sum(self.parked),
            "total_diverted": sum(self.diverted),
            "total_resumed": sum(self.resumed),
            "pending_at_end": self.pending_at_end,
            "all_converged": all(
                all(f.values()) for f in self.flags
            ) if self.flags else True,
        }
        return out


def _scaled_network(tn: TrafficNetwork, capacity_scale: float) -> TrafficNetwork:
    if capacity_scale == 1.0:
        return tn
    from .netio import Link
    links = tuple(
        Link(l.index, l.tail, l.head, l.free_flow_time,
             l.capacity * capacity_scale)
        for l in tn.links
    )
    return TrafficNetwork(nodes=tn.nodes, links=links, od_demand=tn.od_demand)


def _cost_model(cfg: ScenarioConfig) -> market.CostModel:
    return market.CostModel(
        fps=cfg.fps, futs=cfg.futs, fwt=cfg.fwt,
        gamma1=cfg.gamma1, gamma1_max=cfg.gamma1_max,
        tau1=cfg.tau1, c1_rate=cfg.c1_rate,
    )


def _node_inflow(tn: TrafficNetwork, flows: np.ndarray, node: int) -> float:
    return float(sum(flows[l.index] for l in tn.links if l.head == node))


def _feeder_loads(pn: PowerNetwork, netload_mw: float) -> dict[int, complex]:
    total_mw = sum(b.load_p for b in pn.buses) * pn.base_mva
    ratio = netload_mw / total_mw if total_mw > 0 else 0.0
    return {b.bus_id: b.load * ratio for b in pn.buses}


def run_interval(prev: IntervalState | None,
                 inputs: IntervalInputs,
                 networks: tuple[TrafficNetwork, PowerNetwork, list[CdsSite]],
                 cfg: ScenarioConfig) -> IntervalState:
    """Execute one interval of the coordinated pipeline.

    Solver non-convergence is downgraded to a flag on the state; only
    structural errors (infeasible boxes, unreachable trips) propagate.
    """
    tn, pn, sites = networks
    site_order = sorted(sites, key=lambda s: s.cds_id)
    timings: dict[str, float] = {}

    q_pds = inputs.netload_mw
    q_uts = sum(inputs.demand.values())

    # (a) price/power equilibrium
    t0 = time.perf_counter()
    cm = _cost_model(cfg)
    eq = market.solve_equilibrium(
        cm, q_pds, q_uts,
        pi_bounds=(cfg.pi_min, cfg.pi_max),
        p_bounds=(cfg.p_min, cfg.p_max),
        n_cds=len(site_order),
        gamma2=cfg.gamma2, eps=cfg.eps_eq, max_iter=cfg.max_iter_eq,
    )
    powers = {s.cds_id: float(eq.powers[i]) for i, s in enumerate(site_order)}
    timings["market"] = time.perf_counter() - t0

    # (b) user equilibrium with carried-over link times
    t0 = time.perf_counter()
    f_prev = None
    if prev is not None:
        f_prev = traffic.LinkCost(times=prev.base_times,
                                  base=prev.base_times)
    tr = traffic.solve_sue_interval(
        tn, inputs.demand, f_prev=f_prev,
        eps=cfg.eps_traffic, max_iter=cfg.max_iter_traffic,
        golden_tol=cfg.golden_tol, interval=inputs.index,
    )
    timings["traffic"] = time.perf_counter() - t0

    # (c) OPF with the equilibrium powers as injection caps
    t0 = time.perf_counter()
    loads = _feeder_loads(pn, q_pds)
    caps = {s.pds_bus: powers[s.cds_id] / pn.base_mva for s in site_order}
    opf = powerflow.solve_opf(
        pn, loads=loads, injection_caps=caps,
        alpha1=cfg.alpha1, beta1=cfg.beta1, rho=cfg.rho_admm,
        eps=cfg.eps_admm, max_iter=cfg.max_iter_admm, interval=inputs.index,
    )
    injections = {
        s.cds_id: float(opf.injections[s.pds_bus].real) * pn.base_mva
        for s in site_order
    }
    timings["opf"] = time.perf_counter() - t0

    # (d) parking decisions and smart schedules
    t0 = time.perf_counter()
    decisions: dict[str, evdispatch.ParkingDecision] = {}
    schedules: dict[str, evdispatch.ChargingSchedule] = {}
    parked: dict[str, int] = {}
    feedback_mw = 0.0
    n_sub = max(int(round(cfg.tau2 / cfg.subinterval_minutes)), 2)
    dt1_h = cfg.subinterval_minutes / 60.0
    total_mw = sum(b.load_p for b in pn.buses) * pn.base_mva
    for s in site_order:
        dec = evdispatch.parked_evs(
            eq.price, injections[s.cds_id],
            _node_inflow(tn, tr.flows, s.uts_node),
            cds_id=s.cds_id, capacity=s.capacity, avg_rate=s.avg_rate,
            rho1=cfg.rho1, rho2=cfg.rho2, rho3=cfg.rho3, rho4=cfg.rho4,
        )
        decisions[s.cds_id] = dec
        parked[s.cds_id] = dec.parked
        if dec.parked == 0:
            continue
        n = dec.parked
        share = pn.bus(s.pds_bus).load_p * pn.base_mva / total_mw if total_mw else 0.0
        ramp = np.linspace(inputs.netload_mw, inputs.next_netload_mw,
                           n_sub, endpoint=False) * share
        soc_span = cfg.soc_max - cfg.soc_min
        soc0 = inputs.rng.uniform(cfg.soc_min + 0.25 * soc_span,
                                  cfg.soc_max - 0.25 * soc_span, size=n)
        # per-vehicle energy target, clamped into what rates and SOC allow
        scale = cfg.ev_capacity_mwh / dt1_h
        q_lo = np.maximum(n_sub * cfg.c_ev_min, (soc0 - cfg.soc_max) * scale)
        q_hi = np.minimum(n_sub * cfg.c_ev_max, (soc0 - cfg.soc_min) * scale)
        q_ev = np.clip(np.full(n, n_sub * injections[s.cds_id] / n),
                       q_lo, q_hi)
        sched = evdispatch.solve_smart_schedule(
            ramp, q_ev, soc0, np.full(n, cfg.ev_capacity_mwh),
            (cfg.c_ev_min, cfg.c_ev_max), (cfg.soc_min, cfg.soc_max),
            dt1_h, max_iter=600, tol=1e-9,
        )
        schedules[s.cds_id] = sched
        feedback_mw += float(sched.rates.sum()) / n_sub
    timings["dispatch"] = time.perf_counter() - t0

    base_now = (f_prev.times if f_prev is not None
                else np.array([l.free_flow_time for l in tn.links]))
    times_now = traffic.bpr_times(
        base_now, np.array([l.capacity for l in tn.links]), tr.flows
    )
    return IntervalState(
        index=inputs.index,
        q_pds=q_pds,
        q_uts=q_uts,
        equilibrium=eq,
        powers=powers,
        traffic_result=tr,
        opf=opf,
        injections=injections,
        decisions=decisions,
        schedules=schedules,
        feedback_power_mw=feedback_mw,
        parked_by_cds=parked,
        base_times=times_now,
        flags={
            "market": eq.converged,
            "traffic": tr.converged,
            "opf": opf.converged,
        },
        timings=timings,
    )


def _divert_demand(demand: dict[tuple[int, int], float],
                   plans: dict[str, int],
                   paths: dict[tuple[int, int], tuple[int, ...]],
                   sites: list[CdsSite]) -> tuple[dict, list, float]:
    """Split planned parking counts off the OD pairs whose equilibrium
    path crosses each station node, proportional to their demand.

    Returns the adjusted table, (node, dest, amount) resume records, and
    the total actually diverted (capped by the available demand).
    """
    demand = dict(demand)
    resumes: list[tuple[int, int, float]] = []
    total = 0.0
    for site in sorted(sites, key=lambda s: s.cds_id):
        n = plans.get(site.cds_id, 0)
        if n <= 0:
            continue
        node = site.uts_node
        eligible = [
            od for od, path in paths.items()
            if node in path[1:-1] and demand.get(od, 0.0) > 0.0
        ]
        avail = sum(demand[od] for od in eligible)
        if avail <= 0.0:
            continue
        take = min(float(n), avail)
        for od in sorted(eligible):
            d = take * demand[od] / avail
            d = min(d, demand[od])
            if d <= 0.0:
                continue
            demand[od] -= d
            key = (od[0], node)
            demand[key] = demand.get(key, 0.0) + d
            resumes.append((node, od[1], d))
            total += d
    return demand, resumes, total


def run_scenario(cfg: ScenarioConfig,
                 networks: tuple[TrafficNetwork, PowerNetwork, list[CdsSite]],
                 load_profile, demand_profile,
                 capacity_scale: float = 1.0,
                 demand_scale: float = 1.0) -> ScenarioReport:
    """Fold the interval pipeline over the horizon.

    ``load_profile`` is the feeder netload in MW per interval;
    ``demand_profile`` multiplies the loaded OD table per interval.  The
    baseline twin (no coordination) shares the same inputs but never
    diverts vehicles or moves station power.
    """
    load_profile = list(map(float, load_profile))
    demand_profile = list(map(float, demand_profile))
    if len(load_profile) != cfg.horizon or len(demand_profile) != cfg.horizon:
        raise ValueError("profile lengths must equal the horizon")
    tn_raw, pn, sites = networks
    tn = _scaled_network(tn_raw, capacity_scale)
    base_od = tn.demand_at(0)
    rng = np.random.default_rng(cfg.seed)
    cm = _cost_model(cfg)

    park_intervals = max(int(math.ceil(cfg.tau2 / cfg.interval_minutes)), 1)
    pending_resume: dict[int, list[tuple[int, int, float]]] = {}
    report = ScenarioReport(horizon=cfg.horizon,
                            interval_minutes=cfg.interval_minutes,
                            seed=cfg.seed)
    stage_time: dict[str, float] = {}

    prev: IntervalState | None = None
    base_times_twin: traffic.LinkCost | None = None
    f0 = np.array([l.free_flow_time for l in tn.links])
    cap = np.array([l.capacity for l in tn.links])

    for t in range(cfg.horizon):
        demand_t = {od: q * demand_profile[t] * demand_scale
                    for od, q in base_od.items()}

        # feedback from the previous interval
        netload_t = load_profile[t]
        diverted_t = 0.0
        if prev is not None:
            netload_t -= prev.feedback_power_mw
            demand_t, resumes, diverted_t = _divert_demand(
                demand_t, prev.parked_by_cds,
                prev.traffic_result.od_paths, sites,
            )
            if resumes:
                slot = t + park_intervals
                pending_resume.setdefault(slot, []).extend(resumes)
        resumed_t = 0.0
        for node, dest, amount in pending_resume.pop(t, []):
            if node != dest:
                demand_t[(node, dest)] = demand_t.get((node, dest), 0.0) + amount
                resumed_t += amount

        nxt = load_profile[t + 1] if t + 1 < cfg.horizon else load_profile[t]
        state = run_interval(
            prev,
            IntervalInputs(index=t, netload_mw=netload_t, demand=demand_t,
                           next_netload_mw=nxt, rng=rng),
            (tn, pn, sites), cfg,
        )

        # baseline twin: raw profile, raw demand, own time chain
        twin_demand = {od: q * demand_profile[t] * demand_scale
                       for od, q in base_od.items()}
        t0 = time.perf_counter()
        twin = traffic.solve_sue_interval(
            tn, twin_demand, f_prev=base_times_twin,
            eps=cfg.eps_traffic, max_iter=cfg.max_iter_traffic,
            golden_tol=cfg.golden_tol, interval=t,
        )
        stage_time["baseline_traffic"] = (
            stage_time.get("baseline_traffic", 0.0) + time.perf_counter() - t0
        )
        twin_base = base_times_twin.times if base_times_twin is not None else f0
        base_times_twin = traffic.LinkCost(
            times=traffic.bpr_times(twin_base, cap, twin.flows),
            base=twin_base,
        )

        for k, v in state.timings.items():
            stage_time[k] = stage_time.get(k, 0.0) + v

        chained_base = (prev.base_times if prev is not None else f0)
        report.netload_before.append(load_profile[t])
        report.netload_after.append(netload_t)
        report.delay_before_h.append(
            traffic.total_delay(tn, twin.flows, base=twin_base))
        report.delay_after_h.append(
            traffic.total_delay(tn, state.traffic_result.flows,
                                base=chained_base))
        report.prices.append(state.equilibrium.price)
        report.social_after.append(
            market.utility_cost(cm, netload_t, state.q_uts,
                                state.equilibrium.powers))
        report.social_before.append(
            market.utility_cost(cm, load_profile[t],
                                sum(twin_demand.values()),
                                np.zeros(len(sites))))
        report.parked.append(sum(state.parked_by_cds.values()))
        report.diverted.append(diverted_t)
        report.resumed.append(resumed_t)
        report.injections.append(dict(sorted(state.injections.items())))
        report.counts.append(dict(sorted(state.parked_by_cds.items())))
        report.iterations.append({
            "market": state.equilibrium.iterations,
            "traffic": state.traffic_result.iterations,
            "opf": state.opf.iterations,
        })
        report.flags.append(dict(state.flags))
        for cds_id, sched in sorted(state.schedules.items()):
            for row in evdispatch.schedule_rows(cds_id, sched):
                report.schedule_rows.append((t,) + row)

        prev = state

    report.pending_at_end = float(
        sum(a for rows in pending_resume.values() for _, _, a in rows)
    )
    report.timings = stage_time
    return report


# ---------------------------------------------------------------------------
# report persistence
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows, header) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(repr(v) if isinstance(v, float) else str(v)
                            for v in row))
    return "\n".join(out) + "\n"


def write_report(report: ScenarioReport, out_dir: str) -> dict:
    """Persist the plot-ready series and the deterministic summary.

    ``summary.json`` is byte-stable for a fixed seed; wall-clock numbers
    go to ``timings.json`` so reruns stay comparable.
    """
    os.makedirs(out_dir, exist_ok=True)
    summary = report.summary()
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _atomic_write(os.path.join(out_dir, "timings.json"),
                  json.dumps(report.timings, sort_keys=True, indent=2) + "\n")
    _atomic_write(
        os.path.join(out_dir, "netload.csv"),
        _csv(
            [(t, report.netload_before[t], report.netload_after[t])
             for t in range(report.horizon)],
            ["interval", "before_mw", "after_mw"],
        ),
    )
    _atomic_write(
        os.path.join(out_dir, "delay.csv"),
        _csv(
            [(t, report.delay_before_h[t], report.delay_after_h[t])
             for t in range(report.horizon)],
            ["interval", "before_h", "after_h"],
        ),
    )
    _atomic_write(
        os.path.join(out_dir, "prices.csv"),
        _csv(list(enumerate(report.prices)), ["interval", "price"]),
    )
    inj_rows = []
    for t, (inj, cnt) in enumerate(zip(report.injections, report.counts)):
        for cds_id in sorted(inj):
            inj_rows.append((t, cds_id, inj[cds_id], cnt.get(cds_id, 0)))
    _atomic_write(
        os.path.join(out_dir, "injections.csv"),
        _csv(inj_rows, ["interval", "cds", "injection_mw", "parked"]),
    )
    _atomic_write(
        os.path.join(out_dir, "schedules.csv"),
        _csv(report.schedule_rows,
             ["interval", "cds", "ev", "sub_interval", "rate_mw", "soc"]),
    )
    _atomic_write(
        os.path.join(out_dir, "social_cost.csv"),
        _csv(
            [(t, report.social_before[t], report.social_after[t])
             for t in range(report.horizon)],
            ["interval", "before", "after"],
        ),
    )
    return summary
