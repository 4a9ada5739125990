"""Command-line front door: scenario runs, standalone solvers, validation.

Every verb writes its outputs atomically (temp file + rename) and maps
errors to exit codes: 0 success, 1 validation or parse error, 2 solver
non-convergence under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cosim, evdispatch, market, netio, powerflow, traffic

OUT_ENV = "POWERTRAFFIC_OUT"

_SCENARIO_PATH_KEYS = ("net", "trips", "feeder", "load_profile",
                       "demand_profile")
_SCENARIO_EXTRA_KEYS = _SCENARIO_PATH_KEYS + ("sites", "capacity_scale",
                                              "demand_scale")


def _read(path: str) -> str:
    with open(path, "r") as fh:
        return fh.read()


def _read_profile(path: str) -> list[float]:
    """One value per line, or comma-separated rows where the last column
    is the value.  '#' comments allowed."""
    vals = []
    for raw in _read(path).splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals.append(float(line.split(",")[-1]))
    return vals


def _out_dir(args) -> str:
    return args.out or os.environ.get(OUT_ENV, ".")


def _load_scenario(path: str, overrides: list[str]):
    """Parse a scenario document into (config, networks, profiles, scales)."""
    kv = netio.parse_keyvalue(_read(path))
    for item in overrides or []:
        if "=" not in item:
            raise netio.ValidationError(f"--set needs key=value, got {item!r}")
        k, _, v = item.partition("=")
        kv[k.strip()] = v.strip()
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    missing = [k for k in _SCENARIO_PATH_KEYS if k not in kv]
    if missing:
        raise netio.ValidationError(f"scenario missing keys: {missing}")
    tn = netio.load_traffic_network(_read(resolve(kv["net"])),
                                    _read(resolve(kv["trips"])))
    pn = netio.load_feeder(_read(resolve(kv["feeder"])))
    load_profile = _read_profile(resolve(kv["load_profile"]))
    demand_profile = _read_profile(resolve(kv["demand_profile"]))
    site_list = []
    for tok in kv.get("sites", "").split():
        bus_s, _, node_s = tok.partition(":")
        site_list.append((f"cds{int(bus_s):02d}", int(bus_s), int(node_s)))
    capacity_scale = float(kv.get("capacity_scale", "1.0"))
    demand_scale = float(kv.get("demand_scale", "1.0"))
    cfg_kv = {k: v for k, v in kv.items() if k not in _SCENARIO_EXTRA_KEYS}
    cfg = netio.ScenarioConfig.from_mapping(cfg_kv)
    sites = netio.couple_sites(cfg, tn, pn, site_list)
    return cfg, (tn, pn, sites), load_profile, demand_profile, \
        capacity_scale, demand_scale


def _cmd_validate(args) -> int:
    text = _read(args.path)
    head = next((ln.strip() for ln in text.splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")), "")
    if head.startswith("<"):
        if not args.trips:
            print("error: TNTP network needs a trips file to validate",
                  file=sys.stderr)
            return 1
        tn = netio.load_traffic_network(text, _read(args.trips))
        print(f"ok: {len(tn.nodes)} nodes, {len(tn.links)} links, "
              f"{len(tn.od_demand)} od pairs")
    else:
        pn = netio.load_feeder(text)
        print(f"ok: {pn.n_buses} buses, {len(pn.branches)} branches")
    return 0


def _cmd_traffic(args) -> int:
    tn = netio.load_traffic_network(_read(args.net), _read(args.trips))
    res = traffic.solve_sue_interval(
        tn, tn.demand_at(0), eps=args.eps, max_iter=args.max_iter,
    )
    cap = np.array([l.capacity for l in tn.links])
    f0 = np.array([l.free_flow_time for l in tn.links])
    times = traffic.bpr_times(f0, cap, res.flows)
    rows = [(l.index, l.tail, l.head, float(res.flows[l.index]),
             float(times[l.index])) for l in tn.links]
    out = os.path.join(_out_dir(args), "flows.csv")
    cosim._atomic_write(out, cosim._csv(
        rows, ["link", "tail", "head", "flow", "time"]))
    delay = traffic.total_delay(tn, res.flows)
    print(f"equilibrium: iters={res.iterations} gap={res.gap:.3e} "
          f"delay={delay:.2f}h -> {out}")
    if args.strict and not res.converged:
        return 2
    return 0


def _cmd_opf(args) -> int:
    pn = netio.load_feeder(_read(args.feeder))
    sol = powerflow.solve_opf(
        pn, alpha1=args.alpha1, beta1=args.beta1, rho=args.rho,
        eps=args.eps, max_iter=args.max_iter, trace=args.trace,
    )
    rows = [(b, float(sol.state.v[i]), float(sol.state.l[i]),
             float(sol.state.S[i].real), float(sol.state.S[i].imag),
             float(sol.state.s[i].real), float(sol.state.s[i].imag))
            for i, b in enumerate(sol.state.bus_ids)]
    out = os.path.join(_out_dir(args), "opf.csv")
    cosim._atomic_write(out, cosim._csv(
        rows, ["bus", "v", "l", "P", "Q", "p", "q"]))
    if args.trace and sol.trace:
        tpath = os.path.join(_out_dir(args), "opf_trace.csv")
        cosim._atomic_write(tpath, cosim._csv(
            sol.trace, ["k", "primal", "dual", "objective"]))
    print(f"opf: objective={sol.objective:.6f} iters={sol.iterations} "
          f"gap={sol.gap:.2e} converged={sol.converged} -> {out}")
    if args.strict and not sol.converged:
        return 2
    return 0


def _cmd_equilibrium(args) -> int:
    cfg, networks, *_ = _load_scenario(args.scenario, args.set)
    _, _, sites = networks
    cm = market.CostModel(fps=cfg.fps, futs=cfg.futs, fwt=cfg.fwt,
                          gamma1=cfg.gamma1, gamma1_max=cfg.gamma1_max,
                          tau1=cfg.tau1, c1_rate=cfg.c1_rate)
    eq = market.solve_equilibrium(
        cm, args.qpds, args.quts, (cfg.pi_min, cfg.pi_max),
        (cfg.p_min, cfg.p_max), len(sites),
        gamma2=args.gamma2 or cfg.gamma2, eps=cfg.eps_eq,
        max_iter=cfg.max_iter_eq,
    )
    print(f"price={eq.price:.6f} powers={np.round(eq.powers, 6).tolist()} "
          f"iters={eq.iterations} converged={eq.converged}")
    if args.strict and not eq.converged:
        return 2
    return 0


def _cmd_schedule(args) -> int:
    cfg, *_ = _load_scenario(args.scenario, args.set)
    n_sub = max(int(round(cfg.tau2 / cfg.subinterval_minutes)), 2)
    if args.baseline:
        baseline = np.array([float(x) for x in args.baseline.split(",")])
    else:
        baseline = np.zeros(n_sub)
    rng = np.random.default_rng(args.seed if args.seed is not None
                                else cfg.seed)
    span = cfg.soc_max - cfg.soc_min
    soc0 = rng.uniform(cfg.soc_min + 0.25 * span, cfg.soc_max - 0.25 * span,
                       size=args.evs)
    q_ev = np.full(args.evs, len(baseline) * args.injection / args.evs)
    sched = evdispatch.solve_smart_schedule(
        baseline, q_ev, soc0, np.full(args.evs, cfg.ev_capacity_mwh),
        (cfg.c_ev_min, cfg.c_ev_max), (cfg.soc_min, cfg.soc_max),
        cfg.subinterval_minutes / 60.0,
    )
    out = os.path.join(_out_dir(args), "schedule.csv")
    cosim._atomic_write(out, cosim._csv(
        list(evdispatch.schedule_rows("cli", sched)),
        ["cds", "ev", "sub_interval", "rate_mw", "soc"]))
    print(f"schedule: objective={sched.objective:.6e} "
          f"iters={sched.iterations} -> {out}")
    return 0


def _cmd_run(args) -> int:
    cfg, networks, load_profile, demand_profile, cscale, dscale = \
        _load_scenario(args.scenario, args.set)
    if args.seed is not None:
        cfg = netio.ScenarioConfig(**{**cfg.__dict__, "seed": args.seed})
    report = cosim.run_scenario(cfg, networks, load_profile, demand_profile,
                                capacity_scale=cscale, demand_scale=dscale)
    out = _out_dir(args)
    summary = cosim.write_report(report, out)
    print(json.dumps(summary, sort_keys=True, indent=2))
    print(f"report -> {out}", file=sys.stderr)
    if args.strict and not summary["all_converged"]:
        return 2
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="powertraffic",
        description="Coupled feeder/road co-simulation with EV stations",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (results are identical for any "
                        "value; solvers are deterministic)")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out=True):
        if out:
            sp.add_argument("--out", default=None,
                            help=f"output directory (default ${OUT_ENV} or .)")
        sp.add_argument("--strict", action="store_true",
                        help="exit 2 on solver non-convergence")

    sp = sub.add_parser("validate", help="check a feeder or TNTP network")
    sp.add_argument("path")
    sp.add_argument("trips", nargs="?", default=None)

    sp = sub.add_parser("traffic", help="single-interval user equilibrium")
    sp.add_argument("net")
    sp.add_argument("trips")
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--max-iter", type=int, default=500)
    common(sp)

    sp = sub.add_parser("opf", help="relaxed branch-flow OPF")
    sp.add_argument("feeder")
    sp.add_argument("--rho", type=float, default=1.0)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--max-iter", type=int, default=5000)
    sp.add_argument("--alpha1", type=float, default=1.0)
    sp.add_argument("--beta1", type=float, default=0.0)
    sp.add_argument("--trace", action="store_true")
    common(sp)

    sp = sub.add_parser("equilibrium", help="price/power equilibrium")
    sp.add_argument("scenario")
    sp.add_argument("--qpds", type=float, required=True)
    sp.add_argument("--quts", type=float, required=True)
    sp.add_argument("--gamma2", type=float, default=None)
    sp.add_argument("--set", action="append", default=[])
    common(sp, out=False)

    sp = sub.add_parser("schedule", help="one station smart schedule")
    sp.add_argument("scenario")
    sp.add_argument("--evs", type=int, required=True)
    sp.add_argument("--injection", type=float, required=True,
                    help="station power over the window, MW")
    sp.add_argument("--baseline", default=None,
                    help="comma-separated sub-interval netload, MW")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--set", action="append", default=[])
    common(sp)

    sp = sub.add_parser("run", help="full scenario")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--set", action="append", default=[],
                    metavar="KEY=VALUE",
                    help="override a scenario config key")
    common(sp)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads is not None:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    handlers = {
        "validate": _cmd_validate,
        "traffic": _cmd_traffic,
        "opf": _cmd_opf,
        "equilibrium": _cmd_equilibrium,
        "schedule": _cmd_schedule,
        "run": _cmd_run,
    }
    try:
        return handlers[args.verb](args)
    except (netio.ParseError, netio.ValidationError,
            evdispatch.InfeasibleDemandError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
