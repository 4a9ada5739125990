"""Network data models, file loaders, and the station coupling builder.

Two graphs live here: the road network (TNTP link/trips layout) and the
radial feeder (a small record-per-line document).  Both are validated on
load and immutable afterwards, so they can be shared read-only between
solver stages.  All electrical quantities are stored in per-unit on the
feeder's MVA base; road travel times are minutes and flows are vehicles
per interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

__all__ = [
    "ParseError",
    "ValidationError",
    "Link",
    "TrafficNetwork",
    "Bus",
    "Branch",
    "PowerNetwork",
    "CdsSite",
    "ScenarioConfig",
    "load_traffic_network",
    "load_feeder",
    "couple_sites",
    "dump_traffic_network",
    "dump_trips",
    "dump_feeder",
    "parse_keyvalue",
]


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """A structurally parsed network violates an invariant."""


# ---------------------------------------------------------------------------
# road network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Link:
    """One directed road link with its BPR parameters.

    ``index`` is the position in the input file and is the link's slot in
    every flow vector.  ``free_flow_time`` is minutes, ``capacity`` is
    vehicles per interval.
    """

    index: int
    tail: int
    head: int
    free_flow_time: float
    capacity: float


@dataclass(frozen=True)
class TrafficNetwork:
    """Directed road graph with per-interval origin/destination demand.

    ``od_demand`` maps ``(origin, destination, departure_interval)`` to a
    vehicle count.  Loaders put everything at interval 0; the scenario
    runner builds per-interval tables from profiles.
    """

    nodes: tuple[int, ...]
    links: tuple[Link, ...]
    od_demand: dict[tuple[int, int, int], float]

    def __post_init__(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise ValidationError("duplicate node id")
        for ln in self.links:
            if ln.capacity <= 0:
                raise ValidationError(
                    f"nonpositive capacity on link {ln.tail}->{ln.head}"
                )
            if ln.free_flow_time <= 0:
                raise ValidationError(
                    f"nonpositive free-flow time on link {ln.tail}->{ln.head}"
                )
            if ln.tail not in node_set or ln.head not in node_set:
                raise ValidationError(
                    f"link {ln.tail}->{ln.head} references unknown node"
                )
        for (r, s, d), q in self.od_demand.items():
            if r not in node_set or s not in node_set:
                raise ValidationError(f"OD pair ({r},{s}) references unknown node")
            if q < 0:
                raise ValidationError(f"negative demand on OD pair ({r},{s})")
            if not math.isfinite(q):
                raise ValidationError(f"non-finite demand on OD pair ({r},{s})")

    @property
    def n_links(self) -> int:
        return len(self.links)

    def out_links(self) -> dict[int, list[Link]]:
        """Adjacency keyed by tail node, links in file order."""
        adj: dict[int, list[Link]] = {n: [] for n in self.nodes}
        for ln in self.links:
            adj[ln.tail].append(ln)
        return adj

    def demand_at(self, interval: int) -> dict[tuple[int, int], float]:
        """Demand table for one departure interval."""
        return {
            (r, s): q
            for (r, s, d), q in self.od_demand.items()
            if d == interval and q > 0
        }


# ---------------------------------------------------------------------------
# feeder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    """Feeder bus.  Loads are per-unit complex power; ``vmin``/``vmax``
    bound the squared voltage magnitude; ``pmin``..``qmax`` bound the
    controllable injection on top of the fixed load."""

    bus_id: int
    load_p: float = 0.0
    load_q: float = 0.0
    vmin: float = 0.81
    vmax: float = 1.21
    pmin: float = 0.0
    pmax: float = 0.0
    qmin: float = 0.0
    qmax: float = 0.0

    @property
    def load(self) -> complex:
        return complex(self.load_p, self.load_q)


@dataclass(frozen=True)
class Branch:
    """Feeder branch, named after its child bus (the bus farther from the
    slack).  Impedance in per-unit; ``lmax`` caps the squared current."""

    child: int
    ancestor: int
    r: float
    x: float
    lmax: float = math.inf

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class PowerNetwork:
    """Radial feeder rooted at the slack bus.

    The tree property is checked, never assumed: exactly one ancestor per
    non-slack bus, no cycles, everything reachable from the slack.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack: int
    base_mva: float = 1.0
    slack_v: float = 1.0

    def __post_init__(self):
        ids = [b.bus_id for b in self.buses]
        id_set = set(ids)
        if len(id_set) != len(ids):
            raise ValidationError("duplicate bus id")
        if self.slack not in id_set:
            raise ValidationError(f"missing slack bus {self.slack}")
        if self.base_mva <= 0:
            raise ValidationError("base_mva must be positive")
        parent: dict[int, int] = {}
        for br in self.branches:
            if br.child not in id_set or br.ancestor not in id_set:
                raise ValidationError(
                    f"branch {br.child}->{br.ancestor} references unknown bus"
                )
            if br.child == self.slack:
                raise ValidationError("slack bus cannot have an ancestor")
            if br.child in parent:
                raise ValidationError(f"bus {br.child} has two ancestors")
            if br.r < 0:
                raise ValidationError(f"negative resistance on branch {br.child}")
            parent[br.child] = br.ancestor
        if len(self.branches) != len(self.buses) - 1:
            raise ValidationError(
                f"cycle detected or disconnected bus: {len(self.branches)} branches "
                f"for {len(self.buses)} buses"
            )
        # walk up from every bus; a revisit inside one walk is a cycle
        for b in ids:
            seen = {b}
            cur = b
            while cur != self.slack:
                if cur not in parent:
                    raise ValidationError(f"disconnected bus {cur}")
                cur = parent[cur]
                if cur in seen:
                    raise ValidationError(f"cycle detected through bus {cur}")
                seen.add(cur)
        for b in self.buses:
            if b.vmin > b.vmax:
                raise ValidationError(f"bus {b.bus_id}: vmin > vmax")
            if b.pmin > b.pmax or b.qmin > b.qmax:
                raise ValidationError(f"bus {b.bus_id}: empty injection box")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.bus_id == bus_id:
                return b
        raise KeyError(bus_id)

    def parent_of(self) -> dict[int, int]:
        return {br.child: br.ancestor for br in self.branches}

    def children_of(self) -> dict[int, list[int]]:
        ch: dict[int, list[int]] = {b.bus_id: [] for b in self.buses}
        for br in self.branches:
            ch[br.ancestor].append(br.child)
        return ch


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CdsSite:
    """One charging/discharging station binding a feeder bus to a road node.

    ``capacity`` is the largest vehicle count the lot holds, ``avg_rate``
    the average per-vehicle charge/discharge power (MW per interval), and
    ``parked`` the current occupancy.
    """

    cds_id: str
    pds_bus: int
    uts_node: int
    capacity: int
    avg_rate: float
    parked: int = 0
    injection_bound: float = math.inf

    def __post_init__(self):
        if self.avg_rate <= 0:
            raise ValidationError(f"{self.cds_id}: avg_rate must be positive")
        if not 0 <= self.parked <= self.capacity:
            raise ValidationError(f"{self.cds_id}: parked count outside [0, capacity]")


def couple_sites(cfg: "ScenarioConfig", tn: TrafficNetwork, pn: PowerNetwork,
                 site_list) -> list[CdsSite]:
    """Build one CdsSite per ``(cds_id, bus_id, node_id)`` entry.

    Capacity and average rate come from the scenario config; occupancy
    starts at zero.  Unknown bus/node ids and duplicate station ids are
    rejected.
    """
    bus_ids = {b.bus_id for b in pn.buses}
    node_ids = set(tn.nodes)
    sites: list[CdsSite] = []
    seen: set[str] = set()
    for cds_id, bus_id, node_id in site_list:
        cds_id = str(cds_id)
        if cds_id in seen:
            raise ValidationError(f"duplicate cds_id {cds_id}")
        if bus_id not in bus_ids:
            raise ValidationError(f"{cds_id}: unknown bus {bus_id}")
        if node_id not in node_ids:
            raise ValidationError(f"{cds_id}: unknown node {node_id}")
        seen.add(cds_id)
        sites.append(
            CdsSite(
                cds_id=cds_id,
                pds_bus=bus_id,
                uts_node=node_id,
                capacity=cfg.chi,
                avg_rate=cfg.c1_rate,
                parked=0,
            )
        )
    return sites


# ---------------------------------------------------------------------------
# scenario configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """Every tunable the engine reads, in one flat record.

    Prices are $/MWh (``rho1``) and $/h (``rho2``); ``rho3``/``rho4`` are
    the high-price and mid-price parking ratios.  Quadratic cost functions
    are coefficient triples (a, b, c) meaning a*x^2 + b*x + c.
    """

    interval_minutes: float = 15.0
    horizon: int = 24
    # prices and parking ratios
    rho1: float = 45.0
    rho2: float = 2.0
    rho3: float = 0.8
    rho4: float = 0.3
    # cost functions
    fps: tuple[float, float, float] = (0.5, 0.0, 0.0)
    futs: tuple[float, float, float] = (0.5, 0.0, 0.0)
    fwt: tuple[float, float, float] = (0.5, 0.0, 0.0)
    # weights and step sizes
    gamma1: float = 1.0
    gamma1_max: float = 10.0
    gamma2: float = 0.05
    alpha1: float = 1.0
    beta1: float = 0.0
    rho_admm: float = 1.0
    # tolerances
    eps_traffic: float = 1e-4
    eps_admm: float = 1e-5
    eps_eq: float = 1e-6
    # iteration caps
    max_iter_traffic: int = 500
    max_iter_admm: int = 5000
    max_iter_eq: int = 10000
    golden_tol: float = 1e-6
    # battery
    soc_min: float = 0.2
    soc_max: float = 0.9
    ev_capacity_mwh: float = 0.05
    # durations: tau1 is the waiting time (hours), tau2 the parking window
    # (minutes); sub-intervals slice tau2 for the smart schedule
    tau1: float = 0.25
    tau2: float = 15.0
    subinterval_minutes: float = 1.0
    # station geometry
    chi: int = 100
    c1_rate: float = 0.0005
    # market projection boxes
    pi_min: float = 0.0
    pi_max: float = 1000.0
    p_min: float = -1.0
    p_max: float = 1.0
    # EV rate box for the smart schedule (MW, discharge positive)
    c_ev_min: float = -0.002
    c_ev_max: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if min(self.eps_traffic, self.eps_admm, self.eps_eq) <= 0:
            raise ValidationError("tolerances must be positive")
        if not 0 <= self.gamma1 <= self.gamma1_max:
            raise ValidationError("gamma1 outside [0, gamma1_max]")
        if self.rho4 > self.rho3:
            raise ValidationError("rho4 must not exceed rho3")
        if not self.soc_min < self.soc_max:
            raise ValidationError("soc_min must be below soc_max")
        for name in ("rho3", "rho4"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValidationError(f"{name} outside [0, 1]")
        if self.interval_minutes <= 0 or self.horizon < 1:
            raise ValidationError("bad interval length or horizon")
        for trip in (self.fps, self.futs, self.fwt):
            if trip[0] < 0:
                raise ValidationError("quadratic cost coefficient a must be >= 0")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ScenarioConfig":
        """Build from a flat key/value table (all values still strings).

        Cost triples use keys like ``fps_a``/``fps_b``/``fps_c``.  Unknown
        keys raise, so typos fail fast.
        """
        kwargs: dict = {}
        triples = {"fps": [0.5, 0.0, 0.0], "futs": [0.5, 0.0, 0.0],
                   "fwt": [0.5, 0.0, 0.0]}
        known = set(cls.__dataclass_fields__)
        int_fields = {"horizon", "max_iter_traffic", "max_iter_admm",
                      "max_iter_eq", "chi", "seed"}
        for key, raw in kv.items():
            base, _, suffix = key.partition("_")
            if base in triples and suffix in ("a", "b", "c"):
                triples[base]["abc".index(suffix)] = float(raw)
            elif key in known:
                kwargs[key] = int(raw) if key in int_fields else float(raw)
            else:
                raise ValidationError(f"unknown config key {key!r}")
        for name, trip in triples.items():
            kwargs[name] = tuple(trip)
        return cls(**kwargs)


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse a flat ``key = value`` document.  '#' starts a comment.

    Repeated keys accumulate into a space-joined value so list-valued
    entries (like station placements) stay on multiple lines if wanted.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key or not val:
            raise ParseError("empty key or value", lineno)
        out[key] = (out[key] + " " + val) if key in out else val
    return out


# ---------------------------------------------------------------------------
# TNTP loaders
# ---------------------------------------------------------------------------


def _strip_tntp(text: str):
    """Yield (lineno, payload) with '~' comments removed."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("~", 1)[0].strip()
        if line:
            yield lineno, line


def _read_metadata(lines):
    """Consume header tags up to <END OF METADATA>; return (tags, rest)."""
    tags: dict[str, str] = {}
    rest: list[tuple[int, str]] = []
    in_meta = True
    for lineno, line in lines:
        if in_meta and line.startswith("<"):
            close = line.find(">")
            if close < 0:
                raise ParseError("unterminated metadata tag", lineno)
            tag = line[1:close].strip().upper()
            value = line[close + 1:].strip()
            tags[tag] = value
            if tag == "END OF METADATA":
                in_meta = False
            continue
        in_meta = False
        rest.append((lineno, line))
    return tags, rest


def load_traffic_network(tntp_text: str, od_text: str) -> TrafficNetwork:
    """Load a road network from TNTP link and trips documents.

    Link records are ``tail head capacity length fftt b power speed toll
    type ;``.  The per-link b/power columns are accepted but ignored: the
    congestion curve is the fixed BPR form used by the traffic solver.
    File order of link records defines the flow-vector index order.
    """
    tags, records = _read_metadata(_strip_tntp(tntp_text))
    try:
        n_nodes = int(tags["NUMBER OF NODES"])
        n_links = int(tags["NUMBER OF LINKS"])
    except KeyError as exc:
        raise ParseError(f"missing metadata tag {exc.args[0]!r}") from None

    links: list[Link] = []
    for lineno, line in records:
        fields = line.rstrip(";").split()
        if len(fields) < 5:
            raise ParseError(
                f"link record needs at least 5 fields, got {len(fields)}", lineno
            )
        try:
            tail, head = int(fields[0]), int(fields[1])
            capacity = float(fields[2])
            fftt = float(fields[4])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        links.append(
            Link(index=len(links), tail=tail, head=head,
                 free_flow_time=fftt, capacity=capacity)
        )
    if len(links) != n_links:
        raise ParseError(
            f"metadata announced {n_links} links but {len(links)} records found"
        )

    od: dict[tuple[int, int, int], float] = {}
    _, trip_records = _read_metadata(_strip_tntp(od_text))
    origin: int | None = None
    for lineno, line in trip_records:
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise ParseError("malformed Origin header", lineno) from None
            continue
        if origin is None:
            raise ParseError("trip record before any Origin header", lineno)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise ParseError(f"expected 'dest : flow', got {chunk!r}", lineno)
            dest_s, _, flow_s = chunk.partition(":")
            try:
                dest, flow = int(dest_s), float(flow_s)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if flow > 0 and dest != origin:
                od[(origin, dest, 0)] = od.get((origin, dest, 0), 0.0) + flow

    nodes = tuple(range(1, n_nodes + 1))
    return TrafficNetwork(nodes=nodes, links=tuple(links), od_demand=od)


def dump_traffic_network(tn: TrafficNetwork) -> str:
    """Serialize the link table back to TNTP text (canonical form)."""
    out = [
        f"<NUMBER OF NODES> {len(tn.nodes)}",
        f"<NUMBER OF LINKS> {len(tn.links)}",
        "<END OF METADATA>",
    ]
    for ln in tn.links:
        out.append(
            f"{ln.tail}\t{ln.head}\t{ln.capacity!r}\t{ln.free_flow_time!r}"
            f"\t{ln.free_flow_time!r}\t0.15\t4\t0\t0\t1\t;"
        )
    return "\n".join(out) + "\n"


def dump_trips(tn: TrafficNetwork) -> str:
    """Serialize the interval-0 demand table to TNTP trips text."""
    by_origin: dict[int, list[tuple[int, float]]] = {}
    for (r, s, d), q in sorted(tn.od_demand.items()):
        if d == 0:
            by_origin.setdefault(r, []).append((s, q))
    zones = len({r for r, _, _ in tn.od_demand} | {s for _, s, _ in tn.od_demand})
    out = [f"<NUMBER OF ZONES> {zones}", "<END OF METADATA>"]
    for r, pairs in sorted(by_origin.items()):
        out.append(f"Origin {r}")
        out.append("; ".join(f"{s} : {q!r}" for s, q in pairs) + ";")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# feeder loader
# ---------------------------------------------------------------------------


def load_feeder(feeder_doc: str) -> PowerNetwork:
    """Load a radial feeder from the record-per-line document.

    Records::

        base_mva <mva>
        slack <id> [v <squared pu>]
        bus <id> [load_p <pu>] [load_q <pu>] [vmin <pu^2>] [vmax <pu^2>]
                 [pmin <pu>] [pmax <pu>] [qmin <pu>] [qmax <pu>]
        branch <child> <ancestor> r <pu> x <pu> [lmax <pu^2>]

    Options are ``key value`` pairs in any order after the positional ids.
    """
    buses: list[Bus] = []
    branches: list[Branch] = []
    slack: int | None = None
    slack_v = 1.0
    base_mva = 1.0

    def opts(fields, lineno) -> dict[str, float]:
        if len(fields) % 2:
            raise ParseError("options must be key value pairs", lineno)
        try:
            return {fields[i]: float(fields[i + 1]) for i in range(0, len(fields), 2)}
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None

    for lineno, raw in enumerate(feeder_doc.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind = fields[0].lower()
        try:
            if kind == "base_mva":
                base_mva = float(fields[1])
            elif kind == "slack":
                slack = int(fields[1])
                extra = opts(fields[2:], lineno)
                slack_v = extra.get("v", 1.0)
            elif kind == "bus":
                bus_id = int(fields[1])
                extra = opts(fields[2:], lineno)
                allowed = {"load_p", "load_q", "vmin", "vmax",
                           "pmin", "pmax", "qmin", "qmax"}
                unknown = set(extra) - allowed
                if unknown:
                    raise ParseError(f"unknown bus option {sorted(unknown)}", lineno)
                buses.append(Bus(bus_id=bus_id, **extra))
            elif kind == "branch":
                child, ancestor = int(fields[1]), int(fields[2])
                extra = opts(fields[3:], lineno)
                unknown = set(extra) - {"r", "x", "lmax"}
                if unknown:
                    raise ParseError(f"unknown branch option {sorted(unknown)}", lineno)
                branches.append(Branch(child=child, ancestor=ancestor, **extra))
            else:
                raise ParseError(f"unknown record kind {kind!r}", lineno)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno) from None

    if slack is None:
        raise ValidationError("missing slack")
    return PowerNetwork(
        buses=tuple(buses), branches=tuple(branches),
        slack=slack, base_mva=base_mva, slack_v=slack_v,
    )


def dump_feeder(pn: PowerNetwork) -> str:
    """Serialize a feeder back to its document form (canonical)."""
    out = [f"base_mva {pn.base_mva!r}", f"slack {pn.slack} v {pn.slack_v!r}"]
    for b in pn.buses:
        out.append(
            f"bus {b.bus_id} load_p {b.load_p!r} load_q {b.load_q!r}"
            f" vmin {b.vmin!r} vmax {b.vmax!r}"
            f" pmin {b.pmin!r} pmax {b.pmax!r} qmin {b.qmin!r} qmax {b.qmax!r}"
        )
    for br in pn.branches:
        out.append(
            f"branch {br.child} {br.ancestor} r {br.r!r} x {br.x!r} lmax {br.lmax!r}"
        )
    return "\n".join(out) + "\n"
