"""Relaxed branch-flow optimal power flow solved by per-bus consensus ADMM.

The feeder model keeps, per bus, the squared voltage v, the squared
current l and complex power S on the branch toward the ancestor, and the
net complex injection s.  The rank-1 coupling v*l = |S|^2 is relaxed to
the positive-semidefinite block [[v, S], [S^H, l]], which for the
per-phase model is the second-order cone v*l >= |S|^2.

The ADMM splits the problem into an x-copy per bus carrying the cost,
boxes, and the cone, and a y-copy per bus carrying the linear power
balance and voltage drop.  Every physical variable is duplicated across
the two sides, and branch variables are additionally observed by the
ancestor (and the ancestor voltage by the child), so both updates are
bus-local.  Iterations are barrier-synchronized: each sweep updates all
buses from the previous sweep's values in fixed bus order, so results do
not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netio import PowerNetwork

__all__ = [
    "BranchFlowState",
    "AdmmState",
    "OpfSolution",
    "AdmmDivergence",
    "bfm_residual",
    "psd_project",
    "opf_objective",
    "admm_x_update",
    "admm_y_update",
    "admm_dual_update",
    "admm_setup",
    "solve_opf",
]


class AdmmDivergence(RuntimeError):
    """Non-finite iterate; carries the iteration index."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"divergence at ADMM iteration {iteration}")


@dataclass
class BranchFlowState:
    """Branch-flow variables in bus order.  Rows for the slack bus carry
    zeros in the branch quantities ``l`` and ``S``."""

    bus_ids: tuple[int, ...]
    v: np.ndarray
    l: np.ndarray
    S: np.ndarray
    s: np.ndarray
    interval: int = 0

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)


def bfm_residual(pn: PowerNetwork, st: BranchFlowState):
    """Power-balance and voltage-drop residuals of a state.

    Returns ``(balance, drop)``: per-bus complex residuals
    s_i - [S_i - sum_children (S_j - z_j l_j)] and per-bus real residuals
    v_anc - v_i + 2(r P + x Q) - |z|^2 l (zero at the slack row).  Both
    vanish exactly iff the state satisfies the branch flow equations.
    """
    n = pn.n_buses
    if len(st.bus_ids) != n or st.v.shape != (n,):
        raise ValueError("state dimensioned to a different network")
    pos = {b: i for i, b in enumerate(st.bus_ids)}
    balance = np.array(st.s, dtype=complex)
    drop = np.zeros(n)
    for br in pn.branches:
        i = pos[br.child]
        a = pos[br.ancestor]
        balance[i] -= st.S[i]
        balance[a] += st.S[i] - br.z * st.l[i]
        drop[i] = (
            st.v[a]
            - st.v[i]
            + 2.0 * (br.r * st.S[i].real + br.x * st.S[i].imag)
            - abs(br.z) ** 2 * st.l[i]
        )
    return balance, drop


def psd_project(v: float, l: float, S: complex):
    """Euclidean projection of [[v, S], [S^H, l]] onto the PSD cone.

    Closed-form 2x2 Hermitian eigen-decomposition with the negative
    eigenvalue clipped.  Already-PSD inputs come back unchanged.
    """
    half_gap = 0.5 * (v - l)
    disc = math.hypot(half_gap, abs(S))
    mid = 0.5 * (v + l)
    lo = mid - disc
    hi = mid + disc
    if lo >= 0.0 and v >= 0.0 and l >= 0.0:
        return v, l, S
    if hi <= 0.0:
        return 0.0, 0.0, 0.0 + 0.0j
    if S == 0:
        return max(v, 0.0), max(l, 0.0), 0.0 + 0.0j
    # keep the positive eigenpair: eigenvector (S, hi - v)
    w = hi - v
    norm2 = abs(S) ** 2 + w * w
    scale = hi / norm2
    return scale * abs(S) ** 2, scale * w * w, scale * S * w


def _cone_project_weighted(v, l, S, wv, wl, ws):
    """Projection onto {v*l >= |S|^2, v, l >= 0} in the diagonal metric
    diag(wv, wl, ws, ws).  Vectorized; assumes v > 0 and l >= 0 on entry
    (the box clamp runs first), which keeps the multiplier root unique.
    """
    v = np.asarray(v, dtype=float)
    l = np.asarray(l, dtype=float)
    S = np.asarray(S, dtype=complex)
    bad = v * l < np.abs(S) ** 2
    if not np.any(bad):
        return v, l, S
    a, b, c = v[bad], l[bad], S[bad]
    wv_ = wv[bad] if np.ndim(wv) else wv
    wl_ = wl[bad] if np.ndim(wl) else wl
    ws_ = ws[bad] if np.ndim(ws) else ws
    mu_hi = 2.0 * np.sqrt(wv_ * wl_) * (1.0 - 1e-14)
    lo = np.zeros_like(a)
    hi = np.broadcast_to(mu_hi, a.shape).astype(float).copy()
    for _ in range(80):
        mu = 0.5 * (lo + hi)
        det = 1.0 - mu**2 / (4.0 * wv_ * wl_)
        vv = (a + mu / (2.0 * wv_) * b) / det
        ll = (b + mu / (2.0 * wl_) * a) / det
        ss = ws_ * c / (ws_ + mu)
        h = vv * ll - np.abs(ss) ** 2
        too_high = h > 0
        hi = np.where(too_high, mu, hi)
        lo = np.where(too_high, lo, mu)
    mu = 0.5 * (lo + hi)
    det = 1.0 - mu**2 / (4.0 * wv_ * wl_)
    out_v, out_l, out_S = v.copy(), l.copy(), S.copy()
    out_v[bad] = (a + mu / (2.0 * wv_) * b) / det
    out_l[bad] = (b + mu / (2.0 * wl_) * a) / det
    out_S[bad] = ws_ * c / (ws_ + mu)
    return out_v, out_l, out_S


def opf_objective(pn: PowerNetwork, st: BranchFlowState,
                  alpha1: float, beta1: float) -> float:
    """Generation cost alpha1*g^2 + beta1*g summed over the buses with a
    controllable injection (slack plus any bus with a non-degenerate
    injection box); g is the controllable active power s_p + load_p."""
    total = 0.0
    pos = {b: i for i, b in enumerate(st.bus_ids)}
    for bus in pn.buses:
        controllable = (
            bus.bus_id == pn.slack or bus.pmax > bus.pmin or bus.qmax > bus.qmin
        )
        if not controllable:
            continue
        g = st.s[pos[bus.bus_id]].real + bus.load_p
        total += alpha1 * g * g + beta1 * g
    return float(total)


# ---------------------------------------------------------------------------
# ADMM machinery
# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    """Precomputed index structure, boxes, and projection matrices."""

    pn: PowerNetwork
    bus_ids: tuple[int, ...]
    slack_pos: int
    parent: np.ndarray          # parent position, -1 at slack
    nonslack: np.ndarray        # positions of non-slack buses
    n_children: np.ndarray
    children: list[list[int]]
    r: np.ndarray               # branch data at child position
    x: np.ndarray
    z2: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    lmax: np.ndarray
    sp_lo: np.ndarray           # net injection boxes (load folded in)
    sp_hi: np.ndarray
    sq_lo: np.ndarray
    sq_hi: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    a_obj: np.ndarray           # per-bus quadratic cost on g = p + load_p
    b_obj: np.ndarray
    alpha1: float
    beta1: float
    groups: list[tuple[np.ndarray, np.ndarray, list[int]]] = field(
        default_factory=list
    )  # (bus positions, stacked projector I - A^T(AA^T)^-1 A, layout children)


@dataclass
class AdmmState:
    """Both variable copies, the consensus duals, and residual norms.

    All arrays are indexed by bus position; branch-indexed quantities
    (l, S and the ancestor-side copies of them) live at the child's
    position.  ``rho`` is the penalty; residuals are 2-norms over all
    consensus rows.
    """

    rho: float
    xv: np.ndarray
    xl: np.ndarray
    xS: np.ndarray
    xsp: np.ndarray
    xsq: np.ndarray
    yv: np.ndarray
    yl: np.ndarray
    yS: np.ndarray
    ysp: np.ndarray
    ysq: np.ndarray
    yva: np.ndarray
    ySc: np.ndarray
    ylc: np.ndarray
    lam_v: np.ndarray
    lam_l: np.ndarray
    lam_SP: np.ndarray
    lam_SQ: np.ndarray
    lam_sp: np.ndarray
    lam_sq: np.ndarray
    lam_va: np.ndarray
    lam_ScP: np.ndarray
    lam_ScQ: np.ndarray
    lam_lc: np.ndarray
    iteration: int = 0
    primal_residual: float = math.inf
    dual_residual: float = math.inf

    def check_finite(self) -> None:
        for arr in (self.xv, self.xl, self.xS, self.xsp, self.xsq,
                    self.yv, self.yl, self.yS, self.ysp, self.ysq):
            if not np.all(np.isfinite(arr.view(float))):
                raise AdmmDivergence(self.iteration)


@dataclass
class OpfSolution:
    """Converged (or best-iterate) relaxed OPF result."""

    state: BranchFlowState
    objective: float
    injections: dict[int, complex]
    gap: float
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    trace: list[tuple[int, float, float, float]] | None = None


def admm_setup(pn: PowerNetwork, loads=None, injection_caps=None, *,
               alpha1: float = 1.0, beta1: float = 0.0,
               rho: float = 1.0) -> tuple[_Problem, AdmmState]:
    """Build the index structure and the flat-start state.

    ``loads`` optionally overrides the per-bus complex loads (per-unit);
    ``injection_caps`` tightens the controllable active-power upper bound
    at the listed buses.  Empty boxes are rejected here, before any
    iteration runs.
    """
    loads = dict(loads or {})
    caps = dict(injection_caps or {})
    bus_ids = tuple(b.bus_id for b in pn.buses)
    pos = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    parent = np.full(n, -1, dtype=int)
    r = np.zeros(n)
    x = np.zeros(n)
    lmax = np.zeros(n)
    for br in pn.branches:
        i = pos[br.child]
        parent[i] = pos[br.ancestor]
        r[i], x[i] = br.r, br.x
        lmax[i] = br.lmax
    slack_pos = pos[pn.slack]
    children: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        if i != slack_pos:
            children[parent[i]].append(i)

    vmin = np.array([b.vmin for b in pn.buses])
    vmax = np.array([b.vmax for b in pn.buses])
    vmin[slack_pos] = vmax[slack_pos] = pn.slack_v
    load_p = np.zeros(n)
    load_q = np.zeros(n)
    sp_lo, sp_hi = np.zeros(n), np.zeros(n)
    sq_lo, sq_hi = np.zeros(n), np.zeros(n)
    a_obj = np.zeros(n)
    b_obj = np.zeros(n)
    big = 1e6
    for b in pn.buses:
        i = pos[b.bus_id]
        ld = loads.get(b.bus_id, b.load)
        load_p[i], load_q[i] = ld.real, ld.imag
        p_hi = min(b.pmax, caps[b.bus_id]) if b.bus_id in caps else b.pmax
        p_lo = b.pmin
        q_lo, q_hi = b.qmin, b.qmax
        if b.bus_id == pn.slack:
            p_lo, p_hi, q_lo, q_hi = -big, big, -big, big
        if p_lo > p_hi:
            raise ValueError(
                f"infeasible injection box at bus {b.bus_id}: "
                f"[{p_lo}, {p_hi}] after caps"
            )
        sp_lo[i], sp_hi[i] = p_lo - load_p[i], p_hi - load_p[i]
        sq_lo[i], sq_hi[i] = q_lo - load_q[i], q_hi - load_q[i]
        controllable = (
            b.bus_id == pn.slack or b.pmax > b.pmin or b.qmax > b.qmin
        )
        if controllable:
            a_obj[i], b_obj[i] = alpha1, beta1

    prob = _Problem(
        pn=pn, bus_ids=bus_ids, slack_pos=slack_pos, parent=parent,
        nonslack=np.array([i for i in range(n) if i != slack_pos], dtype=int),
        n_children=np.array([len(c) for c in children]),
        children=children, r=r, x=x, z2=r * r + x * x,
        vmin=vmin, vmax=vmax, lmax=lmax,
        sp_lo=sp_lo, sp_hi=sp_hi, sq_lo=sq_lo, sq_hi=sq_hi,
        load_p=load_p, load_q=load_q, a_obj=a_obj, b_obj=b_obj,
        alpha1=alpha1, beta1=beta1,
    )
    _build_projectors(prob)

    v0 = np.clip(np.ones(n) * pn.slack_v, vmin, vmax)
    st = AdmmState(
        rho=rho,
        xv=v0.copy(), xl=np.zeros(n), xS=np.zeros(n, dtype=complex),
        xsp=-load_p.copy(), xsq=-load_q.copy(),
        yv=v0.copy(), yl=np.zeros(n), yS=np.zeros(n, dtype=complex),
        ysp=-load_p.copy(), ysq=-load_q.copy(),
        yva=v0[np.clip(parent, 0, None)] * (parent >= 0),
        ySc=np.zeros(n, dtype=complex), ylc=np.zeros(n),
        lam_v=np.zeros(n), lam_l=np.zeros(n),
        lam_SP=np.zeros(n), lam_SQ=np.zeros(n),
        lam_sp=np.zeros(n), lam_sq=np.zeros(n),
        lam_va=np.zeros(n), lam_ScP=np.zeros(n), lam_ScQ=np.zeros(n),
        lam_lc=np.zeros(n),
    )
    # clamp injections into their boxes right away
    np.clip(st.xsp, sp_lo, sp_hi, out=st.xsp)
    np.clip(st.xsq, sq_lo, sq_hi, out=st.xsq)
    st.ysp, st.ysq = st.xsp.copy(), st.xsq.copy()
    return prob, st


def _layout_dim(nc: int) -> int:
    # [v, l, P, Q, sp, sq, va] + [Pc, Qc, lc] per child
    return 7 + 3 * nc


def _build_projectors(prob: _Problem) -> None:
    """Per-bus affine projector onto its branch-flow equality rows.

    Buses with the same child count share a stacked (I - A^T (AA^T)^-1 A)
    tensor so the y-update is one batched matmul per group.
    """
    by_key: dict[tuple[int, bool], list[int]] = {}
    for i in range(len(prob.bus_ids)):
        key = (len(prob.children[i]), i == prob.slack_pos)
        by_key.setdefault(key, []).append(i)
    prob.groups = []
    for (nc, is_slack), members in sorted(by_key.items()):
        dim = _layout_dim(nc)
        mats = np.zeros((len(members), dim, dim))
        for m, i in enumerate(members):
            rows = 2 if is_slack else 3
            A = np.zeros((rows, dim))
            # balance, real: sp - P + sum(Pc - r_c*lc) = 0
            A[0, 4] = 1.0
            # balance, imag: sq - Q + sum(Qc - x_c*lc) = 0
            A[1, 5] = 1.0
            if not is_slack:
                A[0, 2] = -1.0
                A[1, 3] = -1.0
                # drop: va - v + 2 r P + 2 x Q - z2 l = 0
                A[2, 6] = 1.0
                A[2, 0] = -1.0
                A[2, 2] = 2.0 * prob.r[i]
                A[2, 3] = 2.0 * prob.x[i]
                A[2, 1] = -prob.z2[i]
            for j, c in enumerate(prob.children[i]):
                base = 7 + 3 * j
                A[0, base] = 1.0
                A[0, base + 2] = -prob.r[c]
                A[1, base + 1] = 1.0
                A[1, base + 2] = -prob.x[c]
            gram_inv = np.linalg.inv(A @ A.T)
            mats[m] = np.eye(dim) - A.T @ gram_inv @ A
        prob.groups.append((np.array(members, dtype=int), mats,
                            [prob.children[i] for i in members]))


def admm_x_update(st: AdmmState, prob: _Problem) -> AdmmState:
    """Bus-local minimization over the x-copies.

    Each scalar has a closed-form quadratic minimizer (the consensus
    targets average; the active injection also sees the generation cost),
    then the boxes clamp and the branch triples project onto the cone in
    the penalty metric.
    """
    rho = st.rho
    n = len(prob.bus_ids)
    ns = prob.nonslack
    par = prob.parent[ns]

    num_v = st.yv - st.lam_v / rho
    cnt = np.ones(n)
    np.add.at(num_v, par, st.yva[ns] - st.lam_va[ns] / rho)
    np.add.at(cnt, par, 1.0)
    st.xv = num_v / cnt

    st.xl = st.xl.copy()
    st.xS = st.xS.copy()
    st.xl[ns] = 0.5 * ((st.yl - st.lam_l / rho) + (st.ylc - st.lam_lc / rho))[ns]
    lamS = (st.lam_SP + 1j * st.lam_SQ) / rho
    lamSc = (st.lam_ScP + 1j * st.lam_ScQ) / rho
    st.xS[ns] = 0.5 * ((st.yS - lamS) + (st.ySc - lamSc))[ns]

    tp = st.ysp - st.lam_sp / rho
    st.xsp = (rho * tp - 2.0 * prob.a_obj * prob.load_p - prob.b_obj) / (
        2.0 * prob.a_obj + rho
    )
    st.xsq = st.ysq - st.lam_sq / rho

    np.clip(st.xv, prob.vmin, prob.vmax, out=st.xv)
    np.clip(st.xl, 0.0, prob.lmax, out=st.xl)
    np.clip(st.xsp, prob.sp_lo, prob.sp_hi, out=st.xsp)
    np.clip(st.xsq, prob.sq_lo, prob.sq_hi, out=st.xsq)

    wv = (cnt * rho)[ns]
    v2, l2, S2 = _cone_project_weighted(
        st.xv[ns], st.xl[ns], st.xS[ns], wv, 2.0 * rho, 2.0 * rho
    )
    st.xv[ns] = v2
    st.xl[ns] = l2
    st.xS[ns] = S2
    return st


def admm_y_update(st: AdmmState, prob: _Problem) -> AdmmState:
    """Bus-local least squares onto the power-balance and voltage-drop
    rows, consuming the neighbors' x-copies plus scaled duals."""
    rho = st.rho
    st.dual_residual = 0.0
    old = (st.yv.copy(), st.yl.copy(), st.yS.copy(), st.ysp.copy(),
           st.ysq.copy(), st.yva.copy(), st.ySc.copy(), st.ylc.copy())
    for members, mats, child_lists in prob.groups:
        dim = mats.shape[1]
        U = np.zeros((len(members), dim))
        for m, i in enumerate(members):
            U[m, 0] = st.xv[i] + st.lam_v[i] / rho
            U[m, 1] = st.xl[i] + st.lam_l[i] / rho
            U[m, 2] = st.xS[i].real + st.lam_SP[i] / rho
            U[m, 3] = st.xS[i].imag + st.lam_SQ[i] / rho
            U[m, 4] = st.xsp[i] + st.lam_sp[i] / rho
            U[m, 5] = st.xsq[i] + st.lam_sq[i] / rho
            p = prob.parent[i]
            U[m, 6] = (st.xv[p] + st.lam_va[i] / rho) if p >= 0 else 0.0
            for j, c in enumerate(child_lists[m]):
                U[m, 7 + 3 * j] = st.xS[c].real + st.lam_ScP[c] / rho
                U[m, 7 + 3 * j + 1] = st.xS[c].imag + st.lam_ScQ[c] / rho
                U[m, 7 + 3 * j + 2] = st.xl[c] + st.lam_lc[c] / rho
        Y = np.einsum("bij,bj->bi", mats, U)
        for m, i in enumerate(members):
            st.yv[i] = Y[m, 0]
            st.yl[i] = Y[m, 1]
            st.yS[i] = Y[m, 2] + 1j * Y[m, 3]
            st.ysp[i] = Y[m, 4]
            st.ysq[i] = Y[m, 5]
            st.yva[i] = Y[m, 6]
            for j, c in enumerate(child_lists[m]):
                st.ySc[c] = Y[m, 7 + 3 * j] + 1j * Y[m, 7 + 3 * j + 1]
                st.ylc[c] = Y[m, 7 + 3 * j + 2]
    sp = prob.slack_pos
    # unused slack slots carry no consensus rows; keep them pinned
    st.yl[sp] = 0.0
    st.yS[sp] = 0.0
    st.yva[sp] = 0.0
    delta = 0.0
    for new, prev in zip((st.yv, st.yl, st.yS, st.ysp, st.ysq,
                          st.yva, st.ySc, st.ylc), old):
        delta += float(np.sum(np.abs(new - prev) ** 2))
    st.dual_residual = rho * math.sqrt(delta)
    return st


def _consensus_gaps(st: AdmmState, prob: _Problem):
    ns = prob.nonslack
    par = prob.parent[ns]
    gaps = [
        st.xv - st.yv,
        (st.xl - st.yl)[ns],
        (st.xS - st.yS)[ns],
        st.xsp - st.ysp,
        st.xsq - st.ysq,
        st.xv[par] - st.yva[ns],
        (st.xS - st.ySc)[ns],
        (st.xl - st.ylc)[ns],
    ]
    return gaps, ns, par


def admm_dual_update(st: AdmmState, prob: _Problem) -> AdmmState:
    """lambda <- lambda + rho (x - y) on every consensus row."""
    rho = st.rho
    gaps, ns, par = _consensus_gaps(st, prob)
    st.lam_v += rho * gaps[0]
    st.lam_l[ns] += rho * gaps[1]
    st.lam_SP[ns] += rho * gaps[2].real
    st.lam_SQ[ns] += rho * gaps[2].imag
    st.lam_sp += rho * gaps[3]
    st.lam_sq += rho * gaps[4]
    st.lam_va[ns] += rho * gaps[5]
    st.lam_ScP[ns] += rho * gaps[6].real
    st.lam_ScQ[ns] += rho * gaps[6].imag
    st.lam_lc[ns] += rho * gaps[7]
    total = sum(float(np.sum(np.abs(g) ** 2)) for g in gaps)
    st.primal_residual = math.sqrt(total)
    return st


def _exactness_gap(st: AdmmState, prob: _Problem) -> float:
    ns = prob.nonslack
    if len(ns) == 0:
        return 0.0
    return float(np.max(np.abs(st.xv[ns] * st.xl[ns] - np.abs(st.xS[ns]) ** 2)))


def solve_opf(pn: PowerNetwork, loads=None, injection_caps=None, *,
              alpha1: float = 1.0, beta1: float = 0.0, rho: float = 1.0,
              eps: float = 1e-5, max_iter: int = 5000,
              adapt_rho: bool = True, trace: bool = False,
              interval: int = 0) -> OpfSolution:
    """Run the three ADMM sub-steps until both residual norms fall below
    ``eps`` (or the iteration cap, flagged non-converged).

    The penalty doubles or halves when the primal/dual residual ratio
    exceeds 10 in either direction, checked every 25 sweeps.  Returns the
    x-side state, whose boxes and caps are exact; the linear physics then
    holds to the primal-residual level.
    """
    prob, st = admm_setup(pn, loads, injection_caps,
                          alpha1=alpha1, beta1=beta1, rho=rho)
    rows: list[tuple[int, float, float, float]] = []
    converged = False
    for k in range(1, max_iter + 1):
        st.iteration = k
        admm_x_update(st, prob)
        admm_y_update(st, prob)
        admm_dual_update(st, prob)
        if k % 10 == 0:
            st.check_finite()
        if trace:
            rows.append((k, st.primal_residual, st.dual_residual,
                         _objective_from(st, prob)))
        if max(st.primal_residual, st.dual_residual) <= eps:
            converged = True
            break
        if adapt_rho and k % 25 == 0:
            if st.primal_residual > 10.0 * st.dual_residual and st.rho < 1e6:
                st.rho *= 2.0
            elif st.dual_residual > 10.0 * st.primal_residual and st.rho > 1e-6:
                st.rho *= 0.5

    state = BranchFlowState(
        bus_ids=prob.bus_ids, v=st.xv.copy(), l=st.xl.copy(),
        S=st.xS.copy(), s=st.xsp + 1j * st.xsq, interval=interval,
    )
    injections = {}
    for b in pn.buses:
        i = prob.bus_ids.index(b.bus_id)
        if b.bus_id == pn.slack or b.pmax > b.pmin or b.qmax > b.qmin:
            injections[b.bus_id] = complex(
                st.xsp[i] + prob.load_p[i], st.xsq[i] + prob.load_q[i]
            )
    return OpfSolution(
        state=state,
        objective=_objective_from(st, prob),
        injections=injections,
        gap=_exactness_gap(st, prob),
        iterations=st.iteration,
        converged=converged,
        primal_residual=st.primal_residual,
        dual_residual=st.dual_residual,
        trace=rows if trace else None,
    )


def _objective_from(st: AdmmState, prob: _Problem) -> float:
    g = st.xsp + prob.load_p
    return float(np.sum(prob.a_obj * g * g + prob.b_obj * g))
