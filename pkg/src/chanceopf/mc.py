"""Monte Carlo validation of dispatch policies.

Samples the germ, evaluates every expansion coefficient range at the
sampled points, and measures how often each bounded quantity leaves its
deterministic limits.  A plain power-flow pass re-solves the physics per
sample with the sampled dispatch held fixed; on the base topology this
measures the truncation mismatch of the expansion, and on outage views it
measures how a policy actually behaves post-contingency.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acpf import branch_flows, inputs_from_dispatch, newton_acpf
from .grid import Contingency, Network, apply_contingency
from .pce import PolynomialBasis
from .scopf import load_coefficients

# binomial confidence half-width multiplier (three standard errors)
HALF_WIDTH_FACTOR = 3.0
# violations smaller than this are solver roundoff, not exceedances
VIOL_TOL = 1e-8


def draw_germ(basis: PolynomialBasis, n_samples: int, seed: int) -> np.ndarray:
    """(n_samples, dim) germ draws from the basis families' laws.

    Philox is counter-based, so a fan-out across workers can reproduce the
    serial stream by seeding per sample index.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    out = np.empty((n_samples, basis.dim))
    for k, fam in enumerate(basis.spec.families):
        if fam == "gaussian":
            out[:, k] = rng.standard_normal(n_samples)
        else:
            out[:, k] = rng.uniform(-1.0, 1.0, n_samples)
    return out


def half_width(p: np.ndarray | float, n: int) -> np.ndarray | float:
    return HALF_WIDTH_FACTOR * np.sqrt(np.asarray(p) * (1.0 - np.asarray(p)) / n)


# ---------------------------------------------------------------------------
# report rows

@dataclass(frozen=True)
class ViolationRow:
    pool: str           # "policy" for direct expansion evaluation, else a
                        # power-flow pool: "base" or a contingency label
    cls: str            # P | Q | V | I
    element: str        # g<id>, bus <id>, or b<id>
    probability: float
    samples: int
    half_width: float
    max_violation: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("violation probability outside [0, 1]")


@dataclass(frozen=True)
class ViolationReport:
    rows: tuple[ViolationRow, ...]
    samples: int
    seed: int
    failed_flows: tuple[tuple[str, int], ...] = ()   # (pool, count)

    def max_probability(self, cls: str | None = None) -> float:
        vals = [r.probability for r in self.rows
                if cls is None or r.cls == cls]
        return max(vals, default=0.0)

    def max_violation(self, cls: str | None = None,
                      pools: tuple[str, ...] | None = None) -> float:
        vals = [r.max_violation for r in self.rows
                if (cls is None or r.cls == cls)
                and (pools is None or r.pool in pools)]
        return max(vals, default=0.0)


@dataclass(frozen=True)
class MomentRow:
    variable: str
    element: int
    mean_pce: float
    mean_mc: float
    var_pce: float
    var_mc: float

    @property
    def mean_error(self) -> float:
        return abs(self.mean_mc - self.mean_pce)

    @property
    def var_error(self) -> float:
        return abs(self.var_mc - self.var_pce)


@dataclass(frozen=True)
class MomentReport:
    rows: tuple[MomentRow, ...]
    samples: int
    seed: int
    pf_gap_max: float | None = None    # worst |V| gap policy vs power flow
    pf_gap_mean: float | None = None


# ---------------------------------------------------------------------------
# policy evaluation

def _range_coeffs(run, name: str) -> np.ndarray:
    """Coefficient matrix (elements, K) for a base-case range."""
    idx = run.problem.layout[name]
    return run.solution.x[idx]


def _bounds(net: Network):
    pmin = np.array([g.pmin for g in net.generators])
    pmax = np.array([g.pmax for g in net.generators])
    qmin = np.array([g.qmin for g in net.generators])
    qmax = np.array([g.qmax for g in net.generators])
    wmin = np.array([b.vmin**2 for b in net.buses])
    wmax = np.array([b.vmax**2 for b in net.buses])
    return pmin, pmax, qmin, qmax, wmin, wmax


def _rated_branches(net: Network):
    out = []
    for lpos, br in enumerate(net.branches):
        vmin_from = net.buses[net.bus_index(br.from_bus)].vmin
        cap = br.imax2(vmin_from, net.base_mva)
        if cap is not None:
            out.append((lpos, br.id, cap))
    return out


def _tally(pool: str, cls: str, labels, samples_by_elem: np.ndarray,
           lo, hi, rows: list):
    """Row per element: how often and how far values leave [lo, hi]."""
    n = samples_by_elem.shape[1]
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (samples_by_elem.shape[0],))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (samples_by_elem.shape[0],))
    over = samples_by_elem - hi[:, None]
    under = lo[:, None] - samples_by_elem
    excess = np.maximum(np.maximum(over, under), 0.0)
    bad = excess > VIOL_TOL
    p = bad.mean(axis=1)
    worst = excess.max(axis=1, initial=0.0)
    for e, label in enumerate(labels):
        rows.append(ViolationRow(pool, cls, str(label), float(p[e]), n,
                                 float(half_width(p[e], n)), float(worst[e])))


def run_mc(run, n_samples: int = 10_000, seed: int = 0,
           power_flow: bool = False) -> tuple[ViolationReport, MomentReport]:
    """Evaluate the solved policy at sampled germ points.

    Direct expansion evaluation yields per-element violation rates against
    the deterministic limits and a moment comparison for every state
    variable.  With power_flow=True the base topology is re-solved per
    sample with the sampled dispatch held, and the worst policy-vs-physics
    voltage gap is reported alongside the moments.
    """
    net: Network = run.problem.net
    basis: PolynomialBasis = run.problem.basis
    xi = draw_germ(basis, n_samples, seed)
    phi = basis.eval_at(xi)                    # (N, K)

    pmin, pmax, qmin, qmax, wmin, wmax = _bounds(net)
    gen_labels = [f"g{g.id}" for g in net.generators]
    bus_labels = [f"bus {b.id}" for b in net.buses]

    rows: list[ViolationRow] = []
    pg = _range_coeffs(run, "pg") @ phi.T      # (elements, N)
    qg = _range_coeffs(run, "qg") @ phi.T
    w = _range_coeffs(run, "w") @ phi.T
    _tally("policy", "P", gen_labels, pg, pmin, pmax, rows)
    _tally("policy", "Q", gen_labels, qg, qmin, qmax, rows)
    _tally("policy", "V", bus_labels, w, wmin, wmax, rows)
    rated = _rated_branches(net)
    if rated:
        jf = _range_coeffs(run, "jf") @ phi.T
        pos = [lpos for lpos, _, _ in rated]
        caps = [cap for _, _, cap in rated]
        _tally("policy", "I", [f"b{bid}" for _, bid, _ in rated],
               jf[pos], np.zeros(len(pos)) - np.inf, caps, rows)

    # moments: expansion formulas vs the sampled estimates
    gamma = run.problem.basis.norms
    mrows: list[MomentRow] = []
    for name in ("vre", "vim", "w", "pg", "qg", "pf", "qf", "pt", "qt", "jf"):
        if name not in run.problem.layout:
            continue
        coeffs = _range_coeffs(run, name)
        vals = coeffs @ phi.T
        mean_pce = coeffs[:, 0]
        var_pce = (coeffs[:, 1:] ** 2 * gamma[1:]).sum(axis=1)
        mean_mc = vals.mean(axis=1)
        var_mc = vals.var(axis=1)
        for e in range(coeffs.shape[0]):
            mrows.append(MomentRow(name, e, float(mean_pce[e]), float(mean_mc[e]),
                                   float(var_pce[e]), float(var_mc[e])))

    gap_max = gap_mean = None
    failed: list[tuple[str, int]] = []
    if power_flow:
        states = _pf_states(sample_policy(run, xi), None)
        gaps, n_failed = [], 0
        vm_policy = np.sqrt(np.clip(w, 1e-6, None))
        for s_idx, _, pf in states:
            if not pf.converged:
                n_failed += 1
                continue
            gaps.append(float(np.max(np.abs(pf.vm - vm_policy[:, s_idx]))))
        if n_failed:
            failed.append(("base", n_failed))
        if gaps:
            gap_max = max(gaps)
            gap_mean = float(np.mean(gaps))

    return (
        ViolationReport(tuple(rows), n_samples, seed, tuple(failed)),
        MomentReport(tuple(mrows), n_samples, seed, gap_max, gap_mean),
    )


# ---------------------------------------------------------------------------
# power-flow pools

@dataclass(frozen=True)
class _SampledPolicy:
    """Policy and load realizations shared by every pool of one run."""

    run: object
    phi_policy: np.ndarray      # (N, K_run)
    pd_s: np.ndarray            # (bus, N)
    qd_s: np.ndarray
    pg: np.ndarray              # (gen, N)
    vset: np.ndarray            # (bus, N)


def sample_policy(run, xi: np.ndarray,
                  load_basis: PolynomialBasis | None = None) -> _SampledPolicy:
    """Evaluate a solved policy and the uncertain loads at germ points.

    load_basis lets a degree-0 policy face the same load realizations as a
    richer model: the loads are lifted through load_basis while the policy
    itself stays constant (its only basis function is 1).
    """
    net: Network = run.problem.net
    own: PolynomialBasis = run.problem.basis
    load_basis = load_basis if load_basis is not None else own
    phi_load = load_basis.eval_at(xi)
    if own.size == 1:
        phi_policy = np.ones((xi.shape[0], 1))
    elif own.dim == load_basis.dim:
        phi_policy = own.eval_at(xi)
    else:
        raise ValueError("policy and load bases have incompatible germ dimensions")

    pd, qd = load_coefficients(net, load_basis)
    pg = _range_coeffs(run, "pg") @ phi_policy.T
    w = _range_coeffs(run, "w") @ phi_policy.T
    return _SampledPolicy(run, phi_policy, pd @ phi_load.T, qd @ phi_load.T,
                          pg, np.sqrt(np.clip(w, 0.25, 2.25)))


def _delta_policy(run, label: str, phi: np.ndarray) -> np.ndarray:
    """Sampled post-outage redistribution for one contingency, (N,)."""
    lay = run.problem.layout
    K = run.problem.basis.size
    coeffs = np.zeros(K)
    for s in range(K):
        name = f"{label}@s{s}/delta"
        if name in lay:
            coeffs[s] = run.solution.x[lay[name].ravel()[0]]
    return phi @ coeffs


def _pf_states(pol: _SampledPolicy, contingency: Contingency | None):
    """Yield (sample index, dispatched bus P, PfResult) for one topology."""
    run = pol.run
    net: Network = run.problem.net
    view = apply_contingency(net, contingency) if contingency else net
    n = net.n_bus

    delta = None
    if contingency is not None:
        delta = _delta_policy(run, contingency.label, pol.phi_policy)

    out_gen = contingency.element_id if (
        contingency is not None and contingency.kind == "gen") else None
    alpha = {vg.id: vg.alpha for vg in view.generators}
    gens = list(net.generators)
    for idx in range(pol.phi_policy.shape[0]):
        pg_bus = np.zeros(n)
        for gpos, g in enumerate(gens):
            if g.id == out_gen:
                continue
            val = pol.pg[gpos, idx]
            if delta is not None:
                val += alpha.get(g.id, 0.0) * delta[idx]
            pg_bus[net.bus_index(g.bus)] += val
        spec = inputs_from_dispatch(view, pg_bus, pol.vset[:, idx],
                                    pol.pd_s[:, idx], pol.qd_s[:, idx])
        yield idx, pg_bus, newton_acpf(view, spec)


def _pf_pool_rows(pol: _SampledPolicy, contingency: Contingency | None,
                  rows: list, failed: list):
    """Violation rows for one power-flow pool (base or one outage)."""
    net: Network = pol.run.problem.net
    view = apply_contingency(net, contingency) if contingency else net
    pool = contingency.label if contingency else "base"
    _, _, _, _, wmin, wmax = _bounds(net)

    # bus-aggregate generator bounds; an outaged unit contributes nothing
    out_gen = contingency.element_id if (
        contingency is not None and contingency.kind == "gen") else None
    n = net.n_bus
    pmin_bus = np.zeros(n)
    pmax_bus = np.zeros(n)
    qmin_bus = np.zeros(n)
    qmax_bus = np.zeros(n)
    gen_buses = set()
    for g in net.generators:
        if g.id == out_gen:
            continue
        b = net.bus_index(g.bus)
        gen_buses.add(b)
        pmin_bus[b] += g.pmin
        pmax_bus[b] += g.pmax
        qmin_bus[b] += g.qmin
        qmax_bus[b] += g.qmax

    gb = sorted(gen_buses)
    rated = [(lpos, bid, cap) for lpos, bid, cap in _rated_branches(net)
             if contingency is None or contingency.kind == "gen"
             or contingency.element_id != bid]

    n_ok = 0
    n_fail = 0
    kept_p, kept_q, kept_w, kept_j = [], [], [], []
    for idx, pg_bus, pf in _pf_states(pol, contingency):
        if not pf.converged:
            n_fail += 1
            continue
        n_ok += 1
        # non-slack buses hold their dispatch; the slack bus absorbs the
        # sample's imbalance and reports the flow solution's injection
        p_bus = pg_bus.copy()
        p_bus[net.ref_index] = pf.pg_slack
        kept_p.append(p_bus[gb])
        kept_q.append(pf.qg[gb])
        kept_w.append(pf.vm ** 2)
        if rated:
            flows = branch_flows(view, pf.e, pf.f)
            kept_j.append(flows["j_drop"][[lpos for lpos, _, _ in rated]])
    if n_fail:
        failed.append((pool, n_fail))
    if not n_ok:
        return

    bus_ids = [net.buses[b].id for b in gb]
    _tally(pool, "P", [f"bus {i}" for i in bus_ids], np.array(kept_p).T,
           pmin_bus[gb], pmax_bus[gb], rows)
    _tally(pool, "Q", [f"bus {i}" for i in bus_ids], np.array(kept_q).T,
           qmin_bus[gb], qmax_bus[gb], rows)
    _tally(pool, "V", [f"bus {b.id}" for b in net.buses], np.array(kept_w).T,
           wmin, wmax, rows)
    if rated:
        _tally(pool, "I", [f"b{bid}" for _, bid, _ in rated],
               np.array(kept_j).T, -np.inf, [cap for _, _, cap in rated], rows)


def pf_violation_report(run, contingencies, n_samples: int = 300,
                        seed: int = 0, include_base: bool = True,
                        load_basis: PolynomialBasis | None = None) -> ViolationReport:
    """Power-flow-based violation pools for the base case and each outage."""
    basis = load_basis if load_basis is not None else run.problem.basis
    xi = draw_germ(basis, n_samples, seed)
    pol = sample_policy(run, xi, basis)
    rows: list[ViolationRow] = []
    failed: list[tuple[str, int]] = []
    if include_base:
        _pf_pool_rows(pol, None, rows, failed)
    for cont in contingencies:
        _pf_pool_rows(pol, cont, rows, failed)
    return ViolationReport(tuple(rows), n_samples, seed, tuple(failed))


# ---------------------------------------------------------------------------
# model comparison

@dataclass(frozen=True)
class ComparisonReport:
    """Same sampling protocol applied to two solved models."""

    a: ViolationReport
    b: ViolationReport
    objective_a: float
    objective_b: float
    wall_a: float
    wall_b: float

    def max_violation(self, which: str, cls: str,
                      contingency_only: bool = True) -> float:
        rep = self.a if which == "a" else self.b
        pools = None
        if contingency_only:
            pools = tuple({r.pool for r in rep.rows} - {"base", "policy"})
        return rep.max_violation(cls, pools)


def compare_deterministic(det_run, gpce_run, contingencies,
                          n_samples: int = 300, seed: int = 0) -> ComparisonReport:
    """Run the identical power-flow sampling protocol on both models.

    The germ is drawn once from the richer model's basis, so both policies
    face the same load realizations; a degree-0 policy simply stays flat
    across them.
    """
    contingencies = tuple(contingencies)
    rich = max((det_run.problem.basis, gpce_run.problem.basis),
               key=lambda b: b.size)
    rep_det = pf_violation_report(det_run, contingencies, n_samples, seed,
                                  load_basis=rich)
    rep_gp = pf_violation_report(gpce_run, contingencies, n_samples, seed,
                                 load_basis=rich)
    return ComparisonReport(
        a=rep_det, b=rep_gp,
        objective_a=det_run.objective, objective_b=gpce_run.objective,
        wall_a=det_run.wall_seconds, wall_b=gpce_run.wall_seconds,
    )


# ---------------------------------------------------------------------------
# report files

def write_violation_csv(report: ViolationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pool", "class", "element", "probability",
                     "samples", "half_width", "max_violation"])
        for r in report.rows:
            wr.writerow([r.pool, r.cls, r.element, f"{r.probability:.10g}",
                         r.samples, f"{r.half_width:.10g}",
                         f"{r.max_violation:.10g}"])


def write_moment_csv(report: MomentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["variable", "element", "mean_pce", "mean_mc",
                     "var_pce", "var_mc"])
        for r in report.rows:
            wr.writerow([r.variable, r.element, f"{r.mean_pce:.10g}",
                         f"{r.mean_mc:.10g}", f"{r.var_pce:.10g}",
                         f"{r.var_mc:.10g}"])


def write_summary_json(report: ViolationReport, moment: MomentReport | None,
                       path) -> None:
    body = {
        "samples": report.samples,
        "seed": report.seed,
        "failed_flows": [list(t) for t in report.failed_flows],
        "max_probability": report.max_probability(),
        "max_violation_by_class": {
            cls: report.max_violation(cls) for cls in ("P", "Q", "V", "I")
        },
    }
    if moment is not None:
        body["pf_gap_max"] = moment.pf_gap_max
        body["pf_gap_mean"] = moment.pf_gap_mean
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
