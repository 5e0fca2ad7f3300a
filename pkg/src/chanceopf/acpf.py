"""Deterministic AC power flow in rectangular coordinates.

Serves as the reference physics for the optimization model and as the
re-solve engine of the Monte Carlo validator.  Newton-Raphson on complex
bus voltages with optional iterative PV-to-PQ switching when generator
reactive limits bind.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: power mismatch tolerance, per-unit
DEFAULT_TOL = 1e-8


def build_ybus(view) -> np.ndarray:
    """Dense complex bus admittance matrix (taps on the from side)."""
    n = view.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in view.branches:
        i = view.bus_index(br.from_bus)
        j = view.bus_index(br.to_bus)
        ys = complex(br.g, br.b)
        t = complex(br.t_re, br.t_im)
        tau2 = br.tap * br.tap
        y[i, i] += (ys + complex(br.g_fr, br.b_fr)) / tau2
        y[j, j] += ys + complex(br.g_to, br.b_to)
        y[i, j] += -ys / t.conjugate()
        y[j, i] += -ys / t
    for idx, bus in enumerate(view.buses):
        y[idx, idx] += complex(bus.gs, bus.bs)
    return y


def branch_flows(view, e: np.ndarray, f: np.ndarray) -> dict[str, np.ndarray]:
    """Per-branch from/to complex power flows and drop-based squared current.

    j_drop is (g^2 + b^2) |V_i - V_j|^2, the lifted current used by the
    optimization model's constraints.
    """
    v = e + 1j * f
    nb = len(view.branches)
    out = {k: np.zeros(nb) for k in ("p_f", "q_f", "p_t", "q_t", "j_drop")}
    for idx, br in enumerate(view.branches):
        i = view.bus_index(br.from_bus)
        j = view.bus_index(br.to_bus)
        ys = complex(br.g, br.b)
        t = complex(br.t_re, br.t_im)
        tau2 = br.tap * br.tap
        i_f = (ys + complex(br.g_fr, br.b_fr)) / tau2 * v[i] - ys / t.conjugate() * v[j]
        i_t = -ys / t * v[i] + (ys + complex(br.g_to, br.b_to)) * v[j]
        s_f = v[i] * i_f.conjugate()
        s_t = v[j] * i_t.conjugate()
        out["p_f"][idx] = s_f.real
        out["q_f"][idx] = s_f.imag
        out["p_t"][idx] = s_t.real
        out["q_t"][idx] = s_t.imag
        drop = v[i] - v[j]
        out["j_drop"][idx] = (br.g**2 + br.b**2) * (drop.real**2 + drop.imag**2)
    return out


def bus_injections(ybus: np.ndarray, e: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = e + 1j * f
    s = v * (ybus @ v).conjugate()
    return s.real, s.imag


@dataclass(frozen=True)
class PfInputs:
    """Specified quantities for one power-flow solve.

    p_net: net active injection per bus (generation minus demand); the slack
    bus entry is ignored.  q_load: reactive demand per bus.  Buses listed in
    pv hold |V| at vset until their aggregated generator reactive output
    leaves [qg_min, qg_max]; non-generator buses must have qg bounds 0.
    """

    p_net: np.ndarray
    q_load: np.ndarray
    vset: np.ndarray
    slack: int
    pv: tuple[int, ...]
    qg_min: np.ndarray
    qg_max: np.ndarray
    qg_sched: np.ndarray | None = None   # fixed gen reactive at non-PV gen buses
    p_load: np.ndarray | None = None     # only used to report slack generation


@dataclass
class PfResult:
    e: np.ndarray
    f: np.ndarray
    converged: bool
    iterations: int
    mismatch: float
    qg: np.ndarray               # implied generator reactive output per bus
    pg_slack: float              # implied generator active output at the slack bus
    switched_to_pq: tuple[int, ...] = field(default_factory=tuple)

    @property
    def vm(self) -> np.ndarray:
        return np.hypot(self.e, self.f)


def _newton(ybus, spec: PfInputs, pv: set[int], q_net_fixed: np.ndarray,
            e, f, tol: float, max_iter: int):
    """Newton iteration for a fixed PV/PQ partition; mutates e, f in place."""
    n = len(e)
    slack = spec.slack
    others = [i for i in range(n) if i != slack]
    pq = [i for i in others if i not in pv]
    pvl = [i for i in others if i in pv]

    for it in range(max_iter):
        v = e + 1j * f
        i_bus = ybus @ v
        s = v * i_bus.conjugate()
        mis_p = s.real[others] - spec.p_net[others]
        mis_q = s.imag[pq] - q_net_fixed[pq]
        mis_v = e[pvl] ** 2 + f[pvl] ** 2 - spec.vset[pvl] ** 2
        mis = np.concatenate([mis_p, mis_q, mis_v])
        err = np.max(np.abs(mis)) if mis.size else 0.0
        if err <= tol:
            return True, it, err

        # dS/de = diag(conj(I)) + diag(V) conj(Y); dS/df = j*diag(conj(I)) - j*diag(V) conj(Y)
        dse = np.diag(i_bus.conjugate()) + (v[:, None] * ybus.conjugate())
        dsf = 1j * np.diag(i_bus.conjugate()) - 1j * (v[:, None] * ybus.conjugate())

        rows = []
        rows.append(np.hstack([dse.real[np.ix_(others, others)], dsf.real[np.ix_(others, others)]]))
        if pq:
            rows.append(np.hstack([dse.imag[np.ix_(pq, others)], dsf.imag[np.ix_(pq, others)]]))
        if pvl:
            dv_e = np.zeros((len(pvl), len(others)))
            dv_f = np.zeros((len(pvl), len(others)))
            pos = {b: k for k, b in enumerate(others)}
            for r, b in enumerate(pvl):
                dv_e[r, pos[b]] = 2.0 * e[b]
                dv_f[r, pos[b]] = 2.0 * f[b]
            rows.append(np.hstack([dv_e, dv_f]))
        jac = np.vstack(rows)

        try:
            step = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError:
            return False, it, err
        if not np.all(np.isfinite(step)):
            return False, it, err
        e[others] -= step[: len(others)]
        f[others] -= step[len(others):]

    v = e + 1j * f
    s = v * (ybus @ v).conjugate()
    mis_p = s.real[others] - spec.p_net[others]
    err = float(np.max(np.abs(mis_p))) if others else 0.0
    return False, max_iter, err


def newton_acpf(view, spec: PfInputs, switching: bool = True,
                tol: float = DEFAULT_TOL, max_iter: int = 40,
                max_switch_rounds: int = 12) -> PfResult:
    """Solve the power flow, iterating PV->PQ switching on reactive limits.

    A PV bus whose implied generator reactive output exceeds its bound is
    re-labelled PQ at that bound; a switched bus returns to PV if its voltage
    would cross back over the setpoint.
    """
    ybus = build_ybus(view)
    n = view.n_bus
    e = spec.vset.astype(float).copy()
    f = np.zeros(n)
    e[spec.slack] = spec.vset[spec.slack]

    pv = set(spec.pv)
    pv.discard(spec.slack)
    at_limit: dict[int, float] = {}     # bus -> pinned qg value

    qg_sched = spec.qg_sched if spec.qg_sched is not None else np.zeros(n)

    converged, its, err = False, 0, np.inf
    for _ in range(max_switch_rounds):
        q_net = qg_sched - spec.q_load
        for b, qv in at_limit.items():
            q_net[b] = qv - spec.q_load[b]
        converged, its, err = _newton(ybus, spec, pv, q_net, e, f, tol, max_iter)
        if not converged or not switching:
            break

        p, q = bus_injections(ybus, e, f)
        changed = False
        for b in sorted(pv):
            qg = q[b] + spec.q_load[b]
            if qg > spec.qg_max[b] + 1e-9:
                pv.discard(b)
                at_limit[b] = spec.qg_max[b]
                changed = True
            elif qg < spec.qg_min[b] - 1e-9:
                pv.discard(b)
                at_limit[b] = spec.qg_min[b]
                changed = True
        vm = np.hypot(e, f)
        for b in sorted(at_limit):
            # back-switch when the voltage recovers past the setpoint
            if at_limit[b] == spec.qg_max[b] and vm[b] > spec.vset[b] + 1e-9:
                del at_limit[b]
                pv.add(b)
                changed = True
            elif at_limit[b] == spec.qg_min[b] and vm[b] < spec.vset[b] - 1e-9:
                del at_limit[b]
                pv.add(b)
                changed = True
        if not changed:
            break

    p, q = bus_injections(ybus, e, f)
    qg = q + spec.q_load
    slack_load = float(spec.p_load[spec.slack]) if spec.p_load is not None else 0.0
    return PfResult(
        e=e, f=f, converged=converged, iterations=its, mismatch=float(err),
        qg=qg, pg_slack=float(p[spec.slack]) + slack_load,
        switched_to_pq=tuple(sorted(at_limit)),
    )


def inputs_from_dispatch(view, pg_bus: np.ndarray, vset: np.ndarray,
                         p_load: np.ndarray, q_load: np.ndarray) -> PfInputs:
    """Build solve inputs from per-bus dispatched generation and demand."""
    n = view.n_bus
    qg_min = np.zeros(n)
    qg_max = np.zeros(n)
    gen_buses = set()
    for g in view.generators:
        b = view.bus_index(g.bus)
        gen_buses.add(b)
        qg_min[b] += g.qmin
        qg_max[b] += g.qmax
    slack = view.ref_index
    pv = tuple(sorted(b for b in gen_buses if b != slack))
    return PfInputs(
        p_net=pg_bus - p_load, q_load=q_load, vset=vset,
        slack=slack, pv=pv, qg_min=qg_min, qg_max=qg_max, p_load=p_load,
    )
