"""Deterministic-equivalent NLP for the chance-constrained, security-
constrained AC optimal power flow.

The builders turn a network plus a polynomial-chaos basis into sparse
constraint blocks: Galerkin-projected rectangular AC physics per expansion
coefficient, moment-form chance bounds on generation, voltage, and current,
and one deterministic post-contingency layer per (coefficient, outage) pair,
coupled to the base case through participation factors and smoothed PV/PQ
voltage switching.  A degree-0 basis reproduces the classic deterministic
SCOPF through the same code path.

Residual conventions: equalities are c(x) = 0, inequalities c(x) <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .acpf import build_ybus
from .grid import Contingency, Network, NetworkView, apply_contingency
from .pce import ChanceBoundPolicy, MultiplicationTensor, PceError, PolynomialBasis, lift_input

#: additive variance floor inside sqrt terms, keeps chance rows differentiable
VARIANCE_FLOOR = 1e-12

_CLASSES = ("P", "Q", "V", "I")


def default_policies(epsilon: float = 0.1, rule: str = "chebyshev",
                     fixed_value: float | None = None) -> dict[str, ChanceBoundPolicy]:
    """One bound-tightening policy per constraint class (P, Q, V, I)."""
    policy = ChanceBoundPolicy(epsilon=epsilon, rule=rule, fixed_value=fixed_value)
    return {cls: policy for cls in _CLASSES}


@dataclass(frozen=True)
class ModelConfig:
    """Assembly-time switches for the deterministic-equivalent problem.

    scenario_policy "s0" (default) secures the mean coefficient layer;
    "all" builds one contingency layer per (coefficient, outage) pair, the
    literal per-coefficient construction.  With degree >= 1 the "all" mode
    is infeasible by construction: the voltage-shift boxes compare
    higher-order voltage coefficients (near zero) against the physical
    voltage band, leaving no room for the nonnegative shift variables.
    It is retained for structural inspection and ablation.
    Overrides map "<class>:<element label>" (e.g. "V:5", "P:g2") to a
    replacement chance policy for that single element.
    """

    psi: float = 1e5
    eps_smooth: float = 1e-3
    q_tiebreak: float = 1e-3
    scenario_policy: str = "s0"
    variance_floor: float = VARIANCE_FLOOR
    policies: dict[str, ChanceBoundPolicy] = field(default_factory=default_policies)
    overrides: dict[str, ChanceBoundPolicy] = field(default_factory=dict)
    contingency_current_bounds: bool = False

    def __post_init__(self):
        if self.psi <= 0:
            raise ValueError("slack penalty psi must be positive")
        if self.eps_smooth <= 0:
            raise ValueError("smoothing constant must be positive")
        if self.q_tiebreak < 0:
            raise ValueError("reactive tie-break weight must be nonnegative")
        if self.scenario_policy not in ("s0", "all"):
            raise ValueError(f"unknown scenario policy {self.scenario_policy!r}")
        if self.variance_floor <= 0:
            raise ValueError("variance floor must be positive")
        missing = [cls for cls in _CLASSES if cls not in self.policies]
        if missing:
            raise ValueError(f"missing chance policies for {missing}")

    def policy_for(self, cls: str, label) -> ChanceBoundPolicy:
        return self.overrides.get(f"{cls}:{label}", self.policies[cls])


# ---------------------------------------------------------------------------
# variable layout

@dataclass(frozen=True)
class LayerSpec:
    """One post-contingency layer: coefficient index s plus an outage view.

    Reactive output and switching are aggregated per generator bus because a
    Newton power flow holds a bus PV until the bus-total reactive limit binds;
    per-generator switching would leave the split between co-located machines
    undetermined.
    """

    prefix: str
    s: int
    contingency: Contingency
    view: NetworkView
    gen_base_pos: tuple[int, ...]   # positions of surviving gens in the base order
    gen_buses: tuple[int, ...]      # view bus indices holding at least one gen
    pv_buses: tuple[int, ...]       # gen buses that are not the reference bus


class DecisionLayout:
    """Named, disjoint index ranges covering the decision vector.

    Base-case ranges are shaped (elements, coefficients); contingency-layer
    ranges use the layer prefix and are shaped (elements, 1) so the same
    Galerkin emitters serve both.
    """

    def __init__(self):
        self._ranges: dict[str, np.ndarray] = {}
        self.n = 0
        self.layers: list[LayerSpec] = []

    def add(self, name: str, *shape: int) -> np.ndarray:
        if name in self._ranges:
            raise ValueError(f"duplicate range name {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        idx = np.arange(self.n, self.n + count, dtype=np.int64).reshape(shape)
        idx.setflags(write=False)
        self._ranges[name] = idx
        self.n += count
        return idx

    def __getitem__(self, name: str) -> np.ndarray:
        return self._ranges[name]

    def __contains__(self, name: str) -> bool:
        return name in self._ranges

    def items(self):
        return self._ranges.items()


# ---------------------------------------------------------------------------
# constraint blocks

def _ravel_args(*args):
    return [a.ravel() for a in np.broadcast_arrays(*[np.asarray(a) for a in args])]


class QuadraticBlock:
    """Rows of the form const + a^T x + sum_k coeff_k x_i x_j.

    Entries are accumulated during build and frozen by finalize(); the
    Jacobian sparsity pattern is fixed from then on.
    """

    def __init__(self, name: str, kind: str, nrows: int, n: int):
        assert kind in ("eq", "ineq")
        self.name, self.kind, self.nrows, self.n = name, kind, nrows, n
        self._lin: list[list[np.ndarray]] = [[], [], []]
        self._quad: list[list[np.ndarray]] = [[], [], [], []]
        self.const = np.zeros(nrows)
        self._final = False

    def add_const(self, rows, vals):
        rows, vals = _ravel_args(rows, vals)
        np.add.at(self.const, rows, vals)

    def add_linear(self, rows, cols, vals):
        r, c, v = _ravel_args(rows, cols, vals)
        self._lin[0].append(r)
        self._lin[1].append(c)
        self._lin[2].append(v.astype(float))

    def add_quad(self, rows, i, j, vals):
        r, a, b, v = _ravel_args(rows, i, j, vals)
        self._quad[0].append(r)
        self._quad[1].append(a)
        self._quad[2].append(b)
        self._quad[3].append(v.astype(float))

    def finalize(self) -> "QuadraticBlock":
        def cat(lists):
            return np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
        self.lr, self.lc = cat(self._lin[0]).astype(np.int64), cat(self._lin[1]).astype(np.int64)
        self.lv = cat(self._lin[2]).astype(float)
        self.qr = cat(self._quad[0]).astype(np.int64)
        self.qi = cat(self._quad[1]).astype(np.int64)
        self.qj = cat(self._quad[2]).astype(np.int64)
        self.qv = cat(self._quad[3]).astype(float)
        self._jac_rows = np.concatenate([self.lr, self.qr, self.qr])
        self._jac_cols = np.concatenate([self.lc, self.qi, self.qj])
        # symmetrized second-derivative pattern: d2/dxi dxj (coeff xi xj) hits both
        self._hess_rows = np.concatenate([self.qi, self.qj])
        self._hess_cols = np.concatenate([self.qj, self.qi])
        self._hess_lam = np.concatenate([self.qr, self.qr])
        self._hess_vals = np.concatenate([self.qv, self.qv])
        del self._lin, self._quad
        self._final = True
        return self

    def residual(self, x: np.ndarray) -> np.ndarray:
        r = self.const.copy()
        if self.lr.size:
            r += np.bincount(self.lr, weights=self.lv * x[self.lc], minlength=self.nrows)
        if self.qr.size:
            r += np.bincount(self.qr, weights=self.qv * x[self.qi] * x[self.qj], minlength=self.nrows)
        return r

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        data = np.concatenate([self.lv, self.qv * x[self.qj], self.qv * x[self.qi]])
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)),
                             shape=(self.nrows, self.n)).tocsr()

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> sp.coo_matrix:
        data = lam[self._hess_lam] * self._hess_vals
        return sp.coo_matrix((data, (self._hess_rows, self._hess_cols)), shape=(self.n, self.n))


class ChanceBlock:
    """Moment-form bound rows: sign*mean + factor*sqrt(var + floor) + offset - slack <= 0.

    The variance is the weighted sum of squared higher-order coefficients, so
    each row touches one element's whole coefficient range plus an optional
    slack column.  Rows are convex in the coefficients.
    """

    kind = "ineq"

    def __init__(self, name: str, n: int, norms: np.ndarray, floor: float):
        self.name, self.n = name, n
        self.norms = np.asarray(norms, dtype=float)
        self.floor = floor
        self._rows: list[tuple[np.ndarray, float, float, float, int]] = []
        self._final = False

    def add_row(self, idx: np.ndarray, sign: float, factor: float, offset: float,
                slack_col: int = -1):
        self._rows.append((np.asarray(idx, dtype=np.int64).ravel(), sign, factor, offset, slack_col))

    def finalize(self) -> "ChanceBlock":
        self.nrows = len(self._rows)
        K = self.norms.size
        self.idx = np.array([r[0] for r in self._rows], dtype=np.int64).reshape(self.nrows, K)
        self.sign = np.array([r[1] for r in self._rows])
        self.factor = np.array([r[2] for r in self._rows])
        self.offset = np.array([r[3] for r in self._rows])
        self.slack = np.array([r[4] for r in self._rows], dtype=np.int64)
        has = self.slack >= 0
        self._jac_rows = np.concatenate([np.repeat(np.arange(self.nrows), K), np.nonzero(has)[0]])
        self._jac_cols = np.concatenate([self.idx.ravel(), self.slack[has]])
        self._n_slack = int(has.sum())
        del self._rows
        self._final = True
        return self

    def _std(self, x):
        y = x[self.idx]
        var = (y[:, 1:] ** 2 * self.norms[1:]).sum(axis=1)
        return y, np.sqrt(var + self.floor)

    def residual(self, x: np.ndarray) -> np.ndarray:
        y, sd = self._std(x)
        r = self.sign * y[:, 0] + self.factor * sd + self.offset
        has = self.slack >= 0
        r[has] -= x[self.slack[has]]
        return r

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        y, sd = self._std(x)
        grad = (self.factor / sd)[:, None] * self.norms[None, 1:] * y[:, 1:]
        data = np.concatenate([
            np.column_stack([self.sign, grad]).ravel(),
            -np.ones(self._n_slack),
        ])
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)),
                             shape=(self.nrows, self.n)).tocsr()

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> sp.coo_matrix:
        K = self.norms.size
        if K == 1:
            return sp.coo_matrix((self.n, self.n))
        y, sd = self._std(x)
        g = self.norms[None, 1:] * y[:, 1:]                       # (R, K-1)
        scale = lam * self.factor
        dense = (scale / sd)[:, None, None] * np.eye(K - 1)[None] * self.norms[None, 1:, None]
        dense -= (scale / sd**3)[:, None, None] * g[:, :, None] * g[:, None, :]
        cols = self.idx[:, 1:]
        rows_i = np.repeat(cols, K - 1, axis=1).ravel()
        rows_j = np.tile(cols, (1, K - 1)).ravel()
        return sp.coo_matrix((dense.ravel(), (rows_i, rows_j)), shape=(self.n, self.n))


def smooth_plus(z: np.ndarray, eps: float) -> np.ndarray:
    """Overflow-free eps * ln(1 + exp(z / eps))."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z, 0.0) + eps * np.log1p(np.exp(-np.abs(z) / eps))


class SwitchingBlock:
    """Self-consistency rows for the smoothed PV/PQ voltage switching.

    Per generator: rise - eps*ln(1+exp((rise - Q + Qmin)/eps)) = 0 and
    drop - eps*ln(1+exp((drop + Q - Qmax)/eps)) = 0.  In the sharp limit a
    positive rise forces Q to the lower bound and a positive drop forces Q to
    the upper bound, which is exactly the switching complementarity.
    """

    kind = "eq"

    def __init__(self, name: str, n: int, wp: np.ndarray, wm: np.ndarray, qg: np.ndarray,
                 qmin: np.ndarray, qmax: np.ndarray, eps: float):
        self.name, self.n = name, n
        self.wp, self.wm, self.qg = (np.asarray(a, dtype=np.int64).ravel() for a in (wp, wm, qg))
        self.qmin = np.asarray(qmin, dtype=float)
        self.qmax = np.asarray(qmax, dtype=float)
        self.eps = eps
        G = self.wp.size
        self.nrows = 2 * G
        rows = np.arange(G)
        self._jac_rows = np.concatenate([rows, rows, G + rows, G + rows])
        self._jac_cols = np.concatenate([self.wp, self.qg, self.wm, self.qg])

    def _z(self, x):
        zp = x[self.wp] - x[self.qg] + self.qmin
        zm = x[self.wm] + x[self.qg] - self.qmax
        return zp, zm

    def residual(self, x: np.ndarray) -> np.ndarray:
        zp, zm = self._z(x)
        return np.concatenate([
            x[self.wp] - smooth_plus(zp, self.eps),
            x[self.wm] - smooth_plus(zm, self.eps),
        ])

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        zp, zm = self._z(x)
        sig_p, sig_m = expit(zp / self.eps), expit(zm / self.eps)
        data = np.concatenate([1.0 - sig_p, sig_p, 1.0 - sig_m, -sig_m])
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)),
                             shape=(self.nrows, self.n)).tocsr()

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> sp.coo_matrix:
        zp, zm = self._z(x)
        G = self.wp.size
        sig_p, sig_m = expit(zp / self.eps), expit(zm / self.eps)
        cp = -lam[:G] * sig_p * (1.0 - sig_p) / self.eps
        cm = -lam[G:] * sig_m * (1.0 - sig_m) / self.eps
        # d2 softplus = sig(1-sig)/eps times outer(dz, dz); dz/d(rise)=1, dz/dQ=-1 or +1
        rows = np.concatenate([self.wp, self.wp, self.qg, self.qg,
                               self.wm, self.wm, self.qg, self.qg])
        cols = np.concatenate([self.wp, self.qg, self.wp, self.qg,
                               self.wm, self.qg, self.wm, self.qg])
        data = np.concatenate([cp, -cp, -cp, cp, cm, cm, cm, cm])
        return sp.coo_matrix((data, (rows, cols)), shape=(self.n, self.n))


class QuadraticObjective:
    """const + lin^T x + sum_k q_k x_k^2 with a constant diagonal Hessian."""

    def __init__(self, n: int):
        self.n = n
        self.const = 0.0
        self.lin = np.zeros(n)
        self._qcols: list[np.ndarray] = []
        self._qvals: list[np.ndarray] = []

    def add_linear(self, cols, vals):
        cols, vals = _ravel_args(cols, vals)
        np.add.at(self.lin, cols, vals)

    def add_square(self, cols, vals):
        cols, vals = _ravel_args(cols, vals)
        self._qcols.append(cols.astype(np.int64))
        self._qvals.append(vals.astype(float))

    def finalize(self) -> "QuadraticObjective":
        self.qcols = np.concatenate(self._qcols) if self._qcols else np.zeros(0, dtype=np.int64)
        self.qvals = np.concatenate(self._qvals) if self._qvals else np.zeros(0)
        del self._qcols, self._qvals
        return self

    def value_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        xq = x[self.qcols]
        f = self.const + self.lin @ x + float(self.qvals @ (xq * xq))
        g = self.lin.copy()
        np.add.at(g, self.qcols, 2.0 * self.qvals * xq)
        return f, g

    def hessian(self, x: np.ndarray) -> sp.coo_matrix:
        return sp.coo_matrix((2.0 * self.qvals, (self.qcols, self.qcols)), shape=(self.n, self.n))


@dataclass
class NlpProblem:
    """Assembled nonlinear program in the solver's canonical shape."""

    n: int
    lb: np.ndarray
    ub: np.ndarray
    x0: np.ndarray
    objective: QuadraticObjective
    blocks: tuple
    layout: DecisionLayout
    basis: PolynomialBasis
    net: Network
    config: ModelConfig
    contingencies: tuple[Contingency, ...]
    rated_branch_pos: tuple[int, ...]
    name: str = "scopf"

    @property
    def eq_blocks(self):
        return [b for b in self.blocks if b.kind == "eq"]

    @property
    def ineq_blocks(self):
        return [b for b in self.blocks if b.kind == "ineq"]

    def describe(self) -> str:
        """Structure dump: variable ranges and constraint block sizes."""
        lines = [f"problem {self.name}: {self.n} variables"]
        for name, idx in self.layout.items():
            lines.append(f"  var {name} shape {'x'.join(map(str, idx.shape))}")
        n_eq = n_ineq = 0
        for b in self.blocks:
            lines.append(f"  block {b.name} [{b.kind}] rows {b.nrows}")
            if b.kind == "eq":
                n_eq += b.nrows
            else:
                n_ineq += b.nrows
        lines.append(f"total equalities {n_eq}, inequalities {n_ineq}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# shared pieces

def load_coefficients(net: Network, basis: PolynomialBasis) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus active/reactive demand coefficients, shape (n_bus, K).

    On a degree-0 basis only the nominal values are used; otherwise each
    load's spread lands on the first-order term of its germ dimension
    (sigma is relative to the nominal magnitude, P and Q fully correlated).
    """
    K = basis.size
    pd = np.zeros((net.n_bus, K))
    qd = np.zeros((net.n_bus, K))
    for d in net.loads:
        i = net.bus_index(d.bus)
        pd[i, 0] += d.p
        qd[i, 0] += d.q
        if basis.degree < 1 or d.sigma <= 0:
            continue
        if d.germ_dim is None:
            raise PceError(f"load {d.id} has sigma > 0 but no germ dimension")
        pd[i] += lift_input(basis, 0.0, d.sigma * abs(d.p), d.germ_dim).coeffs
        qd[i] += lift_input(basis, 0.0, d.sigma * abs(d.q), d.germ_dim).coeffs
    return pd, qd


def _flow_coefficients(br) -> dict[str, tuple[str, float, float, float]]:
    """Per-quantity (side, self, symmetric, antisymmetric) flow coefficients.

    With sym = e_i e_j + f_i f_j and anti = f_i e_j - e_i f_j:
    flow = c_self * W_side + c_sym * sym + c_anti * anti.  Derived from
    S = V I* with the tap on the from side; matches the admittance model in
    acpf to machine precision.
    """
    g, b = br.g, br.b
    tre, tim, tau2 = br.t_re, br.t_im, br.tap * br.tap
    return {
        "pf": ("from", (g + br.g_fr) / tau2, (b * tim - g * tre) / tau2, -(g * tim + b * tre) / tau2),
        "qf": ("from", -(b + br.b_fr) / tau2, (g * tim + b * tre) / tau2, (b * tim - g * tre) / tau2),
        "pt": ("to", g + br.g_to, -(g * tre + b * tim) / tau2, (b * tre - g * tim) / tau2),
        "qt": ("to", -(b + br.b_to), (b * tre - g * tim) / tau2, (g * tre + b * tim) / tau2),
    }


def _tensor_nonzeros(tensor: MultiplicationTensor):
    out = []
    for m in tensor.mats:
        a, b = np.nonzero(m)
        out.append((a, b, m[a, b]))
    return out


#: trivial multiplication structure for single-coefficient (contingency) layers
_TRIVIAL_NZ = [(np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), np.ones(1))]


def _emit_square(block, row0, nz, u_idx, v_idx, coeff):
    """Accumulate -coeff * Galerkin(u * v) onto rows row0..row0+K-1."""
    for s, (a, b, vals) in enumerate(nz):
        block.add_quad(row0 + s, u_idx[a], v_idx[b], -coeff * vals)


def _emit_flow_rows(block, row0, K, nz, coeffs, w_side_idx, vi, fi, vj, fj, flow_idx):
    """One flow quantity: flow - c_self*W - c_sym*sym - c_anti*anti = 0."""
    _, c_self, c_sym, c_anti = coeffs
    rows = row0 + np.arange(K)
    block.add_linear(rows, flow_idx, 1.0)
    block.add_linear(rows, w_side_idx, -c_self)
    _emit_square(block, row0, nz, vi, vj, c_sym)
    _emit_square(block, row0, nz, fi, fj, c_sym)
    _emit_square(block, row0, nz, fi, vj, c_anti)
    _emit_square(block, row0, nz, vi, fj, -c_anti)


# ---------------------------------------------------------------------------
# base-case builders

def build_objective(net: Network, basis: PolynomialBasis, layout: DecisionLayout,
                    psi: float, q_tiebreak: float = 0.0) -> QuadraticObjective:
    """Expected quadratic generation cost plus the slack penalty.

    E[f(P)] = c2 (mean^2 + variance) + c1 mean + c0, which for coefficients
    on an orthogonal basis is c2 * sum_s Gamma_s P_s^2 + c1 P_0 + c0.

    Reactive output carries no cost, so redistributing Q among machines with
    spare range is free and the optimum is a flat face; a tiny convex
    tie-break q_tiebreak * E[Q^2] per generator selects one point on it
    without moving the cost beyond roundoff.
    """
    obj = QuadraticObjective(layout.n)
    pg, qg = layout["pg"], layout["qg"]
    for gpos, gen in enumerate(net.generators):
        if gen.c2 < 0:
            raise ValueError(f"generator {gen.label}: negative quadratic cost is not supported")
        obj.const += gen.c0
        obj.add_linear(pg[gpos, 0], gen.c1)
        if gen.c2 > 0:
            obj.add_square(pg[gpos, :], gen.c2 * basis.norms)
        if q_tiebreak > 0:
            obj.add_square(qg[gpos, :], q_tiebreak * basis.norms)
    for name in ("slack_p", "slack_q", "slack_j"):
        if name in layout and layout[name].size:
            obj.add_linear(layout[name], psi)
    return obj.finalize()


def build_base_reference(layout: DecisionLayout, basis: PolynomialBasis,
                         ref_index: int) -> list:
    """Pin the reference phasor: real part for every higher-order coefficient,
    imaginary part for all coefficients (the order-0 magnitude stays free)."""
    K = basis.size
    block = QuadraticBlock("reference-voltage", "eq", (K - 1) + K, layout.n)
    vre, vim = layout["vre"], layout["vim"]
    block.add_linear(np.arange(K - 1), vre[ref_index, 1:], 1.0)
    block.add_linear(K - 1 + np.arange(K), vim[ref_index, :], 1.0)
    return [block.finalize()]


def build_generator_cc(net: Network, basis: PolynomialBasis, layout: DecisionLayout,
                       config: ModelConfig) -> list:
    """Two-sided moment bounds on P and Q per generator; upper sides carry
    penalized slacks, lower sides are hard."""
    block = ChanceBlock("generator-bounds", layout.n, basis.norms, config.variance_floor)
    pg, qg = layout["pg"], layout["qg"]
    sp_, sq_ = layout["slack_p"], layout["slack_q"]
    for gpos, gen in enumerate(net.generators):
        lam_p = config.policy_for("P", gen.label).factor
        lam_q = config.policy_for("Q", gen.label).factor
        block.add_row(pg[gpos], +1.0, lam_p, -gen.pmax, int(sp_[gpos]))
        block.add_row(pg[gpos], -1.0, lam_p, gen.pmin)
        block.add_row(qg[gpos], +1.0, lam_q, -gen.qmax, int(sq_[gpos]))
        block.add_row(qg[gpos], -1.0, lam_q, gen.qmin)
    return [block.finalize()]


def build_bus_blocks(net: Network, basis: PolynomialBasis, tensor: MultiplicationTensor,
                     layout: DecisionLayout, config: ModelConfig,
                     pd: np.ndarray, qd: np.ndarray) -> list:
    """Lifted-voltage definitions, nodal power balance per coefficient, and
    the slack-free voltage-band chance rows."""
    K = basis.size
    n_bus = net.n_bus
    nz = _tensor_nonzeros(tensor)
    vre, vim, w = layout["vre"], layout["vim"], layout["w"]
    pg, qg = layout["pg"], layout["qg"]
    pf, qf, pt, qt = layout["pf"], layout["qf"], layout["pt"], layout["qt"]

    lifted = QuadraticBlock("lifted-voltage", "eq", n_bus * K, layout.n)
    for i in range(n_bus):
        rows = i * K + np.arange(K)
        lifted.add_linear(rows, w[i], 1.0)
        _emit_square(lifted, i * K, nz, vre[i], vre[i], 1.0)
        _emit_square(lifted, i * K, nz, vim[i], vim[i], 1.0)

    gens_at: dict[int, list[int]] = {}
    for gpos, gen in enumerate(net.generators):
        gens_at.setdefault(net.bus_index(gen.bus), []).append(gpos)
    from_at: dict[int, list[int]] = {}
    to_at: dict[int, list[int]] = {}
    for lpos, br in enumerate(net.branches):
        from_at.setdefault(net.bus_index(br.from_bus), []).append(lpos)
        to_at.setdefault(net.bus_index(br.to_bus), []).append(lpos)

    bal_p = QuadraticBlock("active-balance", "eq", n_bus * K, layout.n)
    bal_q = QuadraticBlock("reactive-balance", "eq", n_bus * K, layout.n)
    for i, bus in enumerate(net.buses):
        rows = i * K + np.arange(K)
        for gpos in gens_at.get(i, []):
            bal_p.add_linear(rows, pg[gpos], 1.0)
            bal_q.add_linear(rows, qg[gpos], 1.0)
        for lpos in from_at.get(i, []):
            bal_p.add_linear(rows, pf[lpos], -1.0)
            bal_q.add_linear(rows, qf[lpos], -1.0)
        for lpos in to_at.get(i, []):
            bal_p.add_linear(rows, pt[lpos], -1.0)
            bal_q.add_linear(rows, qt[lpos], -1.0)
        if bus.gs != 0.0:
            bal_p.add_linear(rows, w[i], -bus.gs)
        if bus.bs != 0.0:
            bal_q.add_linear(rows, w[i], bus.bs)
        bal_p.add_const(rows, -pd[i])
        bal_q.add_const(rows, -qd[i])

    vcc = ChanceBlock("voltage-bounds", layout.n, basis.norms, config.variance_floor)
    for i, bus in enumerate(net.buses):
        lam = config.policy_for("V", bus.id).factor
        vcc.add_row(w[i], +1.0, lam, -bus.vmax**2)
        vcc.add_row(w[i], -1.0, lam, bus.vmin**2)

    return [lifted.finalize(), bal_p.finalize(), bal_q.finalize(), vcc.finalize()]


def build_branch_blocks(net: Network, basis: PolynomialBasis, tensor: MultiplicationTensor,
                        layout: DecisionLayout, config: ModelConfig,
                        rated_pos: tuple[int, ...]) -> list:
    """Galerkin flow equations, voltage-drop definitions, squared-current
    lift, and the one-sided current chance rows for rated branches."""
    K = basis.size
    nz = _tensor_nonzeros(tensor)
    n_br = len(net.branches)
    vre, vim = layout["vre"], layout["vim"]
    w, jf = layout["w"], layout["jf"]
    dre, dim_ = layout["dre"], layout["dim"]
    flows = {q: layout[q] for q in ("pf", "qf", "pt", "qt")}

    flow_block = QuadraticBlock("branch-flows", "eq", 4 * n_br * K, layout.n)
    drop_block = QuadraticBlock("voltage-drops", "eq", 2 * n_br * K, layout.n)
    cur_block = QuadraticBlock("lifted-current", "eq", n_br * K, layout.n)
    rowdrop = rowflow = rowcur = 0
    for lpos, br in enumerate(net.branches):
        i, j = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        coeffs = _flow_coefficients(br)
        for q in ("pf", "qf", "pt", "qt"):
            side = w[i] if coeffs[q][0] == "from" else w[j]
            _emit_flow_rows(flow_block, rowflow, K, nz, coeffs[q], side,
                            vre[i], vim[i], vre[j], vim[j], flows[q][lpos])
            rowflow += K
        for arr, va, vb in ((dre, vre[i], vre[j]), (dim_, vim[i], vim[j])):
            rows = rowdrop + np.arange(K)
            drop_block.add_linear(rows, arr[lpos], 1.0)
            drop_block.add_linear(rows, va, -1.0)
            drop_block.add_linear(rows, vb, 1.0)
            rowdrop += K
        y2 = br.g * br.g + br.b * br.b
        rows = rowcur + np.arange(K)
        cur_block.add_linear(rows, jf[lpos], 1.0)
        _emit_square(cur_block, rowcur, nz, dre[lpos], dre[lpos], y2)
        _emit_square(cur_block, rowcur, nz, dim_[lpos], dim_[lpos], y2)
        rowcur += K

    out = [flow_block.finalize(), drop_block.finalize(), cur_block.finalize()]
    if rated_pos:
        icc = ChanceBlock("current-bounds", layout.n, basis.norms, config.variance_floor)
        sj = layout["slack_j"]
        for spos, lpos in enumerate(rated_pos):
            br = net.branches[lpos]
            vmin_from = net.buses[net.bus_index(br.from_bus)].vmin
            lam = config.policy_for("I", br.label).factor
            icc.add_row(jf[lpos], +1.0, lam, -br.imax2(vmin_from, net.base_mva), int(sj[spos]))
        out.append(icc.finalize())
    return out


# ---------------------------------------------------------------------------
# contingency builders

def build_contingency_blocks(layer: LayerSpec, net: Network, layout: DecisionLayout,
                             config: ModelConfig, pd: np.ndarray, qd: np.ndarray) -> list:
    """Deterministic post-outage AC physics for one (coefficient, outage)
    layer.  Shunt terms and the switching reference both read the base-case
    lifted voltage of that coefficient; loads use its demand coefficients."""
    p, s = layer.prefix, layer.s
    view = layer.view
    n_bus = view.n_bus
    branches = view.branches
    w_base = layout["w"]
    vre = layout[f"{p}/vre"].reshape(n_bus, 1)
    vim = layout[f"{p}/vim"].reshape(n_bus, 1)
    cw = layout[f"{p}/w"].reshape(n_bus, 1)
    cpg = layout[f"{p}/pg"]
    cqg = layout[f"{p}/qg"]
    cflows = {q: layout[f"{p}/{q}"] for q in ("pf", "qf", "pt", "qt")}
    cjf = layout[f"{p}/jf"]
    cdre = layout[f"{p}/dre"].reshape(-1, 1)
    cdim = layout[f"{p}/dim"].reshape(-1, 1)

    n_br = len(branches)
    nrows = 1 + n_bus + 2 * n_bus + 7 * n_br
    block = QuadraticBlock(f"{p}/physics", "eq", nrows, layout.n)
    row = 0
    block.add_linear(row, vim[view.ref_index, 0], 1.0)
    row += 1
    for i in range(n_bus):
        block.add_linear(row, cw[i, 0], 1.0)
        block.add_quad(row, vre[i, 0], vre[i, 0], -1.0)
        block.add_quad(row, vim[i, 0], vim[i, 0], -1.0)
        row += 1

    gens_at: dict[int, list[int]] = {}
    for kpos, gen in enumerate(view.generators):
        gens_at.setdefault(view.bus_index(gen.bus), []).append(kpos)
    gb_pos = {b: j for j, b in enumerate(layer.gen_buses)}
    from_at: dict[int, list[int]] = {}
    to_at: dict[int, list[int]] = {}
    for lpos, br in enumerate(branches):
        from_at.setdefault(view.bus_index(br.from_bus), []).append(lpos)
        to_at.setdefault(view.bus_index(br.to_bus), []).append(lpos)

    for kind in ("p", "q"):
        for i, bus in enumerate(view.buses):
            if kind == "p":
                for kpos in gens_at.get(i, []):
                    block.add_linear(row, cpg[kpos], 1.0)
            elif i in gb_pos:
                block.add_linear(row, cqg[gb_pos[i]], 1.0)
            for lpos in from_at.get(i, []):
                block.add_linear(row, cflows["pf" if kind == "p" else "qf"][lpos], -1.0)
            for lpos in to_at.get(i, []):
                block.add_linear(row, cflows["pt" if kind == "p" else "qt"][lpos], -1.0)
            if kind == "p":
                if bus.gs != 0.0:
                    block.add_linear(row, w_base[i, s], -bus.gs)
                block.add_const(row, -pd[i, s])
            else:
                if bus.bs != 0.0:
                    block.add_linear(row, w_base[i, s], bus.bs)
                block.add_const(row, -qd[i, s])
            row += 1

    for lpos, br in enumerate(branches):
        i, j = view.bus_index(br.from_bus), view.bus_index(br.to_bus)
        coeffs = _flow_coefficients(br)
        for q in ("pf", "qf", "pt", "qt"):
            side = cw[i] if coeffs[q][0] == "from" else cw[j]
            _emit_flow_rows(block, row, 1, _TRIVIAL_NZ, coeffs[q], side,
                            vre[i], vim[i], vre[j], vim[j], cflows[q][lpos])
            row += 1
        block.add_linear(row, cdre[lpos, 0], 1.0)
        block.add_linear(row, vre[i, 0], -1.0)
        block.add_linear(row, vre[j, 0], 1.0)
        row += 1
        block.add_linear(row, cdim[lpos, 0], 1.0)
        block.add_linear(row, vim[i, 0], -1.0)
        block.add_linear(row, vim[j, 0], 1.0)
        row += 1
        y2 = br.g * br.g + br.b * br.b
        block.add_linear(row, cjf[lpos], 1.0)
        block.add_quad(row, cdre[lpos, 0], cdre[lpos, 0], -y2)
        block.add_quad(row, cdim[lpos, 0], cdim[lpos, 0], -y2)
        row += 1
    assert row == nrows

    out = [block.finalize()]
    if config.contingency_current_bounds:
        rated = [(lpos, br) for lpos, br in enumerate(branches)
                 if br.imax2(1.0, view.base_mva) is not None]
        if rated:
            cap = QuadraticBlock(f"{p}/current-cap", "ineq", len(rated), layout.n)
            for r, (lpos, br) in enumerate(rated):
                vmin_from = view.buses[view.bus_index(br.from_bus)].vmin
                cap.add_linear(r, cjf[lpos], 1.0)
                cap.add_const(r, -br.imax2(vmin_from, view.base_mva))
            out.append(cap.finalize())
    return out


def build_pq_response(layer: LayerSpec, net: Network, layout: DecisionLayout,
                      config: ModelConfig) -> list:
    """Couple one contingency layer to the base case: participation-factor
    active-power response per generator, a linear voltage-shift row per
    generator bus, the smoothed-switching self-consistency rows on bus-total
    reactive output, and the shift boxes that keep switched voltages inside
    the band.  The reference bus holds its base voltage with free reactive
    swing, mirroring the slack bus of a power flow."""
    p, s = layer.prefix, layer.s
    view = layer.view
    gens = view.generators
    G = len(gens)
    pg_base, w_base = layout["pg"], layout["w"]
    cpg = layout[f"{p}/pg"]
    cqg = layout[f"{p}/qg"]
    cw = layout[f"{p}/w"]
    wp, wm = layout[f"{p}/wp"], layout[f"{p}/wm"]
    delta = layout[f"{p}/delta"]

    qmin_at = dict.fromkeys(layer.gen_buses, 0.0)
    qmax_at = dict.fromkeys(layer.gen_buses, 0.0)
    for gen in gens:
        b = view.bus_index(gen.bus)
        qmin_at[b] += gen.qmin
        qmax_at[b] += gen.qmax

    coup = QuadraticBlock(f"{p}/response", "eq", G + len(layer.gen_buses), layout.n)
    for kpos, gen in enumerate(gens):
        coup.add_linear(kpos, cpg[kpos], 1.0)
        coup.add_linear(kpos, pg_base[layer.gen_base_pos[kpos], s], -1.0)
        if gen.responding and gen.alpha > 0:
            coup.add_linear(kpos, delta, -gen.alpha)
    pv_pos = {b: j for j, b in enumerate(layer.pv_buses)}
    for j, b in enumerate(layer.gen_buses):
        row = G + j
        coup.add_linear(row, cw[b], 1.0)
        coup.add_linear(row, w_base[b, s], -1.0)
        if b in pv_pos:
            coup.add_linear(row, wp[pv_pos[b]], -1.0)
            coup.add_linear(row, wm[pv_pos[b]], 1.0)

    gb_pos = {b: j for j, b in enumerate(layer.gen_buses)}
    switch = SwitchingBlock(
        f"{p}/switching", layout.n, wp, wm,
        np.array([cqg[gb_pos[b]] for b in layer.pv_buses], dtype=np.int64),
        qmin=np.array([qmin_at[b] for b in layer.pv_buses]),
        qmax=np.array([qmax_at[b] for b in layer.pv_buses]),
        eps=config.eps_smooth,
    )

    npv = len(layer.pv_buses)
    boxes = QuadraticBlock(f"{p}/voltage-shift-box", "ineq", 2 * npv, layout.n)
    for j, b in enumerate(layer.pv_buses):
        bus = view.buses[b]
        boxes.add_linear(j, wp[j], 1.0)
        boxes.add_linear(j, w_base[b, s], 1.0)
        boxes.add_const(j, -bus.vmax**2)
        boxes.add_linear(npv + j, wm[j], 1.0)
        boxes.add_linear(npv + j, w_base[b, s], -1.0)
        boxes.add_const(npv + j, bus.vmin**2)

    return [coup.finalize(), switch, boxes.finalize()]


# ---------------------------------------------------------------------------
# assembly

def _build_layout(net: Network, basis: PolynomialBasis, contingencies, config,
                  rated_pos) -> DecisionLayout:
    K = basis.size
    n_bus, n_br, n_gen = net.n_bus, len(net.branches), len(net.generators)
    lay = DecisionLayout()
    for name in ("vre", "vim", "w"):
        lay.add(name, n_bus, K)
    for name in ("pg", "qg"):
        lay.add(name, n_gen, K)
    for name in ("pf", "qf", "pt", "qt", "jf", "dre", "dim"):
        lay.add(name, n_br, K)
    lay.add("slack_p", n_gen)
    lay.add("slack_q", n_gen)
    lay.add("slack_j", len(rated_pos))

    scenarios = range(K) if config.scenario_policy == "all" else (0,)
    for s in scenarios:
        for cont in contingencies:
            view = apply_contingency(net, cont)
            prefix = f"{cont.label}@s{s}"
            kept = {g.id for g in view.generators}
            gen_base_pos = tuple(pos for pos, g in enumerate(net.generators) if g.id in kept)
            gen_buses = tuple(sorted({view.bus_index(g.bus) for g in view.generators}))
            pv_buses = tuple(b for b in gen_buses if b != view.ref_index)
            nb = len(view.branches)
            ng = len(view.generators)
            for name in ("vre", "vim", "w"):
                lay.add(f"{prefix}/{name}", n_bus)
            lay.add(f"{prefix}/pg", ng)
            lay.add(f"{prefix}/qg", len(gen_buses))
            lay.add(f"{prefix}/wp", len(pv_buses))
            lay.add(f"{prefix}/wm", len(pv_buses))
            for name in ("pf", "qf", "pt", "qt", "jf", "dre", "dim"):
                lay.add(f"{prefix}/{name}", nb)
            lay.add(f"{prefix}/delta")
            lay.layers.append(LayerSpec(prefix=prefix, s=s, contingency=cont,
                                        view=view, gen_base_pos=gen_base_pos,
                                        gen_buses=gen_buses, pv_buses=pv_buses))
    return lay


def _flat_start(net, basis, layout, pd, qd) -> np.ndarray:
    """Unit-voltage start with proportional dispatch and closed flow values."""
    x = np.zeros(layout.n)
    K = basis.size
    x[layout["vre"][:, 0]] = 1.0
    x[layout["w"][:, 0]] = 1.0
    total_p, total_q = pd[:, 0].sum(), qd[:, 0].sum()
    pg, qg = layout["pg"], layout["qg"]
    for gpos, gen in enumerate(net.generators):
        x[pg[gpos, 0]] = np.clip(gen.alpha * total_p * 1.02, gen.pmin, gen.pmax)
        x[qg[gpos, 0]] = np.clip(gen.alpha * total_q, gen.qmin, gen.qmax)

    def flat_flow(br, q):
        _, c_self, c_sym, _ = _flow_coefficients(br)[q]
        return c_self + c_sym  # W = sym = 1, anti = 0 at a flat profile

    for q in ("pf", "qf", "pt", "qt"):
        for lpos, br in enumerate(net.branches):
            x[layout[q][lpos, 0]] = flat_flow(br, q)

    for layer in layout.layers:
        p = layer.prefix
        view = layer.view
        x[layout[f"{p}/vre"]] = x[layout["vre"][:, layer.s]]
        x[layout[f"{p}/w"]] = x[layout["w"][:, layer.s]]
        gb_pos = {b: j for j, b in enumerate(layer.gen_buses)}
        cqg_init = np.zeros(len(layer.gen_buses))
        for kpos, gen in enumerate(view.generators):
            x[layout[f"{p}/pg"][kpos]] = x[pg[layer.gen_base_pos[kpos], layer.s]]
            cqg_init[gb_pos[view.bus_index(gen.bus)]] += x[qg[layer.gen_base_pos[kpos], layer.s]]
        x[layout[f"{p}/qg"]] = cqg_init
        if layer.s == 0:
            for q in ("pf", "qf", "pt", "qt"):
                for lpos, br in enumerate(view.branches):
                    x[layout[f"{p}/{q}"][lpos]] = flat_flow(br, q)
        x[layout[f"{p}/wp"]] = 1e-4
        x[layout[f"{p}/wm"]] = 1e-4
    return x


def assemble(net: Network, basis: PolynomialBasis, tensor: MultiplicationTensor,
             contingencies, config: ModelConfig | None = None) -> NlpProblem:
    """Build the full multi-network problem: base-case blocks for every
    expansion coefficient plus one coupled post-contingency layer per
    (coefficient, outage) pair under the configured scenario policy."""
    config = config or ModelConfig()
    if tensor.basis is not basis:
        raise PceError("multiplication tensor was built on a different basis")
    contingencies = tuple(contingencies)

    rated_pos = tuple(lpos for lpos, br in enumerate(net.branches) if br.rate_a > 0)
    layout = _build_layout(net, basis, contingencies, config, rated_pos)
    pd, qd = load_coefficients(net, basis)

    blocks = []
    blocks += build_base_reference(layout, basis, net.ref_index)
    blocks += build_bus_blocks(net, basis, tensor, layout, config, pd, qd)
    blocks += build_branch_blocks(net, basis, tensor, layout, config, rated_pos)
    blocks += build_generator_cc(net, basis, layout, config)
    for layer in layout.layers:
        blocks += build_contingency_blocks(layer, net, layout, config, pd, qd)
        blocks += build_pq_response(layer, net, layout, config)

    objective = build_objective(net, basis, layout, config.psi, config.q_tiebreak)

    # wp/wm carry no explicit bounds: their switching equalities keep them
    # positive, and a redundant bound under an equality that can pin the
    # variable to zero would be degenerate for an interior method
    lb = np.full(layout.n, -np.inf)
    ub = np.full(layout.n, np.inf)
    for name, idx in layout.items():
        if name.startswith("slack_"):
            lb[idx.ravel()] = 0.0

    x0 = _flat_start(net, basis, layout, pd, qd)
    return NlpProblem(
        n=layout.n, lb=lb, ub=ub, x0=x0, objective=objective, blocks=tuple(blocks),
        layout=layout, basis=basis, net=net, config=config,
        contingencies=contingencies, rated_branch_pos=rated_pos,
        name=f"{net.name}-deg{basis.degree}",
    )


def warm_from_order0(problem: NlpProblem, source: NlpProblem, x_source: np.ndarray) -> np.ndarray:
    """Map a solved lower-degree problem into the order-0 coefficients of a
    richer one; unmatched ranges keep the flat-start values."""
    x = problem.x0.copy()
    lay, src = problem.layout, source.layout
    for name, idx in lay.items():
        if name not in src:
            continue
        sidx = src[name]
        if idx.ndim == 2 and sidx.ndim == 2:
            x[idx[:, 0]] = x_source[sidx[:, 0]]
        elif idx.shape == sidx.shape:
            x[idx.ravel()] = x_source[sidx.ravel()]
    return x


# ---------------------------------------------------------------------------
# verification helpers

def jacobian_fd_error(block, x: np.ndarray, step: float = 1e-6) -> float:
    """Max relative mismatch between the analytic Jacobian and central
    finite differences, measured entrywise against 1 + |analytic|."""
    jac = block.jacobian(x).toarray()
    fd = np.empty_like(jac)
    xp = x.astype(float).copy()
    for c in range(x.size):
        h = step * max(1.0, abs(x[c]))
        xp[c] = x[c] + h
        r_hi = block.residual(xp)
        xp[c] = x[c] - h
        r_lo = block.residual(xp)
        xp[c] = x[c]
        fd[:, c] = (r_hi - r_lo) / (2.0 * h)
    return float(np.max(np.abs(fd - jac) / (1.0 + np.abs(jac))))


def hessian_fd_error(block, x: np.ndarray, lam: np.ndarray, step: float = 1e-6) -> float:
    """Same check for the multiplier-weighted constraint Hessian, via central
    differences of grad(lam . c)."""
    hess = block.hessian(x, lam).toarray()
    hess = 0.5 * (hess + hess.T)
    fd = np.empty_like(hess)
    xp = x.astype(float).copy()
    for c in range(x.size):
        h = step * max(1.0, abs(x[c]))
        xp[c] = x[c] + h
        g_hi = block.jacobian(xp).T @ lam
        xp[c] = x[c] - h
        g_lo = block.jacobian(xp).T @ lam
        xp[c] = x[c]
        fd[:, c] = (g_hi - g_lo) / (2.0 * h)
    fd = 0.5 * (fd + fd.T)
    return float(np.max(np.abs(fd - hess) / (1.0 + np.abs(hess))))


def galerkin_residual(problem: NlpProblem, x: np.ndarray) -> float:
    """Largest quadrature-weighted projection of the pointwise AC power
    mismatch onto any basis function, using the base-case coefficients in x.

    The Galerkin blocks are exact for the quadratic AC equations, so this is
    solver-tolerance small at any point satisfying the base-case physics.
    """
    basis, net, lay = problem.basis, problem.net, problem.layout
    grids = np.meshgrid(*basis.quad_nodes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*basis.quad_weights, indexing="ij")
    wq = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    psi = basis.eval_at(pts)                                   # (Q, K)

    volt = (x[lay["vre"]] + 1j * x[lay["vim"]]) @ psi.T        # (n_bus, Q)
    ybus = build_ybus(NetworkView(base=net))
    s_inj = volt * np.conj(ybus @ volt)

    pd, qd = load_coefficients(net, basis)
    pg_bus = np.zeros((net.n_bus, basis.size))
    qg_bus = np.zeros((net.n_bus, basis.size))
    for gpos, gen in enumerate(net.generators):
        i = net.bus_index(gen.bus)
        pg_bus[i] += x[lay["pg"][gpos]]
        qg_bus[i] += x[lay["qg"][gpos]]

    mis_p = (pg_bus - pd) @ psi.T - s_inj.real
    mis_q = (qg_bus - qd) @ psi.T - s_inj.imag
    proj_p = mis_p @ (wq[:, None] * psi)
    proj_q = mis_q @ (wq[:, None] * psi)
    return float(max(np.max(np.abs(proj_p)), np.max(np.abs(proj_q))))
