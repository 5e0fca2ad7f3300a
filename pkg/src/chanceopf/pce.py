"""Orthogonal-polynomial chaos machinery.

Builds truncated polynomial bases for independent standardized germs
(standard normal -> probabilists' Hermite, uniform on [-1, 1] -> Legendre),
the Gauss quadrature rules and triple-product multiplication tensors needed
for Galerkin arithmetic, and the moment/chance-bound helpers used by the
constraint builders.

All objects are immutable after construction and safe to share between
threads; the arithmetic functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import ndtri

GAUSSIAN = "gaussian"
UNIFORM = "uniform"
FAMILIES = (GAUSSIAN, UNIFORM)

#: drop tensor entries with |<psi psi psi>| below this (quadrature noise floor)
TENSOR_DROP_TOL = 1e-12

#: default cap on basis size, guards against accidental blow-ups
DEFAULT_SIZE_CAP = 20000


class PceError(ValueError):
    """Invalid basis specification or mismatched operands."""


@dataclass(frozen=True)
class BasisSpec:
    """Family per germ dimension plus a total-degree truncation."""

    families: tuple[str, ...]
    degree: int

    def __post_init__(self):
        if len(self.families) < 1:
            raise PceError("germ dimension must be >= 1")
        if self.degree < 0:
            raise PceError("degree must be >= 0")
        for fam in self.families:
            if fam not in FAMILIES:
                raise PceError(f"unsupported polynomial family {fam!r}")

    @classmethod
    def homogeneous(cls, family: str, dim: int, degree: int) -> "BasisSpec":
        if dim < 1:
            raise PceError("germ dimension must be >= 1")
        return cls(families=(family,) * dim, degree=degree)

    @property
    def dim(self) -> int:
        return len(self.families)


def total_degree_indices(dim: int, degree: int) -> np.ndarray:
    """All multi-indices with total degree <= degree, graded-lex ordered.

    Index 0 is the constant term.  Within one total degree the ordering is
    lexicographic with the first dimension varying slowest.
    """
    out = []
    for deg in range(degree + 1):
        level = []

        def rec(prefix, remaining, slots):
            if slots == 1:
                level.append(prefix + [remaining])
                return
            for k in range(remaining, -1, -1):
                rec(prefix + [k], remaining - k, slots - 1)

        rec([], deg, dim)
        out.extend(level)
    return np.array(out, dtype=np.int64)


def _recurrence_beta(family: str, n: int) -> np.ndarray:
    """Monic three-term recurrence coefficients beta_1..beta_n.

    Both supported measures are symmetric, so all alpha_k = 0 and
    p_{k+1}(x) = x p_k(x) - beta_k p_{k-1}(x) in monic form.
    """
    k = np.arange(1, n + 1, dtype=float)
    if family == GAUSSIAN:
        return k
    # Legendre on [-1, 1] with weight 1/2
    return k**2 / (4.0 * k**2 - 1.0)


def gauss_rule(family: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss rule for the unit-mass germ measure (Golub-Welsch)."""
    if n < 1:
        raise PceError("quadrature rule needs at least one node")
    if n == 1:
        return np.zeros(1), np.ones(1)
    beta = _recurrence_beta(family, n - 1)
    nodes, vecs = eigh_tridiagonal(np.zeros(n), np.sqrt(beta))
    weights = vecs[0, :] ** 2  # mu_0 = 1 for a probability measure
    return nodes, weights


def eval_orthopoly(family: str, degree: int, x: np.ndarray) -> np.ndarray:
    """Table of psi_0..psi_degree at points x, shape (len(x), degree+1).

    Hermite is the probabilists' (monic) family; Legendre carries the
    standard P_k(1) = 1 normalization.
    """
    x = np.asarray(x, dtype=float)
    tab = np.empty(x.shape + (degree + 1,))
    tab[..., 0] = 1.0
    if degree == 0:
        return tab
    tab[..., 1] = x
    for k in range(1, degree):
        if family == GAUSSIAN:
            tab[..., k + 1] = x * tab[..., k] - k * tab[..., k - 1]
        else:
            tab[..., k + 1] = ((2 * k + 1) * x * tab[..., k] - k * tab[..., k - 1]) / (k + 1)
    return tab


def _univariate_norm(family: str, k: int) -> float:
    if family == GAUSSIAN:
        return float(math.factorial(k))
    return 1.0 / (2 * k + 1)


@dataclass(frozen=True)
class PolynomialBasis:
    """Truncated total-degree basis over independent germ dimensions."""

    spec: BasisSpec
    indices: np.ndarray          # (size, dim) multi-indices, graded lex
    norms: np.ndarray            # (size,) squared norms Gamma_s
    quad_nodes: tuple[np.ndarray, ...]    # per dimension
    quad_weights: tuple[np.ndarray, ...]  # per dimension
    _index_lookup: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        lookup = {tuple(int(v) for v in row): i for i, row in enumerate(self.indices)}
        object.__setattr__(self, "_index_lookup", lookup)
        self.indices.setflags(write=False)
        self.norms.setflags(write=False)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def degree(self) -> int:
        return self.spec.degree

    def index_of(self, multi) -> int:
        return self._index_lookup[tuple(int(v) for v in multi)]

    def eval_at(self, xi: np.ndarray) -> np.ndarray:
        """psi_s(xi) for all s, shape (..., size); xi has shape (..., dim)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[-1] != self.dim:
            raise PceError(f"germ point dimension {xi.shape[-1]} != basis dim {self.dim}")
        out = np.ones(xi.shape[:-1] + (self.size,))
        for k, fam in enumerate(self.spec.families):
            tab = eval_orthopoly(fam, self.degree, xi[..., k])
            out *= tab[..., self.indices[:, k]]
        return out


def build_basis(spec: BasisSpec, size_cap: int = DEFAULT_SIZE_CAP) -> PolynomialBasis:
    """Enumerate the multi-index set and precompute norms and quadrature."""
    m, d = spec.dim, spec.degree
    size = math.comb(m + d, d)
    if size > size_cap:
        raise PceError(f"basis size {size} exceeds cap {size_cap} (m={m}, d={d})")
    indices = total_degree_indices(m, d)
    assert indices.shape[0] == size

    norms = np.ones(size)
    for k, fam in enumerate(spec.families):
        norms *= np.array([_univariate_norm(fam, int(j)) for j in indices[:, k]])

    nq = max(1, math.ceil((3 * d + 1) / 2))
    nodes, weights = [], []
    for fam in spec.families:
        x, w = gauss_rule(fam, nq)
        nodes.append(x)
        weights.append(w)
    return PolynomialBasis(
        spec=spec,
        indices=indices,
        norms=norms,
        quad_nodes=tuple(nodes),
        quad_weights=tuple(weights),
    )


def _univariate_triple_table(basis: PolynomialBasis, dim: int) -> np.ndarray:
    """<psi_i psi_j psi_l> for one germ dimension, via its Gauss rule."""
    d = basis.degree
    tab = eval_orthopoly(basis.spec.families[dim], d, basis.quad_nodes[dim])
    w = basis.quad_weights[dim]
    return np.einsum("q,qi,qj,ql->ijl", w, tab, tab, tab)


def triple_product(basis: PolynomialBasis, s1: int, s2: int, s: int) -> float:
    """<psi_{s1} psi_{s2} psi_s> by per-dimension Gauss quadrature.

    The tensorized quadrature factorizes over independent dimensions, so the
    full-grid sum is evaluated as a product of univariate integrals; the node
    counts make it exact for the polynomial degrees involved.
    """
    k = basis.indices
    val = 1.0
    for dim in range(basis.dim):
        tab = eval_orthopoly(basis.spec.families[dim], basis.degree, basis.quad_nodes[dim])
        w = basis.quad_weights[dim]
        val *= float(np.sum(w * tab[:, k[s1, dim]] * tab[:, k[s2, dim]] * tab[:, k[s, dim]]))
    return val


@dataclass(frozen=True)
class MultiplicationTensor:
    """Normalized triple products <psi_a psi_b psi_s> / Gamma_s.

    Stored as one dense symmetric (size, size) matrix per output index s;
    entries below the drop threshold are exact zeros.  Logical shape is
    size^3 but the matrices are mostly zeros for any real basis.
    """

    basis: PolynomialBasis
    mats: tuple[np.ndarray, ...]

    def __post_init__(self):
        for m in self.mats:
            m.setflags(write=False)

    def entry(self, s1: int, s2: int, s: int) -> float:
        return float(self.mats[s][s1, s2])

    def nnz(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.mats))


def build_mul_tensor(basis: PolynomialBasis, drop_tol: float = TENSOR_DROP_TOL) -> MultiplicationTensor:
    K = basis.size
    uni = [_univariate_triple_table(basis, dim) for dim in range(basis.dim)]
    idx = basis.indices
    raw = np.ones((K, K, K))
    for dim in range(basis.dim):
        kd = idx[:, dim]
        raw *= uni[dim][np.ix_(kd, kd, kd)]
    raw[np.abs(raw) < drop_tol] = 0.0
    mats = tuple(np.ascontiguousarray(raw[:, :, s] / basis.norms[s]) for s in range(K))
    return MultiplicationTensor(basis=basis, mats=mats)


@dataclass(frozen=True)
class PceVector:
    """One uncertain scalar as coefficients on a shared basis."""

    basis: PolynomialBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.size,):
            raise PceError(f"coefficient count {c.shape} != basis size {self.basis.size}")
        object.__setattr__(self, "coeffs", c)
        c.setflags(write=False)


def _check_shared(x: PceVector, y: PceVector):
    if x.basis is not y.basis:
        raise PceError("operands must share one basis object")


def pce_add(x: PceVector, y: PceVector) -> PceVector:
    _check_shared(x, y)
    return PceVector(x.basis, x.coeffs + y.coeffs)


def pce_mul(x: PceVector, y: PceVector, tensor: MultiplicationTensor) -> PceVector:
    _check_shared(x, y)
    if tensor.basis is not x.basis:
        raise PceError("tensor was built on a different basis")
    out = np.array([x.coeffs @ m @ y.coeffs for m in tensor.mats])
    return PceVector(x.basis, out)


def moments(x: PceVector) -> tuple[float, float]:
    """(mean, variance) from orthogonality: alpha_0 and sum Gamma_s alpha_s^2."""
    mean = float(x.coeffs[0])
    var = float(np.sum(x.basis.norms[1:] * x.coeffs[1:] ** 2))
    return mean, var


@dataclass(frozen=True)
class ChanceBoundPolicy:
    """Risk level and the rule turning it into a bound-tightening factor."""

    epsilon: float
    rule: str = "chebyshev"
    fixed_value: float | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise PceError("risk level must lie in (0, 1)")
        if self.rule not in ("chebyshev", "gaussian-quantile", "fixed"):
            raise PceError(f"unknown chance-bound rule {self.rule!r}")
        if self.rule == "fixed" and (self.fixed_value is None or self.fixed_value <= 0):
            raise PceError("fixed rule needs a positive factor")

    @property
    def factor(self) -> float:
        if self.rule == "chebyshev":
            return math.sqrt((1.0 - self.epsilon) / self.epsilon)
        if self.rule == "gaussian-quantile":
            return float(ndtri(1.0 - self.epsilon))
        return float(self.fixed_value)


def cc_interval(x: PceVector, policy: ChanceBoundPolicy) -> tuple[float, float]:
    """(mean - lambda*std, mean + lambda*std) of x."""
    mean, var = moments(x)
    spread = policy.factor * math.sqrt(max(var, 0.0))
    return mean - spread, mean + spread


def sample(x: PceVector, xi) -> np.ndarray | float:
    """Evaluate the expansion at germ point(s) xi."""
    xi_arr = np.asarray(xi, dtype=float)
    scalar = xi_arr.ndim == 1
    psi = x.basis.eval_at(xi_arr)
    vals = psi @ x.coeffs
    return float(vals[0]) if scalar else vals


def lift_input(basis: PolynomialBasis, mean: float, sigma: float, dim: int) -> PceVector:
    """Degree-1 representation of an input with given mean and std dev.

    The first-order coefficient on the assigned germ dimension is scaled so
    the standard deviation equals sigma (Legendre needs sqrt(3) because
    Var(xi) = 1/3 on [-1, 1]).
    """
    if sigma < 0:
        raise PceError("sigma must be >= 0")
    if not 0 <= dim < basis.dim:
        raise PceError(f"germ dimension {dim} out of range")
    if basis.degree < 1 and sigma > 0:
        raise PceError("degree-0 basis cannot carry nonzero sigma")
    coeffs = np.zeros(basis.size)
    coeffs[0] = mean
    if sigma > 0:
        unit = np.zeros(basis.dim, dtype=np.int64)
        unit[dim] = 1
        s = basis.index_of(unit)
        scale = math.sqrt(3.0) if basis.spec.families[dim] == UNIFORM else 1.0
        coeffs[s] = sigma * scale
    return PceVector(basis, coeffs)
