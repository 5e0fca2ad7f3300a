"""Polynomial-chaos core tests.

The oracle path is deliberately independent of the implementation: it uses
numpy.polynomial (hermegauss/leggauss, HermiteE/Legendre evaluation) on full
tensor-product grids, while the package factorizes everything per dimension
with its own recurrences.
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import hermite_e, legendre

from chanceopf import pce


# ---------------------------------------------------------------------------
# oracle helpers

def oracle_rule(family, n):
    """Unit-mass Gauss rule from numpy.polynomial."""
    if family == pce.GAUSSIAN:
        x, w = hermite_e.hermegauss(n)
        return x, w / math.sqrt(2.0 * math.pi)
    x, w = legendre.leggauss(n)
    return x, w / 2.0


def oracle_psi(family, k, x):
    """psi_k at x via numpy.polynomial basis evaluation."""
    c = np.zeros(k + 1)
    c[k] = 1.0
    if family == pce.GAUSSIAN:
        return hermite_e.hermeval(x, c)
    return legendre.legval(x, c)


def oracle_inner(basis, r, s, extra=3):
    """<psi_r psi_s> on a full tensor grid, one dimension at a time is not
    used here on purpose: the grid is materialized to keep the path separate
    from the implementation's factorized quadrature."""
    n = basis.degree + extra
    rules = [oracle_rule(fam, n) for fam in basis.spec.families]
    total = 0.0
    for combo in itertools.product(*(range(n) for _ in range(basis.dim))):
        w = 1.0
        val = 1.0
        for dim, q in enumerate(combo):
            x, wts = rules[dim]
            w *= wts[q]
            fam = basis.spec.families[dim]
            val *= oracle_psi(fam, int(basis.indices[r, dim]), x[q])
            val *= oracle_psi(fam, int(basis.indices[s, dim]), x[q])
        total += w * val
    return total


def oracle_triple(basis, s1, s2, s, extra=4):
    n = 2 * basis.degree + extra
    rules = [oracle_rule(fam, n) for fam in basis.spec.families]
    total = 0.0
    for combo in itertools.product(*(range(n) for _ in range(basis.dim))):
        w = 1.0
        val = 1.0
        for dim, q in enumerate(combo):
            x, wts = rules[dim]
            w *= wts[q]
            fam = basis.spec.families[dim]
            for row in (s1, s2, s):
                val *= oracle_psi(fam, int(basis.indices[row, dim]), x[q])
        total += w * val
    return total


# ---------------------------------------------------------------------------
# basis construction

def test_index_set_size_and_ordering():
    idx = pce.total_degree_indices(2, 2)
    assert idx.shape == (6, 2)
    # graded: degree 0, then 1, then 2; index 0 is the constant
    assert idx[0].tolist() == [0, 0]
    degs = idx.sum(axis=1)
    assert (np.diff(degs) >= 0).all()


def test_basis_size_formula():
    for m, d in [(1, 2), (2, 3), (3, 2), (4, 1)]:
        spec = pce.BasisSpec.homogeneous(pce.GAUSSIAN, m, d)
        basis = pce.build_basis(spec)
        assert basis.size == math.comb(m + d, d)


def test_norms_hermite_m1_d2():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    assert basis.indices[:, 0].tolist() == [0, 1, 2]
    np.testing.assert_allclose(basis.norms, [1.0, 1.0, 2.0], rtol=0, atol=1e-14)


def test_norms_legendre_m1_d1():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 1, 1))
    np.testing.assert_allclose(basis.norms, [1.0, 1.0 / 3.0], rtol=0, atol=1e-14)


def test_norms_hermite_m2_d1():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 2, 1))
    assert basis.size == 3
    np.testing.assert_allclose(basis.norms, [1.0, 1.0, 1.0], rtol=0, atol=1e-14)


def test_size_cap_enforced():
    spec = pce.BasisSpec.homogeneous(pce.GAUSSIAN, 10, 5)
    with pytest.raises(pce.PceError):
        pce.build_basis(spec, size_cap=100)


def test_bad_specs_rejected():
    with pytest.raises(pce.PceError):
        pce.BasisSpec(families=(), degree=1)
    with pytest.raises(pce.PceError):
        pce.BasisSpec(families=("cauchy",), degree=1)
    with pytest.raises(pce.PceError):
        pce.BasisSpec(families=(pce.GAUSSIAN,), degree=-1)


@pytest.mark.parametrize("family", [pce.GAUSSIAN, pce.UNIFORM])
@pytest.mark.parametrize("m,d", [(1, 4), (2, 3), (3, 2)])
def test_orthogonality_against_oracle(family, m, d):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(family, m, d))
    # own quadrature
    tabs = [pce.eval_orthopoly(family, d, basis.quad_nodes[k]) for k in range(m)]
    for r in range(basis.size):
        for s in range(r, basis.size):
            own = 1.0
            for k in range(m):
                own *= float(np.sum(basis.quad_weights[k]
                                    * tabs[k][:, basis.indices[r, k]]
                                    * tabs[k][:, basis.indices[s, k]]))
            expect = basis.norms[s] if r == s else 0.0
            assert abs(own - expect) <= 1e-10
    # independent oracle on a sample of pairs (full grid is slow for m=3)
    rng = np.random.default_rng(7)
    pairs = [(r, r) for r in range(basis.size)]
    pairs += [tuple(rng.integers(0, basis.size, 2)) for _ in range(10)]
    for r, s in pairs:
        expect = basis.norms[s] if r == s else 0.0
        assert abs(oracle_inner(basis, r, s) - expect) <= 1e-9


def test_quadrature_node_count():
    for d in range(5):
        basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, d))
        assert len(basis.quad_nodes[0]) >= math.ceil((3 * d + 1) / 2)


# ---------------------------------------------------------------------------
# triple products and multiplication tensor

def test_triple_product_hermite_112():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    # <xi * xi * (xi^2 - 1)> = E[xi^4] - E[xi^2] = 3 - 1
    assert abs(pce.triple_product(basis, 1, 1, 2) - 2.0) <= 1e-12
    assert abs(oracle_triple(basis, 1, 1, 2) - 2.0) <= 1e-10


def test_triple_product_constant_slot():
    for family in (pce.GAUSSIAN, pce.UNIFORM):
        basis = pce.build_basis(pce.BasisSpec.homogeneous(family, 2, 2))
        for s in range(basis.size):
            assert abs(pce.triple_product(basis, 0, s, s) - basis.norms[s]) <= 1e-12


def test_triple_product_odd_vanishes():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    assert abs(pce.triple_product(basis, 1, 1, 1)) <= 1e-12


@pytest.mark.parametrize("family", [pce.GAUSSIAN, pce.UNIFORM])
def test_triple_products_match_oracle(family):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(family, 2, 2))
    rng = np.random.default_rng(3)
    for _ in range(25):
        s1, s2, s = rng.integers(0, basis.size, 3)
        own = pce.triple_product(basis, int(s1), int(s2), int(s))
        ref = oracle_triple(basis, int(s1), int(s2), int(s))
        assert abs(own - ref) <= 1e-9


def test_tensor_entries_and_symmetry():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    tensor = pce.build_mul_tensor(basis)
    assert abs(tensor.entry(1, 1, 2) - 1.0) <= 1e-12       # 2 / Gamma_2
    assert abs(tensor.entry(0, 1, 1) - 1.0) <= 1e-12
    for m in tensor.mats:
        np.testing.assert_allclose(m, m.T, rtol=0, atol=0)

    leg = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 1, 1))
    lt = pce.build_mul_tensor(leg)
    assert abs(lt.entry(1, 1, 0) - 1.0 / 3.0) <= 1e-12


def test_tensor_constant_row_is_identity():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 2, 2))
    tensor = pce.build_mul_tensor(basis)
    for s in range(basis.size):
        for s2 in range(basis.size):
            expect = 1.0 if s2 == s else 0.0
            assert abs(tensor.entry(0, s2, s) - expect) <= 1e-12


def test_tensor_drops_noise_entries():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 3))
    tensor = pce.build_mul_tensor(basis)
    for m in tensor.mats:
        vals = np.abs(m[m != 0.0])
        assert vals.size == 0 or vals.min() > 1e-13


# ---------------------------------------------------------------------------
# Galerkin arithmetic

def _vec(basis, coeffs):
    c = np.zeros(basis.size)
    c[: len(coeffs)] = coeffs
    return pce.PceVector(basis, c)


def test_add_componentwise():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    z = pce.pce_add(_vec(basis, [1, 2]), _vec(basis, [3, 4]))
    np.testing.assert_allclose(z.coeffs, [4, 6])


def test_add_basis_mismatch():
    b1 = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    b2 = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    with pytest.raises(pce.PceError):
        pce.pce_add(_vec(b1, [1, 2]), _vec(b2, [1, 2]))


def test_mul_identity():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 2, 2))
    tensor = pce.build_mul_tensor(basis)
    rng = np.random.default_rng(5)
    x = pce.PceVector(basis, rng.standard_normal(basis.size))
    one = _vec(basis, [1.0])
    np.testing.assert_allclose(pce.pce_mul(x, one, tensor).coeffs, x.coeffs, atol=1e-12)


def test_mul_hermite_square_of_germ():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    tensor = pce.build_mul_tensor(basis)
    x = _vec(basis, [0.0, 1.0, 0.0])
    z = pce.pce_mul(x, x, tensor)
    np.testing.assert_allclose(z.coeffs, [1.0, 0.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("family", [pce.GAUSSIAN, pce.UNIFORM])
def test_mul_pointwise_exact_when_degree_fits(family):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(family, 2, 2))
    tensor = pce.build_mul_tensor(basis)
    rng = np.random.default_rng(11)
    # random degree-1 operands: product degree 2 <= d
    deg1 = basis.indices.sum(axis=1) <= 1
    for _ in range(5):
        xc = np.where(deg1, rng.standard_normal(basis.size), 0.0)
        yc = np.where(deg1, rng.standard_normal(basis.size), 0.0)
        x, y = pce.PceVector(basis, xc), pce.PceVector(basis, yc)
        z = pce.pce_mul(x, y, tensor)
        pts = np.stack(np.meshgrid(*basis.quad_nodes, indexing="ij"), axis=-1).reshape(-1, 2)
        lhs = pce.sample(z, pts)
        rhs = pce.sample(x, pts) * pce.sample(y, pts)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_mul_moments_against_monte_carlo():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    tensor = pce.build_mul_tensor(basis)
    x = _vec(basis, [1.0, 0.5, 0.0])
    y = _vec(basis, [2.0, -0.3, 0.0])
    z = pce.pce_mul(x, y, tensor)
    mean, var = pce.moments(z)
    rng = np.random.default_rng(17)
    xi = rng.standard_normal((200_000, 1))
    draws = pce.sample(x, xi) * pce.sample(y, xi)
    se_mean = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(mean - draws.mean()) <= 3 * se_mean
    # product of degree-1 series is exactly degree 2, so variances agree too
    m2 = (draws - draws.mean()) ** 2
    se_var = m2.std(ddof=1) / math.sqrt(draws.size)
    assert abs(var - draws.var(ddof=1)) <= 3 * se_var


# ---------------------------------------------------------------------------
# moments, chance bounds, sampling, lifting

def test_moments_simple():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    mean, var = pce.moments(_vec(basis, [2.0, 0.3]))
    assert mean == 2.0
    assert abs(var - 0.09) <= 1e-15


def test_moments_deterministic_vector():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 2, 2))
    mean, var = pce.moments(_vec(basis, [4.2]))
    assert (mean, var) == (4.2, 0.0)


def test_moments_mixed_orders():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    _, var = pce.moments(_vec(basis, [0.0, 1.0, 1.0]))
    assert abs(var - 3.0) <= 1e-14


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_moment_consistency_with_sampling(coeffs):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 2))
    x = pce.PceVector(basis, np.array(coeffs))
    mean, var = pce.moments(x)
    rng = np.random.default_rng(23)
    draws = pce.sample(x, rng.standard_normal((100_000, 1)))
    se = max(draws.std(ddof=1), 1e-12) / math.sqrt(draws.size)
    assert abs(mean - draws.mean()) <= 4 * se + 1e-9


def test_cc_interval_values():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    x = _vec(basis, [1.0, 0.2])
    cheb = pce.ChanceBoundPolicy(epsilon=0.10, rule="chebyshev")
    assert abs(cheb.factor - 3.0) <= 1e-14
    lo, hi = pce.cc_interval(x, cheb)
    assert abs(lo - (1.0 - 3.0 * 0.2)) <= 1e-12
    assert abs(hi - (1.0 + 3.0 * 0.2)) <= 1e-12

    gauss = pce.ChanceBoundPolicy(epsilon=0.10, rule="gaussian-quantile")
    assert abs(gauss.factor - 1.2815515655446004) <= 1e-9

    fixed = pce.ChanceBoundPolicy(epsilon=0.10, rule="fixed", fixed_value=2.5)
    assert fixed.factor == 2.5


def test_cc_interval_zero_variance_collapses():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 1, 2))
    x = _vec(basis, [7.0])
    lo, hi = pce.cc_interval(x, pce.ChanceBoundPolicy(epsilon=0.05))
    assert lo == hi == 7.0


def test_policy_validation():
    with pytest.raises(pce.PceError):
        pce.ChanceBoundPolicy(epsilon=0.0)
    with pytest.raises(pce.PceError):
        pce.ChanceBoundPolicy(epsilon=0.1, rule="bogus")
    with pytest.raises(pce.PceError):
        pce.ChanceBoundPolicy(epsilon=0.1, rule="fixed")


def test_sample_basics():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    assert pce.sample(_vec(basis, [3.5, 0.0]), np.array([1.7])) == 3.5
    assert abs(pce.sample(_vec(basis, [0.0, 1.0]), np.array([2.0])) - 2.0) <= 1e-15


def test_sample_matches_oracle_evaluation():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 2, 3))
    rng = np.random.default_rng(29)
    x = pce.PceVector(basis, rng.standard_normal(basis.size))
    pts = rng.uniform(-1, 1, (40, 2))
    vals = pce.sample(x, pts)
    for p, got in zip(pts, vals):
        ref = 0.0
        for s in range(basis.size):
            term = x.coeffs[s]
            for dim in range(2):
                term *= oracle_psi(pce.UNIFORM, int(basis.indices[s, dim]), p[dim])
            ref += term
        assert abs(got - ref) <= 1e-10


def test_lift_gaussian():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 2, 2))
    x = pce.lift_input(basis, mean=1.0, sigma=0.1, dim=0)
    mean, var = pce.moments(x)
    assert mean == 1.0
    assert abs(math.sqrt(var) - 0.1) <= 1e-12
    assert x.coeffs[basis.index_of((1, 0))] == 0.1


def test_lift_uniform_sqrt3():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.UNIFORM, 1, 2))
    x = pce.lift_input(basis, mean=1.0, sigma=0.1, dim=0)
    assert abs(x.coeffs[1] - 0.1 * math.sqrt(3.0)) <= 1e-12
    _, var = pce.moments(x)
    assert abs(math.sqrt(var) - 0.1) <= 1e-12
    # empirical check: uniform germ on [-1,1] has std 1/sqrt(3)
    rng = np.random.default_rng(31)
    draws = pce.sample(x, rng.uniform(-1, 1, (200_000, 1)))
    assert abs(draws.std(ddof=1) - 0.1) <= 3 * 0.1 / math.sqrt(draws.size) * 2 + 1e-3


def test_lift_zero_sigma_and_errors():
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 1, 1))
    x = pce.lift_input(basis, mean=2.0, sigma=0.0, dim=0)
    assert pce.moments(x) == (2.0, 0.0)
    with pytest.raises(pce.PceError):
        pce.lift_input(basis, mean=0.0, sigma=-0.1, dim=0)
    with pytest.raises(pce.PceError):
        pce.lift_input(basis, mean=0.0, sigma=0.1, dim=5)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3),
    st.sampled_from([pce.GAUSSIAN, pce.UNIFORM]),
)
def test_property_norm_positive_and_constant_first(m, d, family):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(family, m, d))
    assert basis.norms[0] == 1.0
    assert (basis.norms > 0).all()
    assert basis.indices[0].sum() == 0


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_property_mul_commutes(data):
    basis = pce.build_basis(pce.BasisSpec.homogeneous(pce.GAUSSIAN, 2, 2))
    tensor = pce.build_mul_tensor(basis)
    xc = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=basis.size, max_size=basis.size)))
    yc = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=basis.size, max_size=basis.size)))
    x, y = pce.PceVector(basis, xc), pce.PceVector(basis, yc)
    np.testing.assert_allclose(
        pce.pce_mul(x, y, tensor).coeffs, pce.pce_mul(y, x, tensor).coeffs, atol=1e-10
    )
