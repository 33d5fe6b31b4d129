import numpy as np
import pytest

from ale_minihydro.tensor_basis import (
    Basis1D,
    contract_dim,
    count_macs,
    eval_basis,
    gauss_legendre,
    gauss_lobatto_nodes,
    tensor_grad,
    tensor_grad_t,
    tensor_interp,
    tensor_interp_t,
)


def test_single_point_rule():
    rule = gauss_legendre(1)
    assert rule.points == pytest.approx([0.0])
    assert rule.weights == pytest.approx([2.0])


def test_two_point_rule_exactness():
    rule = gauss_legendre(2)
    assert np.allclose(np.sort(rule.points), [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
    assert rule.weights == pytest.approx([1.0, 1.0])
    # exact for x^2 and x^3
    assert np.dot(rule.weights, rule.points**2) == pytest.approx(2.0 / 3.0, abs=1e-14)
    assert np.dot(rule.weights, rule.points**3) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("n", range(1, 9))
def test_weight_sum_and_degree_exactness(n):
    rule = gauss_legendre(n)
    assert abs(rule.weights.sum() - 2.0) < 1e-14
    for k in range(2 * n):  # degree k <= 2n-1
        exact = 0.0 if k % 2 else 2.0 / (k + 1)
        assert np.dot(rule.weights, rule.points**k) == pytest.approx(exact, abs=1e-13)


def test_five_point_integrates_x8():
    rule = gauss_legendre(5)
    assert np.dot(rule.weights, rule.points**8) == pytest.approx(2.0 / 9.0, abs=1e-13)


def test_lobatto_nodes_low_orders():
    assert gauss_lobatto_nodes(1) == pytest.approx([-1.0, 1.0])
    assert gauss_lobatto_nodes(2) == pytest.approx([-1.0, 0.0, 1.0], abs=1e-15)
    s = 1 / np.sqrt(5.0)
    assert gauss_lobatto_nodes(3) == pytest.approx([-1.0, -s, s, 1.0], abs=1e-15)


def test_lobatto_nodes_sorted_with_endpoints():
    for p in range(1, 8):
        nodes = gauss_lobatto_nodes(p)
        assert nodes[0] == -1.0 and nodes[-1] == 1.0
        assert np.all(np.diff(nodes) > 0)


def test_linear_basis_at_midpoint():
    b = eval_basis(np.array([-1.0, 1.0]), gauss_legendre(1))
    assert b.B[0] == pytest.approx([0.5, 0.5])


@pytest.mark.parametrize("p", range(1, 6))
def test_partition_of_unity_and_gradient_rows(p):
    b = eval_basis(gauss_lobatto_nodes(p), gauss_legendre(p + 2))
    assert np.allclose(b.B.sum(axis=1), 1.0, atol=1e-13)
    assert np.allclose(b.G.sum(axis=1), 0.0, atol=1e-12)


def test_quadratic_middle_basis_derivative_at_origin():
    # rule with an odd point count contains the origin, where symmetry forces
    # the middle basis function's derivative to vanish
    b = eval_basis(gauss_lobatto_nodes(2), gauss_legendre(3))
    mid = np.argmin(np.abs(b.B[:, 1] - 1.0))
    assert abs(b.G[mid, 1]) < 1e-14


def test_basis_interpolates_nodes():
    p = 3
    nodes = gauss_lobatto_nodes(p)
    b = eval_basis(nodes, gauss_legendre(6))
    # interpolation of a cubic is exact at the quadrature points
    coeffs = nodes**3 - 0.5 * nodes
    vals = b.B @ coeffs
    pts = gauss_legendre(6).points
    assert np.allclose(vals, pts**3 - 0.5 * pts, atol=1e-13)
    ders = b.G @ coeffs
    assert np.allclose(ders, 3 * pts**2 - 0.5, atol=1e-12)


def test_contract_identity():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(4, 4, 6))
    out = contract_dim(np.eye(4), t, 0)
    assert np.array_equal(out, t)


def test_contract_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        contract_dim(np.ones((3, 5)), np.ones((4, 4, 2)), 0)


def _kron_oracle(mats):
    out = np.ones((1, 1))
    for m in mats:
        out = np.kron(out, m)
    return out


@pytest.mark.parametrize("d", [2, 3])
def test_sum_factorization_matches_kronecker(d):
    rng = np.random.default_rng(7)
    for p in range(1, 5):
        n, q = p + 1, p + 2
        B = rng.normal(size=(q, n))
        basis = Basis1D(order=p, nodes=np.linspace(-1, 1, n), B=B, G=np.zeros((q, n)))
        ne = 3
        t = rng.normal(size=(n,) * d + (ne,))
        fact = tensor_interp(basis, t, d)
        dense = _kron_oracle([B] * d)
        for e in range(ne):
            ref = dense @ t[..., e].reshape(-1)
            got = fact[..., e].reshape(-1)
            assert np.allclose(got, ref, rtol=1e-12, atol=1e-13)


def test_constant_field_preserved_by_partition_of_unity():
    b = eval_basis(gauss_lobatto_nodes(3), gauss_legendre(5))
    t = np.ones((4, 4, 2))
    q = tensor_interp(b, t, 2)
    assert np.allclose(q, 1.0, atol=1e-14)


def test_grad_adjoint_identity():
    rng = np.random.default_rng(11)
    b = eval_basis(gauss_lobatto_nodes(2), gauss_legendre(4))
    d, ne = 2, 3
    u = rng.normal(size=(3, 3, ne))
    w = [rng.normal(size=(4, 4, ne)) for _ in range(d)]
    lhs = sum(np.vdot(tensor_grad(b, u, d)[a], w[a]) for a in range(d))
    rhs = np.vdot(u, tensor_grad_t(b, w, d))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_mac_counting_closed_form():
    p, d, ne = 2, 2, 5
    n, q = p + 1, p + 2
    b = eval_basis(gauss_lobatto_nodes(p), gauss_legendre(q))
    t = np.random.default_rng(0).normal(size=(n, n, ne))
    with count_macs() as c:
        qv = tensor_interp(b, t, d)
        tensor_interp_t(b, qv, d)
    # forward: q*n*(n*ne) + q*n*(q*ne); backward mirrors it
    expected = (q * n * n * ne + q * q * n * ne) * 2
    assert c.macs == expected
