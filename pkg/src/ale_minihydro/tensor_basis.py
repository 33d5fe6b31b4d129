"""1D quadrature rules, nodal bases, and sum-factorized tensor contractions.

Multi-dimensional bases on quads/hexes are tensor products of the 1D objects
defined here, and every operator apply in the package reduces to sequences of
1D contractions over element tensors.

Element tensor layout
---------------------
An element tensor stores per-element nodal or quadrature data with shape
``(n[d-1], ..., n[1], n[0], NE)``: one axis per reference direction plus the
element index last.  The flat local index is x-fastest,
``i = i0 + n0*i1 + n0*n1*i2``, so reference axis ``a`` lives on tensor axis
``d - 1 - a``.  Arrays are C-contiguous float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureRule1D",
    "Basis1D",
    "gauss_legendre",
    "gauss_lobatto_nodes",
    "eval_basis",
    "lagrange_eval",
    "contract_dim",
    "tensor_interp",
    "tensor_interp_t",
    "tensor_grad",
    "tensor_grad_t",
    "count_macs",
    "add_macs",
]


@dataclass(frozen=True)
class QuadratureRule1D:
    """Gauss quadrature rule on [-1, 1]."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Basis1D:
    """Nodal Lagrange basis sampled at quadrature points.

    B[q, i] = phi_i(x_q) and G[q, i] = phi_i'(x_q), both shaped
    (Q1D, D1D) with D1D = order + 1.
    """

    order: int
    nodes: np.ndarray
    B: np.ndarray
    G: np.ndarray

    @property
    def d1d(self) -> int:
        return self.order + 1

    @property
    def q1d(self) -> int:
        return self.B.shape[0]


def _legendre_and_deriv(n: int, x: np.ndarray):
    """P_n(x) and P_n'(x) by the three-term recurrence."""
    p0 = np.ones_like(x)
    if n == 0:
        return p0, np.zeros_like(x)
    p1 = x.copy()
    for k in range(1, n):
        p0, p1 = p1, ((2 * k + 1) * x * p1 - k * p0) / (k + 1)
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


def gauss_legendre(n: int) -> QuadratureRule1D:
    """Gauss-Legendre rule with n points, exact for degree <= 2n-1.

    Roots found by Newton iteration from Chebyshev initial guesses
    (tolerance 1e-15, at most 100 iterations).
    """
    if n < 1:
        raise ValueError("need at least one quadrature point")
    if n == 1:
        return QuadratureRule1D(np.zeros(1), np.full(1, 2.0))
    k = np.arange(n)
    x = np.cos(np.pi * (k + 0.75) / (n + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_deriv(n, x)
        dx = p / dp
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    x = 0.5 * (x - x[::-1])  # enforce symmetry about the origin
    x = np.sort(x)
    _, dp = _legendre_and_deriv(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    return QuadratureRule1D(x, w)


def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """The p+1 Gauss-Lobatto points on [-1, 1]: +-1 and the roots of P_p'."""
    if p < 1:
        raise ValueError("Lobatto nodes need order >= 1")
    if p == 1:
        return np.array([-1.0, 1.0])
    k = np.arange(1, p)
    x = np.cos(np.pi * k / p)  # Chebyshev-Lobatto initial guesses
    for _ in range(100):
        pv, dp = _legendre_and_deriv(p, x)
        d2p = (2.0 * x * dp - p * (p + 1) * pv) / (1.0 - x * x)
        dx = dp / d2p
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    x = 0.5 * (x - x[::-1])
    nodes = np.empty(p + 1)
    nodes[0], nodes[-1] = -1.0, 1.0
    nodes[1:-1] = np.sort(x)
    return nodes


def lagrange_eval(nodes, x):
    """Values and derivatives of the Lagrange basis on `nodes` at points `x`.

    Returns (vals, ders), each shaped (len(x), len(nodes)).  Uses direct
    product formulas, which stay finite when x coincides with a node.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    vals = np.ones((len(x), n))
    ders = np.zeros((len(x), n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for j in others:
            vals[:, i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
        for m in others:
            term = np.full(len(x), 1.0 / (nodes[i] - nodes[m]))
            for j in others:
                if j != m:
                    term *= (x - nodes[j]) / (nodes[i] - nodes[j])
            ders[:, i] += term
    return vals, ders


def eval_basis(nodes, quad) -> Basis1D:
    """Sample the nodal Lagrange basis on `nodes` at the points of `quad`.

    Rows of B are renormalized to sum exactly to 1 and rows of G shifted to
    sum exactly to 0, so partition-of-unity identities hold to rounding in
    all downstream contractions.
    """
    nodes = np.asarray(nodes, dtype=float)
    if len(np.unique(nodes)) != len(nodes):
        raise ValueError("basis nodes must be distinct")
    pts = quad.points if hasattr(quad, "points") else np.asarray(quad, dtype=float)
    B, G = lagrange_eval(nodes, pts)
    B /= B.sum(axis=1, keepdims=True)
    G -= G.mean(axis=1, keepdims=True)
    return Basis1D(order=len(nodes) - 1, nodes=nodes, B=B, G=G)


# ---------------------------------------------------------------------------
# multiply-add accounting (enabled only inside count_macs blocks)

class MacCounter:
    def __init__(self):
        self.macs = 0


_local = threading.local()


@contextmanager
def count_macs():
    """Count multiply-adds of the contractions executed in this block."""
    counter = MacCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def add_macs(n: int):
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.macs += int(n)


# ---------------------------------------------------------------------------
# contractions

def contract_dim(mat, t, axis: int):
    """Apply `mat` along one axis of an element tensor.

    `t` has shape (..., NE) and `mat` is (m_out, m_in) with m_in equal to
    t.shape[axis].  The output replaces that extent by m_out and leaves all
    other axes unchanged.
    """
    mat = np.asarray(mat)
    t = np.asarray(t)
    if axis < 0 or axis >= t.ndim - 1:
        raise ValueError(f"axis {axis} out of range for tensor with {t.ndim - 1} data axes")
    if mat.shape[1] != t.shape[axis]:
        raise ValueError(
            f"contraction mismatch: matrix has {mat.shape[1]} columns, "
            f"tensor axis {axis} has extent {t.shape[axis]}"
        )
    out = np.tensordot(mat, t, axes=(1, axis))
    out = np.moveaxis(out, 0, axis)
    add_macs(mat.shape[0] * mat.shape[1] * (t.size // t.shape[axis]))
    return np.ascontiguousarray(out)


def _axis_of(d: int, ref_axis: int) -> int:
    # reference axis a sits on tensor axis d-1-a (x is fastest)
    return d - 1 - ref_axis


def tensor_interp(basis: Basis1D, t, d: int):
    """Interpolate a nodal element tensor to quadrature points (B on every axis)."""
    for a in range(d):
        t = contract_dim(basis.B, t, a)
    return t


def tensor_interp_t(basis: Basis1D, t, d: int):
    """Transpose of tensor_interp: quadrature tensor back to nodal coefficients."""
    for a in range(d):
        t = contract_dim(basis.B.T, t, a)
    return t


def tensor_grad(basis: Basis1D, t, d: int):
    """Reference-space gradients at quadrature points.

    Returns a list over reference axes a = 0..d-1 of tensors holding
    d(t)/dxi_a, each shaped like the interpolated tensor.
    """
    out = []
    for a in range(d):
        g = t
        for b in range(d):
            mat = basis.G if b == a else basis.B
            g = contract_dim(mat, g, _axis_of(d, b))
        out.append(g)
    return out


def tensor_grad_t(basis: Basis1D, comps, d: int):
    """Transpose of tensor_grad: accumulate sum_a G_a^T comps[a] into nodal space."""
    out = None
    for a in range(d):
        g = comps[a]
        for b in range(d):
            mat = basis.G.T if b == a else basis.B.T
            g = contract_dim(mat, g, _axis_of(d, b))
        out = g if out is None else out + g
    return out
