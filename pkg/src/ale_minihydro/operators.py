"""Partial-assembly operators with sum-factorized applies and a full-assembly oracle.

Each operator stores only per-quadrature-point data D and applies itself as
G^T B^T D B G through 1D tensor contractions.  `assemble()` builds the
equivalent global sparse matrix, which serves as the correctness oracle and
as the storage-cost baseline in the complexity benchmarks.

Element loops run through the kernel execution layer; elements are grouped
into fixed-size blocks (independent of the worker count), so the sequential
and threaded backends produce identical results.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fespace import FiniteElementSpace, GeometricFactors
from .kernel_exec import ExecPlace, GridConfig, launch, team_loop
from .tensor_basis import (
    add_macs,
    contract_dim,
    tensor_grad,
    tensor_grad_t,
    tensor_interp,
    tensor_interp_t,
)

__all__ = [
    "MassPA",
    "DiffusionPA",
    "ConvectionPA",
    "ForcePA",
    "cg_solve",
    "CGError",
    "dump_matrix",
]

ELEMENT_BLOCK = 32
ASSEMBLE_DOF_GUARD = 100_000

SEQ = ExecPlace.sequential()


def _for_element_blocks(place: ExecPlace, ne: int, body):
    """Run body(elem_slice) over fixed-size element blocks, one per team."""
    nblocks = (ne + ELEMENT_BLOCK - 1) // ELEMENT_BLOCK

    def kernel(ctx):
        def run(b):
            body(slice(b * ELEMENT_BLOCK, min((b + 1) * ELEMENT_BLOCK, ne)))

        team_loop(ctx, nblocks, run)

    launch(place, GridConfig(teams=nblocks), kernel)


def _full_basis(basis, d: int, grad_axis: int | None = None) -> np.ndarray:
    """Dense (nq, nloc) tensor-product basis, optionally differentiated on one axis."""
    out = np.ones((1, 1))
    for a in reversed(range(d)):  # x innermost
        out = np.kron(out, basis.G if a == grad_axis else basis.B)
    return out


class _PABase:
    def __init__(self, space: FiniteElementSpace, geom: GeometricFactors, place: ExecPlace = SEQ):
        self.space = space
        self.geom = geom
        self.place = place
        self.basis = space.basis(geom.quad)
        self.d = space.mesh.dim
        self.q1d = geom.quad.n
        self.ne = space.mesh.num_elements

    def _qshape(self):
        return (self.q1d,) * self.d

    def _check_assemble(self, rows: int):
        if rows > ASSEMBLE_DOF_GUARD:
            raise ValueError(f"full assembly guarded to <= {ASSEMBLE_DOF_GUARD} DOFs, got {rows}")


class MassPA(_PABase):
    """Mass operator; D holds w_q * coeff_q * detJ_q per point per element."""

    def __init__(self, space, geom, coeff=None, qdata=None, place: ExecPlace = SEQ):
        super().__init__(space, geom, place)
        if qdata is not None:
            self.D = np.array(qdata, dtype=float)
        else:
            self.D = geom.wdetj.copy()
            if coeff is not None:
                self.D *= coeff
        self.stored_values = self.D.size  # NE * Q1D^d exactly

    def _apply_scalar(self, x: np.ndarray) -> np.ndarray:
        sp_, d = self.space, self.d
        t = sp_.e_tensor(sp_.gather(x))
        out = np.empty_like(t)
        Dq = self.D.reshape(self._qshape() + (self.ne,))

        def body(sl):
            q = tensor_interp(self.basis, t[..., sl], d)
            q *= Dq[..., sl]
            add_macs(q.size)
            out[..., sl] = tensor_interp_t(self.basis, q, d)

        _for_element_blocks(self.place, self.ne, body)
        return sp_.scatter_add(sp_.e_flat(out))

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 1:
            return self._apply_scalar(x)
        return np.stack([self._apply_scalar(x[:, c]) for c in range(x.shape[1])], axis=1)

    def diagonal(self) -> np.ndarray:
        """Matrix-free diagonal via contraction with the squared basis factors."""
        B2 = self.basis.B * self.basis.B
        t = self.D.reshape(self._qshape() + (self.ne,))
        for a in range(self.d):
            t = contract_dim(B2.T, t, a)
        diag = self.space.scatter_add(self.space.e_flat(t))
        return diag

    def assemble(self) -> sp.csr_matrix:
        self._check_assemble(self.space.ndof)
        d, nloc, ne = self.d, self.space.nloc, self.ne
        Bnd = _full_basis(self.basis, d)
        rows, cols, vals = [], [], []
        for e in range(ne):
            elem = Bnd.T @ (self.D[:, e, None] * Bnd)
            gid = self.space.dofmap[:, e]
            rows.append(np.repeat(gid, nloc))
            cols.append(np.tile(gid, nloc))
            vals.append(elem.ravel())
        n = self.space.ndof
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )


class DiffusionPA(_PABase):
    """Stiffness operator; D holds w detJ J^{-1} nu J^{-T} per point."""

    def __init__(self, space, geom, nu=None, place: ExecPlace = SEQ):
        super().__init__(space, geom, place)
        scal = geom.wdetj if nu is None else geom.wdetj * nu
        self.D = np.einsum("abqe,cbqe,qe->acqe", geom.jinv, geom.jinv, scal)
        self.stored_values = self.D.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        sp_, d = self.space, self.d
        t = sp_.e_tensor(sp_.gather(x))
        out = np.empty_like(t)
        Dq = self.D.reshape((d, d) + self._qshape() + (self.ne,))

        def body(sl):
            grads = tensor_grad(self.basis, t[..., sl], d)
            comps = []
            for a in range(d):
                s = Dq[a, 0][..., sl] * grads[0]
                for b in range(1, d):
                    s += Dq[a, b][..., sl] * grads[b]
                add_macs(d * s.size)
                comps.append(s)
            out[..., sl] = tensor_grad_t(self.basis, comps, d)

        _for_element_blocks(self.place, self.ne, body)
        return sp_.scatter_add(sp_.e_flat(out))

    def assemble(self) -> sp.csr_matrix:
        self._check_assemble(self.space.ndof)
        d, nloc, ne = self.d, self.space.nloc, self.ne
        Gnd = [_full_basis(self.basis, d, grad_axis=a) for a in range(d)]
        rows, cols, vals = [], [], []
        for e in range(ne):
            elem = np.zeros((nloc, nloc))
            for a in range(d):
                for b in range(d):
                    elem += Gnd[a].T @ (self.D[a, b, :, e, None] * Gnd[b])
            gid = self.space.dofmap[:, e]
            rows.append(np.repeat(gid, nloc))
            cols.append(np.tile(gid, nloc))
            vals.append(elem.ravel())
        n = self.space.ndof
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )


class ConvectionPA(_PABase):
    """(K w)_i = integral phi_i (u . grad w); D holds w detJ J^{-1} u per point."""

    def __init__(self, space, geom, u_points: np.ndarray, place: ExecPlace = SEQ):
        # u_points: velocity at quadrature points, shape (d, nq, NE)
        super().__init__(space, geom, place)
        self.D = np.einsum("lbqe,bqe,qe->lqe", geom.jinv, u_points, geom.wdetj)
        self.stored_values = self.D.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        sp_, d = self.space, self.d
        t = sp_.e_tensor(sp_.gather(x))
        out = np.empty_like(t)
        Dq = self.D.reshape((d,) + self._qshape() + (self.ne,))

        def body(sl):
            grads = tensor_grad(self.basis, t[..., sl], d)
            s = Dq[0][..., sl] * grads[0]
            for l in range(1, d):
                s += Dq[l][..., sl] * grads[l]
            add_macs(d * s.size)
            out[..., sl] = tensor_interp_t(self.basis, s, d)

        _for_element_blocks(self.place, self.ne, body)
        return sp_.scatter_add(sp_.e_flat(out))

    def assemble(self) -> sp.csr_matrix:
        self._check_assemble(self.space.ndof)
        d, nloc, ne = self.d, self.space.nloc, self.ne
        Bnd = _full_basis(self.basis, d)
        Gnd = [_full_basis(self.basis, d, grad_axis=a) for a in range(d)]
        rows, cols, vals = [], [], []
        for e in range(ne):
            conv = np.zeros_like(Gnd[0])
            for l in range(d):
                conv += self.D[l, :, e, None] * Gnd[l]
            elem = Bnd.T @ conv
            gid = self.space.dofmap[:, e]
            rows.append(np.repeat(gid, nloc))
            cols.append(np.tile(gid, nloc))
            vals.append(elem.ravel())
        n = self.space.ndof
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )


class ForcePA:
    """Rectangular force operator pairing kinematic (H1 vector) and
    thermodynamic (L2 scalar) spaces.

    apply(e): (F e)_{a,i} = sum_q P[a,l,q] dphi_i/dxi_l(q) psi(q) with
    P = w detJ sigma J^{-T}; apply_transpose is its exact adjoint.
    """

    def __init__(self, kin_space, thermo_space, geom, stress_points, place: ExecPlace = SEQ):
        # stress_points: sigma at quadrature points, shape (d, d, nq, NE)
        self.kin = kin_space
        self.thermo = thermo_space
        self.geom = geom
        self.place = place
        self.d = kin_space.mesh.dim
        self.ne = kin_space.mesh.num_elements
        self.q1d = geom.quad.n
        self.kin_basis = kin_space.basis(geom.quad)
        self.thermo_basis = thermo_space.basis(geom.quad)
        self.D = np.einsum("abqe,lbqe,qe->alqe", stress_points, geom.jinv, geom.wdetj)
        self.stored_values = self.D.size

    def _qshape(self):
        return (self.q1d,) * self.d

    def apply(self, e_field: np.ndarray) -> np.ndarray:
        """L2 scalar -> H1 vector (the momentum right-hand side is -apply(ones))."""
        d = self.d
        te = self.thermo.e_tensor(self.thermo.gather(e_field))
        Dq = self.D.reshape((d, d) + self._qshape() + (self.ne,))
        out_t = np.empty((d,) + (self.kin.order + 1,) * d + (self.ne,))

        def body(sl):
            q = tensor_interp(self.thermo_basis, te[..., sl], d)
            for a in range(d):
                comps = [Dq[a, l][..., sl] * q for l in range(d)]
                add_macs(d * q.size)
                out_t[a][..., sl] = tensor_grad_t(self.kin_basis, comps, d)

        _for_element_blocks(self.place, self.ne, body)
        cols = [self.kin.scatter_add(self.kin.e_flat(out_t[a])) for a in range(d)]
        return np.stack(cols, axis=1)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        """H1 vector -> L2 scalar: (F^T v)_j = sum_q (sigma : grad v) psi_j w detJ."""
        d = self.d
        tv = self.kin.e_tensor(self.kin.gather(v), extra=(d,))
        Dq = self.D.reshape((d, d) + self._qshape() + (self.ne,))
        out = np.empty((self.thermo.order + 1,) * d + (self.ne,))

        def body(sl):
            s = None
            for a in range(d):
                grads = tensor_grad(self.kin_basis, tv[(Ellipsis, a, sl)], d)
                for l in range(d):
                    term = Dq[a, l][..., sl] * grads[l]
                    s = term if s is None else s + term
            add_macs(d * d * s.size)
            out[..., sl] = tensor_interp_t(self.thermo_basis, s, d)

        _for_element_blocks(self.place, self.ne, body)
        return self.thermo.scatter_add(self.thermo.e_flat(out))

    def assemble(self) -> sp.csr_matrix:
        """Oracle: rows are H1 vector DOFs (node-major, idx = i*d + a), cols L2."""
        if self.kin.ndof * self.d > ASSEMBLE_DOF_GUARD:
            raise ValueError("full assembly size guard exceeded")
        d = self.d
        Gnd = [_full_basis(self.kin_basis, d, grad_axis=l) for l in range(d)]
        Bth = _full_basis(self.thermo_basis, d)
        rows, cols, vals = [], [], []
        nl_k, nl_t = self.kin.nloc, self.thermo.nloc
        for e in range(self.ne):
            gk = self.kin.dofmap[:, e]
            gt = self.thermo.dofmap[:, e]
            for a in range(d):
                blk = np.zeros((nl_k, nl_t))
                for l in range(d):
                    blk += Gnd[l].T @ (self.D[a, l, :, e, None] * Bth)
                rows.append(np.repeat(gk * d + a, nl_t))
                cols.append(np.tile(gt, nl_k))
                vals.append(blk.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.kin.ndof * d, self.thermo.ndof),
        )


class CGError(RuntimeError):
    def __init__(self, message: str, residuals):
        super().__init__(message)
        self.residuals = residuals


def cg_solve(apply_op, b, precond_diag=None, rel_tol: float = 1e-8, max_iter: int = 1000):
    """Jacobi-preconditioned conjugate gradients for SPD operators.

    Stops when the preconditioned residual norm sqrt(r.z) drops below
    rel_tol times its initial value.  Returns (x, iterations); raises
    CGError with the residual history if max_iter is exhausted.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    if not np.any(b):
        return x, 0
    inv_diag = None if precond_diag is None else 1.0 / precond_diag
    r = b.copy()
    z = r if inv_diag is None else inv_diag * r
    p = z.copy()
    rz = float(np.vdot(r, z))
    norm0 = np.sqrt(rz)
    residuals = [norm0]
    for it in range(1, max_iter + 1):
        Ap = apply_op(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0.0:
            raise CGError(f"CG breakdown: p^T A p = {pAp:.3e} <= 0", residuals)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = r if inv_diag is None else inv_diag * r
        rz_new = float(np.vdot(r, z))
        residuals.append(np.sqrt(max(rz_new, 0.0)))
        if residuals[-1] <= rel_tol * norm0:
            return x, it
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CGError(f"CG did not converge in {max_iter} iterations", residuals)


def dump_matrix(mat: sp.spmatrix, path):
    """Write an assembled matrix in coordinate text format (row col value)."""
    coo = mat.tocoo()
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v!r}\n")
