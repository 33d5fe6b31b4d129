"""Single-material Lagrangian hydrodynamics phase.

Semi-discrete system on a moving mesh: a global CG mass solve for momentum,
element-local L2 mass inversion for specific internal energy, a rectangular
force operator coupling the two, ideal-gas closure and a two-coefficient
tensor artificial viscosity.  Mass conservation is strong: the per-point
initial mass data rho0*detJ0 is frozen for the whole phase and density is
recovered as qdata0/detJ, so total mass is a constant of the motion by
construction.

Time integration is an explicit midpoint (RK2) step with CFL control;
substeps that invert an element reject the step and retry at half dt.
"""

from __future__ import annotations

from contextlib import ExitStack, nullcontext
from dataclasses import dataclass

import numpy as np

from .fespace import FiniteElementSpace, HighOrderMesh, compute_geometric_factors
from .kernel_exec import ExecPlace
from .operators import ForcePA, MassPA, cg_solve
from .tensor_basis import tensor_grad, tensor_interp

__all__ = [
    "MaterialModel",
    "ViscosityModel",
    "StepControls",
    "HydroState",
    "LagrangeHydro",
    "advance_positions",
    "TimestepUnderflow",
]

SEQ = ExecPlace.sequential()


@dataclass(frozen=True)
class MaterialModel:
    """Ideal gas: p = (gamma - 1) rho e."""

    gamma: float = 5.0 / 3.0

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError("adiabatic index must exceed 1")


@dataclass(frozen=True)
class ViscosityModel:
    """Two-coefficient tensor artificial viscosity.

    sigma_visc = mu * sym(grad v) with mu = rho h (q1 c_s + q2 h |div v|),
    active only under compression (div v < 0) and built from grad v alone,
    so it is exactly Galilean invariant and vanishes when q1 = q2 = 0.
    """

    q1: float = 0.5
    q2: float = 2.0

    def __post_init__(self):
        if self.q1 < 0 or self.q2 < 0:
            raise ValueError("viscosity coefficients must be nonnegative")


@dataclass(frozen=True)
class StepControls:
    cfl: float = 0.5
    dt_min: float = 1e-12
    dt_max: float = 1.0
    t_final: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError("cfl must lie in (0, 1]")
        if not 0.0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")


class TimestepUnderflow(RuntimeError):
    pass


@dataclass
class HydroState:
    """Positions x and velocity v (H1 vector fields), specific internal
    energy e (L2 field), and frozen initial mass data rho0*detJ0 per point."""

    x: np.ndarray
    v: np.ndarray
    e: np.ndarray
    qdata0: np.ndarray
    t: float = 0.0

    def copy(self) -> "HydroState":
        return HydroState(self.x.copy(), self.v.copy(), self.e.copy(), self.qdata0, self.t)


@dataclass
class _Rates:
    dx: np.ndarray
    dv: np.ndarray
    de: np.ndarray
    min_h_over_speed: float
    clamped: int


def advance_positions(x, dt, velocity_fn, t: float = 0.0):
    """One midpoint step of dx/dt = w(x, t) for prescribed mesh motion."""
    k1 = velocity_fn(x, t)
    xm = x + (0.5 * dt) * k1
    k2 = velocity_fn(xm, t + 0.5 * dt)
    return x + dt * k2


def box_velocity_bc(mesh: HighOrderMesh, extents=None, tol: float = 1e-10) -> np.ndarray:
    """Sealed-box mask: the normal velocity component is held at zero on
    every axis-aligned wall.  Returns a boolean (num_nodes, d) array."""
    d = mesh.dim
    lo = mesh.coords.min(axis=0)
    hi = mesh.coords.max(axis=0) if extents is None else np.asarray(extents, dtype=float)
    mask = np.zeros((mesh.num_nodes, d), dtype=bool)
    for a in range(d):
        scale = max(hi[a] - lo[a], 1.0)
        on_wall = (np.abs(mesh.coords[:, a] - lo[a]) < tol * scale) | (
            np.abs(mesh.coords[:, a] - hi[a]) < tol * scale
        )
        mask[on_wall, a] = True
    return mask


class LagrangeHydro:
    """Driver for one Lagrange phase on a fixed topology.

    The thermodynamic (L2) space defaults to one order below the kinematic
    space.  `bc_mask` marks velocity components held at zero (sealed-box
    walls); masked components never accelerate.
    """

    def __init__(
        self,
        mesh: HighOrderMesh,
        quad,
        material: MaterialModel,
        viscosity: ViscosityModel = ViscosityModel(),
        thermo_order: int | None = None,
        bc_mask: np.ndarray | None = None,
        place: ExecPlace = SEQ,
        pool=None,
        momentum_rel_tol: float = 1e-8,
    ):
        self.mesh = mesh
        self.quad = quad
        self.material = material
        self.viscosity = viscosity
        self.place = place
        self.pool = pool
        self.momentum_rel_tol = momentum_rel_tol
        d = mesh.dim
        self.kin = FiniteElementSpace(mesh, "H1", vdim=d)
        t_order = max(mesh.order - 1, 0) if thermo_order is None else thermo_order
        self.thermo = FiniteElementSpace(mesh, "L2", order=t_order)
        self.bc_mask = (
            np.zeros((mesh.num_nodes, d), dtype=bool) if bc_mask is None else bc_mask
        )
        self.ones_thermo = np.ones(self.thermo.ndof)
        self.clamp_warnings = 0
        self.mass_pa: MassPA | None = None
        self._m_e_inv: np.ndarray | None = None
        self._mass_diag: np.ndarray | None = None

    # -- phase setup ----------------------------------------------------------

    def quad_points_physical(self, x: np.ndarray) -> np.ndarray:
        """Physical coordinates of all quadrature points, shape (d, nq, NE)."""
        d = self.mesh.dim
        basis = self.kin.basis(self.quad)
        xe = self.kin.e_tensor(x[self.mesh.node_dofmap], extra=(d,))
        nq = self.quad.n**d
        out = np.empty((d, nq, self.mesh.num_elements))
        for a in range(d):
            out[a] = tensor_interp(basis, np.ascontiguousarray(xe[..., a, :]), d).reshape(
                nq, self.mesh.num_elements
            )
        return out

    def initial_state(self, rho0_fn, v0_fn, e0_fn) -> HydroState:
        """Sample the initial condition and freeze the per-point mass data."""
        x = self.mesh.coords.copy()
        geom0 = compute_geometric_factors(self.mesh, self.quad, x=x)
        xq = self.quad_points_physical(x)
        rho0 = rho0_fn(xq)
        qdata0 = rho0 * geom0.detj
        v = v0_fn(x)
        v = np.where(self.bc_mask, 0.0, v)
        # interpolate e0 at the thermodynamic nodes of each element
        e = self._sample_l2(e0_fn, x)
        state = HydroState(x=x, v=v, e=e, qdata0=qdata0, t=0.0)
        self.begin_phase(state)
        return state

    def _sample_l2(self, fn, x) -> np.ndarray:
        d = self.mesh.dim
        nodes = self.thermo.nodes1d
        basis_at_nodes = self.kin.basis(_PointSet(nodes))
        xe = self.kin.e_tensor(x[self.mesh.node_dofmap], extra=(d,))
        cols = []
        for a in range(d):
            cols.append(
                tensor_interp(basis_at_nodes, np.ascontiguousarray(xe[..., a, :]), d).reshape(
                    self.thermo.nloc, self.mesh.num_elements
                )
            )
        pts = np.stack(cols, axis=0)  # (d, nloc_t, NE)
        vals = fn(pts)
        return self.thermo.scatter_add(vals)

    def begin_phase(self, state: HydroState):
        """(Re)build the constant-in-time mass operators from qdata0."""
        geom0 = compute_geometric_factors(self.mesh, self.quad, x=state.x)
        wq = geom0.wdetj / geom0.detj
        self.mass_pa = MassPA(self.kin, geom0, qdata=wq * state.qdata0, place=self.place)
        self._mass_diag = self.mass_pa.diagonal()
        # element-block thermodynamic mass, inverted once per phase
        from .operators import _full_basis

        Bth = _full_basis(self.thermo.basis(self.quad), self.mesh.dim)
        D = wq * state.qdata0  # (nq, NE)
        blocks = np.einsum("qi,qe,qj->eij", Bth, D, Bth)
        self._m_e_inv = np.linalg.inv(blocks)

    # -- point data -----------------------------------------------------------

    def density_at_points(self, state: HydroState, geom=None) -> np.ndarray:
        """rho = qdata0 / detJ at every quadrature point of every element."""
        if geom is None:
            geom = compute_geometric_factors(self.mesh, self.quad, x=state.x)
        return state.qdata0 / geom.detj

    def total_mass(self, state: HydroState) -> float:
        """Independent of the current positions: sum of w_q * qdata0."""
        geom0_w = self._weights_tensor()
        return float(np.sum(geom0_w[:, None] * state.qdata0))

    def _weights_tensor(self) -> np.ndarray:
        w = self.quad.weights
        wq = w
        for _ in range(self.mesh.dim - 1):
            wq = np.multiply.outer(wq, w)
        return wq.reshape(-1)

    def stress_qdata(self, state: HydroState, geom):
        """Total stress sigma = -p I + sigma_visc and max wave speed per point.

        Negative internal energy values are clamped to zero for the equation
        of state, with a counted warning.
        """
        d = self.mesh.dim
        ne = self.mesh.num_elements
        nq = self.quad.n**d
        gamma = self.material.gamma
        stack = ExitStack() if self.pool is not None else nullcontext()
        with stack:
            def tmp(shape):
                if self.pool is None:
                    return np.empty(shape)
                return stack.enter_context(self.pool.borrow(shape))

            rho = state.qdata0 / geom.detj
            e_pts = tensor_interp(
                self.thermo.basis(self.quad), self.thermo.e_tensor(self.thermo.gather(state.e)), d
            ).reshape(nq, ne)
            neg = e_pts < 0.0
            if np.any(neg):
                self.clamp_warnings += int(neg.sum())
                e_pts = np.where(neg, 0.0, e_pts)
            p = (gamma - 1.0) * rho * e_pts
            cs = np.sqrt(gamma * (gamma - 1.0) * e_pts)

            # physical velocity gradient dv_a/dx_b at points
            gradv = tmp((d, d, nq, ne))
            vt = self.kin.e_tensor(self.kin.gather(state.v), extra=(d,))
            kin_basis = self.kin.basis(self.quad)
            for a in range(d):
                ref = tensor_grad(kin_basis, np.ascontiguousarray(vt[..., a, :]), d)
                refs = np.stack([r.reshape(nq, ne) for r in ref], axis=0)
                gradv[a] = np.einsum("lqe,lbqe->bqe", refs, geom.jinv)

            sigma = tmp((d, d, nq, ne))
            sigma[:] = 0.0
            for a in range(d):
                sigma[a, a] = -p

            q1, q2 = self.viscosity.q1, self.viscosity.q2
            div = np.trace(gradv, axis1=0, axis2=1)
            if q1 > 0.0 or q2 > 0.0:
                h = geom.detj ** (1.0 / d)
                mu = rho * h * (q1 * cs + q2 * h * np.abs(div))
                mu = np.where(div < 0.0, mu, 0.0)  # compression switch
                sym = 0.5 * (gradv + np.swapaxes(gradv, 0, 1))
                sigma += mu * sym

            # CFL data: h / (c_s + |v|) per point
            v_pts = tmp((d, nq, ne))
            for a in range(d):
                v_pts[a] = tensor_interp(
                    kin_basis, np.ascontiguousarray(vt[..., a, :]), d
                ).reshape(nq, ne)
            speed = cs + np.sqrt(np.sum(v_pts**2, axis=0))
            h_all = geom.detj ** (1.0 / d)
            with np.errstate(divide="ignore"):
                ratio = np.where(speed > 0.0, h_all / np.maximum(speed, 1e-300), np.inf)
            return np.array(sigma), float(ratio.min())

    # -- semi-discrete right-hand side ----------------------------------------

    def _solve_momentum(self, rhs_v: np.ndarray, rel_tol=None) -> np.ndarray:
        rhs = np.where(self.bc_mask, 0.0, rhs_v)
        mask = self.bc_mask

        def apply_op(w):
            w2 = w.reshape(rhs.shape)
            out = self.mass_pa.apply(np.where(mask, 0.0, w2))
            out = np.where(mask, w2, out)  # identity on constrained components
            return out.ravel()

        diag = np.where(mask, 1.0, self._mass_diag[:, None] * np.ones_like(rhs))
        x, _ = cg_solve(
            apply_op,
            rhs.ravel(),
            precond_diag=diag.ravel(),
            rel_tol=self.momentum_rel_tol if rel_tol is None else rel_tol,
            max_iter=2000,
        )
        return x.reshape(rhs.shape)

    def solve_energy(self, rhs_e: np.ndarray) -> np.ndarray:
        """Apply the inverse thermodynamic mass (block diagonal, per element)."""
        ne = self.mesh.num_elements
        r = rhs_e.reshape(ne, self.thermo.nloc)
        out = np.einsum("eij,ej->ei", self._m_e_inv, r)
        return out.reshape(-1)

    def rates(self, state: HydroState, momentum_rel_tol=None) -> _Rates:
        geom = compute_geometric_factors(self.mesh, self.quad, x=state.x)
        clamped0 = self.clamp_warnings
        sigma, min_ratio = self.stress_qdata(state, geom)
        force = ForcePA(self.kin, self.thermo, geom, sigma, place=self.place)
        rhs_v = -force.apply(self.ones_thermo)
        dv = self._solve_momentum(rhs_v, momentum_rel_tol)
        de = self.solve_energy(force.apply_transpose(state.v))
        return _Rates(
            dx=state.v.copy(),
            dv=dv,
            de=de,
            min_h_over_speed=min_ratio,
            clamped=self.clamp_warnings - clamped0,
        )

    # -- stepping --------------------------------------------------------------

    def timestep_estimate(self, state: HydroState, controls: StepControls) -> float:
        geom = compute_geometric_factors(self.mesh, self.quad, x=state.x)
        _, min_ratio = self.stress_qdata(state, geom)
        dt = controls.cfl * min_ratio
        dt = min(dt, controls.dt_max, controls.t_final - state.t)
        if dt < controls.dt_min:
            raise TimestepUnderflow(
                f"dt = {dt:.3e} fell below dt_min = {controls.dt_min:.3e} at t = {state.t:.6e}"
            )
        return dt

    def rk2_step(self, state: HydroState, dt: float, max_retries: int = 5):
        """One midpoint step; on an inverted element the step is rejected
        and retried at half the time step (up to max_retries)."""
        from .fespace import InvertedElementError

        attempt = dt
        for _ in range(max_retries + 1):
            try:
                r0 = self.rates(state)
                half = attempt / 2.0
                mid = HydroState(
                    x=state.x + half * r0.dx,
                    v=state.v + half * r0.dv,
                    e=state.e + half * r0.de,
                    qdata0=state.qdata0,
                    t=state.t + half,
                )
                r1 = self.rates(mid)
                new = HydroState(
                    x=state.x + attempt * r1.dx,
                    v=state.v + attempt * r1.dv,
                    e=state.e + attempt * r1.de,
                    qdata0=state.qdata0,
                    t=state.t + attempt,
                )
                # the new geometry must be valid for the next step
                compute_geometric_factors(self.mesh, self.quad, x=new.x)
                return new, {"dt": attempt, "min_h_over_speed": r1.min_h_over_speed}
            except InvertedElementError:
                attempt /= 2.0
        raise TimestepUnderflow(f"step rejected {max_retries + 1} times from dt = {dt:.3e}")

    # -- diagnostics ------------------------------------------------------------

    def kinetic_energy(self, state: HydroState) -> float:
        mv = self.mass_pa.apply(state.v)
        return 0.5 * float(np.vdot(state.v, mv))

    def internal_energy(self, state: HydroState) -> float:
        d = self.mesh.dim
        ne = self.mesh.num_elements
        e_pts = tensor_interp(
            self.thermo.basis(self.quad), self.thermo.e_tensor(self.thermo.gather(state.e)), d
        ).reshape(self.quad.n**d, ne)
        wq = self._weights_tensor()
        return float(np.sum(wq[:, None] * state.qdata0 * e_pts))

    def total_energy(self, state: HydroState) -> float:
        return self.kinetic_energy(state) + self.internal_energy(state)


class _PointSet:
    """Adapter: a bare point set usable where a quadrature rule is expected."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.zeros_like(self.points)
        self.n = len(self.points)
