"""High-order quad/hex meshes, H1/L2 spaces, element restriction, geometry.

The global operator decomposition used throughout the package is
A = G^T B^T D B G: `gather` realizes G (global vector to element-blocked
E-vector), `scatter_add` realizes G^T with a deterministic ascending-element
accumulation order, and `compute_geometric_factors` produces the per-point
Jacobian data entering D.  The parallel leg of the decomposition is the
identity here (single process).

Node ordering is lexicographic with x fastest, both for the local
(p+1)^d nodes of an element and for the corner vertices.  Element
connectivity is stored through corner node ids, which adjacent elements
share on conforming meshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_basis import Basis1D, eval_basis, gauss_lobatto_nodes, tensor_grad

__all__ = [
    "HighOrderMesh",
    "FiniteElementSpace",
    "GeometricFactors",
    "Face",
    "InvertedElementError",
    "cartesian_mesh",
    "compute_geometric_factors",
    "save_mesh",
    "load_mesh",
]


class InvertedElementError(RuntimeError):
    def __init__(self, element: int, point: int, detj: float):
        super().__init__(f"det J = {detj:.3e} <= 0 in element {element} at point {point}")
        self.element = element
        self.point = point


@dataclass(frozen=True)
class Face:
    """A mesh face; elem_r == -1 marks a boundary face.

    face ids are 2*axis + side (side 0: xi_axis = -1, side 1: +1).
    `perm`/`flip` map the left face's in-face parameter coordinates onto the
    right face's: R_coord[r] = (1 - 2*flip[r]) * L_coord[perm[r]].
    """

    elem_l: int
    face_l: int
    elem_r: int = -1
    face_r: int = -1
    perm: tuple = ()
    flip: tuple = ()


class HighOrderMesh:
    """Conforming quad/hex mesh with an order-p nodal coordinate field."""

    def __init__(self, dim: int, order: int, node_dofmap: np.ndarray, coords: np.ndarray):
        if dim not in (2, 3):
            raise ValueError("mesh dimension must be 2 or 3")
        self.dim = dim
        self.order = order
        self.node_dofmap = np.ascontiguousarray(node_dofmap, dtype=np.int64)
        self.coords = np.ascontiguousarray(coords, dtype=float)
        self.num_nodes = self.coords.shape[0]
        self.lobatto_nodes = gauss_lobatto_nodes(order)
        self._faces = None
        if self.node_dofmap.shape[0] != (order + 1) ** dim:
            raise ValueError("node map does not match (p+1)^d local nodes")

    @property
    def num_elements(self) -> int:
        return self.node_dofmap.shape[1]

    def corner_ids(self) -> np.ndarray:
        """Corner node ids per element, shape (2^d, NE), x-fastest corners."""
        p, d = self.order, self.dim
        idx = []
        for corner in range(2**d):
            bits = [(corner >> a) & 1 for a in range(d)]
            loc = sum(bits[a] * p * (p + 1) ** a for a in range(d))
            idx.append(loc)
        return self.node_dofmap[idx, :]

    def local_face_corners(self, face_id: int) -> list:
        """Local corner positions (in 2^d corner numbering) of one face,
        ordered by the in-face parameter axes (lower axis fastest)."""
        a, s = divmod(face_id, 2)
        rem = [ax for ax in range(self.dim) if ax != a]
        out = []
        for code in range(2 ** len(rem)):
            bits = [0] * self.dim
            bits[a] = s
            for r, ax in enumerate(rem):
                bits[ax] = (code >> r) & 1
            out.append(sum(bits[ax] << ax for ax in range(self.dim)))
        return out

    def faces(self) -> list:
        """All mesh faces with neighbor pairing and orientation maps."""
        if self._faces is None:
            self._faces = _build_faces(self)
        return self._faces

    def interior_faces(self) -> list:
        return [f for f in self.faces() if f.elem_r >= 0]

    def boundary_faces(self) -> list:
        return [f for f in self.faces() if f.elem_r < 0]

    def boundary_nodes(self) -> np.ndarray:
        """Ids of all nodes lying on the domain boundary."""
        p, d = self.order, self.dim
        ids = []
        for f in self.boundary_faces():
            a, s = divmod(f.face_l, 2)
            sl = [slice(None)] * d
            sl[d - 1 - a] = -1 if s else 0
            local = np.arange((p + 1) ** d).reshape((p + 1,) * d)[tuple(sl)].ravel()
            ids.append(self.node_dofmap[local, f.elem_l])
        return np.unique(np.concatenate(ids)) if ids else np.array([], dtype=np.int64)


def _build_faces(mesh: HighOrderMesh) -> list:
    d = mesh.dim
    corners = mesh.corner_ids()  # (2^d, NE)
    by_key = {}
    for e in range(mesh.num_elements):
        for fid in range(2 * d):
            loc = mesh.local_face_corners(fid)
            ids = tuple(int(corners[c, e]) for c in loc)
            by_key.setdefault(frozenset(ids), []).append((e, fid, ids))
    faces = []
    for entries in by_key.values():
        if len(entries) == 1:
            e, fid, _ = entries[0]
            faces.append(Face(elem_l=e, face_l=fid))
        elif len(entries) == 2:
            (el, fl, ids_l), (er, fr, ids_r) = entries
            perm, flip = _match_orientation(d, ids_l, ids_r)
            faces.append(Face(elem_l=el, face_l=fl, elem_r=er, face_r=fr, perm=perm, flip=flip))
        else:
            raise ValueError("non-conforming mesh: a face is shared by more than two elements")
    faces.sort(key=lambda f: (f.elem_l, f.face_l))
    return faces


def _match_orientation(d: int, ids_l: tuple, ids_r: tuple):
    """Find the dihedral map sending L's face parameters onto R's."""
    nfp = d - 1
    perms = [(0,)] if nfp == 1 else [(0, 1), (1, 0)]
    for perm in perms:
        for code in range(2**nfp):
            flip = tuple((code >> r) & 1 for r in range(nfp))
            ok = True
            for lcode in range(2**nfp):
                lbits = [(lcode >> r) & 1 for r in range(nfp)]
                rbits = [flip[r] ^ lbits[perm[r]] for r in range(nfp)]
                rcode = sum(rbits[r] << r for r in range(nfp))
                if ids_l[lcode] != ids_r[rcode]:
                    ok = False
                    break
            if ok:
                return perm, flip
    raise ValueError("conforming faces share vertices but no orientation map matches")


# ---------------------------------------------------------------------------
# finite element spaces

class FiniteElementSpace:
    """H1 (continuous) or L2 (discontinuous) space on a mesh.

    H1 spaces reuse the mesh's node numbering (order must equal the mesh
    order); L2 spaces number all element nodes independently, element-major.
    """

    def __init__(self, mesh: HighOrderMesh, continuity: str, order: int | None = None, vdim: int = 1):
        if continuity not in ("H1", "L2"):
            raise ValueError("continuity must be 'H1' or 'L2'")
        self.mesh = mesh
        self.continuity = continuity
        self.order = mesh.order if order is None else order
        self.vdim = vdim
        d = mesh.dim
        nloc = (self.order + 1) ** d
        if continuity == "H1":
            if self.order != mesh.order:
                raise ValueError("H1 spaces are supported at the mesh order only")
            self.dofmap = mesh.node_dofmap
            self.ndof = mesh.num_nodes
        else:
            ne = mesh.num_elements
            self.dofmap = np.arange(nloc * ne, dtype=np.int64).reshape(ne, nloc).T.copy()
            self.ndof = nloc * ne
        self.nloc = nloc
        if self.order == 0:
            self.nodes1d = np.zeros(1)
        else:
            self.nodes1d = gauss_lobatto_nodes(self.order)
        self._basis_cache: dict = {}
        self._mult = None

    def basis(self, quad) -> Basis1D:
        key = (quad.n, quad.points.tobytes())
        b = self._basis_cache.get(key)
        if b is None:
            b = eval_basis(self.nodes1d, quad)
            self._basis_cache[key] = b
        return b

    def tshape(self, q1d: int) -> tuple:
        return (q1d,) * self.mesh.dim

    def gather(self, gvec: np.ndarray) -> np.ndarray:
        """G: global (ndof, ...) vector to E-vector (nloc, NE, ...)."""
        if gvec.shape[0] != self.ndof:
            raise ValueError(f"global vector has leading size {gvec.shape[0]}, expected {self.ndof}")
        return gvec[self.dofmap]

    def scatter_add(self, evec: np.ndarray) -> np.ndarray:
        """G^T: accumulate element contributions in ascending element order."""
        expect = (self.nloc, self.mesh.num_elements)
        if evec.shape[:2] != expect:
            raise ValueError(f"E-vector has shape {evec.shape}, expected {expect} (+ components)")
        out = np.zeros((self.ndof,) + evec.shape[2:])
        np.add.at(out, self.dofmap.T, np.swapaxes(evec, 0, 1))
        return out

    def multiplicity(self) -> np.ndarray:
        """Per-DOF element multiplicity (all ones for L2)."""
        if self._mult is None:
            ones = np.ones((self.nloc, self.mesh.num_elements))
            self._mult = self.scatter_add(ones)
        return self._mult

    def e_tensor(self, evec: np.ndarray, extra: tuple = ()) -> np.ndarray:
        """Reshape an E-vector to tensor layout (axes slowest..fastest, NE last)."""
        d = self.mesh.dim
        n1 = self.order + 1
        ne = self.mesh.num_elements
        t = np.moveaxis(evec.reshape((self.nloc, ne) + extra), 1, -1)
        return np.ascontiguousarray(t.reshape((n1,) * d + extra + (ne,)))

    def e_flat(self, t: np.ndarray, extra: tuple = ()) -> np.ndarray:
        d = self.mesh.dim
        ne = self.mesh.num_elements
        flat = t.reshape((self.nloc,) + extra + (ne,))
        return np.ascontiguousarray(np.moveaxis(flat, -1, 1))


# ---------------------------------------------------------------------------
# geometry

@dataclass
class GeometricFactors:
    """Per-element, per-quadrature-point Jacobian data.

    jac[a, b, q, e] = d x_a / d xi_b; detj and wdetj are (nq, NE).
    """

    jac: np.ndarray
    detj: np.ndarray
    jinv: np.ndarray
    wdetj: np.ndarray
    quad: object
    basis: Basis1D

    @property
    def volume(self) -> float:
        return float(self.wdetj.sum())


def _det_inv(jac: np.ndarray):
    d = jac.shape[0]
    if d == 2:
        a, b = jac[0, 0], jac[0, 1]
        c, e = jac[1, 0], jac[1, 1]
        det = a * e - b * c
        inv = np.empty_like(jac)
        inv[0, 0], inv[0, 1] = e, -b
        inv[1, 0], inv[1, 1] = -c, a
    else:
        det = (
            jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
            - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
            + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
        )
        inv = np.empty_like(jac)
        for i in range(3):
            for j in range(3):
                i1, i2 = [k for k in range(3) if k != j]
                j1, j2 = [k for k in range(3) if k != i]
                cof = jac[i1, j1] * jac[i2, j2] - jac[i1, j2] * jac[i2, j1]
                inv[j, i] = cof if (i + j) % 2 == 0 else -cof
    return det, inv


def element_jacobians(mesh: HighOrderMesh, quad, x: np.ndarray | None = None) -> np.ndarray:
    """Jacobians jac[a, b, q, e] of the coordinate map at quadrature points."""
    d = mesh.dim
    coords = mesh.coords if x is None else x
    basis = eval_basis(mesh.lobatto_nodes, quad)
    nloc = (mesh.order + 1) ** d
    ne = mesh.num_elements
    xe = coords[mesh.node_dofmap]  # (nloc, NE, d)
    nq = quad.n**d
    jac = np.empty((d, d, nq, ne))
    n1 = mesh.order + 1
    for a in range(d):
        t = np.ascontiguousarray(
            np.moveaxis(xe[:, :, a].reshape(nloc, ne), 1, -1).reshape((n1,) * d + (ne,))
        )
        grads = tensor_grad(basis, t, d)
        for b in range(d):
            jac[a, b] = grads[b].reshape(nq, ne)
    return jac


def compute_geometric_factors(mesh: HighOrderMesh, quad, x: np.ndarray | None = None) -> GeometricFactors:
    """Jacobian, determinant, inverse and combined quadrature weight.

    Raises InvertedElementError naming the first element and point where
    det J <= 0.
    """
    d = mesh.dim
    jac = element_jacobians(mesh, quad, x)
    det, inv = _det_inv(jac)
    if np.any(det <= 0.0):
        q, e = np.argwhere(det <= 0.0)[0]
        raise InvertedElementError(int(e), int(q), float(det[q, e]))
    inv = inv / det
    w = quad.weights
    wq = w
    for _ in range(d - 1):
        wq = np.multiply.outer(wq, w)
    # weight tensor laid out like the point index (x fastest)
    wq = wq.reshape(-1)
    basis = eval_basis(mesh.lobatto_nodes, quad)
    return GeometricFactors(jac=jac, detj=det, jinv=inv, wdetj=wq[:, None] * det, quad=quad, basis=basis)


# ---------------------------------------------------------------------------
# mesh construction and text I/O

def cartesian_mesh(dim: int, extents, counts, order: int) -> HighOrderMesh:
    """Axis-aligned box mesh with nodes at tensor Gauss-Lobatto points."""
    extents = np.atleast_1d(np.asarray(extents, dtype=float))
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    if len(extents) != dim or len(counts) != dim:
        raise ValueError("extents and counts must match the dimension")
    if np.any(counts < 1):
        raise ValueError("element counts must be >= 1")
    p = order
    lob = (gauss_lobatto_nodes(p) + 1.0) / 2.0  # mapped to [0, 1]
    axes_1d = []
    for a in range(dim):
        h = extents[a] / counts[a]
        pts = np.empty(counts[a] * p + 1)
        for c in range(counts[a]):
            pts[c * p : (c + 1) * p + 1] = c * h + lob * h
        axes_1d.append(pts)
    nper = [len(ax) for ax in axes_1d]
    grids = np.meshgrid(*axes_1d, indexing="ij")
    coords = np.stack([g.reshape(-1, order="F") for g in grids], axis=1)

    ne = int(np.prod(counts))
    nloc = (p + 1) ** dim
    dofmap = np.empty((nloc, ne), dtype=np.int64)
    strides = np.cumprod([1] + nper[:-1])
    for e in range(ne):
        ecoord = np.unravel_index(e, counts, order="F")
        gids = []
        for loc in range(nloc):
            lcoord = np.unravel_index(loc, [p + 1] * dim, order="F")
            gid = sum((ecoord[a] * p + lcoord[a]) * strides[a] for a in range(dim))
            gids.append(gid)
        dofmap[:, e] = gids
    return HighOrderMesh(dim=dim, order=p, node_dofmap=dofmap, coords=coords)


def save_mesh(mesh: HighOrderMesh, path):
    with open(path, "w") as fh:
        fh.write(f"dim {mesh.dim} order {mesh.order}\n")
        fh.write(f"elements {mesh.num_elements} nodes {mesh.num_nodes}\n")
        for e in range(mesh.num_elements):
            fh.write(" ".join(str(int(i)) for i in mesh.node_dofmap[:, e]) + "\n")
        for n in range(mesh.num_nodes):
            fh.write(" ".join(repr(float(c)) for c in mesh.coords[n]) + "\n")


def load_mesh(path) -> HighOrderMesh:
    with open(path) as fh:
        head = fh.readline().split()
        dim, order = int(head[1]), int(head[3])
        head2 = fh.readline().split()
        ne, nn = int(head2[1]), int(head2[3])
        nloc = (order + 1) ** dim
        dofmap = np.empty((nloc, ne), dtype=np.int64)
        for e in range(ne):
            row = [int(t) for t in fh.readline().split()]
            if len(row) != nloc:
                raise ValueError(f"element {e}: expected {nloc} node ids, got {len(row)}")
            dofmap[:, e] = row
        coords = np.empty((nn, dim))
        for n in range(nn):
            coords[n] = [float(t) for t in fh.readline().split()]
    return HighOrderMesh(dim=dim, order=order, node_dofmap=dofmap, coords=coords)
