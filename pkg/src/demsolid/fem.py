"""Reference solver: structured linear tetrahedra with the same Neo-Hookean energy.

Boxes (and unions of boxes) are split into hexahedra and each hexahedron into
six tetrahedra around a main diagonal, mirrored between neighbouring
hexahedra. The discrete potential energy is minimized over the free nodal displacements with Newton's method on the exact
element tangent plus a backtracking line search and optional load stepping.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import material as mat
from .errors import InvertedElement, NoConvergence, NonPositiveJacobian

# Kuhn split: one tet per axis permutation, walking 000 -> 111
_KUHN = []
for perm in itertools.permutations(range(3)):
    path = [np.zeros(3, dtype=int)]
    for axis in perm:
        nxt = path[-1].copy()
        nxt[axis] = 1
        path.append(nxt)
    _KUHN.append([int(c[0] + 2 * c[1] + 4 * c[2]) for c in path])
_KUHN = np.array(_KUHN)


@dataclass
class TetMesh:
    nodes: np.ndarray
    tets: np.ndarray
    volumes: np.ndarray = None
    dirichlet_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dirichlet_values: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    neumann_faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    neumann_tractions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    body_force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        Dm = self.nodes[self.tets[:, 1:]] - self.nodes[self.tets[:, :1]]  # (T, 3 edges, 3)
        Dm = np.swapaxes(Dm, 1, 2)  # columns are edge vectors
        self.Dm_inv = np.linalg.inv(Dm)
        self.volumes = np.linalg.det(Dm) / 6.0
        if np.any(self.volumes <= 0):
            raise ValueError("tetrahedra must have positive reference volume")
        # B[t, a, k] = d(shape function a)/dX_k
        self.B = np.concatenate([-self.Dm_inv.sum(axis=1, keepdims=True), self.Dm_inv], axis=1)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def total_volume(self):
        return float(self.volumes.sum())

    def boundary_faces(self):
        """Outward-oriented triangles that belong to exactly one tetrahedron."""
        local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
        faces = self.tets[:, local].reshape(-1, 3)
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        faces = faces[counts[inv.reshape(-1)] == 1]
        # make every face point away from its tet's opposite vertex
        owner = np.repeat(np.arange(len(self.tets)), 4)[counts[inv.reshape(-1)] == 1]
        tri = self.nodes[faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        out = tri.mean(axis=1) - self.nodes[self.tets[owner]].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, out) < 0
        faces[flip] = faces[flip][:, ::-1]
        return faces

    def face_areas(self, faces):
        tri = self.nodes[faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def free_dofs(self):
        fixed = np.zeros((self.n_nodes, 3), dtype=bool)
        fixed[self.dirichlet_nodes] = True
        return np.flatnonzero(~fixed.reshape(-1))


def build_structured_tets(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), resolution=(1, 1, 1), boxes=None) -> TetMesh:
    """Split ``[lo, hi]`` into ``nx*ny*nz`` hexahedra and each into six tets.

    When ``boxes`` (rows ``x0 y0 z0 x1 y1 z1``) is given only hexahedra whose
    centers fall inside one of the boxes are kept, and unused nodes are
    dropped.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    res = np.asarray(resolution, dtype=np.int64).reshape(3)
    if np.any(res < 1):
        raise ValueError("resolution must be >= 1 on every axis")
    axes = [np.linspace(lo[a], hi[a], res[a] + 1) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    ny, nz = res[1] + 1, res[2] + 1

    def nid(i, j, k):
        return (i * ny + j) * nz + k

    I, J, K = np.meshgrid(*(np.arange(r) for r in res), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    if boxes is not None:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
        centers = np.stack([
            0.5 * (axes[0][I] + axes[0][I + 1]),
            0.5 * (axes[1][J] + axes[1][J + 1]),
            0.5 * (axes[2][K] + axes[2][K + 1]),
        ], axis=1)
        keep = np.zeros(len(I), dtype=bool)
        for b in boxes:
            keep |= np.all((centers > b[:3]) & (centers < b[3:]), axis=1)
        I, J, K = I[keep], J[keep], K[keep]
    # mirror the split in every other hex along each axis: neighbours then share
    # face diagonals (conforming) and the mesh has no preferred shear direction
    pi, pj, pk = I % 2, J % 2, K % 2
    corners = np.stack([
        nid(I + ((c & 1) ^ pi), J + (((c >> 1) & 1) ^ pj), K + (((c >> 2) & 1) ^ pk)) for c in range(8)
    ], axis=1)
    tets = corners[:, _KUHN].reshape(-1, 4)
    # orient positively
    e = nodes[tets[:, 1:]] - nodes[tets[:, :1]]
    neg = np.linalg.det(e) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    if boxes is not None:
        used, inverse = np.unique(tets, return_inverse=True)
        nodes = nodes[used]
        tets = inverse.reshape(tets.shape)
    return TetMesh(nodes, tets)


def apply_boundary_conditions(mesh: TetMesh, dirichlet=(), neumann=(), body_force=(0.0, 0.0, 0.0)) -> TetMesh:
    """Attach boundary data from ``(selector, value)`` pairs.

    A boundary node is Dirichlet when it lies in a Dirichlet selector; a
    boundary triangle carries a traction when all three vertices lie in a
    Neumann selector.
    """
    faces = mesh.boundary_faces()
    bnodes = np.unique(faces)
    d_nodes, d_vals = [], []
    for selector, value in dirichlet:
        sel = bnodes[selector.contains(mesh.nodes[bnodes])]
        d_nodes.append(sel)
        d_vals.append(np.tile(np.asarray(value, dtype=np.float64), (len(sel), 1)))
    n_faces, n_trac = [], []
    for selector, value in neumann:
        inside = selector.contains(mesh.nodes[faces.reshape(-1)]).reshape(-1, 3).all(axis=1)
        n_faces.append(faces[inside])
        n_trac.append(np.tile(np.asarray(value, dtype=np.float64), (int(inside.sum()), 1)))
    if d_nodes:
        nodes_all = np.concatenate(d_nodes)
        vals_all = np.concatenate(d_vals)
        # first selector listed wins for shared nodes
        nodes_u, first = np.unique(nodes_all, return_index=True)
        mesh.dirichlet_nodes, mesh.dirichlet_values = nodes_u, vals_all[first]
    if n_faces:
        mesh.neumann_faces = np.concatenate(n_faces)
        mesh.neumann_tractions = np.concatenate(n_trac)
    mesh.body_force = np.asarray(body_force, dtype=np.float64)
    return mesh


def deformation_gradients(mesh: TetMesh, u):
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    # F_jk = delta_jk + sum_a u_a,j B_a,k
    return np.eye(3) + np.einsum("taj,tak->tjk", u[mesh.tets], mesh.B)


def fem_energy(mesh: TetMesh, u, material, load_scale=1.0, gradient=False):
    """Discrete potential energy (and optionally its gradient w.r.t. ``u``).

    Strain energy uses one-point quadrature per tet; body force and traction
    work use the element-average deformed position.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    F = deformation_gradients(mesh, u)
    J = np.linalg.det(F)
    bad = np.flatnonzero(J <= 0)
    if len(bad):
        raise InvertedElement(f"tetrahedron {int(bad[0])} is inverted (det F = {J[bad[0]]:.3e})", tet_index=int(bad[0]))
    psi = mat.strain_energy_density(F, material)
    V = mesh.volumes
    phi = mesh.nodes + u
    fb = load_scale * mesh.body_force
    e_body = -float(np.sum(phi[mesh.tets].mean(axis=1) @ fb * V))
    e_trac = 0.0
    A = None
    if len(mesh.neumann_faces):
        A = mesh.face_areas(mesh.neumann_faces)
        e_trac = -float(np.sum(np.einsum("fj,fj->f", phi[mesh.neumann_faces].mean(axis=1),
                                         load_scale * mesh.neumann_tractions) * A))
    energy = float(np.sum(psi * V)) + e_body + e_trac
    if not gradient:
        return energy
    P = mat.first_pk_stress(F, material)
    g_el = V[:, None, None] * np.einsum("tjk,tak->taj", P, mesh.B)
    g = np.zeros_like(u)
    np.add.at(g, mesh.tets.reshape(-1), g_el.reshape(-1, 3))
    np.add.at(g, mesh.tets.reshape(-1), np.repeat(-(V[:, None] * fb[None, :]) / 4.0, 4, axis=0))
    if A is not None:
        ft = -(load_scale * mesh.neumann_tractions) * A[:, None] / 3.0
        np.add.at(g, mesh.neumann_faces.reshape(-1), np.repeat(ft, 3, axis=0))
    return energy, g


def fem_hessian(mesh: TetMesh, u, material):
    """Sparse stiffness matrix over all nodal DOFs (loads are dead, so only strain energy contributes)."""
    F = deformation_gradients(mesh, u)
    A = mat.elasticity_tangent(F, material)
    Ke = mesh.volumes[:, None, None, None, None] * np.einsum("tjkpq,tak,tbq->tajbp", A, mesh.B, mesh.B)
    Ke = Ke.reshape(len(mesh.tets), 12, 12)
    dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(len(mesh.tets), 12)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    n = 3 * mesh.n_nodes
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


def gradient_tolerance(mesh: TetMesh, material):
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    return 1e-8 * material.mu * mesh.total_volume / float(np.max(hi - lo))


@dataclass
class FemResult:
    displacement: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    history: list


def fem_solve(mesh: TetMesh, material, load_steps=1, max_iter=50, tol=None, u0=None) -> FemResult:
    """Minimize :func:`fem_energy` over the free DOFs.

    Dirichlet values are imposed by elimination. Each load step runs damped
    Newton iterations until the free-DOF gradient norm drops below ``tol``
    (default ``1e-8 * mu * volume / bbox length``).
    """
    if len(mesh.dirichlet_nodes) == 0:
        raise ValueError("at least one Dirichlet node is required to pin rigid modes")
    tol = gradient_tolerance(mesh, material) if tol is None else tol
    u = np.zeros((mesh.n_nodes, 3)) if u0 is None else np.array(u0, dtype=np.float64).reshape(-1, 3)
    u[mesh.dirichlet_nodes] = mesh.dirichlet_values
    free = mesh.free_dofs
    history = []
    total_iter = 0
    gnorm = np.inf
    energy = np.nan
    for step in range(1, load_steps + 1):
        scale = step / load_steps
        energy, g = fem_energy(mesh, u, material, scale, gradient=True)
        for _ in range(max_iter):
            gf = g.reshape(-1)[free]
            gnorm = float(np.linalg.norm(gf))
            history.append((scale, energy, gnorm))
            if gnorm < tol:
                break
            K = fem_hessian(mesh, u, material)[free][:, free]
            du = spla.spsolve(K.tocsc(), -gf)
            slope = float(gf @ du)
            if slope >= 0:  # not a descent direction; fall back to steepest descent
                du = -gf
                slope = -float(gf @ gf)
            alpha = 1.0
            while True:
                trial = u.copy().reshape(-1)
                trial[free] += alpha * du
                trial = trial.reshape(-1, 3)
                try:
                    e_new, g_new = fem_energy(mesh, trial, material, scale, gradient=True)
                except (InvertedElement, NonPositiveJacobian):
                    e_new = np.inf
                if e_new <= energy + 1e-4 * alpha * slope or alpha < 1e-10:
                    break
                if np.isfinite(e_new) and abs(e_new - energy) <= 1e-14 * max(abs(energy), 1.0):
                    break  # energy flat to round-off: accept the Newton step
                alpha *= 0.5
            if not np.isfinite(e_new):
                raise NoConvergence("line search could not find an admissible step", grad_norm=gnorm)
            u, energy, g = trial, e_new, g_new
            total_iter += 1
        else:
            gnorm = float(np.linalg.norm(g.reshape(-1)[free]))
            if gnorm >= tol:
                raise NoConvergence(f"load step {step}: gradient norm {gnorm:.3e} after {max_iter} iterations",
                                    grad_norm=gnorm)
    return FemResult(u, energy, gnorm, total_iter, history)


def save_nodal_csv(mesh: TetMesh, u, path):
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    rows = ["x,y,z,ux,uy,uz"]
    rows += [",".join(f"{v:.17g}" for v in np.concatenate([X, d])) for X, d in zip(mesh.nodes, u)]
    Path(path).write_text("\n".join(rows) + "\n")


def euler_bernoulli_tip(length, width, height, force, young_modulus):
    """Tip deflection ``P L^3 / (3 E I)`` of an end-loaded cantilever bending about the width axis."""
    inertia = width * height**3 / 12.0
    return force * length**3 / (3.0 * young_modulus * inertia)
