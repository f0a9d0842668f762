"""Procedural watertight meshes used by scenes and tests."""
from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh, weld


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    return box_union_mesh([tuple(lo) + tuple(hi)])


def box_union_mesh(boxes) -> TriangleMesh:
    """Surface of a union of axis-aligned boxes ``(x0, y0, z0, x1, y1, z1)``.

    The boxes are rasterized on the rectilinear grid spanned by all their
    face coordinates, so the output is conforming (no T-junctions).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    if np.any(boxes[:, 3:] <= boxes[:, :3]):
        raise ValueError("box upper corner must exceed lower corner on every axis")
    coords = [np.unique(np.concatenate([boxes[:, a], boxes[:, a + 3]])) for a in range(3)]
    centers = [0.5 * (c[1:] + c[:-1]) for c in coords]
    cx, cy, cz = np.meshgrid(*centers, indexing="ij")
    pts = np.stack([cx, cy, cz], axis=-1)
    occ = np.zeros(cx.shape, dtype=bool)
    for b in boxes:
        occ |= np.all((pts > b[:3]) & (pts < b[3:]), axis=-1)
    padded = np.pad(occ, 1)

    def node(i, j, k):
        return (coords[0][i], coords[1][j], coords[2][k])

    verts, faces = [], []
    shape = occ.shape
    for axis in range(3):
        other = [a for a in range(3) if a != axis]
        for idx in np.ndindex(*(s + 1 if a == axis else s for a, s in enumerate(shape))):
            lo_cell = list(idx)
            hi_cell = list(idx)
            lo_cell[axis] -= 1
            a_occ = padded[tuple(c + 1 for c in lo_cell)]
            b_occ = padded[tuple(c + 1 for c in hi_cell)]
            if a_occ == b_occ:
                continue
            u, v = other
            corners = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                n = list(idx)
                n[u] += du
                n[v] += dv
                corners.append(node(*n))
            base = len(verts)
            verts.extend(corners)
            # (u, v, axis) is right-handed for axis=0 and 2 only in cyclic order
            outward_positive = a_occ  # occupied below -> normal along +axis
            cyclic = (u, v) == ((axis + 1) % 3, (axis + 2) % 3)
            if outward_positive == cyclic:
                faces.extend([(base, base + 1, base + 2), (base, base + 2, base + 3)])
            else:
                faces.extend([(base, base + 2, base + 1), (base, base + 3, base + 2)])
    verts, faces = weld(np.array(verts), np.array(faces))
    return TriangleMesh(verts, faces, orient=False)


def icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=3) -> TriangleMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts = list(v)
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        v = np.array(verts)
        f = np.array(new, dtype=np.int64)
    return TriangleMesh(v * radius + np.asarray(center, dtype=np.float64), f, orient=True)


def torus(major=0.35, minor=0.15, center=(0.5, 0.5, 0.5), n_major=48, n_minor=24) -> TriangleMesh:
    """Ring torus around the z axis."""
    theta = np.linspace(0.0, 2.0 * np.pi, n_major, endpoint=False)
    phi = np.linspace(0.0, 2.0 * np.pi, n_minor, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    r = major + minor * np.cos(P)
    verts = np.stack([r * np.cos(T), r * np.sin(T), minor * np.sin(P)], axis=-1).reshape(-1, 3)
    verts += np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces.extend([(a, b, c), (a, c, d)])
    return TriangleMesh(verts, faces, orient=True)
