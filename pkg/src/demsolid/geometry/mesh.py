"""Triangle surface meshes: topology checks, containment and closest-point queries."""
from __future__ import annotations

import warnings
from collections import deque

import numpy as np

from ..errors import ConsistencyWarning

# fixed ray direction with pairwise irrational component ratios
_RAY_DIRECTION = np.array([np.sqrt(5.0) - 1.0, np.sqrt(2.0) - 1.0, np.sqrt(3.0) - 1.0])
_RAY_DIRECTION /= np.linalg.norm(_RAY_DIRECTION)
_MAX_RECASTS = 8
_CHUNK = 400_000


class TriangleMesh:
    """Indexed triangle mesh with outward-oriented faces.

    Parameters
    ----------
    vertices : (V, 3) array_like
    faces : (F, 3) array_like of int
    orient : bool
        Make winding consistent across shared edges and flip the whole mesh
        when its signed volume is negative. A :class:`ConsistencyWarning` is
        emitted whenever a face had to be flipped.
    """

    def __init__(self, vertices, faces, orient=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise IndexError("face references a vertex index outside the vertex list")
        self.faces = np.ascontiguousarray(faces)
        self._cache = {}
        if orient and len(self.faces):
            self._orient()

    # -- derived quantities -------------------------------------------------
    def _clear(self):
        self._cache = {}

    @property
    def triangles(self):
        return self.vertices[self.faces]

    @property
    def face_normals(self):
        if "normals" not in self._cache:
            tri = self.triangles
            n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            self._cache["normals"] = n / np.where(norm > 0, norm, 1.0)
        return self._cache["normals"]

    @property
    def face_areas(self):
        if "areas" not in self._cache:
            tri = self.triangles
            self._cache["areas"] = 0.5 * np.linalg.norm(
                np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
            )
        return self._cache["areas"]

    @property
    def surface_area(self):
        return float(self.face_areas.sum())

    @property
    def signed_volume(self):
        tri = self.triangles
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    @property
    def volume(self):
        return abs(self.signed_volume)

    @property
    def bounds(self):
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    @property
    def diagonal(self):
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def edges(self):
        """Unique undirected edges and how many faces use each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    @property
    def is_watertight(self):
        _, counts = self.edges()
        return bool(len(counts) and np.all(counts == 2))

    @property
    def euler_characteristic(self):
        used = np.unique(self.faces)
        uniq, _ = self.edges()
        return int(len(used) - len(uniq) + len(self.faces))

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), orient=False)

    def transformed(self, rotation=None, translation=None):
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        return TriangleMesh(self.vertices @ R.T + t, self.faces.copy(), orient=False)

    # -- orientation ----------------------------------------------------------
    def _orient(self):
        faces = self.faces.copy()
        n = len(faces)
        directed = {}
        for fi, (a, b, c) in enumerate(faces):
            for u, v in ((a, b), (b, c), (c, a)):
                directed.setdefault((min(u, v), max(u, v)), []).append(fi)
        visited = np.zeros(n, dtype=bool)
        flipped = 0
        for start in range(n):
            if visited[start]:
                continue
            visited[start] = True
            queue = deque([start])
            while queue:
                fi = queue.popleft()
                a, b, c = faces[fi]
                for u, v in ((a, b), (b, c), (c, a)):
                    for fj in directed[(min(u, v), max(u, v))]:
                        if fj == fi or visited[fj]:
                            continue
                        # a consistent neighbor traverses the shared edge as (v, u)
                        x, y, z = faces[fj]
                        if (u, v) in ((x, y), (y, z), (z, x)):
                            faces[fj] = faces[fj][::-1]
                            flipped += 1
                        visited[fj] = True
                        queue.append(fj)
        self.faces = faces
        self._clear()
        if self.signed_volume < 0:
            self.faces = self.faces[:, ::-1].copy()
            self._clear()
        if flipped:
            warnings.warn(f"repaired winding of {flipped} face(s)", ConsistencyWarning, stacklevel=3)

    # -- queries ----------------------------------------------------------------
    def _tolerance(self):
        return 1e-9 * max(self.diagonal, 1e-300)

    def contains(self, points, seed=0):
        """Inside test by ray parity.

        Points lying on the surface (within ``1e-9`` of the bounding-box
        diagonal) count as inside. Rays that graze an edge or vertex are recast
        along a seeded perturbed direction, at most 8 times.
        """
        P = np.asarray(points, dtype=np.float64)
        single = P.ndim == 1
        P = np.atleast_2d(P)
        result = np.zeros(len(P), dtype=bool)
        if len(self.faces) == 0:
            return bool(result[0]) if single else result
        lo, hi = self.bounds
        tol = self._tolerance()
        candidates = np.flatnonzero(np.all((P >= lo - tol) & (P <= hi + tol), axis=1))
        if len(candidates):
            result[candidates] = self._contains_binned(P[candidates], tol, seed)
        return bool(result[0]) if single else result

    def _ray_bins(self, tol):
        """Bucket faces by their footprint on the plane orthogonal to the ray."""
        if "bins" in self._cache:
            return self._cache["bins"]
        d = _RAY_DIRECTION
        a = np.cross(d, [0.0, 0.0, 1.0])
        a /= np.linalg.norm(a)
        b = np.cross(d, a)
        basis = np.stack([a, b], axis=1)
        proj = self.triangles @ basis  # (F, 3 vertices, 2)
        tlo = proj.min(axis=1) - 2 * tol
        thi = proj.max(axis=1) + 2 * tol
        glo, ghi = tlo.min(axis=0), thi.max(axis=0)
        g = int(np.clip(np.sqrt(len(self.faces) / 2.0), 1, 128))
        size = np.maximum((ghi - glo) / g, 1e-300)
        c0 = np.clip(((tlo - glo) / size).astype(np.int64), 0, g - 1)
        c1 = np.clip(((thi - glo) / size).astype(np.int64), 0, g - 1)
        cells, owners = [], []
        for f in range(len(self.faces)):
            ix = np.arange(c0[f, 0], c1[f, 0] + 1)
            iy = np.arange(c0[f, 1], c1[f, 1] + 1)
            cid = (ix[:, None] * g + iy[None, :]).ravel()
            cells.append(cid)
            owners.append(np.full(len(cid), f))
        cells = np.concatenate(cells)
        owners = np.concatenate(owners)
        order = np.argsort(cells, kind="stable")
        starts = np.searchsorted(cells[order], np.arange(g * g + 1))
        bins = (basis, glo, size, g, owners[order], starts)
        self._cache["bins"] = bins
        return bins

    def _cells_of(self, P, bins):
        basis, glo, size, g, _, _ = bins
        q = (P @ basis - glo) / size
        outside = np.any((q < 0) | (q >= g), axis=1)
        ij = np.clip(q.astype(np.int64), 0, g - 1)
        return np.where(outside, -1, ij[:, 0] * g + ij[:, 1])

    def _contains_binned(self, P, tol, seed):
        bins = self._ray_bins(tol)
        owners, starts = bins[4], bins[5]
        cell = self._cells_of(P, bins)
        valid = np.flatnonzero(cell >= 0)
        counts = np.zeros(len(P), dtype=np.int64)
        counts[valid] = starts[cell[valid] + 1] - starts[cell[valid]]
        tri = self.triangles
        normals = self.face_normals
        inside = np.zeros(len(P), dtype=bool)
        ambiguous = np.zeros(len(P), dtype=bool)
        # chunk on whole points so the (point, face) pair list stays bounded
        ends = np.cumsum(counts)
        s = 0
        while s < len(P):
            e = int(np.searchsorted(ends, (ends[s - 1] if s else 0) + _CHUNK, side="right"))
            e = max(e, s + 1)
            pts = np.arange(s, min(e, len(P)))
            c = counts[pts]
            owner = np.repeat(pts, c)
            if len(owner):
                offset = np.arange(len(owner)) - np.repeat(np.cumsum(c) - c, c)
                face = owners[np.repeat(starts[np.maximum(cell[pts], 0)], c) + offset]
                v0 = tri[face, 0]
                e1 = tri[face, 1] - v0
                e2 = tri[face, 2] - v0
                tvec = P[owner] - v0
                on = _on_triangle_pairs(tvec, e1, e2, normals[face], tol)
                strict, amb = _ray_pairs(tvec, e1, e2, _RAY_DIRECTION)
                n_on = np.bincount(owner - s, weights=on, minlength=len(pts)) > 0
                n_cross = np.bincount(owner - s, weights=strict, minlength=len(pts)).astype(np.int64)
                n_amb = np.bincount(owner - s, weights=amb, minlength=len(pts)) > 0
                inside[pts] = n_on | (n_cross % 2 == 1)
                ambiguous[pts] = n_amb & ~n_on
            s = e
        idx = np.flatnonzero(ambiguous)
        if len(idx):
            inside[idx] = self._recast(P[idx], seed)
        return inside

    def _recast(self, P, seed):
        """Brute-force parity along perturbed directions for grazing rays."""
        tri = self.triangles
        v0 = tri[:, 0]
        e1 = tri[:, 1] - v0
        e2 = tri[:, 2] - v0
        inside = np.zeros(len(P), dtype=bool)
        pending = np.arange(len(P))
        rng = np.random.default_rng(seed)
        for attempt in range(1, _MAX_RECASTS + 1):
            if len(pending) == 0:
                break
            direction = _RAY_DIRECTION + 0.25 * rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            step = max(1, _CHUNK // len(self.faces))
            still = []
            for s in range(0, len(pending), step):
                idx = pending[s:s + step]
                tvec = P[idx][:, None, :] - v0[None, :, :]
                crossings, amb = _ray_crossings(tvec, e1, e2, direction)
                amb = amb.any(axis=1)
                if attempt == _MAX_RECASTS:
                    amb[:] = False
                inside[idx] = crossings.sum(axis=1) % 2 == 1
                still.append(idx[amb])
            pending = np.concatenate(still)
        return inside

    def _face_tree(self, face_ids):
        key = ("tree", None if face_ids is None else face_ids.tobytes())
        if key not in self._cache:
            from scipy.spatial import cKDTree

            ids = np.arange(len(self.faces)) if face_ids is None else face_ids
            tri = self.triangles[ids]
            centroid = tri.mean(axis=1)
            reach = float(np.linalg.norm(tri - centroid[:, None, :], axis=2).max())
            self._cache[key] = (cKDTree(centroid), reach)
        return self._cache[key]

    def nearest_surface(self, points, face_subset=None, priority=None, tie_tol=1e-9):
        """Closest surface point over all (or a subset of) triangles.

        Returns ``(distance, normal, face_id)``. When several faces are within
        ``tie_tol`` of the minimum distance the one with the largest
        ``priority`` wins, then the lowest face index.

        Candidate faces are pruned with a k-d tree over face centroids: a face
        can only beat the nearest-centroid face when its centroid lies within
        that face's distance plus the largest centroid-to-vertex reach.
        """
        P = np.asarray(points, dtype=np.float64)
        single = P.ndim == 1
        P = np.atleast_2d(P)
        face_ids = None if face_subset is None else np.unique(np.asarray(face_subset, dtype=np.int64))
        ids = np.arange(len(self.faces)) if face_ids is None else face_ids
        tri_all = self.triangles[ids]
        prio = np.zeros(len(ids)) if priority is None else np.asarray(priority, dtype=np.float64)[ids]
        tree, reach = self._face_tree(face_ids)
        _, guess = tree.query(P)
        ub = _pair_distance(P, tri_all[guess])
        dist = np.empty(len(P))
        best = np.empty(len(P), dtype=np.int64)
        step = 4096
        slack = 4 * tie_tol + 1e-12 * max(self.diagonal, 1.0)
        for s in range(0, len(P), step):
            Ps = P[s:s + step]
            lists = tree.query_ball_point(Ps, ub[s:s + step] + reach + slack)
            lengths = np.array([len(l) for l in lists])
            owner = np.repeat(np.arange(len(Ps)), lengths)
            cand = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
            d = _pair_distance(Ps[owner], tri_all[cand])
            dmin = np.full(len(Ps), np.inf)
            np.minimum.at(dmin, owner, d)
            near = d <= dmin[owner] + (tie_tol if priority is not None else 0.0)
            o, c, dd = owner[near], cand[near], d[near]
            # first entry per point after sorting by (point, -priority, distance, face)
            keys = (c, dd, -prio[c], o) if priority is not None else (c, dd, o)
            order = np.lexsort(keys)
            o_sorted = o[order]
            first = order[np.r_[True, o_sorted[1:] != o_sorted[:-1]]]
            dist[s:s + step] = dmin
            best[s:s + step] = c[first]
        fid = ids[best]
        normal = self.face_normals[fid]
        if single:
            return float(dist[0]), normal[0], int(fid[0])
        return dist, normal, fid


def _on_triangles(tvec, e1, e2, normals, tol):
    """Mask (points, faces): point within ``tol`` of the triangle."""
    dist = np.einsum("ptk,tk->pt", tvec, normals)
    d00 = np.einsum("tk,tk->t", e1, e1)
    d01 = np.einsum("tk,tk->t", e1, e2)
    d11 = np.einsum("tk,tk->t", e2, e2)
    d20 = np.einsum("ptk,tk->pt", tvec, e1)
    d21 = np.einsum("ptk,tk->pt", tvec, e2)
    denom = d00 * d11 - d01 * d01
    denom = np.where(denom > 0, denom, np.inf)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    # barycentric slack scaled to an absolute distance of ~tol along the edges
    btol = tol / np.sqrt(np.maximum(np.minimum(d00, d11), 1e-300))
    return (np.abs(dist) <= tol) & (v >= -btol) & (w >= -btol) & (v + w <= 1.0 + btol)


def _on_triangle_pairs(tvec, e1, e2, normals, tol):
    """Pairwise version of :func:`_on_triangles` over aligned rows."""
    dist = np.einsum("ik,ik->i", tvec, normals)
    d00 = np.einsum("ik,ik->i", e1, e1)
    d01 = np.einsum("ik,ik->i", e1, e2)
    d11 = np.einsum("ik,ik->i", e2, e2)
    d20 = np.einsum("ik,ik->i", tvec, e1)
    d21 = np.einsum("ik,ik->i", tvec, e2)
    denom = d00 * d11 - d01 * d01
    denom = np.where(denom > 0, denom, np.inf)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    btol = tol / np.sqrt(np.maximum(np.minimum(d00, d11), 1e-300))
    return (np.abs(dist) <= tol) & (v >= -btol) & (w >= -btol) & (v + w <= 1.0 + btol)


def _ray_pairs(tvec, e1, e2, direction, eps=1e-10):
    """Pairwise version of :func:`_ray_crossings` over aligned rows."""
    pvec = np.cross(direction, e2)
    det = np.einsum("ik,ik->i", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    parallel = np.abs(det) <= 1e-12 * scale
    inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    u = np.einsum("ik,ik->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ik,ik->i", qvec, e2) * inv
    w = 1.0 - u - v
    forward = t > eps
    strict = forward & (u > eps) & (v > eps) & (w > eps) & ~parallel
    touching = forward & (u >= -eps) & (v >= -eps) & (w >= -eps) & ~parallel
    return strict, touching & ~strict


def _ray_crossings(tvec, e1, e2, direction, eps=1e-10):
    """Moller-Trumbore ray/triangle tests for every (point, face) pair."""
    pvec = np.cross(direction, e2)
    det = np.einsum("tk,tk->t", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    parallel = np.abs(det) <= 1e-12 * scale
    inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
    u = np.einsum("ptk,tk->pt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("ptk,k->pt", qvec, direction) * inv
    t = np.einsum("ptk,tk->pt", qvec, e2) * inv
    w = 1.0 - u - v
    forward = t > eps
    strict = forward & (u > eps) & (v > eps) & (w > eps) & ~parallel
    touching = forward & (u >= -eps) & (v >= -eps) & (w >= -eps) & ~parallel
    ambiguous = touching & ~strict
    return strict, ambiguous


def point_triangle_distance(P, tri):
    """Euclidean distance from each point to each triangle, shape (points, faces)."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    tri = np.asarray(tri, dtype=np.float64).reshape(-1, 3, 3)
    n, m = len(P), len(tri)
    d = _pair_distance(np.repeat(P, m, axis=0), np.tile(tri, (n, 1, 1)))
    return d.reshape(n, m)


def _pair_distance(P, tri):
    """Distance from point ``P[i]`` to triangle ``tri[i]``.

    The point is projected onto the triangle's plane; when the projection
    falls outside the triangle the minimum over the three edge segments is
    used instead.
    """
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1)
    unit = n / np.where(nn > 0, nn, 1.0)[:, None]
    tvec = P - v0
    plane = np.einsum("ik,ik->i", tvec, unit)
    d00 = np.einsum("ik,ik->i", e1, e1)
    d01 = np.einsum("ik,ik->i", e1, e2)
    d11 = np.einsum("ik,ik->i", e2, e2)
    d20 = np.einsum("ik,ik->i", tvec, e1)
    d21 = np.einsum("ik,ik->i", tvec, e2)
    denom = d00 * d11 - d01 * d01
    good = denom > 0
    denom = np.where(good, denom, 1.0)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    inside = good & (v >= 0) & (w >= 0) & (v + w <= 1)
    edge = np.minimum(
        np.minimum(_segment_distance(P, tri[:, 0], tri[:, 1]), _segment_distance(P, tri[:, 1], tri[:, 2])),
        _segment_distance(P, tri[:, 2], tri[:, 0]),
    )
    return np.where(inside, np.abs(plane), edge)


def _segment_distance(P, a, b):
    ab = b - a
    ap = P - a
    denom = np.einsum("ik,ik->i", ab, ab)
    s = np.einsum("ik,ik->i", ap, ab) / np.where(denom > 0, denom, 1.0)
    s = np.clip(s, 0.0, 1.0)
    diff = ap - s[:, None] * ab
    return np.sqrt(np.einsum("ik,ik->i", diff, diff))


def weld(vertices, faces, decimals=12):
    """Merge coincident vertices and drop faces that collapse."""
    vertices = np.asarray(vertices, dtype=np.float64)
    key = np.round(vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    new_faces = inverse.reshape(-1)[np.asarray(faces)]
    keep = (
        (new_faces[:, 0] != new_faces[:, 1])
        & (new_faces[:, 1] != new_faces[:, 2])
        & (new_faces[:, 2] != new_faces[:, 0])
    )
    return vertices[first], new_faces[keep]
