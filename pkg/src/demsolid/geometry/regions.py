"""Region selectors used to tag boundary particles and boundary faces."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RegionSelector:
    """Axis-aligned box, sphere, or explicit set of mesh faces.

    ``kind="box"`` uses ``lo``/``hi``; ``kind="sphere"`` uses
    ``center``/``radius``; ``kind="faces"`` uses ``face_ids`` and selects
    points whose nearest surface face is in the set.
    """

    kind: str
    lo: tuple = ()
    hi: tuple = ()
    center: tuple = ()
    radius: float = 0.0
    face_ids: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "faces"):
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if self.kind == "box" and (len(self.lo) != 3 or len(self.hi) != 3):
            raise ValueError("box selector needs 3-vectors lo and hi")
        if self.kind == "box" and any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError("box selector has hi < lo")
        if self.kind == "sphere" and (len(self.center) != 3 or self.radius <= 0):
            raise ValueError("sphere selector needs a center and a positive radius")
        if self.kind == "faces" and not self.face_ids:
            raise ValueError("face selector needs at least one face id")

    @classmethod
    def box(cls, lo, hi):
        return cls("box", lo=tuple(float(v) for v in lo), hi=tuple(float(v) for v in hi))

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", center=tuple(float(v) for v in center), radius=float(radius))

    @classmethod
    def faces(cls, face_ids):
        return cls("faces", face_ids=tuple(int(f) for f in face_ids))

    def to_dict(self):
        if self.kind == "box":
            return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}
        if self.kind == "sphere":
            return {"kind": "sphere", "center": list(self.center), "radius": self.radius}
        return {"kind": "faces", "face_ids": list(self.face_ids)}

    def contains(self, points, mesh=None):
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "box":
            return np.all((P >= np.array(self.lo)) & (P <= np.array(self.hi)), axis=1)
        if self.kind == "sphere":
            return np.linalg.norm(P - np.array(self.center), axis=1) <= self.radius
        if mesh is None:
            raise ValueError("face selector needs the mesh")
        _, _, fid = mesh.nearest_surface(P)
        return np.isin(fid, self.face_ids)

    def face_area_inside(self, mesh):
        """Area of each mesh face lying inside the selector."""
        if self.kind == "faces":
            out = np.zeros(len(mesh.faces))
            ids = np.array(self.face_ids)
            out[ids] = mesh.face_areas[ids]
            return out
        if self.kind == "box":
            lo, hi = np.array(self.lo), np.array(self.hi)
            return np.array([_polygon_area(_clip_to_box(tri, lo, hi)) for tri in mesh.triangles])
        return np.array([_sphere_area(tri, np.array(self.center), self.radius) for tri in mesh.triangles])

    def area(self, mesh):
        return float(self.face_area_inside(mesh).sum())


def _clip_to_box(poly, lo, hi):
    """Sutherland-Hodgman clip of a planar polygon against an axis-aligned box."""
    poly = [np.asarray(p, dtype=np.float64) for p in poly]
    for axis in range(3):
        for bound, sign in ((lo[axis], 1.0), (hi[axis], -1.0)):
            if not poly:
                return poly
            out = []
            for i, cur in enumerate(poly):
                prev = poly[i - 1]
                dc = sign * (cur[axis] - bound)
                dp = sign * (prev[axis] - bound)
                if dc >= 0:
                    if dp < 0:
                        out.append(prev + (cur - prev) * (dp / (dp - dc)))
                    out.append(cur)
                elif dp >= 0:
                    out.append(prev + (cur - prev) * (dp / (dp - dc)))
            poly = out
    return poly


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    p0 = poly[0]
    total = np.zeros(3)
    for a, b in zip(poly[1:-1], poly[2:]):
        total += np.cross(a - p0, b - p0)
    return 0.5 * float(np.linalg.norm(total))


def _sphere_area(tri, center, radius, levels=5):
    """Area of a triangle inside a sphere by recursive midpoint subdivision."""
    acc = 0.0
    pending = [np.asarray(tri, dtype=np.float64)]
    for _ in range(levels):
        nxt = []
        for t in pending:
            d = np.linalg.norm(t - center, axis=1)
            if np.all(d <= radius):
                acc += _polygon_area(list(t))
                continue
            a, b, c = t
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt.extend([np.array([a, ab, ca]), np.array([ab, b, bc]),
                        np.array([ca, bc, c]), np.array([ab, bc, ca])])
        pending = nxt
    for t in pending:
        if np.linalg.norm(t.mean(axis=0) - center) <= radius:
            acc += _polygon_area(list(t))
    return acc
