"""Regular density voxel grids, their file format, and isosurface extraction."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptySurface, ParseError
from .mesh import TriangleMesh, weld


@dataclass
class DensityGrid:
    """Volume density sampled at the nodes of a regular lattice.

    Node ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)``. ``sigma`` has
    shape ``dims``; the optional ``rgb`` has shape ``dims + (3,)``.
    """

    sigma: np.ndarray
    origin: np.ndarray
    spacing: float
    rgb: np.ndarray | None = None

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = float(self.spacing)
        if self.sigma.ndim != 3 or min(self.sigma.shape) < 2:
            raise ValueError(f"sigma must be 3-D with every dimension >= 2, got {self.sigma.shape}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if np.any(self.sigma < 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and non-negative")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64)
            if self.rgb.shape != self.sigma.shape + (3,):
                raise ValueError(f"rgb must have shape {self.sigma.shape + (3,)}")

    @property
    def dims(self):
        return tuple(self.sigma.shape)

    @property
    def bounds(self):
        return np.stack([self.origin, self.origin + self.spacing * (np.array(self.dims) - 1)])

    def node_positions(self):
        axes = [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.dims)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def empty_like(self, with_rgb=None):
        with_rgb = self.rgb is not None if with_rgb is None else with_rgb
        return DensityGrid(np.zeros(self.dims), self.origin.copy(), self.spacing,
                           np.zeros(self.dims + (3,)) if with_rgb else None)

    def sample(self, points, channel="sigma"):
        """Trilinear interpolation; zero outside the lattice."""
        data = self.sigma if channel == "sigma" else self.rgb
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = (P - self.origin) / self.spacing
        dims = np.array(self.dims)
        valid = np.all((g >= 0) & (g <= dims - 1), axis=1)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
        f = np.clip(g - i0, 0.0, 1.0)
        out_shape = (len(P),) + data.shape[3:]
        out = np.zeros(out_shape)
        for corner in np.ndindex(2, 2, 2):
            c = np.array(corner)
            w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
            idx = i0 + c
            vals = data[idx[:, 0], idx[:, 1], idx[:, 2]]
            out += (w.reshape((-1,) + (1,) * (vals.ndim - 1))) * vals
        out[~valid] = 0.0
        return out

    # -- file format ---------------------------------------------------------
    def save(self, path):
        nx, ny, nz = self.dims
        channels = 1 if self.rgb is None else 4
        header = (
            f"dims {nx} {ny} {nz}\n"
            f"origin {float(self.origin[0])!r} {float(self.origin[1])!r} {float(self.origin[2])!r}\n"
            f"spacing {float(self.spacing)!r}\n"
            f"channels {channels}\n\n"
        )
        # x-fastest: Fortran order over (i, j, k)
        sigma = self.sigma.reshape(-1, order="F")
        if channels == 1:
            data = sigma
        else:
            rgb = self.rgb.reshape(-1, 3, order="F")
            data = np.column_stack([sigma, rgb]).reshape(-1)
        Path(path).write_bytes(header.encode("ascii") + data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        marker = raw.find(b"\n\n")
        if marker < 0:
            raise ParseError("density grid header must end with a blank line")
        fields = {}
        for line in raw[:marker].decode("ascii", errors="replace").splitlines():
            parts = line.split()
            if parts:
                fields[parts[0]] = parts[1:]
        try:
            nx, ny, nz = (int(v) for v in fields["dims"])
            origin = [float(v) for v in fields["origin"]]
            spacing = float(fields["spacing"][0])
            channels = int(fields.get("channels", ["1"])[0])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad density grid header: {exc}") from None
        if channels not in (1, 4):
            raise ParseError(f"channels must be 1 or 4, got {channels}")
        data = np.frombuffer(raw[marker + 2:], dtype="<f4").astype(np.float64)
        expected = nx * ny * nz * channels
        if data.size != expected:
            raise ParseError(f"density grid payload has {data.size} floats, expected {expected}")
        data = data.reshape(-1, channels)
        sigma = data[:, 0].reshape((nx, ny, nz), order="F")
        rgb = data[:, 1:].reshape((nx, ny, nz, 3), order="F") if channels == 4 else None
        return cls(sigma, origin, spacing, rgb)


def default_iso(grid: DensityGrid) -> float:
    return 0.5 * float(grid.sigma.max())


def marching_cubes(grid: DensityGrid, iso: float | None = None) -> TriangleMesh:
    """Triangulate the ``sigma == iso`` level set with outward normals.

    Vertices are linearly interpolated along voxel edges; coincident vertices
    are merged so closed level sets give watertight meshes.
    """
    from skimage.measure import marching_cubes as _mc

    iso = default_iso(grid) if iso is None else float(iso)
    lo, hi = float(grid.sigma.min()), float(grid.sigma.max())
    if not (lo < iso < hi):
        raise EmptySurface(f"iso value {iso} does not cross the density range [{lo}, {hi}]")
    verts, faces, _, _ = _mc(grid.sigma, level=iso, spacing=(grid.spacing,) * 3, method="lorensen",
                             allow_degenerate=False)
    if len(faces) == 0:
        raise EmptySurface(f"no voxel edge crosses iso value {iso}")
    verts, faces = weld(verts + grid.origin, faces)
    mesh = TriangleMesh(verts, faces, orient=False)
    if mesh.signed_volume < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1], orient=False)
    return mesh


def voxelize(geometry, origin, spacing, dims, value=1.0) -> DensityGrid:
    """Density grid equal to ``value`` at nodes inside ``geometry`` and 0 elsewhere."""
    grid = DensityGrid(np.zeros(tuple(dims)), origin, spacing)
    pts = grid.node_positions().reshape(-1, 3)
    grid.sigma = np.where(geometry.contains(pts), value, 0.0).reshape(grid.dims)
    return grid


def analytic_grid(fn, lo, hi, n) -> DensityGrid:
    """Sample a density function ``fn(points) -> sigma`` on an ``n^3`` lattice over ``[lo, hi]^3``."""
    spacing = (hi - lo) / (n - 1)
    grid = DensityGrid(np.zeros((n, n, n)), (lo, lo, lo), spacing)
    pts = grid.node_positions().reshape(-1, 3)
    grid.sigma = np.asarray(fn(pts), dtype=np.float64).reshape(grid.dims)
    return grid


def smooth_sphere_density(center, radius, width):
    """Density near 1 inside the sphere and 0 outside, with a tanh shell of the given width."""
    center = np.asarray(center, dtype=np.float64)

    def fn(points):
        r = np.linalg.norm(points - center, axis=-1)
        return 0.5 * (1.0 - np.tanh((r - radius) / width))

    return fn
