"""Ray-marched emission-absorption rendering of density grids, and particle splatting.

A ray ``r(s) = o + s d`` between ``near`` and ``far`` is cut into ``M`` equal
segments. Density and color are sampled at segment midpoints; the pixel is

    C = sum_i T_i (1 - exp(-sigma_i ds)) c_i + T_M * background,
    T_i = prod_{j < i} exp(-sigma_j ds).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RenderError
from .geometry.grid import DensityGrid


@dataclass
class Camera:
    """Orthographic or pinhole camera looking from ``position`` towards ``look_at``.

    ``extent`` is the full width of the orthographic view; ``fov`` the
    horizontal field of view in degrees for the pinhole model.
    """

    kind: str = "orthographic"
    position: tuple = (0.5, 0.5, -2.0)
    look_at: tuple = (0.5, 0.5, 0.5)
    up: tuple = (0.0, 1.0, 0.0)
    width: int = 64
    height: int = 64
    near: float = 0.0
    far: float = 5.0
    extent: float = 1.2
    fov: float = 40.0

    def __post_init__(self):
        if self.kind not in ("orthographic", "pinhole"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if not self.near < self.far:
            raise ValueError("camera needs near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    def basis(self):
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - pos
        if np.linalg.norm(fwd) == 0:
            raise ValueError("camera position and look_at coincide")
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("camera up vector is parallel to the view direction")
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return pos, fwd, right, up

    def rays(self):
        """Origins and unit directions, each ``(height, width, 3)``; row 0 is the top."""
        pos, fwd, right, up = self.basis()
        xs = ((np.arange(self.width) + 0.5) / self.width - 0.5)
        ys = (0.5 - (np.arange(self.height) + 0.5) / self.height)
        aspect = self.height / self.width
        X, Y = np.meshgrid(xs, ys)
        if self.kind == "orthographic":
            origins = pos + (X[..., None] * self.extent) * right + (Y[..., None] * self.extent * aspect) * up
            dirs = np.broadcast_to(fwd, origins.shape).copy()
        else:
            half = np.tan(np.radians(self.fov) / 2.0)
            dirs = fwd + (2 * X[..., None] * half) * right + (2 * Y[..., None] * half * aspect) * up
            dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
            origins = np.broadcast_to(pos, dirs.shape).copy()
        return origins, dirs


@dataclass
class RayMarchConfig:
    steps: int = 256
    background: tuple = (0.0, 0.0, 0.0)
    default_color: tuple = (1.0, 1.0, 1.0)
    check_transmittance: bool = True

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("ray marching needs at least 2 steps")


def render(grid: DensityGrid, cam: Camera, cfg: RayMarchConfig | None = None, return_transmittance=False):
    """Render ``grid`` into an ``(height, width, 3)`` image in ``[0, 1]``.

    ``return_transmittance=True`` also returns the final per-pixel
    transmittance; ``"profile"`` returns it after every step instead, shaped
    ``(height, width, steps)``.
    """
    cfg = RayMarchConfig() if cfg is None else cfg
    profile = [] if return_transmittance == "profile" else None
    origins, dirs = cam.rays()
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    ds = (cam.far - cam.near) / cfg.steps
    default = np.asarray(cfg.default_color, dtype=np.float64)
    color = np.zeros((len(o), 3))
    T = np.ones(len(o))
    last = T.copy()
    for i in range(cfg.steps):
        s = cam.near + (i + 0.5) * ds
        pts = o + s * d
        sigma = grid.sample(pts)
        alpha = 1.0 - np.exp(-sigma * ds)
        c = grid.sample(pts, channel="rgb") if grid.rgb is not None else default
        color += (T * alpha)[:, None] * c
        T = T * (1.0 - alpha)
        if cfg.check_transmittance and np.any(T > last):
            raise RenderError("transmittance increased along a ray")
        last = T
        if profile is not None:
            profile.append(T)
    color += T[:, None] * np.asarray(cfg.background, dtype=np.float64)
    image = np.clip(color, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    if profile is not None:
        return image, np.stack(profile, axis=-1).reshape(cam.height, cam.width, cfg.steps)
    if return_transmittance:
        return image, T.reshape(cam.height, cam.width)
    return image


def write_ppm(image, path):
    """Binary PPM (P6), 8 bits per channel, rounding to nearest."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise RenderError(f"image must be (h, w, 3), got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise RenderError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / maxval


@dataclass
class SplatResult:
    grid: DensityGrid
    out_of_bounds: int = 0
    mass: float = 0.0
    info: dict = field(default_factory=dict)


def splat_particles(positions, displacements, template: DensityGrid, density=None, volume_weight=None, colors=None):
    """Scatter particle mass trilinearly onto the nodes of ``template``.

    A particle at ``X + u`` carries mass ``density * volume_weight`` which is
    spread over the 8 surrounding nodes with trilinear weights; dividing by
    the node control volume ``spacing^3`` turns accumulated mass back into a
    density. Particles outside the lattice are dropped and counted.
    """
    X = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    u = np.zeros_like(X) if displacements is None else np.asarray(displacements, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise RenderError("displacements must be finite")
    n = len(X)
    rho = np.ones(n) if density is None else np.broadcast_to(np.asarray(density, dtype=np.float64), (n,))
    vol = np.full(n, template.spacing**3) if volume_weight is None else np.asarray(volume_weight, dtype=np.float64)
    mass = rho * vol
    P = X + u
    dims = np.array(template.dims)
    g = (P - template.origin) / template.spacing
    inside = np.all((g >= 0) & (g <= dims - 1), axis=1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    acc = np.zeros(int(np.prod(dims)))
    rgb_acc = np.zeros((acc.size, 3)) if colors is not None else None
    cols = None if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
        idx = i0 + c
        flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), tuple(dims))
        wm = np.where(inside, w * mass, 0.0)
        # bincount sums in index order, so the result does not depend on threading
        acc += np.bincount(flat, weights=wm, minlength=acc.size)
        if rgb_acc is not None:
            for ch in range(3):
                rgb_acc[:, ch] += np.bincount(flat, weights=wm * cols[:, ch], minlength=acc.size)
    sigma = (acc / template.spacing**3).reshape(tuple(dims))
    rgb = None
    if rgb_acc is not None:
        rgb = np.where(acc[:, None] > 0, rgb_acc / np.where(acc > 0, acc, 1.0)[:, None], 0.0).reshape(tuple(dims) + (3,))
    grid = DensityGrid(sigma, template.origin.copy(), template.spacing, rgb)
    return SplatResult(grid, int(np.sum(~inside)), float(acc.sum()), {"scattered_mass": float(mass[inside].sum())})
