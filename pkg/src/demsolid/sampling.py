"""Particle discretization of a solid: random, Poisson-disc and lattice samplers,
boundary classification, and cloud import/export.

Every particle carries a reference-volume quadrature weight. Particles on a
Neumann region additionally carry an area weight and an outward normal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateAxis, EmptyRegion, ParseError, SamplingStalled

DOMAIN, DIRICHLET, NEUMANN = 0, 1, 2
LABEL_NAMES = {DOMAIN: "domain", DIRICHLET: "dirichlet", NEUMANN: "neumann"}
FREE_REGION = "free"

UNIFORM_BAND = 0.51
POISSON_BAND = 0.75


@dataclass
class Region:
    name: str
    kind: int
    area: float = 0.0
    count: int = 0


@dataclass
class ParticleCloud:
    positions: np.ndarray
    volume_weight: np.ndarray
    labels: np.ndarray = None
    region: np.ndarray = None
    area_weight: np.ndarray = None
    normals: np.ndarray = None
    regions: list = field(default_factory=list)
    method: str = ""
    band: float = 0.0
    volume: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.volume_weight = np.asarray(self.volume_weight, dtype=np.float64).reshape(n)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.uint8)
        if self.region is None:
            self.region = -np.ones(n, dtype=np.int64)
        if self.area_weight is None:
            self.area_weight = np.zeros(n)
        if self.normals is None:
            self.normals = np.zeros((n, 3))

    def __len__(self):
        return len(self.positions)

    @property
    def n_domain(self):
        return int(np.sum(self.labels == DOMAIN))

    @property
    def n_dirichlet(self):
        return int(np.sum(self.labels == DIRICHLET))

    @property
    def n_neumann(self):
        return int(np.sum(self.labels == NEUMANN))

    @property
    def bounds(self):
        return np.stack([self.positions.min(axis=0), self.positions.max(axis=0)])

    def region_index(self, name):
        for i, r in enumerate(self.regions):
            if r.name == name:
                return i
        raise KeyError(f"cloud has no region named {name!r}")

    def region_mask(self, name):
        return self.region == self.region_index(name)

    def copy(self):
        return ParticleCloud(
            self.positions.copy(), self.volume_weight.copy(), self.labels.copy(), self.region.copy(),
            self.area_weight.copy(), self.normals.copy(),
            [Region(r.name, r.kind, r.area, r.count) for r in self.regions],
            self.method, self.band, self.volume,
        )

    def summary(self):
        return {
            "count": len(self),
            "domain": self.n_domain,
            "dirichlet": self.n_dirichlet,
            "neumann": self.n_neumann,
            "volume_weight_sum": float(self.volume_weight.sum()),
            "regions": [r.__dict__ | {"kind": LABEL_NAMES[r.kind]} for r in self.regions],
        }


def _bbox(geometry):
    lo, hi = np.asarray(geometry.bounds, dtype=np.float64)
    for axis in range(3):
        if not hi[axis] > lo[axis]:
            raise DegenerateAxis(f"geometry bounding box is flat along axis {axis}")
    return lo, hi


# -- random -----------------------------------------------------------------
def random_candidates(lo, hi, U):
    """Map unit-cube draws onto the box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + np.asarray(U, dtype=np.float64) * (hi - lo)


def random_sample(geometry, n, seed=0, batch=20_000, stall_draws=1_000_000, stall_rate=1e-4):
    """Uniform particles by bounding-box rejection.

    Each particle's volume weight is the Monte-Carlo volume estimate (accepted
    fraction of draws times box volume) divided by ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        lo, hi = _bbox(geometry)
    except DegenerateAxis as exc:
        raise SamplingStalled(f"geometry has no interior: {exc}") from None
    rng = np.random.default_rng(seed)
    accepted = []
    n_acc = 0
    drawn = 0
    while n_acc < n:
        U = rng.random((batch, 3))
        pts = random_candidates(lo, hi, U)
        inside = geometry.contains(pts)
        hits = np.flatnonzero(inside)
        need = n - n_acc
        if len(hits) >= need:
            # count draws only up to the n-th acceptance
            drawn += hits[need - 1] + 1
            accepted.append(pts[hits[:need]])
            n_acc = n
            break
        drawn += batch
        accepted.append(pts[hits])
        n_acc += len(hits)
        if drawn >= stall_draws and n_acc < stall_rate * drawn:
            raise SamplingStalled(f"acceptance rate {n_acc / drawn:.2e} below {stall_rate:g} after {drawn} draws")
    positions = np.concatenate(accepted)
    volume = float(np.prod(hi - lo)) * n / drawn
    return ParticleCloud(positions, np.full(n, volume / n), method="random", volume=volume)


# -- Poisson disc -------------------------------------------------------------
def poisson_disc_sample(geometry, r, k=30, seed=0, max_particles=200_000):
    """Bridson dart throwing inside the solid.

    New candidates are drawn uniformly (by volume) from the spherical shell
    ``[r, 2r]`` around a randomly chosen active particle; the first candidate
    inside the solid and at least ``r`` from every accepted particle is kept.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    lo, hi = _bbox(geometry)
    if r > 0.5 * float(np.min(hi - lo)):
        warnings.warn("Poisson radius exceeds half the smallest bounding-box extent", stacklevel=2)
    rng = np.random.default_rng(seed)
    cell = r / np.sqrt(3.0)
    shape = np.maximum(np.ceil((hi - lo) / cell).astype(np.int64), 1)
    grid = -np.ones(tuple(shape), dtype=np.int64)

    def cell_of(p):
        return tuple(np.clip(((p - lo) / cell).astype(np.int64), 0, shape - 1))

    # seed particle
    first = None
    for _ in range(1000):
        pts = random_candidates(lo, hi, rng.random((256, 3)))
        inside = np.flatnonzero(geometry.contains(pts))
        if len(inside):
            first = pts[inside[0]]
            break
    if first is None:
        raise SamplingStalled("could not place a first particle inside the geometry")
    points = [first]
    grid[cell_of(first)] = 0
    active = [0]
    r2 = r * r
    while active and len(points) < max_particles:
        slot = int(rng.integers(len(active)))
        base = points[active[slot]]
        d = rng.standard_normal((k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rho = np.cbrt(r**3 + rng.random(k) * (8.0 * r**3 - r**3))
        cand = base + rho[:, None] * d
        in_box = np.all((cand >= lo) & (cand <= hi), axis=1)
        ok = np.zeros(k, dtype=bool)
        if in_box.any():
            ok[in_box] = geometry.contains(cand[in_box])
        placed = False
        for c in cand[ok]:
            ci = np.array(cell_of(c))
            sl = tuple(slice(max(ci[a] - 2, 0), min(ci[a] + 3, shape[a])) for a in range(3))
            neigh = grid[sl]
            neigh = neigh[neigh >= 0]
            if len(neigh):
                diff = np.asarray([points[j] for j in neigh]) - c
                if np.min(np.einsum("ij,ij->i", diff, diff)) < r2:
                    continue
            grid[tuple(ci)] = len(points)
            active.append(len(points))
            points.append(c)
            placed = True
            break
        if not placed:
            active[slot] = active[-1]
            active.pop()
    positions = np.array(points)
    volume = float(geometry.volume)
    return ParticleCloud(positions, np.full(len(positions), volume / len(positions)),
                         method="poisson", band=POISSON_BAND * r, volume=volume)


# -- uniform lattice ----------------------------------------------------------------
def lattice_axes(lo, hi, counts):
    axes = []
    for a, n in enumerate(counts):
        n = int(n)
        if n < 2:
            raise ValueError(f"lattice count along axis {a} must be >= 2, got {n}")
        if not hi[a] > lo[a]:
            raise DegenerateAxis(f"bounding box is flat along axis {a}")
        i = np.arange(n)
        # x_i = a + (i - 1)(b - a)/(N - 1) with 1-based i
        x = lo[a] + i * (hi[a] - lo[a]) / (n - 1)
        x[-1] = hi[a]
        axes.append(x)
    return axes


def uniform_mesh_sample(geometry, counts):
    """Tensor-product lattice over the bounding box, filtered by containment.

    A lattice node's volume weight is one eighth of the cell volume for each
    of its (up to eight) incident cells whose center lies inside the solid, so
    the weights sum to the inside-cell volume estimate and are exact for
    lattice-aligned boxes.
    """
    lo, hi = np.asarray(geometry.bounds, dtype=np.float64)
    axes = lattice_axes(lo, hi, counts)
    steps = np.array([(hi[a] - lo[a]) / (len(axes[a]) - 1) for a in range(3)])
    cell_volume = float(np.prod(steps))
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X, Y, Z], axis=-1)
    centers = 0.5 * (nodes[:-1, :-1, :-1] + nodes[1:, 1:, 1:])
    cell_in = geometry.contains(centers.reshape(-1, 3)).reshape(centers.shape[:3])
    weight = np.zeros(nodes.shape[:3])
    padded = np.pad(cell_in.astype(np.float64), 1)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                weight += padded[dx:dx + X.shape[0], dy:dy + X.shape[1], dz:dz + X.shape[2]]
    weight *= cell_volume / 8.0
    flat = nodes.reshape(-1, 3)
    inside = geometry.contains(flat)
    if not inside.any():
        raise SamplingStalled(f"no lattice node of counts {tuple(counts)} falls inside the geometry")
    positions = flat[inside]
    w = weight.reshape(-1)[inside]
    return ParticleCloud(positions, w, method="uniform", band=UNIFORM_BAND * float(steps.min()),
                         volume=float(cell_in.sum()) * cell_volume)


# -- boundary classification ---------------------------------------------------
def classify_boundary(cloud: ParticleCloud, geometry, regions, band=None, free_surface=False):
    """Label boundary particles from ``(name, selector, kind)`` triples.

    A particle joins a region when it lies within ``band`` of the surface and
    inside the selector. Dirichlet wins over Neumann where regions overlap.
    With ``free_surface=True`` remaining band particles form a traction-free
    Neumann region named ``"free"``.

    Positions and volume weights are never modified.
    """
    band = cloud.band if band is None else float(band)
    if band <= 0:
        raise ValueError("boundary band must be positive")
    out = cloud.copy()
    n = len(out)
    P = out.positions
    dist, _, _ = geometry.nearest_surface(P)
    eligible = dist <= band
    out.labels = np.zeros(n, dtype=np.uint8)
    out.region = -np.ones(n, dtype=np.int64)
    out.area_weight = np.zeros(n)
    out.normals = np.zeros((n, 3))
    out.regions = []

    parsed = []
    for name, selector, kind in regions:
        kind = _kind_code(kind)
        captured = eligible & selector.contains(P, mesh=geometry)
        if not captured.any():
            raise EmptyRegion(f"region {name!r} captures no boundary particles")
        parsed.append((name, selector, kind, captured))

    order = [p for p in parsed if p[2] == NEUMANN] + [p for p in parsed if p[2] == DIRICHLET]
    index = {p[0]: i for i, p in enumerate(parsed)}
    for name, selector, kind, captured in order:
        if kind == NEUMANN:
            captured = captured & (out.region < 0)
        out.labels[captured] = kind
        out.region[captured] = index[name]
    for name, selector, kind, _ in parsed:
        mask = out.region == index[name]
        if not mask.any():
            raise EmptyRegion(f"region {name!r} is fully overridden by another region")
        area = selector.area(geometry)
        out.regions.append(Region(name, kind, area, int(mask.sum())))
        if kind == NEUMANN:
            # prefer faces that lie inside the selector when a particle sits on an edge
            prio = selector.face_area_inside(geometry)
            _, normals, _ = geometry.nearest_surface(P[mask], priority=prio, tie_tol=1e-9 * geometry.diagonal)
            out.normals[mask] = normals
            out.area_weight[mask] = area / mask.sum()

    if free_surface:
        free = eligible & (out.region < 0)
        if free.any():
            taken = sum(r.area for r in out.regions)
            area = max(geometry.surface_area - taken, 0.0)
            idx = len(out.regions)
            out.labels[free] = NEUMANN
            out.region[free] = idx
            _, normals, _ = geometry.nearest_surface(P[free])
            out.normals[free] = normals
            out.area_weight[free] = area / free.sum()
            out.regions.append(Region(FREE_REGION, NEUMANN, area, int(free.sum())))
    return out


def _kind_code(kind):
    if isinstance(kind, (int, np.integer)):
        return int(kind)
    kind = str(kind).lower()
    if kind == "dirichlet":
        return DIRICHLET
    if kind == "neumann":
        return NEUMANN
    raise ValueError(f"boundary kind must be 'dirichlet' or 'neumann', got {kind!r}")


def near_surface_fraction(cloud, geometry, distance):
    dist, _, _ = geometry.nearest_surface(cloud.positions)
    return float(np.mean(dist <= distance))


def min_pairwise_distance(points):
    """Brute-force minimum distance between distinct points."""
    P = np.asarray(points, dtype=np.float64)
    if len(P) < 2:
        return np.inf
    best = np.inf
    for s in range(0, len(P), 512):
        d = np.linalg.norm(P[s:s + 512, None, :] - P[None, :, :], axis=-1)
        rows = np.arange(s, min(s + 512, len(P)))
        d[rows - s, rows] = np.inf
        best = min(best, float(d.min()))
    return best


# -- import / export ----------------------------------------------------------------
_COLUMNS = ["x", "y", "z", "label", "region", "weight", "area", "wx", "wy", "wz"]


def _rows(cloud, displacements):
    cols = [cloud.positions, cloud.labels[:, None], cloud.region[:, None],
            cloud.volume_weight[:, None], cloud.area_weight[:, None], cloud.normals]
    names = list(_COLUMNS)
    if displacements is not None:
        u = np.asarray(displacements, dtype=np.float64)
        cols += [u, cloud.positions + u]
        names += ["ux", "uy", "uz", "px", "py", "pz"]
    return names, np.column_stack(cols)


def _fmt(names, row):
    out = []
    for name, v in zip(names, row):
        out.append(str(int(v)) if name in ("label", "region") else f"{v:.17g}")
    return out


def save_cloud_ply(cloud, path, displacements=None):
    names, data = _rows(cloud, displacements)
    header = ["ply", "format ascii 1.0", f"comment method {cloud.method}",
              f"comment band {float(cloud.band)!r}", f"comment volume {float(cloud.volume)!r}"]
    for i, r in enumerate(cloud.regions):
        header.append(f"comment region {i} {r.name} {LABEL_NAMES[r.kind]} {float(r.area)!r} {r.count}")
    header.append(f"element vertex {len(cloud)}")
    for name in names:
        ptype = "uchar" if name == "label" else "int" if name == "region" else "double"
        header.append(f"property {ptype} {name}")
    header.append("end_header")
    body = [" ".join(_fmt(names, row)) for row in data]
    Path(path).write_text("\n".join(header + body) + "\n")


def save_cloud_csv(cloud, path, displacements=None):
    names, data = _rows(cloud, displacements)
    lines = [",".join(names)] + [",".join(_fmt(names, row)) for row in data]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path):
    path = Path(path)
    if not path.exists():
        raise ParseError(f"cloud file not found: {path}")
    text = path.read_text()
    meta = {"method": "", "band": 0.0, "volume": 0.0}
    regions = []
    if path.suffix.lower() == ".ply":
        from .geometry.io import read_ply_elements

        for line in text.splitlines():
            if line.startswith("end_header"):
                break
            parts = line.split()
            if parts[:2] == ["comment", "region"]:
                kind = {v: k for k, v in LABEL_NAMES.items()}[parts[4]]
                regions.append(Region(parts[3], kind, float(parts[5]), int(parts[6])))
            elif parts[:1] == ["comment"] and len(parts) >= 3 and parts[1] in meta:
                meta[parts[1]] = parts[2] if parts[1] == "method" else float(parts[2])
        cols = read_ply_elements(text)["vertex"]
    else:
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise ParseError("empty cloud CSV")
        names = lines[0].split(",")
        try:
            data = np.array([[float(v) for v in l.split(",")] for l in lines[1:]]).reshape(-1, len(names))
        except ValueError as exc:
            raise ParseError(f"bad cloud CSV: {exc}") from None
        cols = {n: data[:, i] for i, n in enumerate(names)}
    missing = [c for c in _COLUMNS if c not in cols]
    if missing:
        raise ParseError(f"cloud file lacks columns {missing}")
    cloud = ParticleCloud(
        np.column_stack([cols["x"], cols["y"], cols["z"]]),
        cols["weight"],
        cols["label"].astype(np.uint8),
        cols["region"].astype(np.int64),
        cols["area"],
        np.column_stack([cols["wx"], cols["wy"], cols["wz"]]),
        regions,
        str(meta["method"]),
        float(meta["band"]),
        float(meta["volume"]),
    )
    return cloud
