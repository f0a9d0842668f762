"""Scene pipeline: geometry -> particles -> solver -> renders, with stage-tagged failures."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dem, fem, pinn
from . import sampling as smp
from .config import SceneConfig, resolved
from .errors import DemSolidError, RenderError
from .geometry import DensityGrid, RegionSelector, TriangleMesh, box_mesh, box_union_mesh, load_mesh, save_mesh
from .geometry.grid import marching_cubes
from .material import MaterialParams
from .neural_field import DisplacementField
from .renderer import Camera, RayMarchConfig, render, splat_particles, write_ppm

STAGES = ("geometry", "sample", "solve", "render")
EXIT_CODES = {"config": 2, "geometry": 3, "sampling": 4, "solve": 5, "render": 6}


class StageError(Exception):
    """A failure inside one pipeline stage; ``code`` is the process exit status."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, DemSolidError) and cause.stage == "config":
            self.code = EXIT_CODES["config"]
        else:
            self.code = EXIT_CODES[stage]


class _stage:
    def __init__(self, name, timings=None, key=None):
        self.name = name
        self.timings = timings
        self.key = key

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.timings is not None and self.key:
            self.timings[self.key] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# -- stage helpers -------------------------------------------------------------------
def build_geometry(cfg: SceneConfig):
    """Return ``(mesh, grid)``; ``grid`` is the source density for grid scenes."""
    g = cfg.geometry
    if g.type == "mesh":
        return load_mesh(g.path), None
    if g.type == "grid":
        grid = DensityGrid.load(g.path)
        return marching_cubes(grid, g.iso), grid
    if g.type == "box":
        return box_mesh(g.lo, g.hi), None
    return box_union_mesh(g.boxes), None


def selector_from_config(sel) -> RegionSelector:
    if sel.kind == "box":
        return RegionSelector.box(sel.lo, sel.hi)
    if sel.kind == "sphere":
        return RegionSelector.sphere(sel.center, sel.radius)
    return RegionSelector.faces(sel.face_ids)


def sample_cloud(cfg: SceneConfig, mesh: TriangleMesh):
    s = cfg.sampling
    if s.method == "uniform":
        cloud = smp.uniform_mesh_sample(mesh, s.counts)
    elif s.method == "poisson":
        cloud = smp.poisson_disc_sample(mesh, s.radius, k=s.attempts, seed=cfg.seed, max_particles=s.max_particles)
    else:
        cloud = smp.random_sample(mesh, s.n, seed=cfg.seed)
        # rejection sampling has no lattice spacing: use the mean particle spacing
        cloud.band = smp.POISSON_BAND * (cloud.volume / len(cloud)) ** (1.0 / 3.0)
    regions = [(r.name, selector_from_config(r.selector), r.kind) for r in cfg.regions]
    return smp.classify_boundary(cloud, mesh, regions, band=s.band, free_surface=s.free_surface)


def material_of(cfg: SceneConfig) -> MaterialParams:
    return MaterialParams(cfg.material.young_modulus, cfg.material.poisson_ratio)


def _loads(cfg: SceneConfig):
    tractions = {r.name: r.value for r in cfg.regions if r.kind == "neumann"}
    dirichlet = {r.name: r.value for r in cfg.regions if r.kind == "dirichlet"}
    return tractions, dirichlet


def make_field(cfg: SceneConfig, cloud) -> DisplacementField:
    net = cfg.solver.network
    seed = cfg.seed if net.seed is None else net.seed
    return DisplacementField((3, *net.hidden, 3), bounds=cloud.bounds, seed=seed)


def _optimizer(settings) -> dem.OptimizerConfig:
    return dem.OptimizerConfig(epochs=settings.epochs, lr=settings.lr, lr_final=settings.lr_final, tol=settings.tol,
                               window=settings.window, load_steps=settings.load_steps, refine_iters=settings.refine_iters,
                               refine_history=settings.refine_history)


def solve_dem(cfg: SceneConfig, cloud):
    tractions, dirichlet = _loads(cfg)
    problem = dem.DemProblem(cloud, material_of(cfg), np.array(cfg.body_force), tractions, dirichlet,
                             cfg.solver.dem.boundary_weight, cfg.material.on_inverted)
    field_ = make_field(cfg, cloud)
    return dem.train(problem, field_, _optimizer(cfg.solver.dem))


def solve_pinn(cfg: SceneConfig, cloud):
    tractions, dirichlet = _loads(cfg)
    p = cfg.solver.pinn
    problem = pinn.PinnProblem(cloud, material_of(cfg), np.array(cfg.body_force), tractions, dirichlet,
                               p.boundary_weight, cfg.material.on_inverted, p.residual_weight, p.traction_weight)
    field_ = make_field(cfg, cloud)
    return pinn.pinn_train(problem, field_, _optimizer(p))


def predict_points(cloud, n, seed):
    """Deterministic prediction batch: the cloud tiled and jittered to ``n`` points."""
    rng = np.random.default_rng(seed)
    reps = int(np.ceil(n / len(cloud)))
    X = np.tile(cloud.positions, (reps, 1))[:n]
    lo, hi = cloud.bounds
    return np.clip(X + 1e-3 * (hi - lo) * rng.standard_normal(X.shape), lo, hi)


def default_camera(cfg: SceneConfig, lo, hi) -> Camera:
    c = cfg.render.camera
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))
    look = np.array(c.look_at) if c.look_at is not None else center
    pos = np.array(c.position) if c.position is not None else center + np.array([0.0, -2.0, 0.0]) * diag
    dist = float(np.linalg.norm(look - pos))
    near = c.near if c.near is not None else max(dist - diag, 0.0)
    far = c.far if c.far is not None else dist + diag
    extent = c.extent if c.extent is not None else 1.1 * diag
    return Camera(c.kind, tuple(pos), tuple(look), c.up, c.width, c.height, near, far, extent, c.fov)


def render_pair(cfg: SceneConfig, cloud, u):
    """Splat the cloud before and after deformation and ray-march both grids."""
    r = cfg.render
    lo, hi = cloud.bounds
    pad = r.padding * float(np.max(hi - lo))
    lo, hi = lo - pad, hi + pad
    spacing = r.spacing if r.spacing is not None else float(np.max(hi - lo)) / 48.0
    dims = tuple(int(d) for d in np.ceil((hi - lo) / spacing).astype(int) + 1)
    template = DensityGrid(np.zeros(dims), lo, spacing)
    cam = default_camera(cfg, lo + pad, hi - pad)
    rcfg = RayMarchConfig(steps=r.steps, background=r.background, default_color=r.color)
    before = splat_particles(cloud.positions, None, template, r.density, cloud.volume_weight)
    after = splat_particles(cloud.positions, u, template, r.density, cloud.volume_weight)
    return render(before.grid, cam, rcfg), render(after.grid, cam, rcfg), after.out_of_bounds


# -- displacement IO -----------------------------------------------------------------
def save_displacements_csv(cloud, u, path):
    phi = cloud.positions + u
    rows = ["x,y,z,ux,uy,uz,px,py,pz"]
    rows += [",".join(f"{v:.17g}" for v in np.concatenate([X, d, p])) for X, d, p in zip(cloud.positions, u, phi)]
    Path(path).write_text("\n".join(rows) + "\n")


def load_displacements_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0:3], data[:, 3:6]


# -- pipeline ------------------------------------------------------------------------
@dataclass
class PipelineResult:
    artifacts: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    cloud: object = None
    mesh: object = None


def run_pipeline(cfg: SceneConfig, stage="render", out_dir=None) -> PipelineResult:
    """Run stages up to and including ``stage`` and write their artifacts."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    last = STAGES.index(stage)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = PipelineResult()
    timings = {}
    with _stage("geometry", timings, "geometry"):
        mesh, grid = build_geometry(cfg)
        res.mesh = mesh
        if grid is not None:
            save_mesh(mesh, out / "mesh.obj")
            res.artifacts["mesh"] = str(out / "mesh.obj")
    if last < 1:
        return res
    with _stage("sampling", timings, "sampling"):
        cloud = sample_cloud(cfg, mesh)
        res.cloud = cloud
        smp.save_cloud_ply(cloud, out / "cloud.ply")
        res.artifacts["cloud"] = str(out / "cloud.ply")
    if last < 2:
        return res
    methods = ["dem", "pinn"] if cfg.solver.method == "both" else [cfg.solver.method]
    u_main = None
    for method in methods:
        tag = "" if method == methods[0] else f"_{method}"
        with _stage("solve"):
            field_, report = (solve_dem if method == "dem" else solve_pinn)(cfg, cloud)
            X = predict_points(cloud, cfg.solver.predict_points, cfg.seed)
            dem.predict(field_, X, report)
            report.timings["sampling"] = timings.get("sampling")
            report.timings["geometry"] = timings.get("geometry")
            u = report.displacements
            field_.save(out / f"field{tag}.ckpt")
            save_displacements_csv(cloud, u, out / f"displacements{tag}.csv")
            smp.save_cloud_ply(cloud, out / f"displacements{tag}.ply", displacements=u)
            res.artifacts[f"field{tag}"] = str(out / f"field{tag}.ckpt")
            res.artifacts[f"displacements{tag}"] = str(out / f"displacements{tag}.csv")
            res.reports[method] = report
        if u_main is None:
            u_main = u
    if last >= 3 and cfg.render.enabled:
        with _stage("render"):
            t0 = time.perf_counter()
            img0, img1, dropped = render_pair(cfg, cloud, u_main)
            write_ppm(img0, out / "render_before.ppm")
            write_ppm(img1, out / "render_after.ppm")
            elapsed = time.perf_counter() - t0
            res.artifacts["render_before"] = str(out / "render_before.ppm")
            res.artifacts["render_after"] = str(out / "render_after.ppm")
            for report in res.reports.values():
                report.timings["render"] = elapsed
                report.timings["render_out_of_bounds"] = dropped
    for method, report in res.reports.items():
        report.config = {**report.config, "scene": resolved(cfg)}
        tag = "" if method == methods[0] else f"_{method}"
        report.to_json(out / f"report{tag}.json")
        res.artifacts[f"report{tag}"] = str(out / f"report{tag}.json")
    return res


def render_from_outputs(cfg: SceneConfig, out_dir=None):
    """Re-render before/after images from a previous run's cloud and displacements."""
    out = Path(out_dir or cfg.output_dir)
    with _stage("render"):
        cloud_path, disp_path = out / "cloud.ply", out / "displacements.csv"
        if not cloud_path.exists() or not disp_path.exists():
            raise RenderError(f"{out} lacks cloud.ply/displacements.csv; run 'solve' first")
        cloud = smp.load_cloud(cloud_path)
        X, u = load_displacements_csv(disp_path)
        if len(X) != len(cloud) or not np.allclose(X, cloud.positions):
            raise RenderError("displacement file does not match the particle cloud")
        img0, img1, _ = render_pair(cfg, cloud, u)
        write_ppm(img0, out / "render_before.ppm")
        write_ppm(img1, out / "render_after.ppm")
    return {"render_before": str(out / "render_before.ppm"), "render_after": str(out / "render_after.ppm")}


def compare_solvers(cfg: SceneConfig, out_dir=None):
    """Train both solvers on the same cloud and summarize their agreement."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("geometry"):
        mesh, _ = build_geometry(cfg)
    with _stage("sampling"):
        cloud = sample_cloud(cfg, mesh)
    lo, hi = cloud.bounds
    diag = float(np.linalg.norm(hi - lo))
    arms = {}
    for method, fn in (("dem", solve_dem), ("pinn", solve_pinn)):
        try:
            field_, report = fn(cfg, cloud)
        except Exception as exc:  # one arm failing must not abort the other
            arms[method] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        u = report.displacements
        arms[method] = {
            "epoch_time": report.epoch_time,
            "epochs": report.epochs,
            "refine_iterations": report.refine_iterations,
            "training_time": report.timings.get("training"),
            "final_losses": {k: v[-1] for k, v in report.loss_history.items() if v},
            "converged": report.converged,
            "max_displacement": float(np.max(np.linalg.norm(u, axis=1))),
            "max_displacement_over_diagonal": float(np.max(np.abs(u))) / diag,
            "counters": report.counters,
            "_u": u,
        }
    summary = {"arms": {}, "scene": resolved(cfg)}
    if all("_u" in a for a in arms.values()):
        ud, up = arms["dem"]["_u"], arms["pinn"]["_u"]
        scale = float(np.max(np.linalg.norm(ud, axis=1)))
        diff = np.linalg.norm(ud - up, axis=1)
        summary["agreement"] = {
            "mean_abs_difference": float(diff.mean()),
            "max_abs_difference": float(diff.max()),
            "relative_mean_difference": float(diff.mean() / scale) if scale > 0 else float(diff.mean()),
        }
    for k, a in arms.items():
        summary["arms"][k] = {kk: vv for kk, vv in a.items() if kk != "_u"}
    (out / "compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, {k: a.get("_u") for k, a in arms.items()}


def validate_cloud(cloud_path, geometry_path):
    """Metrics of a saved cloud against its source geometry."""
    cloud = smp.load_cloud(cloud_path)
    path = Path(geometry_path)
    if path.suffix.lower() in (".obj", ".ply"):
        mesh = load_mesh(path)
    else:
        mesh = marching_cubes(DensityGrid.load(path))
    band = cloud.band if cloud.band > 0 else 0.75 * (mesh.volume / max(len(cloud), 1)) ** (1.0 / 3.0)
    dist, _, _ = mesh.nearest_surface(cloud.positions)
    inside = mesh.contains(cloud.positions)
    wsum = float(cloud.volume_weight.sum())
    return {
        "count": len(cloud),
        "min_pairwise_distance": smp.min_pairwise_distance(cloud.positions),
        "boundary_band": band,
        "boundary_band_fraction": float(np.mean(dist <= band)),
        "inside_fraction": float(np.mean(inside)),
        "volume_weight_sum": wsum,
        "geometry_volume": mesh.volume,
        "volume_relative_error": abs(wsum - mesh.volume) / mesh.volume,
        "labels": {"domain": cloud.n_domain, "dirichlet": cloud.n_dirichlet, "neumann": cloud.n_neumann},
    }


def fem_mesh_from_config(cfg: SceneConfig):
    g = cfg.geometry
    res = cfg.oracle.resolution
    if g.type == "box":
        tm = fem.build_structured_tets(g.lo, g.hi, res)
    elif g.type == "boxes":
        b = np.asarray(g.boxes, dtype=np.float64)
        tm = fem.build_structured_tets(b[:, :3].min(axis=0), b[:, 3:].max(axis=0), res, boxes=b)
    else:
        raise ValueError("the FEM oracle handles 'box' and 'boxes' geometries only")
    dirichlet = [(selector_from_config(r.selector), r.value) for r in cfg.regions if r.kind == "dirichlet"]
    neumann = [(selector_from_config(r.selector), r.value) for r in cfg.regions if r.kind == "neumann"]
    return fem.apply_boundary_conditions(tm, dirichlet, neumann, cfg.body_force)


def run_oracle(cfg: SceneConfig, out_dir=None):
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("geometry"):
        tm = fem_mesh_from_config(cfg)
    with _stage("solve"):
        t0 = time.perf_counter()
        result = fem.fem_solve(tm, material_of(cfg), load_steps=cfg.oracle.load_steps)
        elapsed = time.perf_counter() - t0
        fem.save_nodal_csv(tm, result.displacement, out / "fem_nodes.csv")
    summary = {
        "nodes": tm.n_nodes, "tets": len(tm.tets), "volume": tm.total_volume,
        "energy": result.energy, "grad_norm": result.grad_norm, "iterations": result.iterations,
        "time": elapsed, "max_displacement": float(np.max(np.linalg.norm(result.displacement, axis=1))),
        "scene": resolved(cfg),
    }
    (out / "fem_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return tm, result, summary
