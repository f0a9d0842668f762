"""Solid geometry: triangle meshes, density grids, region selectors."""
from .grid import DensityGrid, analytic_grid, default_iso, marching_cubes, smooth_sphere_density, voxelize
from .io import MeshIndexError, load_mesh, save_mesh, save_obj, save_ply
from .mesh import TriangleMesh, point_triangle_distance
from .regions import RegionSelector
from .shapes import box_mesh, box_union_mesh, icosphere, torus


def contains(mesh, p):
    return mesh.contains(p)


def nearest_surface(mesh, p):
    return mesh.nearest_surface(p)


__all__ = [
    "DensityGrid", "MeshIndexError", "RegionSelector", "TriangleMesh", "analytic_grid", "box_mesh",
    "box_union_mesh", "contains", "default_iso", "icosphere", "load_mesh", "marching_cubes",
    "nearest_surface", "point_triangle_distance", "save_mesh", "save_obj", "save_ply",
    "smooth_sphere_density", "torus", "voxelize",
]
