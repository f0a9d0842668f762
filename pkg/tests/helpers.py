"""Scene builders shared by the solver tests."""
import numpy as np

from demsolid import sampling as smp
from demsolid.geometry import RegionSelector, box_mesh
from demsolid.neural_field import DisplacementField

EPS = 1e-6


def left(x0=0.0):
    return RegionSelector.box((-1, -1, -1), (x0 + EPS, 2, 2))


def right(x1=1.0):
    return RegionSelector.box((x1 - EPS, -1, -1), (2, 2, 2))


def cube_cloud(n=5, regions=(), free_surface=False):
    g = box_mesh()
    c = smp.uniform_mesh_sample(g, (n, n, n))
    if regions:
        c = smp.classify_boundary(c, g, list(regions), free_surface=free_surface)
    return g, c


def beam_cloud(counts=(11, 4, 4), free_surface=True):
    g = box_mesh((0, 0, 0), (1, 0.25, 0.25))
    c = smp.uniform_mesh_sample(g, counts)
    c = smp.classify_boundary(c, g, [("clamp", left(), "dirichlet"), ("tip", right(), "neumann")],
                              free_surface=free_surface)
    return g, c


def affine_field(G, c=(0.0, 0.0, 0.0), bounds=((0, 0, 0), (1, 1, 1))):
    """Exact ``u(X) = G X + c`` as a network with no hidden layer."""
    f = DisplacementField((3, 3), bounds=bounds)
    G = np.asarray(G, dtype=np.float64)
    f.weights[0] = G / f.scale[None, :]
    f.biases[0] = G @ f.center + np.asarray(c, dtype=np.float64)
    return f
