import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demsolid import sampling as smp
from demsolid.errors import DegenerateAxis, EmptyRegion, ParseError, SamplingStalled
from demsolid.geometry import RegionSelector, TriangleMesh, box_mesh, box_union_mesh, icosphere, torus

EPS = 1e-6


def cantilever_cloud(counts=(11, 4, 4)):
    g = box_mesh((0, 0, 0), (1, 0.25, 0.25))
    c = smp.uniform_mesh_sample(g, counts)
    regions = [("fix", RegionSelector.box((-1, -1, -1), (EPS, 2, 2)), "dirichlet"),
               ("tip", RegionSelector.box((1 - EPS, -1, -1), (2, 2, 2)), "neumann")]
    return g, smp.classify_boundary(c, g, regions, free_surface=True)


def test_uniform_cube_exact():
    c = smp.uniform_mesh_sample(box_mesh(), (5, 5, 5))
    assert len(c) == 125
    assert c.volume_weight.sum() == pytest.approx(1.0, abs=1e-15)
    # corner nodes carry 1/8 of a cell, edge 1/4, face 1/2, interior 1
    cell = 0.25**3
    assert sorted(set(np.round(c.volume_weight / cell * 8).astype(int))) == [1, 2, 4, 8]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(2, 9),
       st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_lattice_endpoint_exactness(nx, ny, nz, a, b, c):
    lo = np.array([-0.3, 0.1, 2.0])
    hi = lo + np.array([a, b, c])
    axes = smp.lattice_axes(lo, hi, (nx, ny, nz))
    for ax, l, h, n in zip(axes, lo, hi, (nx, ny, nz)):
        assert len(ax) == n and ax[0] == l and ax[-1] == h
        assert np.all(np.diff(ax) > 0)


def test_lattice_too_coarse():
    with pytest.raises(SamplingStalled):
        smp.uniform_mesh_sample(torus(0.3, 0.05), (2, 2, 2))


def test_lattice_validation():
    with pytest.raises(ValueError):
        smp.lattice_axes(np.zeros(3), np.ones(3), (1, 4, 4))
    with pytest.raises(DegenerateAxis):
        smp.lattice_axes(np.zeros(3), np.array([1.0, 0.0, 1.0]), (3, 3, 3))


def test_uniform_tbar_aligned_weights():
    g = box_union_mesh([(0, 0, 0.8, 1, 0.2, 1), (0.4, 0, 0, 0.6, 0.2, 0.8)])
    c = smp.uniform_mesh_sample(g, (21, 5, 21))
    assert c.volume_weight.sum() == pytest.approx(g.volume, rel=1e-12)
    assert c.volume == pytest.approx(g.volume, rel=1e-12)


@pytest.mark.parametrize("shape", ["cube", "sphere"])
def test_random_sampler_volume(shape):
    g = box_mesh() if shape == "cube" else icosphere(0.5, (0.5, 0.5, 0.5), subdivisions=4)
    c = smp.random_sample(g, 20_000, seed=3)
    assert len(c) == 20_000 and np.all(g.contains(c.positions))
    # binomial standard error of the acceptance fraction, 5 sigma
    p = g.volume
    assert abs(c.volume_weight.sum() - p) <= 5 * np.sqrt(p * (1 - p) / 20_000) + 1e-12


def test_random_sampler_deterministic():
    g = icosphere(0.5, subdivisions=2)
    a = smp.random_sample(g, 500, seed=7)
    b = smp.random_sample(g, 500, seed=7)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.volume_weight, b.volume_weight)
    assert not np.array_equal(a.positions, smp.random_sample(g, 500, seed=8).positions)


def test_random_sampler_stalls_on_flat_or_sparse():
    flat = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]), [[0, 1, 2], [1, 3, 2]], orient=False)
    with pytest.raises((SamplingStalled, DegenerateAxis)):
        smp.random_sample(flat, 10)
    # a tiny sphere inside a big box hardly ever accepts a draw
    tiny = TriangleMesh(np.vstack([icosphere(1e-3, subdivisions=1).vertices, [[5, 5, 5], [-5, -5, -5]]]),
                        icosphere(1e-3, subdivisions=1).faces, orient=False)
    with pytest.raises(SamplingStalled):
        smp.random_sample(tiny, 10, stall_draws=50_000)


def test_poisson_min_distance_brute_force():
    g = box_mesh()
    c = smp.poisson_disc_sample(g, 0.2, seed=0)
    assert len(c) > 50
    assert smp.min_pairwise_distance(c.positions) >= 0.2
    assert np.all(g.contains(c.positions))
    assert c.volume_weight.sum() == pytest.approx(g.volume)


def test_poisson_deterministic_and_maximal_ish():
    g = icosphere(0.5, subdivisions=2)
    a = smp.poisson_disc_sample(g, 0.15, seed=1)
    b = smp.poisson_disc_sample(g, 0.15, seed=1)
    assert np.array_equal(a.positions, b.positions)
    # every point of a dense probe set is within 2r of some sample (no large holes)
    probe = smp.random_sample(g, 2000, seed=0).positions
    d = np.min(np.linalg.norm(probe[:, None] - a.positions[None], axis=-1), axis=1)
    assert d.max() < 2 * 0.15


def test_poisson_warns_for_coarse_radius():
    with pytest.warns(UserWarning):
        smp.poisson_disc_sample(box_mesh((0, 0, 0), (1, 0.2, 1)), 0.15, seed=0)


def test_poisson_more_near_surface_than_uniform():
    g = torus(0.3, 0.12, n_major=48, n_minor=24)
    p = smp.poisson_disc_sample(g, 0.05, seed=0)
    # lattice with about the same particle count
    h = np.cbrt(g.volume / len(p))
    u = smp.uniform_mesh_sample(g, tuple(int(round(e / h)) + 1 for e in g.bounds[1] - g.bounds[0]))
    assert 0.7 < len(u) / len(p) < 1.3
    d = 0.02
    assert smp.near_surface_fraction(p, g, d) > smp.near_surface_fraction(u, g, d)


def test_classification_cantilever():
    g, c = cantilever_cloud()
    assert c.n_dirichlet == 16 and c.region_mask("fix").sum() == 16
    tip = c.region_mask("tip")
    assert tip.sum() == 16
    np.testing.assert_allclose(c.normals[tip], np.tile([1.0, 0, 0], (16, 1)))
    np.testing.assert_allclose(c.area_weight[tip].sum(), 0.0625 + 8 * EPS * 0.25 / 2, rtol=1e-12)
    free = c.region_mask("free")
    assert np.all(np.isclose(np.linalg.norm(c.normals[free], axis=1), 1.0))
    assert c.area_weight[free].sum() == pytest.approx(g.surface_area - c.regions[0].area - c.regions[1].area)
    # interior lattice nodes stay unlabeled
    assert c.n_domain == (9 * 2 * 2)
    # positions and weights are never modified
    raw = smp.uniform_mesh_sample(g, (11, 4, 4))
    assert np.array_equal(raw.positions, c.positions) and np.array_equal(raw.volume_weight, c.volume_weight)


def test_dirichlet_overrides_neumann():
    g = box_mesh()
    c = smp.uniform_mesh_sample(g, (5, 5, 5))
    regions = [("load", RegionSelector.box((-1, -1, -1), (2, 2, EPS)), "neumann"),
               ("fix", RegionSelector.box((-1, -1, -1), (EPS, 2, 2)), "dirichlet")]
    out = smp.classify_boundary(c, g, regions)
    edge = (np.abs(out.positions[:, 0]) < 1e-12) & (np.abs(out.positions[:, 2]) < 1e-12)
    assert np.all(out.labels[edge] == smp.DIRICHLET)
    assert np.allclose(out.normals[out.region_mask("load")], (0, 0, -1))


def test_empty_region_errors():
    g = box_mesh()
    c = smp.uniform_mesh_sample(g, (4, 4, 4))
    with pytest.raises(EmptyRegion):
        smp.classify_boundary(c, g, [("none", RegionSelector.box((5, 5, 5), (6, 6, 6)), "dirichlet")])
    same = RegionSelector.box((-1, -1, -1), (EPS, 2, 2))
    with pytest.raises(EmptyRegion):
        smp.classify_boundary(c, g, [("a", same, "neumann"), ("b", same, "dirichlet")])
    with pytest.raises(ValueError):
        smp.classify_boundary(c, g, [("a", same, "robin")])


def test_cloud_round_trip(tmp_path):
    _, c = cantilever_cloud()
    u = np.random.default_rng(0).standard_normal((len(c), 3))
    for ext in ("ply", "csv"):
        path = tmp_path / f"c.{ext}"
        (smp.save_cloud_ply if ext == "ply" else smp.save_cloud_csv)(c, path, displacements=u)
        back = smp.load_cloud(path)
        assert np.array_equal(back.positions, c.positions)
        assert np.array_equal(back.labels, c.labels) and np.array_equal(back.region, c.region)
        assert np.array_equal(back.volume_weight, c.volume_weight)
        assert np.array_equal(back.normals, c.normals)
    back = smp.load_cloud(tmp_path / "c.ply")
    assert [r.name for r in back.regions] == ["fix", "tip", "free"] and back.band == c.band


def test_load_cloud_errors(tmp_path):
    with pytest.raises(ParseError):
        smp.load_cloud(tmp_path / "nope.ply")
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n")
    with pytest.raises(ParseError):
        smp.load_cloud(tmp_path / "bad.ply")
