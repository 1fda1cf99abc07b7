import math

import numpy as np
import pytest

from platefit import GeometryConfig, GeometryError, MeshFileError, generate_strip_mesh
from platefit.mesh import load_mesh, save_mesh

from conftest import strip_config


def test_minimal_grid_counts():
    cfg = GeometryConfig(length=1.0, width=1.0, thickness=0.01, nx=1, ny=1,
                         test_point=(0.3, 0.3))
    mesh = generate_strip_mesh(cfg)
    assert mesh.n_nodes == 4
    assert mesh.n_triangles == 2
    assert len(mesh.clamped_edges) == 1


def test_strip_counts():
    mesh = generate_strip_mesh(strip_config(50, 10, accel=False))
    assert mesh.n_nodes == 561
    assert mesh.n_triangles == 1000


def test_accel_tagging_against_bruteforce():
    cfg = strip_config(50, 10)
    mesh = generate_strip_mesh(cfg)
    # oracle: per-triangle python loop over centroids
    tagged = []
    area = 0.0
    for t in range(mesh.n_triangles):
        p = mesh.nodes[mesh.triangles[t]]
        cx, cy = p.mean(axis=0)
        if math.hypot(cx - cfg.accel_center[0], cy - cfg.accel_center[1]) <= cfg.accel_radius:
            tagged.append(t)
            area += 0.5 * abs(
                (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
            )
    assert tagged, "footprint must capture at least one centroid"
    assert np.array_equal(mesh.accel_triangles, np.array(tagged))
    assert mesh.accel_area == pytest.approx(area, rel=1e-14)
    r2 = cfg.accel_radius**2
    assert math.pi * r2 / 3 <= mesh.accel_area <= 3 * math.pi * r2


def test_total_area_exact():
    for nx, ny in [(1, 1), (7, 3), (50, 10)]:
        cfg = strip_config(nx, ny, accel=False)
        mesh = generate_strip_mesh(cfg)
        total = mesh.triangle_areas().sum()
        assert total == pytest.approx(cfg.length * cfg.width, rel=1e-12)
        assert np.all(mesh.triangle_areas() > 0)


def test_boundary_normals_point_outward():
    mesh = generate_strip_mesh(strip_config(8, 4, accel=False))
    centroids = mesh.triangle_centroids()
    for e in mesh.boundary_edges:
        owners = np.flatnonzero((mesh.tri_edges == e).any(axis=1))
        assert owners.size == 1
        n = mesh.edge_normals[e]
        assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-14)
        assert np.dot(n, mesh.edge_midpoints[e] - centroids[owners[0]]) > 0


def test_edge_sharing_counts():
    mesh = generate_strip_mesh(strip_config(6, 3, accel=False))
    assert set(np.unique(mesh.edge_tri_count)) <= {1, 2}
    # Euler-style count: boundary edges of the rectangle
    n_boundary = 2 * (6 + 3)
    assert (mesh.edge_tri_count == 1).sum() == n_boundary


def test_generation_deterministic():
    cfg = strip_config(13, 4, accel=False)
    a = generate_strip_mesh(cfg)
    b = generate_strip_mesh(cfg)
    assert a.same_as(b)
    assert np.array_equal(a.edge_normals, b.edge_normals)


def test_clamped_side_configurable():
    for side, coord, value in [("right", 0, 0.1), ("left", 0, 0.0),
                               ("top", 1, 0.02), ("bottom", 1, 0.0)]:
        kw = dict(length=0.1, width=0.02, thickness=1e-3, nx=5, ny=2,
                  test_point=(0.05, 0.01), clamped_side=side)
        mesh = generate_strip_mesh(GeometryConfig(**kw))
        nodes = mesh.nodes[np.unique(mesh.edge_nodes[mesh.clamped_edges])]
        assert np.allclose(nodes[:, coord], value)


def test_rejects_bad_configs():
    with pytest.raises(GeometryError):
        generate_strip_mesh(GeometryConfig(length=0.1, width=0.02, thickness=1e-3,
                                           nx=0, ny=2, test_point=(0.05, 0.01)))
    with pytest.raises(GeometryError):
        GeometryConfig(length=0.1, width=0.0, thickness=1e-3, nx=2, ny=2,
                       test_point=(0.05, 0.01)).validate()
    with pytest.raises(GeometryError):
        GeometryConfig(length=0.1, width=0.02, thickness=1e-3, nx=2, ny=2,
                       test_point=(0.5, 0.01)).validate()


def test_rejects_unresolved_footprint():
    # 5 mm cells cannot put a centroid within 1 mm of this corner point
    cfg = GeometryConfig(length=0.1, width=0.02, thickness=1e-3, nx=20, ny=4,
                         test_point=(0.005, 0.015), accel_center=(0.005, 0.015),
                         accel_radius=1e-3, accel_mass=1e-3)
    with pytest.raises(GeometryError, match="too coarse"):
        generate_strip_mesh(cfg)


def test_save_load_roundtrip(tmp_path):
    for cfg in (strip_config(2, 2, accel=False), strip_config(50, 10)):
        mesh = generate_strip_mesh(cfg)
        path = tmp_path / "mesh.txt"
        save_mesh(mesh, path)
        again = load_mesh(path)
        assert again.same_as(mesh)
        assert np.array_equal(again.nodes, mesh.nodes)
        assert again.accel_area == mesh.accel_area
        assert again.n_triangles == mesh.n_triangles


def test_load_rejects_out_of_range_index(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("nodes\n0 0\n1 0\n0 1\ntriangles\n0 1 7\nclamped_edges\naccel_triangles\n")
    with pytest.raises(MeshFileError, match="line 6"):
        load_mesh(path)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("nodes\n0 zero\ntriangles\nclamped_edges\naccel_triangles\n")
    with pytest.raises(MeshFileError, match="line 2"):
        load_mesh(path)
