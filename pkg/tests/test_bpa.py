import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from margincut.bpa import (BallPivoting, ReconstructionError, ball_center, median_spacing,
                           reconstruct_surface)
from margincut.phantom import fibonacci_sphere
from margincut.planner import _walk_cycles

import oracles


def empty_ball_violations(mesh, rho, tol=1e-7):
    """Triangles for which no radius-rho ball through the vertices is empty."""
    P = mesh.vertices
    bad = []
    for k, (a, b, c) in enumerate(mesh.triangles):
        ok = False
        for centre in oracles.ball_centers(P[a], P[b], P[c], rho):
            inside = oracles.radius_query(centre, rho - tol, P) - {a, b, c}
            if not inside:
                ok = True
                break
        if not ok:
            bad.append(k)
    return bad


def test_single_triangle():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    m = reconstruct_surface(P, radius=1.0, normals=np.tile([0, 0, 1.0], (3, 1)))
    assert len(m.triangles) == 1
    assert m.face_normals()[0] @ [0, 0, 1] > 0


def test_radius_too_small_reports_spacing():
    P = np.random.default_rng(0).uniform(0, 10, size=(50, 3))
    with pytest.raises(ReconstructionError, match="try a radius near"):
        reconstruct_surface(P, radius=1e-3)
    with pytest.raises(ReconstructionError):
        reconstruct_surface(P[:2])
    with pytest.raises(ValueError):
        reconstruct_surface(P, radius=-1.0)


def test_ball_center_equidistant():
    rng = np.random.default_rng(1)
    a, b, c = (rng.normal(size=(20, 3)) for _ in range(3))
    ctr = ball_center(a, b, c, 5.0)
    ok = np.isfinite(ctr).all(axis=1)
    for p in (a, b, c):
        assert np.allclose(np.linalg.norm(ctr[ok] - p[ok], axis=1), 5.0)
    n = np.cross(b - a, c - a)
    assert np.all(np.einsum("ij,ij->i", ctr[ok] - a[ok], n[ok]) >= -1e-9)
    assert np.isnan(ball_center(a[:1], b[:1], c[:1], 1e-3)).all()


def test_plane_grid_has_no_holes():
    g = np.arange(12, dtype=float)
    x, y = np.meshgrid(g, g)
    P = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    m = reconstruct_surface(P, radius=1.5, viewpoint=[5.5, 5.5, 50])
    loops, open_ = _walk_cycles([tuple(e) for e in m.boundary_edges().tolist()], len(P))
    assert not open_ and len(loops) == 1
    ring = {i for i, p in enumerate(P) if p[0] in (0, 11) or p[1] in (0, 11)}
    assert set(loops[0]) == ring
    assert len(m.submesh_vertices()) == len(P)
    assert m.triangle_areas().sum() == pytest.approx(121.0)
    assert empty_ball_violations(m, 1.5) == []


def _orientation_consistent(mesh):
    directed = {}
    for t in mesh.triangles.tolist():
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            if (a, b) in directed:
                return False
            directed[(a, b)] = True
    return True


def test_small_sphere_closed_and_empty_ball():
    P = fibonacci_sphere(400) * 20.0
    rho = 2.0 * np.mean(np.sort(np.linalg.norm(P[:, None] - P[None], axis=2), axis=1)[:, 1])
    m = reconstruct_surface(P, radius=rho)
    assert len(m.boundary_edges()) == 0
    assert len(m.submesh_vertices()) >= 0.99 * len(P)
    assert _orientation_consistent(m)
    assert empty_ball_violations(m, rho) == []
    assert np.all(np.einsum("ij,ij->i", m.face_normals(), P[m.triangles].mean(axis=1)) > 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_empty_ball_on_random_patches(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 10, size=(120, 2))
    P = np.column_stack([xy, 0.3 * np.sin(xy[:, 0]) + rng.normal(0, 0.05, 120)])
    rho = 2.0 * median_spacing(P)
    try:
        m = reconstruct_surface(P, radius=rho, viewpoint=[5, 5, 100])
    except ReconstructionError:
        return
    assert empty_ball_violations(m, rho) == []
    assert _orientation_consistent(m)


def test_estimator():
    P = fibonacci_sphere(200) * 10.0
    est = BallPivoting().fit(P)
    assert est.radius_ == pytest.approx(2.0 * median_spacing(P))
    assert est.transform() is est.mesh_
    assert est.get_params() == {"radius": None, "radius_factor": 2.0}
