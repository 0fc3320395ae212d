"""Ball-pivoting surface reconstruction (single radius).

A ball of radius ``rho`` is placed on three points so that no other point
lies inside it; it is then rolled ("pivoted") around each free edge of the
growing front until it touches a new point, which closes the next triangle.
When the front is exhausted a new seed triangle is searched among the
untouched points.
"""
from collections import deque

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import TriangleMesh, as_points

TWO_PI = 2.0 * np.pi


class ReconstructionError(RuntimeError):
    pass


def median_spacing(points):
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def estimate_normals(points, k=12, viewpoint=None):
    """PCA normals from ``k`` nearest neighbours.

    Oriented towards ``viewpoint`` when given, otherwise away from the centroid.
    """
    pts = as_points(points)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nbr = pts[idx.reshape(len(pts), -1)]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    ref = (np.asarray(viewpoint, dtype=np.float64) - pts) if viewpoint is not None else pts - pts.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def ball_center(a, b, c, rho):
    """Centre of the radius-``rho`` ball through ``a, b, c`` on the side of (b-a)x(c-a).

    Works row-wise on ``(m, 3)`` arrays; rows without such a ball are NaN.
    """
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.einsum("ij,ij->i", n, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        # circumcentre offset from a
        off = (np.cross(n, ab) * np.einsum("ij,ij->i", ac, ac)[:, None]
               + np.cross(ac, n) * np.einsum("ij,ij->i", ab, ab)[:, None]) / (2.0 * nn[:, None])
        r2 = np.einsum("ij,ij->i", off, off)
        h = np.sqrt(rho * rho - r2)
        center = a + off + h[:, None] * n / np.sqrt(nn)[:, None]
    bad = ~(nn > 1e-18) | ~(r2 <= rho * rho)
    center[bad] = np.nan
    return center


class _Pivoter:
    def __init__(self, points, normals, rho):
        self.P = points
        self.N = normals
        self.rho = rho
        self.tree = cKDTree(points)
        n = len(points)
        self.used = np.zeros(n, dtype=bool)
        self.tried = np.zeros(n, dtype=bool)
        self.front_deg = np.zeros(n, dtype=np.int64)
        self.front = {}       # directed edge -> (opposite vertex, ball centre) or None when boundary
        self.queue = deque()
        self.face_edges = set()
        self.edge_faces = {}  # undirected edge -> face count
        self.triangles = []
        self.seed_cursor = 0

    # -- bookkeeping -------------------------------------------------------
    def _empty(self, center, exclude):
        inside = self.tree.query_ball_point(center, self.rho * (1.0 - 1e-9))
        return all(q in exclude for q in inside)

    def _can_add(self, tri):
        a, b, c = tri
        for x, y in ((a, b), (b, c), (c, a)):
            if (x, y) in self.face_edges:
                return False
            if self.edge_faces.get((min(x, y), max(x, y)), 0) >= 2:
                return False
        return True

    def _add_front(self, e, info):
        self.front[e] = info
        self.front_deg[list(e)] += 1
        if info is not None:
            self.queue.append(e)

    def _drop_front(self, e):
        del self.front[e]
        self.front_deg[list(e)] -= 1

    def _add_triangle(self, tri, center):
        a, b, c = tri
        self.triangles.append(tri)
        self.used[list(tri)] = True
        for x, y, opp in ((a, b, c), (b, c, a), (c, a, b)):
            self.face_edges.add((x, y))
            key = (min(x, y), max(x, y))
            self.edge_faces[key] = self.edge_faces.get(key, 0) + 1
            if (y, x) in self.front:
                self._drop_front((y, x))
            else:
                self._add_front((x, y), (opp, center))

    # -- seeding -----------------------------------------------------------
    def find_seed(self):
        P, N, rho = self.P, self.N, self.rho
        n = len(P)
        while self.seed_cursor < n:
            i = self.seed_cursor
            self.seed_cursor += 1
            if self.used[i] or self.tried[i]:
                continue
            self.tried[i] = True
            nbr = np.asarray(self.tree.query_ball_point(P[i], 2 * rho), dtype=np.int64)
            nbr = nbr[(nbr != i) & ~self.used[nbr]]
            if len(nbr) < 2:
                continue
            nbr = nbr[np.argsort(np.linalg.norm(P[nbr] - P[i], axis=1), kind="stable")][:16]
            jj, kk = np.triu_indices(len(nbr), 1)
            j, k = nbr[jj], nbr[kk]
            a = np.broadcast_to(P[i], (len(j), 3))
            nrm = np.cross(P[j] - a, P[k] - a)
            swap = np.einsum("ij,j->i", nrm, N[i]) < 0
            j, k = np.where(swap, k, j), np.where(swap, j, k)
            nrm[swap] *= -1
            ok = ((np.einsum("ij,ij->i", nrm, N[j]) > 0) & (np.einsum("ij,ij->i", nrm, N[k]) > 0))
            centers = ball_center(a, P[j], P[k], rho)
            ok &= np.isfinite(centers[:, 0])
            for t in np.nonzero(ok)[0]:
                tri = (i, int(j[t]), int(k[t]))
                if self._empty(centers[t], set(tri)) and self._can_add(tri):
                    return tri, centers[t]
        return None

    # -- pivoting ----------------------------------------------------------
    def pivot(self, i, j, opp, old_center):
        P, N, rho = self.P, self.N, self.rho
        mid = 0.5 * (P[i] + P[j])
        e = P[j] - P[i]
        L = np.linalg.norm(e)
        axis = e / L
        rc = np.sqrt(max(rho * rho - 0.25 * L * L, 0.0))
        cand = np.asarray(self.tree.query_ball_point(mid, rho + rc), dtype=np.int64)
        cand = cand[(cand != i) & (cand != j) & (cand != opp)]
        if not len(cand):
            return None
        m = len(cand)
        pj = np.broadcast_to(P[j], (m, 3))
        pi = np.broadcast_to(P[i], (m, 3))
        centers = ball_center(pj, pi, P[cand], rho)
        nrm = np.cross(pi - pj, P[cand] - pj)
        ok = np.isfinite(centers[:, 0])
        ok &= np.einsum("ij,ij->i", nrm, N[cand]) > 0
        ok &= np.einsum("ij,j->i", nrm, N[i] + N[j]) > 0
        if not ok.any():
            return None
        cand, centers = cand[ok], centers[ok]
        a = old_center - mid
        a -= axis * np.dot(a, axis)
        b = centers - mid
        b -= np.outer(b @ axis, axis)
        ang = np.arctan2(np.cross(a, b) @ axis, b @ a) % TWO_PI
        ang[ang > TWO_PI - 1e-7] = 0.0
        t = np.lexsort((cand, ang))[0]
        c = int(cand[t])
        # the first point hit must leave the ball empty, otherwise the edge is a boundary
        if self._empty(centers[t], {i, j, c}):
            return c, centers[t]
        return None

    def run(self):
        while True:
            if not self.queue:
                seed = self.find_seed()
                if seed is None:
                    break
                self._add_triangle(*seed)
                continue
            e = self.queue.popleft()
            info = self.front.get(e)
            if info is None:
                continue
            i, j = e
            res = self.pivot(i, j, *info)
            if res is not None:
                c, center = res
                tri = (j, i, c)
                internal = self.used[c] and self.front_deg[c] == 0
                if not internal and self._can_add(tri):
                    self._add_triangle(tri, center)
                    continue
            # no admissible pivot: freeze the edge as boundary
            self.front[e] = None
        return np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)


def reconstruct_surface(points, radius=None, normals=None, viewpoint=None):
    """Ball-pivoting mesh over ``points``.

    ``points`` may be an array or a LabeledPointCloud (its viewpoint orients
    the estimated normals).  The returned mesh keeps every input point as a
    vertex, in input order, so vertex ``i`` is point ``i``; points the ball
    never touched are simply unreferenced.
    """
    if hasattr(points, "points"):
        viewpoint = points.viewpoint if viewpoint is None else viewpoint
        points = points.points
    P = as_points(points)
    if len(P) < 3:
        raise ReconstructionError("ball pivoting needs at least 3 points")
    spacing = median_spacing(P)
    if radius is None:
        radius = 2.0 * spacing
    if not radius > 0:
        raise ValueError("ball radius must be positive")
    if normals is None:
        normals = estimate_normals(P, viewpoint=viewpoint)
    tris = _Pivoter(P, np.asarray(normals, dtype=np.float64), float(radius)).run()
    if not len(tris):
        raise ReconstructionError(
            f"ball radius {radius:g} mm seeds no triangle; median nearest-neighbour "
            f"spacing is {spacing:g} mm, try a radius near {2 * spacing:g} mm"
        )
    vn = np.asarray(normals, dtype=np.float64)
    return TriangleMesh(P, tris, vn / np.linalg.norm(vn, axis=1, keepdims=True))


class BallPivoting(BaseEstimator):
    """Estimator form of :func:`reconstruct_surface`; the mesh ends up in ``mesh_``."""

    def __init__(self, radius=None, radius_factor=2.0):
        self.radius = radius
        self.radius_factor = radius_factor

    def fit(self, X, y=None, viewpoint=None):
        pts = X.points if hasattr(X, "points") else X
        vp = getattr(X, "viewpoint", None) if viewpoint is None else viewpoint
        pts = as_points(pts)
        self.radius_ = self.radius if self.radius is not None else self.radius_factor * median_spacing(pts)
        self.mesh_ = reconstruct_surface(pts, self.radius_, viewpoint=vp)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "mesh_")
        return self.mesh_
