"""Rigid transforms, triangle meshes and nearest-neighbour queries.

All lengths are millimetres.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


def as_points(points):
    """Return ``points`` as a float64 ``(n, 3)`` array of finite coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must have finite coordinates")
    return pts


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        """Rotation of ``angle`` radians about ``axis`` (Rodrigues)."""
        k = np.asarray(axis, dtype=np.float64)
        k = k / np.linalg.norm(k)
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
        # re-orthonormalise so the constructor tolerance holds for any angle
        U, _, Vt = np.linalg.svd(R)
        return cls(U @ Vt, translation)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    def rotation_angle(self):
        """Angle of the rotation part in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return (
            f"RigidTransform(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()})"
        )


def apply_transform(t, p):
    return t.apply(p)


def compose(t1, t2):
    """Transform equivalent to applying ``t2`` first, then ``t1``."""
    R = t1.rotation @ t2.rotation
    U, _, Vt = np.linalg.svd(R)
    return RigidTransform(U @ Vt, t1.rotation @ t2.translation + t1.translation)


class SpatialIndex:
    """Immutable kd-tree over a point set."""

    def __init__(self, points):
        self.points = as_points(points).copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def _require_points(self):
        if self._tree is None:
            raise ValueError("spatial index is empty")

    def nearest(self, queries):
        """Distances and indices of the nearest indexed point for each query."""
        self._require_points()
        q = np.asarray(queries, dtype=np.float64)
        return self._tree.query(q)

    def nearest_distance(self, queries):
        return self.nearest(queries)[0]

    def radius_query(self, q, r):
        """Indices of points within the closed ball of radius ``r`` around ``q``."""
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        q = np.asarray(q, dtype=np.float64).reshape(3)
        # pad the kd-tree radius, then apply the exact closed-ball test
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-12) + 1e-12), dtype=np.intp)
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        return np.sort(cand[d <= r])

    def query_ball(self, queries, r):
        """Per-query index arrays of points within distance ``r`` (closed ball)."""
        if self._tree is None:
            return [np.empty(0, dtype=np.intp) for _ in range(len(queries))]
        q = np.asarray(queries, dtype=np.float64)
        out = []
        for qi, cand in zip(q, self._tree.query_ball_point(q, r * (1 + 1e-12) + 1e-12)):
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(self.points[cand] - qi, axis=1)
            out.append(np.sort(cand[d <= r]))
        return out


def nearest_distance(q, idx):
    return float(idx.nearest_distance(np.asarray(q, dtype=np.float64).reshape(3)))


def radius_query(q, r, idx):
    return set(idx.radius_query(q, r).tolist())


class TriangleMesh:
    """Indexed triangle surface with optional unit per-vertex normals."""

    def __init__(self, vertices, triangles, normals=None, check=True):
        self.vertices = as_points(vertices) if len(vertices) else np.empty((0, 3))
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if check:
            self.validate()

    def validate(self):
        n = len(self.vertices)
        tri = self.triangles
        if tri.size and (tri.min() < 0 or tri.max() >= n):
            raise ValueError("triangle index out of range")
        if tri.size and np.any(self.triangle_areas() <= 1e-12):
            raise ValueError("mesh contains degenerate (zero-area) triangles")
        if self.normals is not None:
            if self.normals.shape != self.vertices.shape:
                raise ValueError("normals must match vertex count")
            if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9):
                raise ValueError("normals must have unit length")

    def __len__(self):
        return len(self.triangles)

    def face_cross(self):
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        return np.cross(b - a, c - a)

    def triangle_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        cr = self.face_cross()
        return cr / np.linalg.norm(cr, axis=1, keepdims=True)

    def vertex_normals(self):
        """Area-weighted average of incident face normals, renormalised."""
        acc = np.zeros_like(self.vertices)
        cr = self.face_cross()  # |cross| = 2 * area, so this is area weighting
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], cr)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return acc / norm

    def edges(self):
        """Undirected edges as a sorted ``(m, 2)`` array with per-edge face counts."""
        tri = self.triangles
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def boundary_edges(self):
        uniq, counts = self.edges()
        return uniq[counts == 1]

    def vertex_adjacency(self):
        """List of neighbour sets, one per vertex."""
        adj = [set() for _ in range(len(self.vertices))]
        uniq, _ = self.edges()
        for a, b in uniq.tolist():
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def submesh_vertices(self):
        """Sorted indices of vertices referenced by at least one triangle."""
        return np.unique(self.triangles)
