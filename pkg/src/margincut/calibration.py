"""Pinhole cameras, the frame graph and least-squares rigid alignment."""
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import RigidTransform, as_points, compose


class DegenerateConfigurationError(ValueError):
    pass


class FrameGraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Ideal pinhole camera; ``pose`` maps world coordinates to camera coordinates.

    Camera frame convention: +z along the optical axis, +x to the right (image
    columns), +y down (image rows).  ``distortion`` is an optional callable
    applied to normalised image coordinates; ``None`` means none.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    distortion: object = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, vfov_deg, width, height, pose=None):
        """Camera with square pixels, centred principal point and vertical FOV."""
        f = (height / 2.0) / np.tan(np.radians(vfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height),
                   pose if pose is not None else RigidTransform.identity())

    def with_pose(self, pose):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                           pose, self.distortion)

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return self.pose.inverse().translation.copy()

    def intrinsics(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project_camera(self, points_cam):
        """Project camera-frame points; rows with z <= 0 come back as NaN."""
        p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
        z = p[:, 2]
        front = z > 0
        uv = np.full((len(p), 2), np.nan)
        xn = p[front, 0] / z[front]
        yn = p[front, 1] / z[front]
        if self.distortion is not None:
            xn, yn = self.distortion(xn, yn)
        uv[front, 0] = self.fx * xn + self.cx
        uv[front, 1] = self.fy * yn + self.cy
        return uv

    def pixel_rays(self, u, v):
        """Camera-frame ray directions (z = 1) through continuous pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def in_bounds(self, uv):
        uv = np.asarray(uv)
        with np.errstate(invalid="ignore"):
            return (
                np.isfinite(uv).all(axis=-1)
                & (uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
            )


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-from-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up / np.linalg.norm(up), z)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    # image +y points "down", i.e. against the up vector
    x = np.cross(z, -up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes expressed in world
    return RigidTransform(R, -R @ eye)


def project(cam, p_world):
    """Continuous pixel coordinates of world points; NaN rows mark points behind the camera."""
    pts = np.asarray(p_world, dtype=np.float64)
    uv = cam.project_camera(cam.pose.apply(pts.reshape(-1, 3)))
    return uv.reshape(pts.shape[:-1] + (2,))


def back_project(cam, uv, depth):
    """World points at camera-frame depth ``depth`` along the rays through ``uv``."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if cam.distortion is not None:
        raise NotImplementedError("back-projection with lens distortion")
    rays = cam.pixel_rays(uv[:, 0], uv[:, 1]) * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    return cam.pose.inverse().apply(rays)


class FrameGraph:
    """Named coordinate frames joined by rigid transforms.

    An edge ``(a, b, T)`` stores ``T`` mapping coordinates in frame ``b`` into
    frame ``a``.  Inserting an edge between already-connected frames is only
    allowed if it agrees with the existing chain.
    """

    def __init__(self, trans_tol=1e-6, rot_tol=1e-8):
        self.trans_tol = trans_tol
        self.rot_tol = rot_tol
        self._adj = {}
        self._edges = []

    @property
    def frames(self):
        return sorted(self._adj)

    @property
    def edges(self):
        return list(self._edges)

    def add_frame(self, name):
        self._adj.setdefault(name, {})

    def add_edge(self, a, b, a_from_b):
        if a == b:
            raise FrameGraphError("edge endpoints must differ")
        if a in self._adj and b in self._adj and self.connected(a, b):
            existing = self.transform(a, b)
            d = compose(existing.inverse(), a_from_b)
            if (np.linalg.norm(d.translation) > self.trans_tol
                    or d.rotation_angle() > self.rot_tol):
                raise FrameGraphError(
                    f"edge {a}<-{b} violates cycle consistency "
                    f"({np.linalg.norm(d.translation):.3g} mm, {d.rotation_angle():.3g} rad)"
                )
        self.add_frame(a)
        self.add_frame(b)
        self._adj[a][b] = a_from_b
        self._adj[b][a] = a_from_b.inverse()
        self._edges.append((a, b, a_from_b))

    def _path(self, a, b):
        if a not in self._adj or b not in self._adj:
            return None
        prev = {b: None}
        queue = deque([b])
        while queue:
            f = queue.popleft()
            if f == a:
                break
            for g in sorted(self._adj[f]):
                if g not in prev:
                    prev[g] = f
                    queue.append(g)
        if a not in prev:
            return None
        path = [a]
        while path[-1] != b:
            path.append(prev[path[-1]])
        return path

    def connected(self, a, b):
        return a == b or self._path(a, b) is not None

    def transform(self, a, b):
        """Transform mapping coordinates in frame ``b`` to frame ``a``."""
        if a == b:
            return RigidTransform.identity()
        path = self._path(a, b)
        if path is None:
            raise FrameGraphError(f"frames {a!r} and {b!r} are not connected")
        T = RigidTransform.identity()
        # path = [a, ..., b]; accumulate a <- f1 <- ... <- b
        for u, w in zip(path[:-1], path[1:]):
            T = compose(T, self._adj[u][w])
        return T


def estimate_rigid_transform(src, dst):
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch).

    Returns ``(transform, rms)`` where ``rms`` is the root-mean-square residual.
    """
    A = as_points(src)
    B = as_points(dst)
    if A.shape != B.shape:
        raise ValueError("correspondence sets must have equal length")
    if len(A) < 3:
        raise DegenerateConfigurationError("need at least 3 correspondences")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    scale = max(np.abs(A0).max(), 1e-300)
    s = np.linalg.svd(A0 / scale, compute_uv=False)
    if s[1] < 1e-9 * max(s[0], 1e-300) or s[0] == 0:
        raise DegenerateConfigurationError("correspondences are collinear")
    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    T = RigidTransform(R, cb - R @ ca)
    rms = float(np.sqrt(np.mean(np.sum((T.apply(A) - B) ** 2, axis=1))))
    return T, rms


class RigidRegistration(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, Y)`` aligns ``X`` onto ``Y``; ``transform`` maps points."""

    def fit(self, X, y):
        X = check_array(X)
        y = check_array(y)
        self.transform_, self.rms_ = estimate_rigid_transform(X, y)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_array(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse().apply(check_array(X))


@dataclass
class ImageProjection:
    """Per-point continuous pixel coordinates plus visibility flags."""

    uv: np.ndarray
    in_front: np.ndarray
    in_bounds: np.ndarray


def map_cloud_to_image(cloud, graph, cam, camera_frame="nir"):
    """Transform the cloud into ``camera_frame`` through ``graph`` and project it.

    Points behind the camera or outside the image are flagged, never dropped.
    """
    T = graph.transform(camera_frame, cloud.frame)
    pc = T.apply(cloud.points)
    uv = cam.project_camera(pc)
    in_front = pc[:, 2] > 0
    return ImageProjection(uv, in_front, cam.in_bounds(uv))


def checkerboard_corners(rows=7, cols=10, square=10.0, pose=None):
    """World coordinates of the inner corners of a planar checkerboard."""
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    pts = np.stack([jj.ravel() * square, ii.ravel() * square, np.zeros(jj.size)], axis=1)
    pts -= pts.mean(axis=0)
    return pts if pose is None else pose.apply(pts)


def calibrate_cameras(cameras, board_points, noise_std=0.0, rng=None):
    """Register each camera to a shared checkerboard and return the frame graph.

    ``cameras`` maps frame names to CameraModel; each camera "observes" the
    board corners in its own frame (with optional Gaussian noise) and the
    camera-from-world edge is estimated by rigid alignment.  Returns the graph
    and a dict of per-camera RMS residuals.
    """
    rng = np.random.default_rng(rng)
    graph = FrameGraph()
    graph.add_frame("world")
    residuals = {}
    for name in sorted(cameras):
        cam = cameras[name]
        observed = cam.pose.apply(board_points)
        if noise_std > 0:
            observed = observed + rng.normal(0.0, noise_std, observed.shape)
        T, rms = estimate_rigid_transform(board_points, observed)
        graph.add_edge(name, "world", T)
        residuals[name] = rms
    return graph, residuals
