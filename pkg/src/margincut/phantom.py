"""Synthetic kidney/tumor phantoms and virtual depth / NIR cameras.

The kidney is a tessellated ellipsoid; the tumor is a sphere whose centre
sits below a chosen surface point so that a cap of height
``protrusion * radius`` sticks out of the kidney (an exophytic tumor).
Rendering is z-buffered ray casting through pixel centres.
"""
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import ConvexHull

from .data import IntensityImage, LabeledPointCloud, SegmentationMask, Tissue
from .geometry import TriangleMesh

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
MAX_COUNTS = 65535


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic phantom.

    ``tumor_polar_deg`` / ``tumor_azimuth_deg`` place the tumor on the
    ellipsoid via ``(a sin t cos p, b sin t sin p, c cos t)``; polar 0 is the
    top (+z) of the kidney.  ``tumor_radius`` is half the nominal tumor size.
    """

    semi_axes: tuple = (60.0, 40.0, 30.0)
    tumor_polar_deg: float = 0.0
    tumor_azimuth_deg: float = 0.0
    tumor_radius: float = 15.0
    protrusion: float = 0.7
    dye_concentration: float = 0.0031544977112233133
    density: float = 0.5
    seed: int = 0

    def __post_init__(self):
        axes = tuple(float(a) for a in self.semi_axes)
        object.__setattr__(self, "semi_axes", axes)
        if len(axes) != 3 or min(axes) <= 0:
            raise ValueError("kidney semi-axes must be three positive lengths")
        if not 0 < self.tumor_radius < min(axes):
            raise ValueError(
                f"tumor radius {self.tumor_radius} must be positive and below the "
                f"smallest kidney semi-axis {min(axes)}"
            )
        if not 0 < self.protrusion <= 1:
            raise ValueError(f"protrusion fraction {self.protrusion} must lie in (0, 1]")
        if not 0 <= self.dye_concentration <= 0.05:
            raise ValueError(f"dye concentration {self.dye_concentration} must lie in [0, 0.05]")
        if not self.density > 0:
            raise ValueError("tessellation density must be positive")

    def to_dict(self):
        d = asdict(self)
        d["semi_axes"] = list(self.semi_axes)
        return d


@dataclass(frozen=True)
class DyeModel:
    """Linear concentration-to-SBR model for negative staining.

    Healthy tissue emits ``(intercept + slope * c) * background_level``
    counts, tumor emits ``tumor_level`` and empty pixels ``background_level``.
    The defaults are a least-squares line through the day-1 measurements at
    0.38 %, 0.97 % and 2.04 % w/w dye.
    """

    slope: float = 300.16155910182175
    intercept: float = 5.167341048816082
    tumor_level: float = 5000.0
    background_level: float = 5000.0
    noise_std: float = 0.02

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("slope must be positive")
        if self.intercept < 0:
            raise ValueError("intercept must be non-negative")
        if self.background_level <= 0 or self.tumor_level < 0:
            raise ValueError("emission levels must be positive")
        if self.tumor_level > self.intercept * self.background_level:
            raise ValueError("tumor emission must stay below healthy emission for c > 0")
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")

    def sbr(self, concentration):
        return self.intercept + self.slope * concentration

    def healthy_level(self, concentration):
        return self.sbr(concentration) * self.background_level

    def concentration_for_sbr(self, sbr):
        c = (sbr - self.intercept) / self.slope
        if c < 0:
            raise ValueError(f"SBR {sbr} is below the model intercept")
        return c


@dataclass(eq=False)
class Scene:
    kidney: TriangleMesh
    tumor: TriangleMesh
    kidney_classes: np.ndarray
    tumor_classes: np.ndarray
    tumor_center: np.ndarray
    tumor_radius: float
    anchor: np.ndarray
    anchor_normal: np.ndarray
    spec: PhantomSpec = None

    @property
    def tumor_points(self):
        """Ground-truth tumor point set: every tumor-class vertex."""
        return np.concatenate([
            self.tumor.vertices[self.tumor_classes == Tissue.TUMOR],
            self.kidney.vertices[self.kidney_classes == Tissue.TUMOR],
        ])

    def combined(self):
        """Single mesh plus per-triangle tissue class, for rendering."""
        nk = len(self.kidney.vertices)
        verts = np.concatenate([self.kidney.vertices, self.tumor.vertices])
        tris = np.concatenate([self.kidney.triangles, self.tumor.triangles + nk])
        cls = np.concatenate([
            np.full(len(self.kidney.triangles), Tissue.HEALTHY, dtype=np.int64),
            np.full(len(self.tumor.triangles), Tissue.TUMOR, dtype=np.int64),
        ])
        return verts, tris, cls


def ellipsoid_area(a, b, c):
    p = 1.6075  # Knud Thomsen's approximation, < 1.1 % error
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def fibonacci_sphere(n, phase=0.0):
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE + phase
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def tessellate_ellipsoid(semi_axes, n, phase=0.0, center=(0.0, 0.0, 0.0)):
    """Closed, outward-oriented triangulation of an ellipsoid with ``n`` vertices."""
    unit = fibonacci_sphere(max(int(n), 12), phase)
    tri = ConvexHull(unit).simplices.astype(np.int64)
    a, b, c = unit[tri[:, 0]], unit[tri[:, 1]], unit[tri[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    verts = unit * np.asarray(semi_axes, dtype=np.float64) + np.asarray(center, dtype=np.float64)
    return TriangleMesh(verts, tri)


def ellipsoid_point(semi_axes, polar_deg, azimuth_deg):
    a, b, c = semi_axes
    t, p = np.radians(polar_deg), np.radians(azimuth_deg)
    pt = np.array([a * np.sin(t) * np.cos(p), b * np.sin(t) * np.sin(p), c * np.cos(t)])
    n = pt / np.asarray(semi_axes) ** 2
    return pt, n / np.linalg.norm(n)


def generate_phantom(spec):
    """Build the kidney and tumor meshes for ``spec``; deterministic in ``spec.seed``."""
    if not isinstance(spec, PhantomSpec):
        raise TypeError("spec must be a PhantomSpec")
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    axes = np.asarray(spec.semi_axes)
    n_kidney = int(np.ceil(spec.density * ellipsoid_area(*axes)))
    kidney = tessellate_ellipsoid(axes, n_kidney, phases[0])

    anchor, normal = ellipsoid_point(axes, spec.tumor_polar_deg, spec.tumor_azimuth_deg)
    r = spec.tumor_radius
    center = anchor - normal * r * (1.0 - spec.protrusion)
    n_tumor = int(np.ceil(spec.density * 4 * np.pi * r * r))
    tumor = tessellate_ellipsoid((r, r, r), n_tumor, phases[1], center)

    inside_tumor = np.linalg.norm(kidney.vertices - center, axis=1) < r
    kidney_classes = np.where(inside_tumor, Tissue.TUMOR, Tissue.HEALTHY).astype(np.int64)
    tumor_classes = np.full(len(tumor.vertices), Tissue.TUMOR, dtype=np.int64)
    return Scene(kidney, tumor, kidney_classes, tumor_classes, center, float(r),
                 anchor, normal, spec)


def inside_kidney(scene, points):
    axes = np.asarray(scene.spec.semi_axes if scene.spec else scene.kidney.vertices.max(axis=0))
    return np.sum((np.asarray(points) / axes) ** 2, axis=1) < 1.0


def _camera_at_resolution(cam, resolution):
    if resolution is None:
        return cam
    w, h = (int(resolution[0]), int(resolution[1]))
    sx, sy = w / cam.width, h / cam.height
    from .calibration import CameraModel

    return CameraModel(cam.fx * sx, cam.fy * sy, cam.cx * sx, cam.cy * sy, w, h,
                       cam.pose, cam.distortion)


def raycast(vertices_cam, triangles, cam, chunk=2_000_000):
    """First-hit ray cast of camera-frame triangles through every pixel centre.

    Returns ``(depth, tri_id)`` images; pixels without a hit have depth
    ``inf`` and id ``-1``.  Depth is the camera-frame z of the hit point.
    Triangles with a vertex at or behind the image plane are skipped.
    """
    H, W = cam.height, cam.width
    depth = np.full(H * W, np.inf)
    tri_id = np.full(H * W, -1, dtype=np.int64)
    V = np.asarray(vertices_cam, dtype=np.float64)
    T = np.asarray(triangles, dtype=np.int64)
    front = np.all(V[T][:, :, 2] > 1e-9, axis=1)
    tids = np.nonzero(front)[0]
    if not len(tids):
        return depth.reshape(H, W), tri_id.reshape(H, W)
    uv = cam.project_camera(V)
    tuv = uv[T[tids]]  # (m, 3, 2)
    j0 = np.maximum(np.ceil(tuv[:, :, 0].min(axis=1) - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(tuv[:, :, 0].max(axis=1) - 0.5), W - 1).astype(np.int64)
    i0 = np.maximum(np.ceil(tuv[:, :, 1].min(axis=1) - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(tuv[:, :, 1].max(axis=1) - 0.5), H - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    count = nx * ny
    keep = count > 0
    tids, j0, i0, nx, count = tids[keep], j0[keep], i0[keep], nx[keep], count[keep]

    ends = np.cumsum(count)
    start = 0
    while start < len(tids):
        # take whole triangles until the chunk budget is reached
        base = ends[start - 1] if start else 0
        stop = int(np.searchsorted(ends, base + chunk, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        c = count[sl]
        owner = np.repeat(np.arange(start, stop), c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        jj = j0[owner] + local % nx[owner]
        ii = i0[owner] + local // nx[owner]
        tri = tids[owner]
        d = cam.pixel_rays(jj + 0.5, ii + 0.5)
        v0, v1, v2 = V[T[tri, 0]], V[T[tri, 1]], V[T[tri, 2]]
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.zeros_like(det)
        inv[ok] = 1.0 / det[ok]
        tvec = -v0
        bu = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        bv = np.einsum("ij,ij->i", d, qvec) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        eps = 1e-10
        hit = ok & (bu >= -eps) & (bv >= -eps) & (bu + bv <= 1 + eps) & (t > 0)
        pix = (ii * W + jj)[hit]
        t, tri = t[hit], tri[hit]
        order = np.lexsort((tri, t, pix))
        pix, t, tri = pix[order], t[order], tri[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, t, tri = pix[first], t[first], tri[first]
        closer = t < depth[pix]
        depth[pix[closer]] = t[closer]
        tri_id[pix[closer]] = tri[closer]
        start = stop
    return depth.reshape(H, W), tri_id.reshape(H, W)


def _render_scene(scene, cam):
    verts, tris, cls = scene.combined()
    depth, tri_id = raycast(cam.pose.apply(verts), tris, cam)
    pix_class = np.where(tri_id >= 0, cls[np.maximum(tri_id, 0)], Tissue.BACKGROUND)
    return depth, tri_id, pix_class


def render_depth_cloud(scene, cam, resolution=None, depth_noise=0.0, seed=None, frame="depth"):
    """Single-view point cloud in the camera frame, one point per pixel hit.

    Ground-truth tissue classes ride along in ``gt_labels``; ``labels`` are
    all background until segmentation fills them in.
    """
    cam = _camera_at_resolution(cam, resolution)
    depth, _, pix_class = _render_scene(scene, cam)
    hit = np.isfinite(depth)
    if not hit.any():
        raise RenderError("scene lies entirely outside the camera frustum; no points rendered")
    ii, jj = np.nonzero(hit)
    z = depth[ii, jj]
    if depth_noise > 0:
        rng = np.random.default_rng(scene.spec.seed if seed is None else seed)
        z = z + rng.normal(0.0, depth_noise, z.shape)
    pts = cam.pixel_rays(jj + 0.5, ii + 0.5) * z[:, None]
    gt = pix_class[ii, jj].astype(np.int64)
    return LabeledPointCloud(pts, np.zeros(len(pts), dtype=np.int64), gt, frame,
                             viewpoint=np.zeros(3), meta={"pixels": np.stack([ii, jj], axis=1)})


def render_label_mask(scene, cam, resolution=None):
    """Ground-truth class of the first surface seen through each pixel."""
    cam = _camera_at_resolution(cam, resolution)
    _, _, pix_class = _render_scene(scene, cam)
    return SegmentationMask(pix_class.astype(np.uint8))


def render_nir_image(scene, cam, dye, resolution=None, seed=None):
    """NIR intensity image in integer sensor counts.

    Healthy kidney glows, tumor and empty pixels stay at their emission
    levels; multiplicative Gaussian noise (``dye.noise_std``) is seeded by
    ``seed`` or the phantom seed.
    """
    cam = _camera_at_resolution(cam, resolution)
    _, _, pix_class = _render_scene(scene, cam)
    if not np.any(pix_class != Tissue.BACKGROUND):
        raise RenderError("scene lies entirely outside the camera frustum; empty NIR image")
    conc = scene.spec.dye_concentration if scene.spec else 0.0
    levels = np.array([dye.background_level, dye.healthy_level(conc), dye.tumor_level])
    img = levels[pix_class]
    if dye.noise_std > 0:
        rng = np.random.default_rng(scene.spec.seed if seed is None else seed)
        img = img * (1.0 + rng.normal(0.0, dye.noise_std, img.shape))
    img = np.clip(np.rint(img), 0, MAX_COUNTS)
    return IntensityImage(img)
