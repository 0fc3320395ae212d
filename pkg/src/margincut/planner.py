"""Margin labelling, incision-loop extraction and tool-path generation."""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bpa import median_spacing, reconstruct_surface
from .data import LabeledPointCloud, Tissue
from .geometry import SpatialIndex

DEFAULT_MARGIN = 5.0
DEFAULT_SPEED = 2.0


class PlanningError(RuntimeError):
    pass


class NoTumorError(PlanningError):
    pass


class NoHealthyTissueError(PlanningError):
    pass


class MarginAtCloudBoundaryError(PlanningError):
    pass


class FragmentedBoundaryError(PlanningError):
    def __init__(self, message, fragments=()):
        super().__init__(message)
        self.fragments = [list(f) for f in fragments]


@dataclass
class MarginSet:
    indices: np.ndarray
    margin: float


@dataclass
class IncisionLoop:
    """Largest closed loop plus any further loops found (vertex indices)."""

    vertices: np.ndarray
    others: list = field(default_factory=list)

    @property
    def count(self):
        return 1 + len(self.others)


@dataclass
class IncisionPath:
    """Closed sequence of timed tool poses; the last pose returns to the first."""

    positions: np.ndarray
    axes: np.ndarray
    times: np.ndarray
    speed: float
    perimeter: float
    closed: bool = True

    def __len__(self):
        return len(self.positions)

    @property
    def total_time(self):
        return self.perimeter / self.speed

    def rows(self):
        """``(t, x, y, z, nx, ny, nz)`` rows."""
        return np.column_stack([self.times, self.positions, self.axes])


def find_margin(cloud, margin=DEFAULT_MARGIN):
    """Relabel healthy points within ``margin`` (closed) of any tumor point as margin.

    Returns ``(MarginSet, relabelled cloud)``.
    """
    if not margin > 0:
        raise ValueError("margin must be positive")
    labels = cloud.labels
    tumor = labels == Tissue.TUMOR
    healthy = np.nonzero(labels == Tissue.HEALTHY)[0]
    if not tumor.any():
        raise NoTumorError("no tumor points in the labelled cloud")
    if not len(healthy):
        raise NoHealthyTissueError("no healthy kidney points in the labelled cloud")
    d = SpatialIndex(cloud.points[tumor]).nearest_distance(cloud.points[healthy])
    idx = healthy[d <= margin]
    new = labels.copy()
    new[idx] = Tissue.MARGIN
    return MarginSet(idx, float(margin)), cloud.with_labels(new)


def _walk_cycles(edges, n_vertices):
    """Split an undirected edge list into closed walks and open chains.

    Walks always continue to the lowest-indexed unused neighbour.
    """
    adj = [[] for _ in range(n_vertices)]
    for k, (a, b) in enumerate(edges):
        adj[a].append((b, k))
        adj[b].append((a, k))
    for lst in adj:
        lst.sort()
    used = np.zeros(len(edges), dtype=bool)
    closed, open_ = [], []
    for start in sorted({v for e in edges for v in e}):
        while any(not used[k] for _, k in adj[start]):
            walk = [start]
            cur = start
            while True:
                nxt = next(((w, k) for w, k in adj[cur] if not used[k]), None)
                if nxt is None:
                    open_.append(walk)
                    break
                w, k = nxt
                used[k] = True
                if w == start:
                    closed.append(walk)
                    break
                walk.append(w)
                cur = w
    return closed, open_


def extract_incision_loop(mesh, labels):
    """Order the healthy vertices bordering the margin band into a closed loop.

    ``labels`` gives the tissue class of each mesh vertex (margin included).
    The loop is the outer boundary of the set of faces touching margin or
    tumor vertices.  Holes in the mesh whose rim touches that region are
    treated as part of it, so the loop walks around occlusion gaps; the
    longest boundary loop of the mesh is taken to be the outer edge of the
    observed surface and must not touch the region.
    """
    labels = np.asarray(labels)
    nv = len(mesh.vertices)
    if labels.shape != (nv,):
        raise ValueError("need one label per mesh vertex")
    tri = mesh.triangles
    inner = (labels == Tissue.MARGIN) | (labels == Tissue.TUMOR)
    if not np.any(labels[np.unique(tri)] == Tissue.MARGIN):
        raise MarginAtCloudBoundaryError("no margin vertex is part of the mesh")

    edges, counts = mesh.edges()
    margin_nbr = np.zeros(nv, dtype=bool)
    for a, b in ((0, 1), (1, 0)):
        sel = labels[edges[:, a]] == Tissue.MARGIN
        margin_nbr[edges[sel, b]] = True
    candidates = margin_nbr & (labels == Tissue.HEALTHY)
    if not candidates.any():
        raise MarginAtCloudBoundaryError(
            "no healthy vertex borders the margin; the margin reaches the edge of the observed cloud"
        )

    # mesh boundary loops: the longest is the outer rim, the rest are holes
    bnd = edges[counts == 1]
    rims, _ = _walk_cycles([tuple(e) for e in bnd.tolist()], nv)
    rim_len = [np.sum(np.linalg.norm(np.diff(mesh.vertices[r + r[:1]], axis=0), axis=1)) for r in rims]
    outer = set()
    capped_inner, capped_any = set(), set()
    if rims:
        k_out = int(np.argmax(rim_len))
        for k, r in enumerate(rims):
            rim_edges = {(min(a, b), max(a, b)) for a, b in zip(r, r[1:] + r[:1])}
            if k == k_out:
                outer = set(r)
                continue
            capped_any |= rim_edges
            if inner[r].any():
                capped_inner |= rim_edges
    if outer and inner[sorted(outer)].any():
        raise MarginAtCloudBoundaryError(
            "margin or tumor vertices lie on the outer edge of the observed cloud; "
            "move the camera so the whole margin is visible"
        )

    face_in = inner[tri].any(axis=1)
    tri_edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    in_count = {}
    tot_count = {}
    for (a, b), f_in in zip(tri_edges.tolist(), np.tile(face_in, 3).tolist()):
        key = (a, b)
        tot_count[key] = tot_count.get(key, 0) + 1
        in_count[key] = in_count.get(key, 0) + int(f_in)
    for key in capped_any:
        tot_count[key] += 1
    for key in capped_inner:
        in_count[key] += 1
    loop_edges = [k for k, c in in_count.items() if c == 1 and tot_count[k] == 2]
    closed, open_ = _walk_cycles(sorted(loop_edges), nv)
    closed = [c for c in closed if len(c) >= 3]
    if not closed:
        raise FragmentedBoundaryError(
            f"margin boundary breaks into {len(open_)} open fragments", open_
        )
    closed.sort(key=lambda c: (-len(c), c[0]))
    return IncisionLoop(np.asarray(closed[0], dtype=np.int64),
                        [np.asarray(c, dtype=np.int64) for c in closed[1:]])


def make_tool_path(positions, normals, speed=DEFAULT_SPEED, max_step=1.0):
    """Resample a closed loop by arc length and time-stamp it at ``speed`` mm/s.

    ``normals`` are the unit tool axes at the loop vertices; samples between
    vertices use the renormalised linear blend.
    """
    P = np.asarray(positions, dtype=np.float64)
    Nv = np.asarray(normals, dtype=np.float64)
    if len(P) < 3:
        raise ValueError("a closed loop needs at least 3 vertices")
    if not (speed > 0 and max_step > 0):
        raise ValueError("speed and step must be positive")
    Pc = np.vstack([P, P[:1]])
    Nc = np.vstack([Nv, Nv[:1]])
    seg = np.linalg.norm(np.diff(Pc, axis=0), axis=1)
    perimeter = float(seg.sum())
    if perimeter <= 1e-12:
        raise ValueError("loop has zero perimeter")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(np.ceil(perimeter / max_step - 1e-9))
    s = np.linspace(0.0, perimeter, n + 1)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(seg[k] > 0, (s - cum[k]) / seg[k], 0.0)[:, None]
    pos = (1 - w) * Pc[k] + w * Pc[k + 1]
    ax = (1 - w) * Nc[k] + w * Nc[k + 1]
    ax /= np.linalg.norm(ax, axis=1, keepdims=True)
    pos[-1] = P[0]
    ax[-1] = Nv[0] / np.linalg.norm(Nv[0])
    return IncisionPath(pos, ax, s / speed, float(speed), perimeter)


def tool_axes(mesh, loop):
    """Outward vertex normals at the loop vertices.

    Area-weighted face normals, flipped to agree with the per-point normals
    carried by the mesh when present.
    """
    vn = mesh.vertex_normals()[loop]
    if mesh.normals is not None:
        flip = np.einsum("ij,ij->i", vn, mesh.normals[loop]) < 0
        vn[flip] *= -1
    return vn


def roi_indices(cloud, margin, radius):
    """Non-background points within reach of the tumor, for a local reconstruction."""
    tumor = cloud.points[cloud.labels == Tissue.TUMOR]
    c = tumor.mean(axis=0)
    reach = np.max(np.linalg.norm(tumor - c, axis=1)) + 2 * margin + 4 * radius
    keep = (cloud.labels != Tissue.BACKGROUND) & (np.linalg.norm(cloud.points - c, axis=1) <= reach)
    return np.nonzero(keep)[0]


class IncisionPlanner(BaseEstimator):
    """Labelled point cloud in, closed incision path out.

    Parameters
    ----------
    margin : float
        Surgical margin in mm.
    ball_radius : float or None
        Ball-pivoting radius; ``None`` uses ``radius_factor`` times the median
        nearest-neighbour spacing.
    speed : float
        Tool speed in mm/s.
    max_step : float
        Maximum distance between consecutive path samples in mm.
    crop : bool
        Reconstruct only the neighbourhood of the tumor.
    """

    def __init__(self, margin=DEFAULT_MARGIN, ball_radius=None, radius_factor=2.0,
                 speed=DEFAULT_SPEED, max_step=1.0, crop=True):
        self.margin = margin
        self.ball_radius = ball_radius
        self.radius_factor = radius_factor
        self.speed = speed
        self.max_step = max_step
        self.crop = crop

    def fit(self, X, y=None, viewpoint=None):
        if isinstance(X, LabeledPointCloud):
            cloud = X
        else:
            cloud = LabeledPointCloud(X, y, viewpoint=viewpoint)
        self.margin_set_, self.cloud_ = find_margin(cloud, self.margin)
        tissue = np.nonzero(self.cloud_.labels != Tissue.BACKGROUND)[0]
        radius = self.ball_radius
        if radius is None:
            radius = self.radius_factor * median_spacing(self.cloud_.points[tissue])
        self.radius_ = float(radius)
        self.roi_ = roi_indices(self.cloud_, self.margin, self.radius_) if self.crop else tissue
        sub = self.cloud_.select(self.roi_)
        self.mesh_ = reconstruct_surface(sub, self.radius_)
        loop = extract_incision_loop(self.mesh_, sub.labels)
        self.loop_ = self.roi_[loop.vertices]
        self.other_loops_ = [self.roi_[o] for o in loop.others]
        self.path_ = make_tool_path(self.mesh_.vertices[loop.vertices],
                                    tool_axes(self.mesh_, loop.vertices),
                                    self.speed, self.max_step)
        return self

    def transform(self, X=None):
        """The planned :class:`IncisionPath`."""
        check_is_fitted(self, "path_")
        return self.path_
