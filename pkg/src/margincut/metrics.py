"""Evaluation metrics: Hausdorff distance, SBR, Dice (2D and 3D) and margin error."""
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .data import Tissue
from .geometry import SpatialIndex, as_points

DSC_3D_THRESHOLD = 0.1
TOOL_OFFSET = 0.5


class UndefinedSBRError(ValueError):
    pass


def _nonempty_points(pts, name):
    pts = as_points(pts) if len(pts) else np.empty((0, 3))
    if not len(pts):
        raise ValueError(f"point set {name} is empty")
    return pts


def directed_hausdorff(A, B):
    """max over a in A of the distance to the nearest point of B."""
    A = _nonempty_points(A, "A")
    B = _nonempty_points(B, "B")
    return float(np.max(SpatialIndex(B).nearest_distance(A)))


def hausdorff(A, B):
    return max(directed_hausdorff(A, B), directed_hausdorff(B, A))


def sbr(img, target, background):
    """Mean intensity over ``target`` divided by mean over ``background``.

    Regions are boolean pixel masks; invalid pixels are ignored.
    """
    values = getattr(img, "values", img)
    valid = getattr(img, "valid", np.ones(np.shape(values), dtype=bool))
    target = np.asarray(target, dtype=bool)
    background = np.asarray(background, dtype=bool)
    if np.any(target & background):
        raise ValueError("target and background regions overlap")
    t = values[target & valid]
    b = values[background & valid]
    if not len(t) or not len(b):
        raise ValueError("target and background regions must be non-empty")
    mb = b.mean()
    if mb <= 0:
        raise UndefinedSBRError("background mean is zero; SBR undefined")
    return float(t.mean() / mb)


def dice(n_overlap, n_x, n_y):
    if n_x + n_y == 0:
        return 1.0
    return 2.0 * n_overlap / (n_x + n_y)


def dsc_2d(X, Y, classes=(Tissue.BACKGROUND, Tissue.HEALTHY, Tissue.TUMOR)):
    """Per-class Dice between two masks plus the reference-size-weighted mean.

    Returns ``{"per_class": {class: dsc}, "mean": weighted_mean}``; the
    weights are the pixel counts of each class in ``Y``.  Boolean arrays
    are compared directly and give a plain float.
    """
    x = getattr(X, "classes", X)
    y = getattr(Y, "classes", Y)
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    if x.dtype == bool:
        return dice(np.count_nonzero(x & y), np.count_nonzero(x), np.count_nonzero(y))
    per, weights = {}, []
    for c in classes:
        xc, yc = x == c, y == c
        per[int(c)] = dice(np.count_nonzero(xc & yc), np.count_nonzero(xc), np.count_nonzero(yc))
        weights.append(np.count_nonzero(yc))
    return {"per_class": per, "mean": _weighted(per, weights)}


def _weighted(per, weights):
    w = np.asarray(weights, dtype=np.float64)
    v = np.array(list(per.values()))
    if w.sum() == 0:
        return float(v.mean())
    return float(np.dot(v, w) / w.sum())


def match_points(X, Y, threshold=DSC_3D_THRESHOLD):
    """Greedy one-to-one matching of pairs closer than ``threshold``.

    Candidate pairs are taken in order of increasing distance (ties by
    index) and accepted when both points are still free, so every accepted
    pair is mutually nearest among the remaining points.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1, 3)
    if not len(X) or not len(Y):
        return np.empty((0, 2), dtype=np.int64)
    sdm = cKDTree(X).sparse_distance_matrix(cKDTree(Y), threshold, output_type="ndarray")
    sdm = sdm[sdm["v"] < threshold]
    order = np.lexsort((sdm["j"], sdm["i"], sdm["v"]))
    used_x = np.zeros(len(X), dtype=bool)
    used_y = np.zeros(len(Y), dtype=bool)
    pairs = []
    for i, j in zip(sdm["i"][order].tolist(), sdm["j"][order].tolist()):
        if not used_x[i] and not used_y[j]:
            used_x[i] = used_y[j] = True
            pairs.append((i, j))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def dsc_3d(X, Y, threshold=DSC_3D_THRESHOLD):
    """Dice between point sets with intersection counted by proximity matching."""
    nx, ny = len(np.asarray(X).reshape(-1, 3)), len(np.asarray(Y).reshape(-1, 3))
    return dice(len(match_points(X, Y, threshold)), nx, ny)


def dsc_3d_labels(points, predicted, reference, threshold=DSC_3D_THRESHOLD,
                  classes=(Tissue.HEALTHY, Tissue.TUMOR)):
    """Per-class 3D Dice of two labellings of the same cloud plus weighted mean."""
    per, weights = {}, []
    for c in classes:
        X = points[predicted == c]
        Y = points[reference == c]
        per[int(c)] = dsc_3d(X, Y, threshold)
        weights.append(len(Y))
    return {"per_class": per, "mean": _weighted(per, weights)}


@dataclass
class MarginErrorReport:
    """Signed margin errors (positive = farther from the tumor than desired)."""

    errors: np.ndarray
    mean: float
    std: float
    mae: float
    margin: float
    tool_offset: float

    def to_dict(self):
        d = asdict(self)
        d["errors"] = self.errors.tolist()
        return d

    @classmethod
    def from_errors(cls, errors, margin, tool_offset):
        e = np.asarray(errors, dtype=np.float64)
        return cls(e, float(e.mean()), float(e.std()), float(np.abs(e).mean()),
                   float(margin), float(tool_offset))


def margin_error(incision, tumor, margin=5.0, tool_offset=TOOL_OFFSET):
    """Per-point error ``nearest tumor distance + tool_offset - margin``.

    The standard deviation is the population value (ddof=0).
    """
    incision = _nonempty_points(incision, "incision")
    tumor = _nonempty_points(tumor, "tumor")
    d = SpatialIndex(tumor).nearest_distance(incision)
    return MarginErrorReport.from_errors(d + tool_offset - margin, margin, tool_offset)
