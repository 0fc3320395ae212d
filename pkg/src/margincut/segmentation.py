"""Threshold-and-enclosure NIR segmentation and label transfer onto point clouds."""
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import IntensityImage, LabeledPointCloud, SegmentationMask, Tissue

# dark regions are grown with 4-connectivity so a diagonal gap in the bright
# rim does not count as an opening
DARK_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


class NoKidneyFoundError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def otsu_threshold(values, bins=1024):
    """Threshold maximising between-class variance of ``values``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise NoKidneyFoundError("image is uniform; no bright kidney tissue to segment")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between[:-1]))
    # split between the last bin of the dark class and the next one
    return float(edges[k + 1])


def segment_nir(img, healthy_threshold=None):
    """Classify each pixel as background, healthy kidney or tumor.

    Pixels at or above the threshold are healthy.  The remaining pixels are
    grouped into 4-connected regions; regions touching the image border are
    background, fully enclosed ones are tumor.  Without an explicit
    threshold, an Otsu split of the valid pixel histogram is used.
    """
    if not isinstance(img, IntensityImage):
        img = IntensityImage(img)
    values = img.values
    if healthy_threshold is None:
        healthy_threshold = otsu_threshold(values[img.valid])
    healthy = img.valid & (values >= healthy_threshold)
    if not healthy.any():
        raise NoKidneyFoundError(
            f"no pixel reaches the healthy threshold {healthy_threshold:g}"
        )
    labels, n = ndimage.label(~healthy, structure=DARK_CONNECTIVITY)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    enclosed = np.ones(n + 1, dtype=bool)
    enclosed[border] = False
    enclosed[0] = False
    classes = np.full(values.shape, Tissue.BACKGROUND, dtype=np.uint8)
    classes[healthy] = Tissue.HEALTHY
    classes[enclosed[labels]] = Tissue.TUMOR
    return SegmentationMask(classes)


class NIRSegmenter(BaseEstimator):
    """Estimator form of :func:`segment_nir`.

    ``fit`` learns the healthy threshold from a reference image (Otsu) unless
    one is given; ``predict`` returns the mask for a new image.
    """

    def __init__(self, healthy_threshold=None):
        self.healthy_threshold = healthy_threshold

    def fit(self, img, y=None):
        if self.healthy_threshold is not None:
            self.threshold_ = float(self.healthy_threshold)
        else:
            img = img if isinstance(img, IntensityImage) else IntensityImage(img)
            self.threshold_ = otsu_threshold(img.values[img.valid])
        return self

    def predict(self, img):
        check_is_fitted(self, "threshold_")
        return segment_nir(img, self.threshold_)

    def fit_predict(self, img, y=None):
        return self.fit(img).predict(img)


def label_cloud(cloud, projection, mask):
    """Give every point the mask class of the pixel its projection falls in.

    ``projection`` is an :class:`ImageProjection` or an ``(n, 2)`` array of
    continuous ``(u, v)`` pixel coordinates (NaN for behind-camera).  The
    pixel is found by flooring; points outside the image or behind the
    camera become background.
    """
    uv = getattr(projection, "uv", projection)
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape != (len(cloud), 2):
        raise AlignmentError(
            f"{len(uv)} projections for {len(cloud)} points; lists must be aligned"
        )
    labels = np.full(len(cloud), Tissue.BACKGROUND, dtype=np.int64)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
        ok = np.isfinite(uv).all(axis=1) & (col >= 0) & (col < mask.width) & (row >= 0) & (row < mask.height)
    if hasattr(projection, "in_front"):
        ok &= projection.in_front
    labels[ok] = mask.classes[row[ok].astype(np.int64), col[ok].astype(np.int64)]
    return LabeledPointCloud(cloud.points, labels, cloud.gt_labels, cloud.frame,
                             cloud.viewpoint, dict(cloud.meta))
