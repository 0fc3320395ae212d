"""Containers shared across the pipeline: tissue labels, images, masks and labelled clouds."""
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import as_points


class Tissue(IntEnum):
    BACKGROUND = 0
    HEALTHY = 1
    TUMOR = 2
    MARGIN = 3


@dataclass(eq=False)
class IntensityImage:
    """2D scalar image; ``valid`` flags pixels that carry a measurement."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("image values must be 2D")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("validity mask must match the image shape")
        v = self.values[self.valid]
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("valid pixels must be finite and non-negative")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(eq=False)
class SegmentationMask:
    """Per-pixel class in {background, healthy, tumor}."""

    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ValueError("mask must be 2D")
        if np.any(self.classes > Tissue.TUMOR):
            raise ValueError("mask classes must be 0 (background), 1 (healthy) or 2 (tumor)")

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    def counts(self):
        return np.bincount(self.classes.ravel(), minlength=3)[:3]

    def __eq__(self, other):
        return isinstance(other, SegmentationMask) and np.array_equal(self.classes, other.classes)


@dataclass(eq=False)
class LabeledPointCloud:
    """Points (mm) in a named frame with per-point tissue labels.

    ``gt_labels`` holds renderer ground truth and is for evaluation only;
    ``viewpoint`` is the sensor origin in the cloud's frame, when known.
    """

    points: np.ndarray
    labels: np.ndarray = None
    gt_labels: np.ndarray = None
    frame: str = "world"
    viewpoint: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = as_points(self.points) if len(self.points) else np.empty((0, 3))
        n = len(self.points)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise ValueError("label count must equal point count")
        if self.gt_labels is not None:
            self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64)
            if self.gt_labels.shape != (n,):
                raise ValueError("ground-truth label count must equal point count")
        if self.viewpoint is not None:
            self.viewpoint = np.asarray(self.viewpoint, dtype=np.float64).reshape(3)

    def __len__(self):
        return len(self.points)

    def select(self, mask):
        mask = np.asarray(mask)
        return LabeledPointCloud(
            self.points[mask], self.labels[mask],
            None if self.gt_labels is None else self.gt_labels[mask],
            self.frame, self.viewpoint, dict(self.meta),
        )

    def transformed(self, T, frame):
        """Copy of the cloud expressed in ``frame`` via transform ``T``."""
        vp = None if self.viewpoint is None else T.apply(self.viewpoint)
        return LabeledPointCloud(
            T.apply(self.points), self.labels.copy(),
            None if self.gt_labels is None else self.gt_labels.copy(),
            frame, vp, dict(self.meta),
        )

    def with_labels(self, labels):
        return LabeledPointCloud(self.points, labels, self.gt_labels, self.frame,
                                 self.viewpoint, dict(self.meta))

    def points_with(self, label, use_gt=False):
        lab = self.gt_labels if use_gt else self.labels
        return self.points[lab == label]
