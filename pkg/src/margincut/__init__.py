"""Fluorescence-guided tumor margin delineation and incision planning on kidney phantoms."""
from .bpa import BallPivoting, ReconstructionError, reconstruct_surface
from .calibration import (CameraModel, FrameGraph, RigidRegistration, estimate_rigid_transform,
                          map_cloud_to_image, project, back_project)
from .data import IntensityImage, LabeledPointCloud, SegmentationMask, Tissue
from .geometry import RigidTransform, SpatialIndex, TriangleMesh, nearest_distance, radius_query
from .metrics import dsc_2d, dsc_3d, hausdorff, margin_error, sbr
from .phantom import DyeModel, PhantomSpec, generate_phantom, render_depth_cloud, render_nir_image
from .pipeline import ConfigError, ExperimentConfig, StageError, load_config, run_batch, run_pipeline
from .planner import IncisionPlanner, extract_incision_loop, find_margin, make_tool_path
from .segmentation import NIRSegmenter, label_cloud, segment_nir

__version__ = "0.1.0"
