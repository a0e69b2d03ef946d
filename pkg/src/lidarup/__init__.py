"""Temporal upsampling of sparse range scans with a high-rate mono camera.

The package turns a low-rate stream of 3D scans plus a calibrated, higher-rate
camera into virtual scans at the camera rate: objects detected in 2D are
associated to 3D clusters at each scan (anchor) frame, their projections are
tracked through the intermediate images, per-object rigid motion is recovered
with a robust PnP estimator, and the anchor cloud is re-posed piecewise into
each camera timestamp.
"""

from .association import (
    AssociationParams,
    Cluster,
    Plane,
    PlaneFitError,
    elect_object_cluster,
    euclidean_cluster,
    fit_ground_msac,
    frustum_select,
    object_points_for_track,
)
from .config import ConfigError, PipelineConfig
from .dataset_io import (
    Calibration,
    FrameRecord,
    ManifestError,
    SequenceManifest,
    read_cloud_bin,
    read_cloud_ply,
    read_manifest,
    read_poses,
    write_cloud_bin,
    write_cloud_ply,
    write_poses,
)
from .geometry import (
    CameraModel,
    Pixel,
    PointCloud,
    RigidTransform,
    compose,
    invert,
    project,
    project_cloud,
    rotation_angle,
    transform_points,
)
from .imaging import (
    GrayImage,
    Pyramid,
    TrackStatus,
    TrackedPoint,
    build_pyramid,
    klt_track,
    read_pnm,
    to_gray,
    write_pgm,
)
from .metrics import (
    EvalProtocol,
    MetricReport,
    apply_protocol,
    chamfer,
    chamfer_terms,
    depth_error_percent,
    emd_auction,
    emd_auction_details,
    evaluate_pair,
    outlier_mask,
)
from .pipeline import PipelineRunner, RunResult
from .pose import (
    Correspondence,
    DegenerateConfigurationError,
    NoConsensusError,
    PoseEstimate,
    classify_motion,
    dynamic_transform,
    mlesac_pnp,
    object_motion,
    pnp_dlt,
    reprojection_errors,
    static_transform,
)
from .synthesis import FrameSynthesisPlan, restrict_to_camera_fov, synthesize_frame
from .tracking2d import BBox, ObjectTrack, ObjectTracker, hungarian_assign, iou, update_tracks

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # geometry
    "Pixel", "RigidTransform", "CameraModel", "PointCloud",
    "compose", "invert", "rotation_angle", "transform_points", "project", "project_cloud",
    # imaging
    "GrayImage", "Pyramid", "TrackStatus", "TrackedPoint",
    "to_gray", "build_pyramid", "klt_track", "read_pnm", "write_pgm",
    # 2D tracking
    "BBox", "ObjectTrack", "ObjectTracker", "iou", "hungarian_assign", "update_tracks",
    # association
    "Plane", "PlaneFitError", "Cluster", "AssociationParams",
    "fit_ground_msac", "frustum_select", "euclidean_cluster",
    "elect_object_cluster", "object_points_for_track",
    # pose
    "Correspondence", "PoseEstimate", "DegenerateConfigurationError", "NoConsensusError",
    "pnp_dlt", "mlesac_pnp", "reprojection_errors",
    "object_motion", "static_transform", "dynamic_transform", "classify_motion",
    # synthesis
    "FrameSynthesisPlan", "synthesize_frame", "restrict_to_camera_fov",
    # metrics
    "EvalProtocol", "MetricReport", "chamfer", "chamfer_terms",
    "emd_auction", "emd_auction_details", "depth_error_percent",
    "outlier_mask", "apply_protocol", "evaluate_pair",
    # io
    "ManifestError", "FrameRecord", "Calibration", "SequenceManifest",
    "read_cloud_bin", "write_cloud_bin", "read_poses", "write_poses",
    "read_manifest", "write_cloud_ply", "read_cloud_ply",
    # config and pipeline
    "ConfigError", "PipelineConfig", "PipelineRunner", "RunResult",
]
