"""Virtual scan synthesis: apply per-partition rigid transforms to a cloud."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geometry import CameraModel, PointCloud, RigidTransform, transform_points

__all__ = [
    "STATIC_LABEL",
    "FrameSynthesisPlan",
    "synthesize_frame",
    "restrict_to_camera_fov",
]

STATIC_LABEL = -1


@dataclass(frozen=True)
class FrameSynthesisPlan:
    """Source cloud plus disjoint object memberships and their transforms.

    Points not claimed by any object move with t_static; each object id in
    object_memberships must have a transform in t_dynamic.
    """

    source: PointCloud
    t_static: RigidTransform
    object_memberships: Mapping[int, np.ndarray] = field(default_factory=dict)
    t_dynamic: Mapping[int, RigidTransform] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.source)
        memberships = {}
        for track_id, idx in self.object_memberships.items():
            arr = np.asarray(idx, dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"membership of object {track_id} indexes outside the cloud")
            if np.unique(arr).size != arr.size:
                raise ValueError(f"membership of object {track_id} has duplicate indices")
            memberships[int(track_id)] = arr
        object.__setattr__(self, "object_memberships", memberships)
        if memberships:
            stacked = np.concatenate(list(memberships.values()))
            if np.unique(stacked).size != stacked.size:
                raise ValueError("object memberships must be pairwise disjoint")
        missing = set(memberships) - set(int(k) for k in self.t_dynamic)
        if missing:
            raise ValueError(f"missing dynamic transforms for objects {sorted(missing)}")


def synthesize_frame(plan: FrameSynthesisPlan) -> tuple[PointCloud, np.ndarray]:
    """Transform each partition of the source cloud by its assigned motion.

    Returns the synthesized cloud (original point order, intensity carried
    through) and a provenance label per point: STATIC_LABEL or the object id.
    """
    source = plan.source
    n = len(source)
    labels = np.full(n, STATIC_LABEL, dtype=np.int64)
    out = np.empty_like(source.points)

    claimed = np.zeros(n, dtype=bool)
    for track_id, idx in plan.object_memberships.items():
        claimed[idx] = True
        labels[idx] = track_id
        out[idx] = transform_points(source.select(idx), plan.t_dynamic[track_id]).points

    static_idx = np.nonzero(~claimed)[0]
    out[static_idx] = transform_points(source.select(static_idx), plan.t_static).points

    return PointCloud(out, source.intensity), labels


def restrict_to_camera_fov(
    cloud: PointCloud, t_lidar_to_cam: RigidTransform, cam: CameraModel
) -> PointCloud:
    """Keep points with positive camera depth projecting inside the image."""
    pts = t_lidar_to_cam.apply(cloud.points)
    z = pts[:, 2]
    front = z > 0.0
    u = np.empty(len(cloud))
    v = np.empty(len(cloud))
    u[front] = cam.fx * (pts[front, 0] / z[front]) + cam.cx
    v[front] = cam.fy * (pts[front, 1] / z[front]) + cam.cy
    keep = front.copy()
    keep[front] &= (u[front] >= 0.0) & (u[front] < cam.width) & (v[front] >= 0.0) & (v[front] < cam.height)
    return cloud.select(np.nonzero(keep)[0])
