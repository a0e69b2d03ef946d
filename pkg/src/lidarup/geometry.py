"""SE(3) rigid transforms, pinhole projection, and point cloud containers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "Pixel",
    "RigidTransform",
    "CameraModel",
    "PointCloud",
    "compose",
    "invert",
    "transform_points",
    "project",
    "project_cloud",
    "project_cloud_arrays",
    "rotation_angle",
]

# Drift of R^T R - I (max abs entry) silently repaired by re-orthonormalization.
_ORTHO_DRIFT = 1e-9
# Beyond this the matrix is rejected outright.
_ORTHO_REJECT = 1e-6


class Pixel(NamedTuple):
    u: float
    v: float


def _polar_rotation(matrix: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (orthogonal polar factor)."""
    u, _, vt = np.linalg.svd(matrix)
    if np.linalg.det(u @ vt) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ vt


def _rotation_drift(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - np.eye(3))))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, det +1) plus translation (3,), mapping p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        translation = np.ascontiguousarray(self.translation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {translation.shape}")
        if not (np.isfinite(rotation).all() and np.isfinite(translation).all()):
            raise ValueError("transform entries must be finite")
        drift = _rotation_drift(rotation)
        if drift > _ORTHO_REJECT:
            raise ValueError(f"rotation is not orthonormal (drift {drift:.3g})")
        if drift > _ORTHO_DRIFT:
            rotation = _polar_rotation(rotation)
        if np.linalg.det(rotation) < 0.0:
            raise ValueError("rotation must be proper (det +1), got a reflection")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Build from a 3x4 or 4x4 matrix [R | t]."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self, homogeneous: bool = False) -> np.ndarray:
        m = np.zeros((4, 4) if homogeneous else (3, 4))
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        if homogeneous:
            m[3, 3] = 1.0
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then `self`."""
        rotation = self.rotation @ other.rotation
        if _rotation_drift(rotation) > _ORTHO_DRIFT:
            rotation = _polar_rotation(rotation)
        return RigidTransform(rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one (3,) point or a stack of (N, 3) points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: the result applies b first, then a."""
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic rotation angle in radians, in [0, pi]."""
    c = (float(np.trace(rotation)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: zero-skew intrinsics plus integer pixel extents."""

    intrinsic: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        k = np.ascontiguousarray(self.intrinsic, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsic must be 3x3, got {k.shape}")
        lower = np.array([k[1, 0], k[2, 0], k[2, 1]])
        if np.any(lower != 0.0) or k[2, 2] != 1.0:
            raise ValueError("intrinsic must be upper-triangular with K[2,2] == 1")
        if k[0, 1] != 0.0:
            raise ValueError("skew is not supported; K[0,1] must be 0")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image extents must be positive")
        object.__setattr__(self, "intrinsic", k)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def fx(self) -> float:
        return float(self.intrinsic[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsic[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsic[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsic[1, 2])

    def normalized(self, pixels: np.ndarray) -> np.ndarray:
        """Map (N, 2) pixel coordinates to normalized image coordinates."""
        uv = np.asarray(pixels, dtype=np.float64)
        out = np.empty_like(uv)
        out[..., 0] = (uv[..., 0] - self.cx) / self.fx
        out[..., 1] = (uv[..., 1] - self.cy) / self.fy
        return out


@dataclass(frozen=True)
class PointCloud:
    """(N, 3) float64 coordinates with an optional per-point intensity in [0, 1]."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.ascontiguousarray(self.intensity, dtype=np.float64)
            if inten.shape != (pts.shape[0],):
                raise ValueError("intensity must have exactly one entry per point")
            if not np.isfinite(inten).all():
                raise ValueError("intensity entries must be finite")
            if inten.size and (inten.min() < 0.0 or inten.max() > 1.0):
                raise ValueError("intensity entries must lie in [0, 1]")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, indices: np.ndarray) -> "PointCloud":
        """Subset cloud by integer indices, carrying intensity along."""
        idx = np.asarray(indices, dtype=np.int64)
        inten = self.intensity[idx] if self.intensity is not None else None
        return PointCloud(self.points[idx], inten)


def transform_points(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.intensity)


def project(point: np.ndarray, cam: CameraModel) -> Optional[Pixel]:
    """Project one camera-frame point; None when the point is not in front (Z <= 0)."""
    x, y, z = (float(v) for v in np.asarray(point, dtype=np.float64))
    if z <= 0.0:
        return None
    return Pixel(cam.fx * (x / z) + cam.cx, cam.fy * (y / z) + cam.cy)


def project_cloud_arrays(
    cloud: PointCloud, t: RigidTransform, cam: CameraModel
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of a cloud through t into cam.

    Returns (indices, uv): the original indices of points that land in front of
    the camera and inside [0, width) x [0, height), and their pixel coordinates.
    """
    pts = t.apply(cloud.points)
    z = pts[:, 2]
    front = z > 0.0
    u = np.full(len(cloud), -1.0)
    v = np.full(len(cloud), -1.0)
    u[front] = cam.fx * (pts[front, 0] / z[front]) + cam.cx
    v[front] = cam.fy * (pts[front, 1] / z[front]) + cam.cy
    keep = front & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    idx = np.nonzero(keep)[0].astype(np.int64)
    return idx, np.column_stack([u[idx], v[idx]])


def project_cloud(
    cloud: PointCloud, t: RigidTransform, cam: CameraModel
) -> list[tuple[int, Pixel]]:
    """Project a cloud; keeps only points in front of the camera and inside the image."""
    idx, uv = project_cloud_arrays(cloud, t, cam)
    return [(int(i), Pixel(float(p[0]), float(p[1]))) for i, p in zip(idx, uv)]
