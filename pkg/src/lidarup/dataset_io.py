"""Sequence input/output: scan binaries, pose files, detections, manifests, PLY.

File formats (all plain or little-endian binary, documented in the README):
  clouds      .bin, N records of 4 float32 (x, y, z, intensity)
  poses       text, 12 floats per line, row-major 3x4 world-from-camera
  detections  text, "frame_id class_id score x_min y_min x_max y_max"
  manifest    text, header lines "calib|poses|detections <relpath>" then one
              frame per line: "timestamp image_path cloud_path|- pose_index"
  calibration text key-value: width/height, K (9 floats), T_lidar_cam (12)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import CameraModel, PointCloud, RigidTransform, _polar_rotation, _rotation_drift
from .tracking2d import BBox

__all__ = [
    "ManifestError",
    "FrameRecord",
    "Calibration",
    "SequenceManifest",
    "read_cloud_bin",
    "write_cloud_bin",
    "read_poses",
    "write_poses",
    "read_detections",
    "write_detections",
    "read_calibration",
    "write_calibration",
    "read_manifest",
    "write_cloud_ply",
    "read_cloud_ply",
    "TRACK_PALETTE",
    "VIRTUAL_GREEN",
]

# Provenance palette: black for static points, 12 cycling track colors.
# Pure green is reserved for the virtual-cloud overlay marker.
STATIC_COLOR = (0, 0, 0)
VIRTUAL_GREEN = (0, 255, 0)
TRACK_PALETTE = (
    (230, 25, 75),
    (60, 110, 220),
    (255, 160, 20),
    (145, 30, 180),
    (70, 200, 200),
    (240, 50, 230),
    (210, 190, 45),
    (0, 128, 128),
    (220, 120, 90),
    (128, 0, 30),
    (170, 140, 250),
    (128, 128, 0),
)


class ManifestError(ValueError):
    """Manifest validation failure with a stable error code."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class FrameRecord:
    """One manifest row: an image, an optional scan, and the camera pose."""

    index: int
    timestamp: float
    image_path: Path
    cloud_path: Optional[Path]
    pose: RigidTransform
    detections: tuple[BBox, ...] = ()

    @property
    def has_cloud(self) -> bool:
        return self.cloud_path is not None


@dataclass(frozen=True)
class Calibration:
    cam: CameraModel
    t_lidar_to_cam: RigidTransform


@dataclass(frozen=True)
class SequenceManifest:
    root: Path
    calibration: Calibration
    frames: tuple[FrameRecord, ...]

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# Point cloud binaries

def read_cloud_bin(path: Union[str, Path]) -> PointCloud:
    """Read little-endian float32 (x, y, z, intensity) records."""
    blob = Path(path).read_bytes()
    if len(blob) % 16 != 0:
        raise ValueError(f"{path}: size {len(blob)} is not a multiple of 16 bytes")
    raw = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(raw[:, :3], np.clip(raw[:, 3], 0.0, 1.0))


def write_cloud_bin(cloud: PointCloud, path: Union[str, Path]) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    rec = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# Poses

def read_poses(path: Union[str, Path]) -> list[RigidTransform]:
    """Read 12-scalar row-major 3x4 pose lines; sloppy rotations are repaired."""
    poses: list[RigidTransform] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        values = line.split()
        if len(values) != 12:
            raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
        m = np.array([float(v) for v in values], dtype=np.float64).reshape(3, 4)
        rot = m[:, :3]
        if _rotation_drift(rot) > 1e-6:
            rot = _polar_rotation(rot)
        poses.append(RigidTransform(rot, m[:, 3]))
    return poses


def write_poses(poses: Sequence[RigidTransform], path: Union[str, Path]) -> None:
    lines = []
    for t in poses:
        m = t.as_matrix()
        lines.append(" ".join(f"{v:.12g}" for v in m.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Detections

def read_detections(path: Union[str, Path]) -> dict[int, list[BBox]]:
    """Read "frame_id class_id score x_min y_min x_max y_max" lines."""
    out: dict[int, list[BBox]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        frame = int(parts[0])
        class_id = int(parts[1])
        score = float(parts[2])
        x_min, y_min, x_max, y_max = (float(v) for v in parts[3:])
        if x_min >= x_max or y_min >= y_max:
            raise ValueError(f"{path}:{lineno}: box has non-positive area")
        out.setdefault(frame, []).append(BBox(x_min, y_min, x_max, y_max, class_id, score))
    return out


def write_detections(dets: dict[int, Sequence[BBox]], path: Union[str, Path]) -> None:
    lines = []
    for frame in sorted(dets):
        for b in dets[frame]:
            lines.append(
                f"{frame} {b.class_id} {b.score:.6g} "
                f"{b.x_min:.6g} {b.y_min:.6g} {b.x_max:.6g} {b.y_max:.6g}"
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# Calibration

def read_calibration(path: Union[str, Path]) -> Calibration:
    entries: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        entries[parts[0]] = parts[1:]
    try:
        width = int(entries["width"][0])
        height = int(entries["height"][0])
        k = np.array([float(v) for v in entries["K"]], dtype=np.float64).reshape(3, 3)
        m = np.array([float(v) for v in entries["T_lidar_cam"]], dtype=np.float64).reshape(3, 4)
    except (KeyError, IndexError, ValueError) as exc:
        raise ManifestError("bad_calibration", f"{path}: {exc}") from exc
    rot = m[:, :3]
    if _rotation_drift(rot) > 1e-6:
        rot = _polar_rotation(rot)
    return Calibration(
        CameraModel(k, width, height), RigidTransform(rot, m[:, 3])
    )


def write_calibration(calib: Calibration, path: Union[str, Path]) -> None:
    k = calib.cam.intrinsic.reshape(-1)
    m = calib.t_lidar_to_cam.as_matrix().reshape(-1)
    text = (
        f"width {calib.cam.width}\n"
        f"height {calib.cam.height}\n"
        "K " + " ".join(f"{v:.12g}" for v in k) + "\n"
        "T_lidar_cam " + " ".join(f"{v:.12g}" for v in m) + "\n"
    )
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# Manifest

def read_manifest(path: Union[str, Path]) -> SequenceManifest:
    """Parse and validate a sequence manifest.

    Raised ManifestError codes: missing_calibration, duplicate_calibration,
    missing_poses, bad_frame_line, missing_image, pose_index_out_of_range,
    timestamps_not_increasing.
    """
    path = Path(path)
    root = path.parent
    calib_path: Optional[Path] = None
    poses_path: Optional[Path] = None
    det_path: Optional[Path] = None
    rows: list[tuple[float, str, str, int]] = []

    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if parts[0] == "calib":
            if calib_path is not None:
                raise ManifestError("duplicate_calibration", f"{path}:{lineno}")
            calib_path = root / parts[1]
            continue
        if parts[0] == "poses":
            poses_path = root / parts[1]
            continue
        if parts[0] == "detections":
            det_path = root / parts[1]
            continue
        if len(parts) != 4:
            raise ManifestError(
                "bad_frame_line", f"{path}:{lineno}: expected 4 fields, got {len(parts)}"
            )
        try:
            timestamp = float(parts[0])
            pose_index = int(parts[3])
        except ValueError as exc:
            raise ManifestError("bad_frame_line", f"{path}:{lineno}: {exc}") from exc
        rows.append((timestamp, parts[1], parts[2], pose_index))

    if calib_path is None:
        raise ManifestError("missing_calibration", f"{path} has no calib line")
    if poses_path is None:
        raise ManifestError("missing_poses", f"{path} has no poses line")
    calibration = read_calibration(calib_path)
    poses = read_poses(poses_path)
    detections = read_detections(det_path) if det_path is not None else {}

    frames: list[FrameRecord] = []
    last_ts = -np.inf
    for index, (timestamp, image_rel, cloud_rel, pose_index) in enumerate(rows):
        if timestamp <= last_ts:
            raise ManifestError(
                "timestamps_not_increasing", f"frame {index} at {timestamp} after {last_ts}"
            )
        last_ts = timestamp
        if image_rel == "-":
            raise ManifestError("missing_image", f"frame {index} has no image")
        if not (0 <= pose_index < len(poses)):
            raise ManifestError(
                "pose_index_out_of_range", f"frame {index} wants pose {pose_index} of {len(poses)}"
            )
        frames.append(
            FrameRecord(
                index=index,
                timestamp=timestamp,
                image_path=root / image_rel,
                cloud_path=None if cloud_rel == "-" else root / cloud_rel,
                pose=poses[pose_index],
                detections=tuple(detections.get(index, ())),
            )
        )
    return SequenceManifest(root=root, calibration=calibration, frames=tuple(frames))


# ---------------------------------------------------------------------------
# PLY export with provenance coloring

def _label_colors(labels: np.ndarray) -> np.ndarray:
    colors = np.zeros((labels.shape[0], 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        colors[i] = STATIC_COLOR if lab < 0 else TRACK_PALETTE[int(lab) % len(TRACK_PALETTE)]
    return colors


def write_cloud_ply(
    cloud: PointCloud,
    path: Union[str, Path],
    labels: Optional[np.ndarray] = None,
    color: Optional[tuple[int, int, int]] = None,
) -> None:
    """Binary little-endian PLY; per-point provenance colors when labels given,
    a single color (e.g. VIRTUAL_GREEN for overlays) when color is given."""
    n = len(cloud)
    with_color = labels is not None or color is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {axis}" for axis in "xyz"]
    if with_color:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")

    xyz = cloud.points.astype("<f4")
    if with_color:
        if labels is not None:
            colors = _label_colors(np.asarray(labels))
        else:
            colors = np.tile(np.array(color, dtype=np.uint8), (n, 1))
        rec = np.zeros(
            n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")]
        )
        rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
        rec["r"], rec["g"], rec["b"] = colors[:, 0], colors[:, 1], colors[:, 2]
        payload = rec.tobytes()
    else:
        payload = xyz.tobytes()
    Path(path).write_bytes("\n".join(header).encode() + b"\n" + payload)


def read_cloud_ply(path: Union[str, Path]) -> tuple[PointCloud, Optional[np.ndarray]]:
    """Read PLY files produced by write_cloud_ply; returns (cloud, rgb or None)."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValueError(f"{path} is not a PLY file written by this package")
    header = blob[:end].decode().splitlines()
    n = 0
    props: list[str] = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
    payload = blob[end + len(b"end_header\n") :]
    if props[:3] != ["x", "y", "z"]:
        raise ValueError("unsupported PLY layout")
    if len(props) == 3:
        xyz = np.frombuffer(payload, dtype="<f4", count=3 * n).reshape(n, 3)
        return PointCloud(xyz.astype(np.float64)), None
    rec = np.frombuffer(
        payload,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")],
        count=n,
    )
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    rgb = np.column_stack([rec["r"], rec["g"], rec["b"]])
    return PointCloud(xyz), rgb
