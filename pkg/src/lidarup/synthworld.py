"""Synthetic sequence generator for end-to-end testing.

Builds a world of a ground plane plus static and moving boxes, samples
persistent surface points with per-point albedo, and emits everything the
batch pipeline consumes: scan binaries at the scan rate, point-splat camera
images at the full frame rate, exact detection boxes, poses, calibration, a
manifest, plus ground-truth virtual clouds and per-object motions for oracle
comparison.

World frame: z up, ground at z = 0. The scan sensor rides the ego at
lidar_height; the camera is rigidly mounted nearby (x right, y down,
z forward). Box faces are sampled only where they face the sensor, so the
cloud and the rendered texture describe the same surface points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dataset_io import (
    Calibration,
    write_calibration,
    write_cloud_bin,
    write_detections,
    write_poses,
)
from .geometry import CameraModel, PointCloud, RigidTransform
from .imaging import GrayImage, write_pgm
from .tracking2d import BBox

__all__ = ["BoxSpec", "Scenario", "SynthResult", "parse_scenario", "generate"]


def _rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Camera axes (x right, y down, z forward) expressed against the scan frame
# (x forward, y left, z up).
_R_CAM_FROM_LIDAR = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
# Camera position in the scan frame: slightly ahead, right of, and below it.
_CAM_POS_IN_LIDAR = np.array([0.2, -0.05, -0.3])


def default_lidar_to_cam() -> RigidTransform:
    return RigidTransform(_R_CAM_FROM_LIDAR, -_R_CAM_FROM_LIDAR @ _CAM_POS_IN_LIDAR)


@dataclass(frozen=True)
class BoxSpec:
    """A box object: pose, size, sampling density, and per-frame motion."""

    center: tuple[float, float, float]
    yaw_deg: float
    size: tuple[float, float, float]
    n_points: int
    velocity: tuple[float, float] = (0.0, 0.0)  # meters per camera frame
    yaw_rate_deg: float = 0.0  # degrees per camera frame

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity) or self.yaw_rate_deg != 0.0

    def pose_at(self, frame: int) -> RigidTransform:
        c = np.array(self.center, dtype=np.float64)
        c[0] += self.velocity[0] * frame
        c[1] += self.velocity[1] * frame
        yaw = math.radians(self.yaw_deg + self.yaw_rate_deg * frame)
        return RigidTransform(_rot_z(yaw), c)


@dataclass
class Scenario:
    frames: int = 10
    rate_ratio: int = 3
    seed: int = 0
    width: int = 640
    height: int = 480
    fx: float = 520.0
    fy: float = 520.0
    cx: float = 320.0
    cy: float = 240.0
    ground_extent: float = 30.0
    ground_points: int = 40000
    ground_jitter: float = 0.01
    image_noise: float = 0.0
    splat_sigma: float = 1.2
    detection_pad: float = 2.0
    lidar_height: float = 1.73
    ego_velocity: tuple[float, float] = (0.0, 0.0)  # meters per camera frame
    ego_yaw_rate_deg: float = 0.0
    boxes: list[BoxSpec] = field(default_factory=list)

    def camera(self) -> CameraModel:
        k = np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
        return CameraModel(k, self.width, self.height)

    def lidar_pose_at(self, frame: int) -> RigidTransform:
        """World-from-scan-sensor pose."""
        pos = np.array(
            [self.ego_velocity[0] * frame, self.ego_velocity[1] * frame, self.lidar_height]
        )
        return RigidTransform(_rot_z(math.radians(self.ego_yaw_rate_deg * frame)), pos)


@dataclass(frozen=True)
class SynthResult:
    out_dir: Path
    manifest_path: Path
    gt_virtual_dir: Path
    gt_motions_path: Path
    cloud_frames: tuple[int, ...]
    virtual_frames: tuple[int, ...]


def parse_scenario(path: Union[str, Path]) -> Scenario:
    """Parse a key-value scenario file; `box = cx cy cz yaw sx sy sz n vx vy wz`."""
    scenario = Scenario()
    boxes: list[BoxSpec] = []
    scalars_int = {"frames", "rate_ratio", "seed", "width", "height", "ground_points"}
    scalars_float = {
        "fx", "fy", "cx", "cy", "ground_extent", "ground_jitter", "image_noise",
        "splat_sigma", "detection_pad", "lidar_height", "ego_yaw_rate_deg",
    }
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key == "box":
            parts = [float(v) for v in raw.split()]
            if len(parts) != 11:
                raise ValueError(f"{path}:{lineno}: box needs 11 numbers, got {len(parts)}")
            boxes.append(
                BoxSpec(
                    center=(parts[0], parts[1], parts[2]),
                    yaw_deg=parts[3],
                    size=(parts[4], parts[5], parts[6]),
                    n_points=int(parts[7]),
                    velocity=(parts[8], parts[9]),
                    yaw_rate_deg=parts[10],
                )
            )
        elif key == "ego_velocity":
            vx, vy = (float(v) for v in raw.split())
            scenario.ego_velocity = (vx, vy)
        elif key in scalars_int:
            setattr(scenario, key, int(raw))
        elif key in scalars_float:
            setattr(scenario, key, float(raw))
        else:
            raise ValueError(f"{path}:{lineno}: unknown scenario key {key!r}")
    scenario.boxes = boxes
    if scenario.frames < 1 or scenario.rate_ratio < 1:
        raise ValueError("frames and rate_ratio must be >= 1")
    return scenario


# ---------------------------------------------------------------------------
# Surface sampling

_FACES = (
    (0, +1.0),  # +x
    (0, -1.0),
    (1, +1.0),  # +y
    (1, -1.0),
    (2, +1.0),  # +z
    (2, -1.0),
)


def _sample_box(spec: BoxSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample points on all box faces, area-weighted. Returns local points,
    outward unit normals, and albedo."""
    sx, sy, sz = spec.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    weights = areas / areas.sum()
    counts = np.floor(weights * spec.n_points).astype(int)
    remainder = spec.n_points - counts.sum()
    order = np.argsort(-(weights * spec.n_points - counts), kind="stable")
    counts[order[:remainder]] += 1

    half = np.array([sx, sy, sz]) / 2.0
    pts = []
    normals = []
    for (axis, sign), count in zip(_FACES, counts):
        if count == 0:
            continue
        face = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
        face[:, axis] = sign * half[axis]
        pts.append(face)
        n = np.zeros((count, 3))
        n[:, axis] = sign
        normals.append(n)
    local = np.vstack(pts)
    # Shading needs large-scale structure on top of fine grain: pure
    # iid speckle washes out in coarse pyramid levels and a tracker
    # then aliases onto the wrong splat once flow exceeds the pitch.
    # Amplitudes sum below the headroom around the base so the albedo
    # never clips; clipped plateaus would leave windows without gradient.
    unit = local / half
    k1 = rng.uniform(1.0, 2.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    k2 = rng.uniform(2.5, 4.5, size=3) * rng.choice([-1.0, 1.0], size=3)
    ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    macro = 0.24 * np.sin(unit @ k1 + ph1) + 0.14 * np.sin(unit @ k2 + ph2)
    grain = rng.uniform(-0.06, 0.06, size=local.shape[0])
    albedo = 0.52 + macro + grain
    return local, np.vstack(normals), albedo


def _render_image(
    uv: np.ndarray,
    albedo: np.ndarray,
    width: int,
    height: int,
    sigma: float,
    noise: float,
    rng: Optional[np.random.Generator],
) -> GrayImage:
    """Gaussian point-splat rendering with weight normalization."""
    r = int(math.ceil(2.5 * sigma))
    pad = r + 1
    w_pad, h_pad = width + 2 * pad, height + 2 * pad
    up = uv[:, 0] + pad
    vp = uv[:, 1] + pad
    # keep the whole splat window inside the padded canvas
    keep = (up >= r) & (up < w_pad - r) & (vp >= r) & (vp < h_pad - r)
    us = up[keep]
    vs = vp[keep]
    alb = albedo[keep]
    u0 = np.floor(us).astype(np.int64)
    v0 = np.floor(vs).astype(np.int64)

    w_acc = np.zeros(w_pad * h_pad)
    a_acc = np.zeros(w_pad * h_pad)
    inv = 1.0 / (2.0 * sigma * sigma)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            px = u0 + dx
            py = v0 + dy
            weight = np.exp(-((px - us) ** 2 + (py - vs) ** 2) * inv)
            flat = py * w_pad + px
            w_acc += np.bincount(flat, weights=weight, minlength=w_pad * h_pad)
            a_acc += np.bincount(flat, weights=weight * alb, minlength=w_pad * h_pad)

    img = (a_acc / (w_acc + 0.05)).reshape(h_pad, w_pad)[pad:-pad, pad:-pad]
    if noise > 0.0 and rng is not None:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0))


def _project(points_world: np.ndarray, t_cam_from_world: RigidTransform, cam: CameraModel):
    pc = t_cam_from_world.apply(points_world)
    z = pc[:, 2]
    front = z > 0.1
    u = np.full(points_world.shape[0], -1e9)
    v = np.full(points_world.shape[0], -1e9)
    u[front] = cam.fx * pc[front, 0] / z[front] + cam.cx
    v[front] = cam.fy * pc[front, 1] / z[front] + cam.cy
    return np.column_stack([u, v]), front


def _occluded_by_box(
    points_world: np.ndarray,
    cam_pos_world: np.ndarray,
    box_pose: RigidTransform,
    half: np.ndarray,
) -> np.ndarray:
    """True where the camera ray to a point passes through the box first.

    Slab test on the camera-to-point segment in box-local coordinates; the
    segment parameter runs 0 at the camera and 1 at the point, so a hit with
    entry strictly inside (0, 1) means the box occludes the point.
    """
    inv = box_pose.inverse()
    p = inv.apply(points_world)
    c = inv.apply(cam_pos_world)
    d = p - c
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - c) / d
        t2 = (half - c) / d
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Parallel rays outside a slab never hit it.
    parallel_miss = (np.abs(d) < 1e-12) & ((c < -half) | (c > half))
    near = np.where(np.abs(d) < 1e-12, -np.inf, near)
    far = np.where(np.abs(d) < 1e-12, np.inf, far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < 1.0 - 1e-6)
    hit &= ~parallel_miss.any(axis=1)
    return hit


def generate(scenario: Scenario, out_dir: Union[str, Path]) -> SynthResult:
    """Write a full synthetic sequence under out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "clouds").mkdir(exist_ok=True)
    (out / "gt_virtual").mkdir(exist_ok=True)

    cam = scenario.camera()
    t_lc = default_lidar_to_cam()
    calib = Calibration(cam, t_lc)
    write_calibration(calib, out / "calib.txt")

    rng_ground = np.random.default_rng((scenario.seed, 1))
    ground_xy = rng_ground.uniform(-scenario.ground_extent, scenario.ground_extent, size=(scenario.ground_points, 2))
    ground_z = rng_ground.normal(0.0, scenario.ground_jitter, size=scenario.ground_points)
    ground_world = np.column_stack([ground_xy, ground_z])
    ground_albedo = rng_ground.uniform(0.15, 0.95, size=scenario.ground_points)

    box_local: list[np.ndarray] = []
    box_normals: list[np.ndarray] = []
    box_albedo: list[np.ndarray] = []
    for i, spec in enumerate(scenario.boxes):
        local, normals, albedo = _sample_box(spec, np.random.default_rng((scenario.seed, 2, i)))
        box_local.append(local)
        box_normals.append(normals)
        box_albedo.append(albedo)

    poses_cam: list[RigidTransform] = []
    detections: dict[int, list[BBox]] = {}
    manifest_rows: list[str] = []
    gt_motion_lines: list[str] = []
    cloud_frames: list[int] = []
    virtual_frames: list[int] = []

    anchor: Optional[dict] = None

    n_boxes = len(scenario.boxes)
    halves = [np.array(spec.size) / 2.0 for spec in scenario.boxes]

    for frame in range(scenario.frames):
        t_w_lidar = scenario.lidar_pose_at(frame)
        t_w_cam = t_w_lidar.compose(t_lc.inverse())
        t_cam_from_world = t_w_cam.inverse()
        poses_cam.append(t_w_cam)
        cam_pos = t_w_cam.translation
        lidar_pos = t_w_lidar.translation

        box_world: list[np.ndarray] = []
        box_normals_w: list[np.ndarray] = []
        box_poses: list[RigidTransform] = []
        for i, spec in enumerate(scenario.boxes):
            pose = spec.pose_at(frame)
            box_world.append(pose.apply(box_local[i]))
            box_normals_w.append(box_normals[i] @ pose.rotation.T)
            box_poses.append(pose)

        def gather(origin: np.ndarray):
            """Points seen from origin: front faces only, box occlusions culled.

            Returns world points, albedo, and per-box index arrays into the
            gathered set.
            """
            parts = [ground_world]
            albs = [ground_albedo]
            owners = [np.full(ground_world.shape[0], -1, dtype=np.int64)]
            for i in range(n_boxes):
                facing = (
                    np.einsum("ij,ij->i", box_normals_w[i], origin[None, :] - box_world[i]) > 0.0
                )
                parts.append(box_world[i][facing])
                albs.append(box_albedo[i][facing])
                owners.append(np.full(int(facing.sum()), i, dtype=np.int64))
            pts = np.vstack(parts)
            owner = np.concatenate(owners)
            vis = np.ones(pts.shape[0], dtype=bool)
            for j in range(n_boxes):
                hit = _occluded_by_box(pts, origin, box_poses[j], halves[j])
                vis &= ~(hit & (owner != j))
            pts = pts[vis]
            alb = np.concatenate(albs)[vis]
            owner = owner[vis]
            members = [np.nonzero(owner == i)[0] for i in range(n_boxes)]
            return pts, alb, members

        # Image: splat everything the camera sees.
        img_pts, img_alb, img_members = gather(cam_pos)
        uv_all, _ = _project(img_pts, t_cam_from_world, cam)
        noise_rng = np.random.default_rng((scenario.seed, 3, frame))
        image = _render_image(
            uv_all,
            img_alb,
            cam.width,
            cam.height,
            scenario.splat_sigma,
            scenario.image_noise,
            noise_rng,
        )
        image_rel = f"images/{frame:06d}.pgm"
        write_pgm(image, out / image_rel)

        # Exact detections from the projected visible box points.
        frame_dets: list[BBox] = []
        for i in range(n_boxes):
            uv = uv_all[img_members[i]]
            inside = (
                (uv[:, 0] >= 0.0)
                & (uv[:, 0] < cam.width)
                & (uv[:, 1] >= 0.0)
                & (uv[:, 1] < cam.height)
            )
            if inside.sum() < 8:
                continue
            pad = scenario.detection_pad
            x_min = max(0.0, float(uv[inside, 0].min()) - pad)
            x_max = min(float(cam.width) - 1e-3, float(uv[inside, 0].max()) + pad)
            y_min = max(0.0, float(uv[inside, 1].min()) - pad)
            y_max = min(float(cam.height) - 1e-3, float(uv[inside, 1].max()) + pad)
            if x_min < x_max and y_min < y_max:
                frame_dets.append(BBox(x_min, y_min, x_max, y_max, class_id=0, score=1.0))
        detections[frame] = frame_dets

        is_scan_frame = frame % scenario.rate_ratio == 0
        cloud_rel = "-"
        if is_scan_frame:
            scan_pts, scan_alb, scan_members = gather(lidar_pos)
            cloud = PointCloud(t_w_lidar.inverse().apply(scan_pts), scan_alb)
            cloud_rel = f"clouds/{frame:06d}.bin"
            write_cloud_bin(cloud, out / cloud_rel)
            cloud_frames.append(frame)
            anchor = {
                "frame": frame,
                "cloud": cloud,
                "memberships": scan_members,
                "box_poses": box_poses,
                "t_w_lidar": t_w_lidar,
            }
        elif anchor is not None:
            # Ground-truth virtual cloud and motions from the exact poses.
            g = anchor["t_w_lidar"]
            t_t = t_cam_from_world.compose(g)
            t_s = t_lc.inverse().compose(t_t)
            pts = anchor["cloud"].points
            virtual = pts @ t_s.rotation.T + t_s.translation
            for i in range(n_boxes):
                member = anchor["memberships"][i]
                if member.size == 0:
                    continue
                t_mov = g.inverse().compose(box_poses[i]).compose(
                    anchor["box_poses"][i].inverse()
                ).compose(g)
                t_d = t_lc.inverse().compose(t_t).compose(t_mov)
                virtual[member] = pts[member] @ t_d.rotation.T + t_d.translation
                centroid = pts[member].mean(axis=0)
                m = t_mov.as_matrix().reshape(-1)
                gt_motion_lines.append(
                    f"frame {frame} object {i} centroid "
                    + " ".join(f"{v:.9g}" for v in centroid)
                    + " displacement "
                    + f"{float(np.linalg.norm(t_mov.translation)):.9g}"
                    + " t_mov "
                    + " ".join(f"{v:.17g}" for v in m)
                )
            write_cloud_bin(
                PointCloud(virtual, anchor["cloud"].intensity),
                out / "gt_virtual" / f"{frame:06d}.bin",
            )
            virtual_frames.append(frame)

        manifest_rows.append(f"{frame / 30.0:.6f} {image_rel} {cloud_rel} {frame}")

    write_poses(poses_cam, out / "poses.txt")
    write_detections(detections, out / "detections.txt")
    manifest_path = out / "manifest.txt"
    manifest_path.write_text(
        "calib calib.txt\nposes poses.txt\ndetections detections.txt\n"
        + "\n".join(manifest_rows)
        + "\n"
    )
    gt_motions_path = out / "gt_motions.txt"
    gt_motions_path.write_text("\n".join(gt_motion_lines) + ("\n" if gt_motion_lines else ""))

    return SynthResult(
        out_dir=out,
        manifest_path=manifest_path,
        gt_virtual_dir=out / "gt_virtual",
        gt_motions_path=gt_motions_path,
        cloud_frames=tuple(cloud_frames),
        virtual_frames=tuple(virtual_frames),
    )
