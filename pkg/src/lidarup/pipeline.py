"""Batch pipeline: scan-rate clouds plus frame-rate images in, virtual clouds out.

Per sequence the runner walks the manifest in frame order. Every frame with a
cloud becomes the anchor: the ground plane is fit, each 2D track's detection
box is associated to one cluster, and the cluster's points are projected into
the anchor image as tracked pixels. Camera-only frames then step all tracked
pixels forward with pyramidal Lucas-Kanade, estimate each object's pose from
its 3D-2D correspondences with a robust PnP solver, split motion into the
camera-induced part and the object's own rigid motion, and scatter the anchor
cloud through the per-partition transforms into a virtual cloud at the frame
timestamp.

Outputs under out_dir: virtual/<frame>.bin clouds, optional PLY with
per-object provenance colors, motions.txt with one line per object per
virtual frame, and run_report.json. Reports carry no timestamps so reruns
are byte-identical; stage timings go to the logger only.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .association import (
    AssociationParams,
    Plane,
    PlaneFitError,
    fit_ground_msac,
    object_points_for_track,
    project_to_image,
)
from .config import PipelineConfig
from .dataset_io import SequenceManifest, read_cloud_bin, write_cloud_bin, write_cloud_ply
from .geometry import PointCloud, RigidTransform, compose
from .imaging import Pyramid, TrackStatus, build_pyramid, klt_track, read_pnm
from .pose import (
    DegenerateConfigurationError,
    NoConsensusError,
    classify_motion,
    mlesac_pnp,
)
from .synthesis import FrameSynthesisPlan, synthesize_frame
from .tracking2d import ObjectTracker

__all__ = ["ObjectBinding", "AnchorState", "RunResult", "PipelineRunner"]

logger = logging.getLogger(__name__)

LABEL_DYNAMIC = "dynamic"
LABEL_STATIC = "static"
LABEL_FALLBACK = "fallback"


@dataclass
class ObjectBinding:
    """A 2D track bound to an anchor cluster with live tracked pixels."""

    track_id: int
    cluster_indices: np.ndarray  # full cluster, indices into the anchor cloud
    world: np.ndarray  # (M, 3) anchor-frame coordinates of the tracked subset
    pixels: np.ndarray  # (M, 2) current pixel positions
    anchor_pixels: np.ndarray  # (M, 2) projections into the anchor image
    alive: np.ndarray  # (M,) still-tracked mask
    centroid: np.ndarray  # centroid of the full cluster, anchor coordinates

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())


@dataclass
class AnchorState:
    frame: int
    cloud: PointCloud
    t_w_cam: RigidTransform
    bindings: list[ObjectBinding]
    ground: Optional[Plane]
    pyramid: Optional[Pyramid] = None


@dataclass
class RunResult:
    out_dir: Path
    anchor_frames: list[int] = field(default_factory=list)
    virtual_frames: list[int] = field(default_factory=list)
    frame_reports: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=lambda: {"associate": [], "klt": [], "pose": [], "synthesis": []})
    motions_path: Optional[Path] = None
    report_path: Optional[Path] = None


def _format_transform(t: RigidTransform) -> str:
    return " ".join(f"{v:.17g}" for v in t.as_matrix().reshape(-1))


class PipelineRunner:
    """Runs the full upsampling pipeline over one sequence manifest."""

    def __init__(
        self,
        manifest: SequenceManifest,
        config: Optional[PipelineConfig] = None,
        out_dir: Union[str, Path] = "out",
        write_ply: bool = False,
        emit_at_anchor: bool = False,
    ) -> None:
        self.manifest = manifest
        self.config = config if config is not None else PipelineConfig()
        self.config.validate()
        self.out_dir = Path(out_dir)
        self.write_ply = write_ply
        self.emit_at_anchor = emit_at_anchor
        self._assoc_params = AssociationParams(
            tolerance=self.config.cluster_tolerance,
            min_size=self.config.cluster_min_size,
            election=self.config.cluster_election,
            ground_margin=self.config.msac_threshold,
        )

    # ------------------------------------------------------------------
    # Anchor handling

    def _bind_objects(
        self, cloud: PointCloud, tracks, anchor_frame: int
    ) -> tuple[list[ObjectBinding], Optional[Plane]]:
        calib = self.manifest.calibration
        cfg = self.config
        try:
            ground, _ = fit_ground_msac(
                cloud,
                dist_threshold=cfg.msac_threshold,
                max_iters=cfg.msac_iters,
                seed=(cfg.seed, 101, anchor_frame),
            )
        except PlaneFitError:
            ground = None
            logger.warning("frame %d: ground fit failed, keeping all points", anchor_frame)

        bindings: list[ObjectBinding] = []
        claimed = np.empty(0, dtype=np.int64)
        projection = project_to_image(cloud, calib.t_lidar_to_cam, calib.cam)
        for track in sorted(tracks, key=lambda t: t.track_id):
            if track.last_frame != anchor_frame:
                continue  # not observed at the anchor, nothing to seed from
            idx = object_points_for_track(
                cloud, track.last_bbox, ground, calib.t_lidar_to_cam, calib.cam,
                self._assoc_params, projection,
            )
            if idx.size:
                idx = idx[~np.isin(idx, claimed)]
            if idx.size < cfg.pose_min_points:
                continue
            claimed = np.concatenate([claimed, idx])

            world = cloud.points[idx]
            pc = calib.t_lidar_to_cam.apply(world)
            z = pc[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = calib.cam.fx * pc[:, 0] / z + calib.cam.cx
                v = calib.cam.fy * pc[:, 1] / z + calib.cam.cy
            ok = (z > 0.0) & (u >= 0.0) & (u < calib.cam.width) & (v >= 0.0) & (v < calib.cam.height)
            if ok.sum() < cfg.pose_min_points:
                continue
            world = world[ok]
            u, v = u[ok], v[ok]
            if world.shape[0] > cfg.klt_max_points:
                # Keep the projections deepest inside the detection box:
                # windows that straddle the object silhouette mix object and
                # background flow, so boundary pixels track worst.
                b = track.last_bbox
                margin = np.minimum(
                    np.minimum(u - b.x_min, b.x_max - u),
                    np.minimum(v - b.y_min, b.y_max - v),
                )
                order = np.argsort(-margin, kind="stable")[: cfg.klt_max_points]
                keep = np.sort(order)
                world, u, v = world[keep], u[keep], v[keep]
            pixels = np.column_stack([u, v])
            bindings.append(
                ObjectBinding(
                    track_id=track.track_id,
                    cluster_indices=idx,
                    world=world,
                    pixels=pixels,
                    anchor_pixels=pixels.copy(),
                    alive=np.ones(world.shape[0], dtype=bool),
                    centroid=cloud.points[idx].mean(axis=0),
                )
            )
        return bindings, ground

    # ------------------------------------------------------------------
    # Per-frame steps

    def _step_tracking(self, anchor: AnchorState, prev_pyr: Pyramid, pyr: Pyramid) -> None:
        cfg = self.config
        bindings = anchor.bindings
        pts = [b.pixels[b.alive] for b in bindings if b.n_alive]
        if not pts:
            return
        stacked = np.vstack(pts)
        tracked = klt_track(
            prev_pyr,
            pyr,
            stacked,
            window=cfg.klt_window,
            max_iters=cfg.klt_iters,
            eps=cfg.klt_eps,
            min_eig=cfg.klt_min_eig,
            max_residual=cfg.klt_max_residual,
        )
        cursor = 0
        for b in bindings:
            if not b.n_alive:
                continue
            alive_idx = np.nonzero(b.alive)[0]
            for k in alive_idx:
                tp = tracked[cursor]
                cursor += 1
                if tp.status is TrackStatus.CONVERGED:
                    b.pixels[k, 0] = tp.target.u
                    b.pixels[k, 1] = tp.target.v
                else:
                    b.alive[k] = False
        if cfg.klt_anchor_refine and anchor.pyramid is not None:
            self._refine_against_anchor(anchor, pyr)

    def _refine_against_anchor(self, anchor: AnchorState, pyr: Pyramid) -> None:
        """Re-align live tracks directly against the anchor image.

        Chaining accumulates a little template drift at every camera frame.
        One single-level pass from the anchor template, started at the chained
        position, removes the accumulated part while the chain still carries
        the large inter-frame motion. Points that fail to re-converge keep the
        chained position; the robust pose stage absorbs any that truly drifted.
        """
        cfg = self.config
        src = [b.anchor_pixels[b.alive] for b in anchor.bindings if b.n_alive]
        if not src:
            return
        init = [b.pixels[b.alive] for b in anchor.bindings if b.n_alive]
        anchor_base = Pyramid((anchor.pyramid.levels[0],))
        current_base = Pyramid((pyr.levels[0],))
        refined = klt_track(
            anchor_base,
            current_base,
            np.vstack(src),
            window=cfg.klt_window,
            max_iters=cfg.klt_iters,
            eps=cfg.klt_eps,
            min_eig=cfg.klt_min_eig,
            max_residual=cfg.klt_max_residual,
            initial=np.vstack(init),
        )
        cursor = 0
        for b in anchor.bindings:
            if not b.n_alive:
                continue
            for k in np.nonzero(b.alive)[0]:
                tp = refined[cursor]
                cursor += 1
                if tp.status is TrackStatus.CONVERGED:
                    b.pixels[k, 0] = tp.target.u
                    b.pixels[k, 1] = tp.target.v

    def _estimate_objects(
        self, anchor: AnchorState, t_t: RigidTransform, frame: int
    ) -> tuple[dict, dict, list[dict]]:
        """Robust PnP per binding; returns memberships, transforms, reports."""
        cfg = self.config
        calib = self.manifest.calibration
        t_lc_inv = calib.t_lidar_to_cam.inverse()
        memberships: dict[int, np.ndarray] = {}
        dynamics: dict[int, RigidTransform] = {}
        identity = RigidTransform.identity()
        reports: list[dict] = []
        for b in anchor.bindings:
            n_corr = b.n_alive
            label = LABEL_FALLBACK
            t_mov = identity
            n_inliers = 0
            reproj = float("nan")
            if n_corr >= cfg.pose_min_points:
                world = b.world[b.alive]
                pixels = b.pixels[b.alive]
                try:
                    estimate = mlesac_pnp(
                        (world, pixels),
                        calib.cam,
                        sigma=cfg.mlesac_sigma,
                        max_iters=cfg.mlesac_iters,
                        seed=(cfg.seed, 202, b.track_id, frame),
                        confidence=cfg.mlesac_confidence,
                    )
                except (NoConsensusError, DegenerateConfigurationError, ValueError) as exc:
                    logger.warning("frame %d track %d: pose failed (%s)", frame, b.track_id, exc)
                else:
                    t_mov = compose(t_t.inverse(), estimate.transform)
                    label = classify_motion(
                        t_mov,
                        translation_threshold=cfg.pose_dynamic_translation,
                        rotation_threshold_deg=cfg.pose_dynamic_rotation_deg,
                    )
                    n_inliers = int(estimate.inlier_indices.size)
                    reproj = float(estimate.mean_reprojection_error)
                    if label == LABEL_DYNAMIC:
                        memberships[b.track_id] = b.cluster_indices
                        dynamics[b.track_id] = compose(t_lc_inv, estimate.transform)
            reports.append(
                {
                    "track": b.track_id,
                    "label": label,
                    "n_corr": n_corr,
                    "n_inliers": n_inliers,
                    "reproj": reproj,
                    "centroid": b.centroid,
                    "t_mov": t_mov,
                }
            )
        return memberships, dynamics, reports

    # ------------------------------------------------------------------

    def run(self) -> RunResult:
        result = RunResult(out_dir=self.out_dir)
        cfg = self.config
        calib = self.manifest.calibration
        t_lc = calib.t_lidar_to_cam
        t_lc_inv = t_lc.inverse()

        virtual_dir = self.out_dir / "virtual"
        virtual_dir.mkdir(parents=True, exist_ok=True)
        if self.write_ply:
            (self.out_dir / "virtual_ply").mkdir(exist_ok=True)

        tracker = ObjectTracker(iou_gate=cfg.tracker_iou_gate, max_missed=cfg.tracker_max_missed)
        anchor: Optional[AnchorState] = None
        prev_pyr: Optional[Pyramid] = None
        motion_lines: list[str] = []

        for rec in self.manifest.frames:
            try:
                image = read_pnm(rec.image_path)
                pyr = build_pyramid(image, cfg.klt_levels)
            except (OSError, ValueError) as exc:
                logger.error("frame %d: unreadable image (%s)", rec.index, exc)
                result.errors.append({"frame": rec.index, "error": f"image: {exc}"})
                prev_pyr = None
                continue

            tracker.update(list(rec.detections), rec.index)

            try:
                if rec.has_cloud:
                    cloud = read_cloud_bin(rec.cloud_path)
                    t0 = time.perf_counter()
                    bindings, ground = self._bind_objects(cloud, tracker.tracks, rec.index)
                    dt = time.perf_counter() - t0
                    result.timings["associate"].append(dt)
                    anchor = AnchorState(rec.index, cloud, rec.pose, bindings, ground, pyramid=pyr)
                    result.anchor_frames.append(rec.index)
                    logger.info(
                        "frame %d: anchor, %d points, %d bound objects, associate %.1f ms",
                        rec.index, len(cloud), len(bindings), dt * 1e3,
                    )
                    if self.emit_at_anchor:
                        self._emit_anchor(rec.index, anchor, virtual_dir, result)
                elif anchor is not None and prev_pyr is not None:
                    t0 = time.perf_counter()
                    self._step_tracking(anchor, prev_pyr, pyr)
                    t_klt = time.perf_counter() - t0

                    # Anchor coordinates -> current camera, from the manifest poses.
                    t_t = compose(compose(rec.pose.inverse(), anchor.t_w_cam), t_lc)
                    t_s = compose(t_lc_inv, t_t)

                    t0 = time.perf_counter()
                    memberships, dynamics, obj_reports = self._estimate_objects(
                        anchor, t_t, rec.index
                    )
                    t_pose = time.perf_counter() - t0

                    t0 = time.perf_counter()
                    plan = FrameSynthesisPlan(
                        source=anchor.cloud,
                        t_static=t_s,
                        object_memberships=memberships,
                        t_dynamic=dynamics,
                    )
                    virtual, labels = synthesize_frame(plan)
                    t_synth = time.perf_counter() - t0

                    write_cloud_bin(virtual, virtual_dir / f"{rec.index:06d}.bin")
                    if self.write_ply:
                        write_cloud_ply(
                            virtual, self.out_dir / "virtual_ply" / f"{rec.index:06d}.ply", labels=labels
                        )

                    for r in obj_reports:
                        c = r["centroid"]
                        motion_lines.append(
                            f"frame {rec.index} track {r['track']} label {r['label']} "
                            f"n_corr {r['n_corr']} n_inliers {r['n_inliers']} "
                            f"reproj {r['reproj']:.6g} "
                            f"centroid {c[0]:.9g} {c[1]:.9g} {c[2]:.9g} "
                            f"t_mov {_format_transform(r['t_mov'])}"
                        )
                    result.timings["klt"].append(t_klt)
                    result.timings["pose"].append(t_pose)
                    result.timings["synthesis"].append(t_synth)
                    result.virtual_frames.append(rec.index)
                    result.frame_reports.append(
                        {
                            "frame": rec.index,
                            "anchor": anchor.frame,
                            "n_points": len(virtual),
                            "objects": [
                                {
                                    "track": r["track"],
                                    "label": r["label"],
                                    "n_corr": r["n_corr"],
                                    "n_inliers": r["n_inliers"],
                                    "reproj": None if np.isnan(r["reproj"]) else round(r["reproj"], 9),
                                }
                                for r in obj_reports
                            ],
                        }
                    )
                    logger.info(
                        "frame %d: virtual from anchor %d, klt %.1f ms, pose %.1f ms, synth %.1f ms",
                        rec.index, anchor.frame, t_klt * 1e3, t_pose * 1e3, t_synth * 1e3,
                    )
            except Exception as exc:  # per-frame isolation: one bad frame must not kill the run
                logger.exception("frame %d failed", rec.index)
                result.errors.append({"frame": rec.index, "error": str(exc)})

            prev_pyr = pyr

        motions_path = self.out_dir / "motions.txt"
        motions_path.write_text("\n".join(motion_lines) + ("\n" if motion_lines else ""))
        result.motions_path = motions_path

        report = {
            "n_frames": len(self.manifest),
            "anchor_frames": result.anchor_frames,
            "virtual_frames": result.virtual_frames,
            "config": self.config.to_mapping(),
            "frames": result.frame_reports,
            "errors": result.errors,
        }
        report_path = self.out_dir / "run_report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        result.report_path = report_path
        return result

    def _emit_anchor(self, frame: int, anchor: AnchorState, virtual_dir: Path, result: RunResult) -> None:
        """Pass-through emission at anchor frames: the cloud is already real."""
        identity = RigidTransform.identity()
        plan = FrameSynthesisPlan(
            source=anchor.cloud,
            t_static=identity,
            object_memberships={b.track_id: b.cluster_indices for b in anchor.bindings},
            t_dynamic={b.track_id: identity for b in anchor.bindings},
        )
        cloud, labels = synthesize_frame(plan)
        write_cloud_bin(cloud, virtual_dir / f"{frame:06d}.bin")
        if self.write_ply:
            write_cloud_ply(cloud, self.out_dir / "virtual_ply" / f"{frame:06d}.ply", labels=labels)
        result.frame_reports.append(
            {"frame": frame, "anchor": frame, "n_points": len(cloud), "objects": []}
        )
