"""Object pose estimation: DLT PnP, MLESAC robustification, motion algebra.

All poses map world coordinates (the frame of the latest real scan) into the
camera frame of the current image. The motion algebra then re-expresses those
camera poses as per-object rigid motions and scan-frame synthesis transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .geometry import CameraModel, Pixel, RigidTransform, rotation_angle

__all__ = [
    "Correspondence",
    "PoseEstimate",
    "DegenerateConfigurationError",
    "NoConsensusError",
    "reprojection_errors",
    "pnp_dlt",
    "mlesac_pnp",
    "object_motion",
    "static_transform",
    "dynamic_transform",
    "classify_motion",
]

_MIN_CORRESPONDENCES = 6
_CONDITION_LIMIT = 1e12


class DegenerateConfigurationError(RuntimeError):
    """The correspondence geometry does not pin down a unique pose."""


class NoConsensusError(RuntimeError):
    """No hypothesis gathered enough inliers."""


@dataclass(frozen=True)
class Correspondence:
    world: np.ndarray
    pixel: Pixel

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(self.world, dtype=np.float64)
        if w.shape != (3,):
            raise ValueError("world must be a 3-vector")
        object.__setattr__(self, "world", w)


@dataclass(frozen=True)
class PoseEstimate:
    transform: RigidTransform
    inlier_indices: np.ndarray
    mean_reprojection_error: float

    def __post_init__(self) -> None:
        idx = np.ascontiguousarray(self.inlier_indices, dtype=np.int64)
        object.__setattr__(self, "inlier_indices", idx)


def _split(corrs: Union[Sequence[Correspondence], tuple[np.ndarray, np.ndarray]]):
    if isinstance(corrs, tuple):
        world, pixels = corrs
        world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if world.shape[0] != pixels.shape[0]:
            raise ValueError("world and pixel arrays must have matching lengths")
        return world, pixels
    world = np.asarray([c.world for c in corrs], dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray([(c.pixel.u, c.pixel.v) for c in corrs], dtype=np.float64).reshape(-1, 2)
    return world, pixels


def reprojection_errors(
    t: RigidTransform, world: np.ndarray, pixels: np.ndarray, cam: CameraModel
) -> np.ndarray:
    """Euclidean pixel errors; points behind the camera get +inf."""
    pc = t.apply(world)
    z = pc[:, 2]
    err = np.full(world.shape[0], np.inf)
    front = z > 0.0
    u = cam.fx * (pc[front, 0] / z[front]) + cam.cx
    v = cam.fy * (pc[front, 1] / z[front]) + cam.cy
    err[front] = np.hypot(u - pixels[front, 0], v - pixels[front, 1])
    return err


def _dlt(world: np.ndarray, norm_xy: np.ndarray) -> RigidTransform:
    """Direct linear transform on intrinsics-normalized image coordinates."""
    n = world.shape[0]
    centroid = world.mean(axis=0)
    spread = np.linalg.norm(world - centroid, axis=1).mean()
    scale = math.sqrt(3.0) / spread if spread > 1e-12 else 1.0
    wn = (world - centroid) * scale

    a = np.zeros((2 * n, 12))
    hom = np.column_stack([wn, np.ones(n)])
    a[0::2, 0:4] = hom
    a[0::2, 8:12] = -norm_xy[:, 0:1] * hom
    a[1::2, 4:8] = hom
    a[1::2, 8:12] = -norm_xy[:, 1:2] * hom

    _, svals, vt = np.linalg.svd(a, full_matrices=False)
    # Rank must be exactly 11: a second vanishing singular value means the
    # points lie in a degenerate (e.g. coplanar or collinear) configuration.
    if svals[-2] <= svals[0] / _CONDITION_LIMIT:
        raise DegenerateConfigurationError(
            f"design matrix is rank-deficient (condition {svals[0] / max(svals[-2], 1e-300):.3g})"
        )
    p = vt[-1].reshape(3, 4)
    # Undo the world normalization: X' = (X - c) * s.
    h = np.eye(4)
    h[:3, :3] *= scale
    h[:3, 3] = -scale * centroid
    p = p @ h

    m = p[:, :3]
    if np.linalg.det(m) < 0.0:
        p = -p
        m = p[:, :3]
    u, s, vt3 = np.linalg.svd(m)
    rot = u @ vt3
    if np.linalg.det(rot) < 0.0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt3
    sigma = s.mean()
    if sigma <= 0.0 or not np.isfinite(sigma):
        raise DegenerateConfigurationError("vanishing projective scale")
    return RigidTransform(rot, p[:, 3] / sigma)


def _gauss_newton(
    t: RigidTransform,
    world: np.ndarray,
    pixels: np.ndarray,
    cam: CameraModel,
    iters: int,
) -> RigidTransform:
    """Refine the pose on pixel reprojection error; left-multiplied so(3) steps."""
    rot = t.rotation.copy()
    trans = t.translation.copy()

    def total_error(r, tr):
        pc = world @ r.T + tr
        z = np.maximum(pc[:, 2], 1e-9)
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
        return float(np.sum((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2))

    err = total_error(rot, trans)
    for _ in range(iters):
        pc = world @ rot.T + trans
        z = np.maximum(pc[:, 2], 1e-9)
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
        r = np.column_stack([u - pixels[:, 0], v - pixels[:, 1]])

        n = world.shape[0]
        jproj = np.zeros((n, 2, 3))
        jproj[:, 0, 0] = cam.fx / z
        jproj[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
        jproj[:, 1, 1] = cam.fy / z
        jproj[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
        jpose = np.zeros((n, 3, 6))
        jpose[:, 0, 1] = pc[:, 2]
        jpose[:, 0, 2] = -pc[:, 1]
        jpose[:, 1, 0] = -pc[:, 2]
        jpose[:, 1, 2] = pc[:, 0]
        jpose[:, 2, 0] = pc[:, 1]
        jpose[:, 2, 1] = -pc[:, 0]
        jpose[:, :, 3:] = np.eye(3)
        jac = np.einsum("nij,njk->nik", jproj, jpose).reshape(2 * n, 6)
        res = r.reshape(2 * n)

        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            delta = np.linalg.solve(jtj + 1e-12 * np.eye(6), -jtr)
        except np.linalg.LinAlgError:
            break

        step = 1.0
        improved = False
        for _ in range(6):
            omega = delta[:3] * step
            angle = np.linalg.norm(omega)
            if angle < 1e-16:
                rot_step = np.eye(3)
            else:
                k = omega / angle
                kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
                rot_step = np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)
            cand_rot = rot_step @ rot
            cand_trans = rot_step @ trans + delta[3:] * step
            cand_err = total_error(cand_rot, cand_trans)
            if cand_err < err:
                rot, trans, err = cand_rot, cand_trans, cand_err
                improved = True
                break
            step *= 0.5
        if not improved or float(np.linalg.norm(delta)) < 1e-12:
            break
    return RigidTransform(rot, trans)


def pnp_dlt(
    corrs: Union[Sequence[Correspondence], tuple[np.ndarray, np.ndarray]],
    cam: CameraModel,
    refine_iters: int = 10,
) -> RigidTransform:
    """Camera pose from >= 6 world/pixel pairs.

    DLT over intrinsics-normalized coordinates, polar projection of the
    linear solution onto SO(3) with the sign fixed for positive depths,
    then Gauss-Newton refinement of the pixel reprojection error.
    """
    world, pixels = _split(corrs)
    if world.shape[0] < _MIN_CORRESPONDENCES:
        raise ValueError(f"need at least {_MIN_CORRESPONDENCES} correspondences, got {world.shape[0]}")
    t = _dlt(world, cam.normalized(pixels))
    if refine_iters > 0:
        t = _gauss_newton(t, world, pixels, cam, refine_iters)
    return t


def mlesac_pnp(
    corrs: Union[Sequence[Correspondence], tuple[np.ndarray, np.ndarray]],
    cam: CameraModel,
    sigma: float = 2.0,
    max_iters: int = 500,
    seed=0,
    confidence: float = 0.99,
    em_steps: int = 5,
) -> PoseEstimate:
    """Robust PnP: minimal 6-point hypotheses scored by a mixture likelihood.

    Residuals are modeled as an isotropic Gaussian (scale sigma, pixels) for
    inliers plus a uniform density over the image for outliers; the mixing
    weight is re-estimated per hypothesis with a few EM steps. The hypothesis
    with the smallest negative log-likelihood wins, its inliers (error <=
    1.96 sigma) get a final refined fit. Iterations stop early once the
    standard RANSAC confidence bound is met.

    Two extra hypotheses keep the sample loop short without touching its
    semantics: a deterministic all-point fit seeds the search before any
    sampling (with mostly-clean correspondences it already gates everything),
    and each new best is refit on its own inliers and rescored, the classic
    local-optimization step.
    """
    world, pixels = _split(corrs)
    n = world.shape[0]
    if n < _MIN_CORRESPONDENCES:
        raise ValueError(f"need at least {_MIN_CORRESPONDENCES} correspondences, got {n}")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")

    rng = np.random.default_rng(seed)
    gauss_norm = 1.0 / (2.0 * math.pi * sigma * sigma)
    uniform_density = 1.0 / float(cam.width * cam.height)
    inlier_gate = 1.96 * sigma

    best_nll = np.inf
    best_inliers: np.ndarray | None = None
    needed = max_iters

    def consider(hypo: RigidTransform) -> bool:
        """Score one hypothesis; on a new best, tighten the iteration bound."""
        nonlocal best_nll, best_inliers, needed
        err = reprojection_errors(hypo, world, pixels, cam)
        p_in = gauss_norm * np.exp(-0.5 * np.minimum(err / sigma, 38.0) ** 2)
        gamma = 0.5
        for _ in range(em_steps):
            num = gamma * p_in
            z = num / (num + (1.0 - gamma) * uniform_density)
            gamma = float(np.clip(z.mean(), 1e-6, 1.0 - 1e-6))
        nll = float(-np.sum(np.log(gamma * p_in + (1.0 - gamma) * uniform_density)))
        if nll >= best_nll:
            return False
        best_nll = nll
        best_inliers = np.nonzero(err <= inlier_gate)[0]
        w = best_inliers.size / n
        if w >= 1.0:
            needed = 0
        elif w > 0.0:
            denom = math.log1p(-(w**_MIN_CORRESPONDENCES))
            if denom < 0.0:
                needed = min(max_iters, math.ceil(math.log(1.0 - confidence) / denom))
        return True

    def optimize_local() -> None:
        """Refit on the current best's inliers and let the refit compete."""
        if best_inliers is None or best_inliers.size <= _MIN_CORRESPONDENCES:
            return
        try:
            refit = pnp_dlt((world[best_inliers], pixels[best_inliers]), cam)
        except DegenerateConfigurationError:
            return
        consider(refit)

    if n > _MIN_CORRESPONDENCES:
        try:
            if consider(pnp_dlt((world, pixels), cam)):
                optimize_local()
        except DegenerateConfigurationError:
            pass

    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, _MIN_CORRESPONDENCES, replace=False)
        try:
            hypo = _dlt(world[sample], cam.normalized(pixels[sample]))
        except DegenerateConfigurationError:
            continue
        # Polar projection of a noisy minimal DLT solution is a poor rigid
        # pose; a short least-squares pass over the sample fixes that cheaply.
        hypo = _gauss_newton(hypo, world[sample], pixels[sample], cam, 5)
        sample_err = reprojection_errors(hypo, world[sample], pixels[sample], cam)
        if float(np.max(sample_err)) > inlier_gate:
            # A sound exact solve reproduces its own sample; this draw was
            # near-degenerate and its pose carries no information.
            continue
        if consider(hypo):
            optimize_local()

    if best_inliers is None or best_inliers.size < _MIN_CORRESPONDENCES:
        raise NoConsensusError(
            f"no hypothesis reached {_MIN_CORRESPONDENCES} inliers in {max_iters} iterations"
        )

    refined = pnp_dlt((world[best_inliers], pixels[best_inliers]), cam)
    final_err = reprojection_errors(refined, world, pixels, cam)
    inliers = np.nonzero(final_err <= inlier_gate)[0]
    if inliers.size < _MIN_CORRESPONDENCES:
        inliers = best_inliers
    mean_err = float(final_err[inliers].mean())
    return PoseEstimate(refined, np.sort(inliers), mean_err)


# ---------------------------------------------------------------------------
# Motion algebra relating per-object camera poses to scan-frame transforms.

def object_motion(t_object_cam: RigidTransform, t_cam: RigidTransform) -> RigidTransform:
    """World-frame motion of the object between the scan and the image time."""
    return t_cam.inverse().compose(t_object_cam)


def static_transform(t_cam: RigidTransform, t_lidar_to_cam: RigidTransform) -> RigidTransform:
    """Maps static points of the last real scan into the virtual scan frame."""
    return t_lidar_to_cam.inverse().compose(t_cam)


def dynamic_transform(
    t_object_cam: RigidTransform, t_lidar_to_cam: RigidTransform
) -> RigidTransform:
    """Maps one object's points of the last real scan into the virtual scan frame."""
    return t_lidar_to_cam.inverse().compose(t_object_cam)


def classify_motion(
    t_mov: RigidTransform,
    translation_threshold: float = 0.05,
    rotation_threshold_deg: float = 0.5,
) -> str:
    """'dynamic' when the motion exceeds either threshold, else 'static'."""
    moved = float(np.linalg.norm(t_mov.translation)) > translation_threshold
    turned = math.degrees(rotation_angle(t_mov.rotation)) > rotation_threshold_deg
    return "dynamic" if (moved or turned) else "static"
