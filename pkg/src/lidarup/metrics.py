"""Cloud similarity metrics and the evaluation protocol.

Chamfer distance is the symmetric mean of squared exact nearest-neighbor
distances; the earth mover's distance is the mean squared cost of a bijection
found by a forward auction with epsilon scaling, which lands within N * eps of
the optimal assignment cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .association import Plane
from .geometry import PointCloud

__all__ = [
    "EvalProtocol",
    "MetricReport",
    "chamfer",
    "chamfer_terms",
    "emd_auction",
    "emd_auction_details",
    "depth_error_percent",
    "apply_protocol",
    "outlier_mask",
    "evaluate_pair",
]


def _equalize(a: np.ndarray, b: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Randomly downsample the denser cloud so both have min(|a|, |b|) points."""
    na, nb = a.shape[0], b.shape[0]
    if na == nb:
        return a, b
    rng = np.random.default_rng(seed)
    if na > nb:
        return a[np.sort(rng.choice(na, nb, replace=False))], b
    return a, b[np.sort(rng.choice(nb, na, replace=False))]


def chamfer_terms(
    a: PointCloud, b: PointCloud, seed=0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point squared NN distances in both directions, sizes equalized first."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    pa, pb = _equalize(a.points, b.points, seed)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return d_ab**2, d_ba**2


def chamfer(a: PointCloud, b: PointCloud, seed=0) -> float:
    """Symmetric chamfer distance: mean squared NN distance, both directions."""
    d_ab, d_ba = chamfer_terms(a, b, seed)
    return float(d_ab.mean() + d_ba.mean())


def _cost_scale(pa: np.ndarray, pb: np.ndarray) -> float:
    """Upper bound on the squared pairwise distance (union bounding box diagonal)."""
    lo = np.minimum(pa.min(axis=0), pb.min(axis=0))
    hi = np.maximum(pa.max(axis=0), pb.max(axis=0))
    return float(np.sum((hi - lo) ** 2))


def emd_auction_details(
    a: PointCloud, b: PointCloud, epsilon: Optional[float] = None
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Auction EMD with per-point costs.

    Returns (value, assignment, per-point squared costs, final epsilon). The
    scaling schedule starts at half the cost scale and divides by 4 down to
    epsilon (absolute, defaults to cost_scale / (N + 1)); the assignment cost
    is within N * final-epsilon of optimal.
    """
    if len(a) != len(b):
        raise ValueError(f"equal cloud sizes required, got {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("earth mover's distance needs non-empty clouds")
    pa = np.ascontiguousarray(a.points)
    pb = np.ascontiguousarray(b.points)
    n = len(a)
    scale = max(_cost_scale(pa, pb), 1e-12)
    eps_final = float(epsilon) if epsilon is not None else scale / (n + 1)
    if eps_final <= 0.0:
        raise ValueError("epsilon must be positive")
    eps_start = max(scale / 2.0, eps_final)
    assign = _kernels.auction_assignment(pa, pb, eps_start, eps_final)
    costs = np.sum((pa - pb[assign]) ** 2, axis=1)
    return float(costs.mean()), assign, costs, eps_final


def emd_auction(a: PointCloud, b: PointCloud, epsilon: Optional[float] = None) -> float:
    value, _, _, _ = emd_auction_details(a, b, epsilon)
    return value


def depth_error_percent(estimated: float, true: float) -> float:
    """Absolute depth error as a percentage of the true depth."""
    if true <= 0.0:
        raise ValueError("true depth must be positive")
    return abs(estimated - true) / true * 100.0


def outlier_mask(errors: np.ndarray) -> np.ndarray:
    """Tukey fence: flag entries strictly above Q3 + 1.5 * IQR."""
    err = np.asarray(errors, dtype=np.float64)
    if err.ndim != 1 or err.size == 0:
        raise ValueError("errors must be a non-empty 1-D array")
    q1, q3 = np.percentile(err, [25.0, 75.0])
    return err > q3 + 1.5 * (q3 - q1)


@dataclass(frozen=True)
class EvalProtocol:
    """Cloud preparation before metrics: ground removal, crop, downsample.

    crop holds (lo, hi) per axis with infinities for open sides; target_points
    caps the cloud size via a seeded uniform subsample without replacement.
    Steps run in that fixed order.
    """

    crop: Optional[tuple[tuple[float, float], tuple[float, float], tuple[float, float]]] = None
    target_points: Optional[int] = None
    remove_ground: bool = False
    seed: int = 0

    def describe(self) -> str:
        parts = []
        if self.remove_ground:
            parts.append("ground-removed")
        if self.crop is not None:
            parts.append(
                "crop[" + ",".join(f"{lo:g}:{hi:g}" for lo, hi in self.crop) + "]"
            )
        if self.target_points is not None:
            parts.append(f"downsample{self.target_points}")
        return "+".join(parts) if parts else "raw"


def apply_protocol(
    cloud: PointCloud,
    protocol: EvalProtocol,
    ground: Optional[Plane] = None,
    seed=None,
) -> PointCloud:
    """Ground removal (when requested and a plane is given), crop, downsample."""
    out = cloud
    if protocol.remove_ground and ground is not None:
        d = np.abs(ground.signed_distance(out.points))
        out = out.select(np.nonzero(d > 0.2)[0])
    if protocol.crop is not None:
        pts = out.points
        keep = np.ones(len(out), dtype=bool)
        for axis, (lo, hi) in enumerate(protocol.crop):
            keep &= (pts[:, axis] >= lo) & (pts[:, axis] <= hi)
        out = out.select(np.nonzero(keep)[0])
    if protocol.target_points is not None and len(out) > protocol.target_points:
        rng = np.random.default_rng(protocol.seed if seed is None else seed)
        idx = np.sort(rng.choice(len(out), protocol.target_points, replace=False))
        out = out.select(idx)
    return out


@dataclass(frozen=True)
class MetricReport:
    """Per-pair metric values; robust variants drop Tukey-flagged point errors."""

    cd: float
    emd: Optional[float]
    n_points_a: int
    n_points_b: int
    cd_robust: Optional[float] = None
    emd_robust: Optional[float] = None
    outlier_mask: Optional[np.ndarray] = None
    seed: int = 0
    protocol: str = "raw"

    def to_dict(self) -> dict:
        d = {
            "cd_m2": self.cd,
            "emd_m2": self.emd,
            "n_points": [self.n_points_a, self.n_points_b],
            "seed": self.seed,
            "protocol": self.protocol,
        }
        if self.cd_robust is not None:
            d["cd_m2_robust"] = self.cd_robust
        if self.emd_robust is not None:
            d["emd_m2_robust"] = self.emd_robust
        return d


def _robust_mean(errors: np.ndarray) -> float:
    mask = outlier_mask(errors)
    kept = errors[~mask]
    return float(kept.mean()) if kept.size else float(errors.mean())


def evaluate_pair(
    a: PointCloud,
    b: PointCloud,
    protocol: EvalProtocol = EvalProtocol(),
    ground_a: Optional[Plane] = None,
    ground_b: Optional[Plane] = None,
    seed=None,
    compute_emd: bool = True,
) -> MetricReport:
    """Apply the protocol to both clouds and report CD/EMD with robust variants."""
    pa = apply_protocol(a, protocol, ground_a, seed)
    pb = apply_protocol(b, protocol, ground_b, seed)
    eq_seed = protocol.seed if seed is None else seed
    d_ab, d_ba = chamfer_terms(pa, pb, eq_seed)
    cd = float(d_ab.mean() + d_ba.mean())
    cd_robust = _robust_mean(d_ab) + _robust_mean(d_ba)

    emd = emd_robust = None
    mask = None
    if compute_emd:
        qa, qb = _equalize(pa.points, pb.points, eq_seed)
        value, _, costs, _ = emd_auction_details(PointCloud(qa), PointCloud(qb))
        emd = value
        mask = outlier_mask(costs)
        kept = costs[~mask]
        emd_robust = float(kept.mean()) if kept.size else value

    return MetricReport(
        cd=cd,
        emd=emd,
        n_points_a=len(pa),
        n_points_b=len(pb),
        cd_robust=cd_robust,
        emd_robust=emd_robust,
        outlier_mask=mask,
        seed=int(eq_seed) if np.isscalar(eq_seed) else 0,
        protocol=protocol.describe(),
    )
