"""Pipeline configuration: defaults, key-value file parsing, validation.

Config files are plain text, one `key = value` per line, `#` comments allowed.
Unknown keys are rejected. Tracking runs at full image resolution; there is
deliberately no downscale knob.

Keys and defaults:
    seed = 0
    klt.window = 21            odd, >= 5
    klt.levels = 3             >= 1
    klt.iters = 30             >= 1
    klt.eps = 0.01             > 0, pixels
    klt.min_eig = 1e-4         > 0, texture gate
    klt.max_residual = 0.1     > 0, mean abs intensity difference
    klt.max_points = 300       >= 6, per-object cap on tracked pixels
    klt.anchor_refine = true   re-align chained tracks against the anchor image
    msac.threshold = 0.2       > 0, meters
    msac.iters = 200           >= 1
    cluster.tolerance = 0.7    > 0, meters
    cluster.min_size = 5       >= 1
    cluster.election = largest largest | nearest
    mlesac.sigma = 2.0         > 0, pixels
    mlesac.iters = 500         >= 1
    mlesac.confidence = 0.99   in (0, 1)
    tracker.iou_gate = 0.3     in [0, 1]
    tracker.max_missed = 2     >= 0
    pose.min_points = 6        >= 6; smaller clusters ride the static transform
    pose.dynamic_translation = 0.05   meters, static/dynamic gate
    pose.dynamic_rotation_deg = 0.5   degrees, static/dynamic gate
    protocol.target_points =          optional int >= 1
    protocol.crop =                   optional "x0 x1 y0 y1 z0 z1" (inf allowed)
    protocol.remove_ground = false
    protocol.seed = 0
    protocol.restrict_fov_first = true
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .metrics import EvalProtocol

__all__ = ["ConfigError", "PipelineConfig"]


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text.strip()


@dataclass
class PipelineConfig:
    seed: int = 0

    klt_window: int = 21
    klt_levels: int = 3
    klt_iters: int = 30
    klt_eps: float = 0.01
    klt_min_eig: float = 1e-4
    klt_max_residual: float = 0.1
    klt_max_points: int = 300
    klt_anchor_refine: bool = True

    msac_threshold: float = 0.2
    msac_iters: int = 200

    cluster_tolerance: float = 0.7
    cluster_min_size: int = 5
    cluster_election: str = "largest"

    mlesac_sigma: float = 2.0
    mlesac_iters: int = 500
    mlesac_confidence: float = 0.99

    tracker_iou_gate: float = 0.3
    tracker_max_missed: int = 2

    pose_min_points: int = 6
    pose_dynamic_translation: float = 0.05
    pose_dynamic_rotation_deg: float = 0.5

    protocol_target_points: Optional[int] = None
    protocol_crop: Optional[tuple] = None
    protocol_remove_ground: bool = False
    protocol_seed: int = 0
    protocol_restrict_fov_first: bool = True

    _KEYMAP = {
        "seed": "seed",
        "klt.window": "klt_window",
        "klt.levels": "klt_levels",
        "klt.iters": "klt_iters",
        "klt.eps": "klt_eps",
        "klt.min_eig": "klt_min_eig",
        "klt.max_residual": "klt_max_residual",
        "klt.max_points": "klt_max_points",
        "klt.anchor_refine": "klt_anchor_refine",
        "msac.threshold": "msac_threshold",
        "msac.iters": "msac_iters",
        "cluster.tolerance": "cluster_tolerance",
        "cluster.min_size": "cluster_min_size",
        "cluster.election": "cluster_election",
        "mlesac.sigma": "mlesac_sigma",
        "mlesac.iters": "mlesac_iters",
        "mlesac.confidence": "mlesac_confidence",
        "tracker.iou_gate": "tracker_iou_gate",
        "tracker.max_missed": "tracker_max_missed",
        "pose.min_points": "pose_min_points",
        "pose.dynamic_translation": "pose_dynamic_translation",
        "pose.dynamic_rotation_deg": "pose_dynamic_rotation_deg",
        "protocol.target_points": "protocol_target_points",
        "protocol.crop": "protocol_crop",
        "protocol.remove_ground": "protocol_remove_ground",
        "protocol.seed": "protocol_seed",
        "protocol.restrict_fov_first": "protocol_restrict_fov_first",
    }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PipelineConfig":
        cfg = cls()
        for key, value in mapping.items():
            attr = cls._KEYMAP.get(key)
            if attr is None:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "protocol.crop" and isinstance(value, str):
                parts = value.split()
                if len(parts) != 6:
                    raise ConfigError("protocol.crop needs 6 numbers: x0 x1 y0 y1 z0 z1")
                nums = [float(p) for p in parts]
                value = ((nums[0], nums[1]), (nums[2], nums[3]), (nums[4], nums[5]))
            setattr(cfg, attr, value)
        cfg.validate()
        return cfg

    @classmethod
    def mapping_from_file(cls, path: Union[str, Path]) -> dict:
        mapping: dict = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key == "protocol.crop":
                mapping[key] = raw.strip()
            else:
                mapping[key] = _parse_scalar(raw)
        return mapping

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PipelineConfig":
        return cls.from_mapping(cls.mapping_from_file(path))

    def validate(self) -> None:
        checks = [
            (self.klt_window >= 5 and self.klt_window % 2 == 1, "klt.window must be odd and >= 5"),
            (self.klt_levels >= 1, "klt.levels must be >= 1"),
            (self.klt_iters >= 1, "klt.iters must be >= 1"),
            (self.klt_eps > 0, "klt.eps must be positive"),
            (self.klt_min_eig > 0, "klt.min_eig must be positive"),
            (self.klt_max_residual > 0, "klt.max_residual must be positive"),
            (self.klt_max_points >= 6, "klt.max_points must be >= 6"),
            (isinstance(self.klt_anchor_refine, bool), "klt.anchor_refine must be a boolean"),
            (self.msac_threshold > 0, "msac.threshold must be positive"),
            (self.msac_iters >= 1, "msac.iters must be >= 1"),
            (self.cluster_tolerance > 0, "cluster.tolerance must be positive"),
            (self.cluster_min_size >= 1, "cluster.min_size must be >= 1"),
            (self.cluster_election in ("largest", "nearest"), "cluster.election must be largest or nearest"),
            (self.mlesac_sigma > 0, "mlesac.sigma must be positive"),
            (self.mlesac_iters >= 1, "mlesac.iters must be >= 1"),
            (0.0 < self.mlesac_confidence < 1.0, "mlesac.confidence must be in (0, 1)"),
            (0.0 <= self.tracker_iou_gate <= 1.0, "tracker.iou_gate must be in [0, 1]"),
            (self.tracker_max_missed >= 0, "tracker.max_missed must be >= 0"),
            (self.pose_min_points >= 6, "pose.min_points must be >= 6"),
            (self.pose_dynamic_translation >= 0, "pose.dynamic_translation must be >= 0"),
            (self.pose_dynamic_rotation_deg >= 0, "pose.dynamic_rotation_deg must be >= 0"),
        ]
        if self.protocol_target_points is not None:
            checks.append((self.protocol_target_points >= 1, "protocol.target_points must be >= 1"))
        if self.protocol_crop is not None:
            ok = len(self.protocol_crop) == 3 and all(
                len(pair) == 2 and not math.isnan(pair[0]) and not math.isnan(pair[1]) and pair[0] <= pair[1]
                for pair in self.protocol_crop
            )
            checks.append((ok, "protocol.crop bounds must satisfy lo <= hi per axis"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_protocol(self) -> EvalProtocol:
        return EvalProtocol(
            crop=self.protocol_crop,
            target_points=self.protocol_target_points,
            remove_ground=self.protocol_remove_ground,
            seed=self.protocol_seed,
        )

    def to_mapping(self) -> dict:
        """Inverse of from_mapping, with deterministic key order."""
        out = {}
        for key, attr in self._KEYMAP.items():
            value = getattr(self, attr)
            if key == "protocol.crop" and value is not None:
                value = " ".join(f"{v:g}" for pair in value for v in pair)
            out[key] = value
        return out
