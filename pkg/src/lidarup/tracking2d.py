"""2-D detection boxes, IoU association, and a minimum-cost bipartite matcher."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "BBox",
    "ObjectTrack",
    "TrackUpdate",
    "ObjectTracker",
    "iou",
    "hungarian_assign",
    "update_tracks",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box with exclusive max edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the boxes do not overlap."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def hungarian_assign(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost matching of size min(rows, cols) on a rectangular matrix.

    Successive-shortest-augmenting-path formulation with row/column
    potentials. Rows are introduced in ascending index order and column ties
    resolve to the lowest index, so the result is deterministic. Returns
    (row, col) pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {c.shape}")
    if c.size == 0:
        return []
    if not np.isfinite(c).all():
        raise ValueError("cost entries must be finite")

    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape

    # Column 0 is a virtual slot; real columns are 1..m.
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based, 0 free)
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cols = np.nonzero(~used[1:])[0] + 1
            cur = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            local = int(np.argmin(minv[cols]))
            j1 = int(cols[local])
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j_prev = int(way[j0])
            match[j0] = match[j_prev]
            j0 = j_prev

    pairs = []
    for j in range(1, m + 1):
        if match[j] != 0:
            r, col = int(match[j]) - 1, j - 1
            pairs.append((col, r) if transposed else (r, col))
    pairs.sort()
    return pairs


@dataclass
class ObjectTrack:
    """One tracked object: id, box history, and pipeline-side 3-D bindings."""

    track_id: int
    bbox_history: list[tuple[int, BBox]] = field(default_factory=list)
    age: int = 1
    missed: int = 0
    cluster_indices: Optional[np.ndarray] = None
    tracked_pixels: Optional[np.ndarray] = None

    @property
    def last_bbox(self) -> BBox:
        return self.bbox_history[-1][1]

    @property
    def last_frame(self) -> int:
        return self.bbox_history[-1][0]


@dataclass(frozen=True)
class TrackUpdate:
    matched: tuple[tuple[int, int], ...]  # (track_id, detection index)
    born: tuple[int, ...]
    dead: tuple[int, ...]


def update_tracks(
    tracks: list[ObjectTrack],
    detections: Sequence[BBox],
    frame: int,
    iou_gate: float = 0.3,
    max_missed: int = 2,
    next_track_id: int = 0,
) -> tuple[list[ObjectTrack], TrackUpdate, int]:
    """One tracking step: match by IoU via hungarian_assign, then age tracks.

    Assignments with IoU below iou_gate are rejected; unmatched detections
    become new tracks that are active immediately; tracks unmatched for more
    than max_missed consecutive frames are dropped. Track ids are never
    reused within a run (next_track_id only grows).
    """
    if not 0.0 <= iou_gate <= 1.0:
        raise ValueError("iou_gate must lie in [0, 1]")
    if max_missed < 0:
        raise ValueError("max_missed must be >= 0")

    matched_pairs: list[tuple[int, int]] = []
    matched_tracks: set[int] = set()
    matched_dets: set[int] = set()
    if tracks and detections:
        cost = np.empty((len(tracks), len(detections)))
        for ti, track in enumerate(tracks):
            for di, det in enumerate(detections):
                cost[ti, di] = 1.0 - iou(track.last_bbox, det)
        for ti, di in hungarian_assign(cost):
            if 1.0 - cost[ti, di] < iou_gate:
                continue
            matched_pairs.append((tracks[ti].track_id, di))
            matched_tracks.add(ti)
            matched_dets.add(di)

    survivors: list[ObjectTrack] = []
    dead: list[int] = []
    det_by_track = dict(matched_pairs)
    for ti, track in enumerate(tracks):
        if ti in matched_tracks:
            det = detections[det_by_track[track.track_id]]
            track.bbox_history.append((frame, det))
            track.age += 1
            track.missed = 0
            survivors.append(track)
        else:
            track.missed += 1
            if track.missed > max_missed:
                dead.append(track.track_id)
            else:
                survivors.append(track)

    born: list[int] = []
    for di, det in enumerate(detections):
        if di in matched_dets:
            continue
        survivors.append(ObjectTrack(next_track_id, [(frame, det)]))
        born.append(next_track_id)
        next_track_id += 1

    report = TrackUpdate(tuple(matched_pairs), tuple(born), tuple(dead))
    return survivors, report, next_track_id


class ObjectTracker:
    """Stateful wrapper around update_tracks owning the id counter."""

    def __init__(self, iou_gate: float = 0.3, max_missed: int = 2) -> None:
        self.iou_gate = iou_gate
        self.max_missed = max_missed
        self.tracks: list[ObjectTrack] = []
        self._next_id = 0

    def update(self, detections: Sequence[BBox], frame: int) -> TrackUpdate:
        self.tracks, report, self._next_id = update_tracks(
            self.tracks, detections, frame, self.iou_gate, self.max_missed, self._next_id
        )
        return report
