"""Grayscale images, box-filter pyramids, and pyramidal KLT point tracking."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .geometry import Pixel

__all__ = [
    "GrayImage",
    "Pyramid",
    "TrackStatus",
    "TrackedPoint",
    "to_gray",
    "build_pyramid",
    "klt_track",
    "read_pnm",
    "write_pgm",
]

_MIN_LEVEL_SIDE = 16
_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class GrayImage:
    """Row-major float64 image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Central-difference (gx, gy), computed once and cached."""
        cached = self.__dict__.get("_gradients")
        if cached is None:
            cached = _central_gradients(self.data)
            object.__setattr__(self, "_gradients", cached)
        return cached


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[GrayImage, ...]

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))

    def __len__(self) -> int:
        return len(self.levels)


class TrackStatus(Enum):
    CONVERGED = "converged"
    LOST = "lost"
    OUT_OF_BOUNDS = "out_of_bounds"


@dataclass(frozen=True)
class TrackedPoint:
    source: Pixel
    target: Pixel
    status: TrackStatus
    residual: float


def to_gray(rgb: Union[bytes, np.ndarray], width: int, height: int) -> GrayImage:
    """Convert packed 8-bit RGB (len 3*w*h) to grayscale via 0.299/0.587/0.114."""
    buf = np.frombuffer(rgb, dtype=np.uint8) if isinstance(rgb, (bytes, bytearray)) else np.asarray(rgb, dtype=np.uint8).ravel()
    if buf.size != 3 * width * height:
        raise ValueError(f"expected {3 * width * height} bytes for {width}x{height} RGB, got {buf.size}")
    rgbf = buf.reshape(height, width, 3).astype(np.float64) / 255.0
    return GrayImage(rgbf @ _GRAY_WEIGHTS)


def build_pyramid(image: GrayImage, max_levels: int) -> Pyramid:
    """Halve with a 2x2 box filter until max_levels or the next level would
    drop under 16 pixels on a side. Odd trailing rows/columns are cropped."""
    if max_levels < 1:
        raise ValueError("max_levels must be >= 1")
    if image.width < _MIN_LEVEL_SIDE or image.height < _MIN_LEVEL_SIDE:
        raise ValueError(f"image must be at least {_MIN_LEVEL_SIDE}x{_MIN_LEVEL_SIDE}")
    levels = [image]
    while len(levels) < max_levels:
        prev = levels[-1].data
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        if h2 < _MIN_LEVEL_SIDE or w2 < _MIN_LEVEL_SIDE:
            break
        a = prev[: 2 * h2, : 2 * w2]
        down = (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]) / 4.0
        levels.append(GrayImage(down))
    for level in levels:
        level.gradients  # warm the cache while we are in preprocessing
    return Pyramid(tuple(levels))


def _central_gradients(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(data)
    return np.ascontiguousarray(gx), np.ascontiguousarray(gy)


def klt_track(
    prev: Pyramid,
    nxt: Pyramid,
    points: Union[Sequence[Pixel], np.ndarray],
    window: int = 21,
    max_iters: int = 30,
    eps: float = 0.01,
    min_eig: float = 1e-4,
    max_residual: float = 0.1,
    initial: Optional[Union[Sequence[Pixel], np.ndarray]] = None,
) -> list[TrackedPoint]:
    """Pyramidal Lucas-Kanade: track points from prev to nxt.

    Coarse-to-fine over matching pyramid levels; at each level a 2x2 normal
    system G d = b is iterated with bilinear sampling until the update falls
    under eps or max_iters is hit. A point is lost when the windowed structure
    tensor's smaller eigenvalue (normalized per pixel) falls under min_eig,
    when the iteration diverges, or when the final temporal residual exceeds
    max_residual; it is out-of-bounds when the window leaves the image.

    When `initial` is given it must hold one guessed target position per
    point; the search starts from that displacement at the coarsest level
    instead of zero.
    """
    if window < 5 or window % 2 == 0:
        raise ValueError("window must be odd and >= 5")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if len(prev) != len(nxt):
        raise ValueError("pyramids must have the same number of levels")
    for a, b in zip(prev.levels, nxt.levels):
        if (a.width, a.height) != (b.width, b.height):
            raise ValueError("pyramid levels must have matching dimensions")

    pts = np.asarray([(p[0], p[1]) for p in points], dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return []

    if initial is None:
        disp = np.zeros((n, 2), dtype=np.float64)
    else:
        guess = np.asarray([(p[0], p[1]) for p in initial], dtype=np.float64).reshape(-1, 2)
        if guess.shape != pts.shape:
            raise ValueError(f"initial must match points, got {guess.shape} vs {pts.shape}")
        if not np.all(np.isfinite(guess)):
            raise ValueError("initial guesses must be finite")
        # Stored in coarsest-level units; the loop rescales on the way down.
        disp = (guess - pts) / float(2 ** (len(prev) - 1))
    state = np.full(n, _kernels.STATE_TRACKING, dtype=np.int64)
    resid = np.zeros(n, dtype=np.float64)
    win_r = window // 2

    for level in range(len(prev) - 1, -1, -1):
        i_prev = prev.levels[level].data
        i_next = nxt.levels[level].data
        grad_x, grad_y = prev.levels[level].gradients
        scale = float(2**level)
        _kernels.klt_level(
            i_prev,
            grad_x,
            grad_y,
            i_next,
            pts / scale,
            disp,
            state,
            resid,
            win_r,
            max_iters,
            eps,
            min_eig,
            level == 0,
        )
        if level > 0:
            disp[state == _kernels.STATE_TRACKING] *= 2.0

    w0, h0 = prev.levels[0].width, prev.levels[0].height
    out: list[TrackedPoint] = []
    for k in range(n):
        source = Pixel(float(pts[k, 0]), float(pts[k, 1]))
        target = Pixel(float(pts[k, 0] + disp[k, 0]), float(pts[k, 1] + disp[k, 1]))
        if state[k] == _kernels.STATE_OOB:
            status = TrackStatus.OUT_OF_BOUNDS
        elif state[k] == _kernels.STATE_LOST:
            status = TrackStatus.LOST
        else:
            inside = 0.0 <= target.u < w0 and 0.0 <= target.v < h0
            good = inside and np.isfinite(resid[k]) and resid[k] <= max_residual
            status = TrackStatus.CONVERGED if good else TrackStatus.LOST
        out.append(TrackedPoint(source, target, status, float(resid[k])))
    return out


# ---------------------------------------------------------------------------
# Netpbm raster I/O (binary P5 grayscale and P6 RGB)

def _parse_pnm_header(blob: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, data_offset)."""
    if len(blob) < 2 or blob[:1] != b"P":
        raise ValueError("not a binary PNM file")
    magic = blob[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)").match(blob, pos)
        if m is None:
            raise ValueError("malformed PNM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(blob) or blob[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ValueError("malformed PNM header")
    return magic, fields[0], fields[1], fields[2], pos + 1


def read_pnm(path: Union[str, Path]) -> GrayImage:
    """Read a binary PGM (P5, 8- or 16-bit) or PPM (P6, 8-bit) as grayscale."""
    blob = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_pnm_header(blob)
    if magic == b"P5":
        if maxval <= 0 or maxval > 65535:
            raise ValueError(f"unsupported PGM maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height
        if len(blob) - offset < count * dtype.itemsize:
            raise ValueError("truncated PGM payload")
        raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        return GrayImage(raw.reshape(height, width).astype(np.float64) / maxval)
    if magic == b"P6":
        if maxval != 255:
            raise ValueError("only 8-bit PPM is supported")
        count = 3 * width * height
        raw = blob[offset : offset + count]
        if len(raw) != count:
            raise ValueError("truncated PPM payload")
        return to_gray(raw, width, height)
    raise ValueError(f"unsupported PNM magic {magic!r}")


def write_pgm(image: GrayImage, path: Union[str, Path], maxval: int = 65535) -> None:
    """Write a binary PGM; 16-bit by default to keep sub-pixel gradients."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    scaled = np.clip(np.rint(image.data * maxval), 0, maxval)
    payload = scaled.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode()
    Path(path).write_bytes(header + payload)
