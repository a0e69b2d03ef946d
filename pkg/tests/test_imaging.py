import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarup.geometry import Pixel
from lidarup.imaging import (
    GrayImage,
    Pyramid,
    TrackStatus,
    build_pyramid,
    klt_track,
    read_pnm,
    to_gray,
    write_pgm,
)


def textured_field(width: int, height: int, shift=(0.0, 0.0), seed: int = 0) -> GrayImage:
    """Band-limited random texture sampled analytically, so any sub-pixel
    shift is exact rather than interpolated."""
    rng = np.random.default_rng(seed)
    xs = np.arange(width) - shift[0]
    ys = np.arange(height) - shift[1]
    xg, yg = np.meshgrid(xs, ys)
    img = np.zeros((height, width))
    # Periods of 16px and up: unambiguous for shifts of several pixels.
    for _ in range(24):
        fx, fy = rng.uniform(-0.06, 0.06, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img += rng.uniform(0.2, 1.0) * np.sin(2.0 * np.pi * (fx * xg + fy * yg) + phase)
    img -= img.min()
    img /= img.max()
    return GrayImage(img)


class TestToGray:
    def test_weights_oracle(self):
        # One red, one green, one blue pixel in a 3x1 image.
        rgb = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])
        img = to_gray(rgb, 3, 1)
        assert np.allclose(img.data[0], [0.299, 0.587, 0.114], atol=1e-12)

    def test_mixed_pixel_oracle(self):
        img = to_gray(bytes([10, 200, 30]), 1, 1)
        assert abs(img.data[0, 0] - (0.299 * 10 + 0.587 * 200 + 0.114 * 30) / 255.0) < 1e-12

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError, match="expected"):
            to_gray(bytes(10), 2, 2)


class TestPyramid:
    def test_level_sizes_halve(self):
        img = GrayImage(np.zeros((64, 128)))
        pyr = build_pyramid(img, 3)
        sizes = [(lv.width, lv.height) for lv in pyr.levels]
        assert sizes == [(128, 64), (64, 32), (32, 16)]

    def test_stops_before_min_side(self):
        # 48 -> 24 -> 12 would go under 16, so only two levels materialize.
        pyr = build_pyramid(GrayImage(np.zeros((48, 96))), 5)
        assert len(pyr) == 2

    def test_box_filter_oracle(self):
        data = np.arange(16.0).reshape(4, 4)
        down = build_pyramid(GrayImage(np.tile(data, (8, 8))), 2).levels[1].data
        # 2x2 block mean of the tiled pattern's top-left block: (0+1+4+5)/4
        assert down[0, 0] == 2.5

    def test_odd_edges_cropped(self):
        img = GrayImage(np.zeros((33, 65)))
        pyr = build_pyramid(img, 2)
        assert (pyr.levels[1].width, pyr.levels[1].height) == (32, 16)

    def test_rejects_small_images(self):
        with pytest.raises(ValueError):
            build_pyramid(GrayImage(np.zeros((8, 100))), 2)

    @given(st.integers(16, 200), st.integers(16, 200), st.integers(1, 6))
    @settings(max_examples=50, deadline=None)
    def test_level_count_and_monotone_sizes(self, w, h, levels):
        pyr = build_pyramid(GrayImage(np.zeros((h, w))), levels)
        assert 1 <= len(pyr) <= levels
        for a, b in zip(pyr.levels, pyr.levels[1:]):
            assert b.width == a.width // 2 and b.height == a.height // 2
            assert b.width >= 16 and b.height >= 16


class TestKLT:
    def test_integer_shift_recovery(self):
        prev = textured_field(160, 120, seed=1)
        nxt = textured_field(160, 120, shift=(3.0, 2.0), seed=1)
        # Interior grid: window must stay inside even at the coarsest level.
        pts = [Pixel(u, v) for u in (56.0, 80.0, 104.0) for v in (50.0, 60.0, 70.0)]
        tracked = klt_track(build_pyramid(prev, 3), build_pyramid(nxt, 3), pts)
        assert all(tp.status is TrackStatus.CONVERGED for tp in tracked)
        for tp in tracked:
            assert abs(tp.target.u - tp.source.u - 3.0) < 0.05
            assert abs(tp.target.v - tp.source.v - 2.0) < 0.05

    def test_subpixel_shift_recovery(self):
        prev = textured_field(160, 120, seed=2)
        nxt = textured_field(160, 120, shift=(0.6, -1.4), seed=2)
        pts = [Pixel(u, v) for u in (50.0, 80.0, 110.0) for v in (45.0, 75.0)]
        tracked = klt_track(build_pyramid(prev, 2), build_pyramid(nxt, 2), pts)
        errs = [np.hypot(tp.target.u - tp.source.u - 0.6, tp.target.v - tp.source.v + 1.4) for tp in tracked]
        assert all(tp.status is TrackStatus.CONVERGED for tp in tracked)
        assert np.mean(errs) < 0.1

    def test_flat_window_is_lost(self):
        flat = GrayImage(np.full((64, 64), 0.5))
        textured = textured_field(64, 64, seed=3)
        pyr_flat = build_pyramid(flat, 1)
        tracked = klt_track(pyr_flat, build_pyramid(textured, 1), [Pixel(32.0, 32.0)])
        assert tracked[0].status is TrackStatus.LOST

    def test_window_outside_image_is_out_of_bounds(self):
        img = build_pyramid(textured_field(64, 64, seed=4), 1)
        tracked = klt_track(img, img, [Pixel(2.0, 32.0)])
        assert tracked[0].status is TrackStatus.OUT_OF_BOUNDS

    def test_zero_motion_stays_put(self):
        pyr = build_pyramid(textured_field(128, 96, seed=5), 3)
        pts = [Pixel(64.0, 48.0), Pixel(40.0, 40.0)]
        tracked = klt_track(pyr, pyr, pts)
        for tp in tracked:
            assert tp.status is TrackStatus.CONVERGED
            assert abs(tp.target.u - tp.source.u) < 1e-3
            assert abs(tp.target.v - tp.source.v) < 1e-3
            assert tp.residual < 1e-9

    def test_parameter_validation(self):
        pyr = build_pyramid(textured_field(64, 64), 2)
        with pytest.raises(ValueError, match="window"):
            klt_track(pyr, pyr, [Pixel(32, 32)], window=10)
        with pytest.raises(ValueError, match="window"):
            klt_track(pyr, pyr, [Pixel(32, 32)], window=3)
        with pytest.raises(ValueError, match="max_iters"):
            klt_track(pyr, pyr, [Pixel(32, 32)], max_iters=0)
        with pytest.raises(ValueError, match="eps"):
            klt_track(pyr, pyr, [Pixel(32, 32)], eps=0.0)
        with pytest.raises(ValueError, match="levels"):
            klt_track(pyr, build_pyramid(textured_field(64, 64), 1), [Pixel(32, 32)])

    def test_empty_input(self):
        pyr = build_pyramid(textured_field(64, 64), 2)
        assert klt_track(pyr, pyr, []) == []

    def test_accepts_array_points(self):
        pyr = build_pyramid(textured_field(64, 64, seed=6), 2)
        tracked = klt_track(pyr, pyr, np.array([[32.0, 32.0], [30.0, 20.0]]))
        assert len(tracked) == 2
        assert all(tp.status is TrackStatus.CONVERGED for tp in tracked)


class TestPnmIO:
    def test_pgm_round_trip_16bit(self, tmp_path):
        img = textured_field(32, 24, seed=7)
        path = tmp_path / "img.pgm"
        write_pgm(img, path)
        back = read_pnm(path)
        assert back.data.shape == (24, 32)
        assert np.max(np.abs(back.data - img.data)) <= 0.5 / 65535 + 1e-12

    def test_pgm_round_trip_8bit(self, tmp_path):
        img = textured_field(16, 16, seed=8)
        path = tmp_path / "img8.pgm"
        write_pgm(img, path, maxval=255)
        back = read_pnm(path)
        assert np.max(np.abs(back.data - img.data)) <= 0.5 / 255 + 1e-12

    def test_ppm_reads_as_gray(self, tmp_path):
        w, h = 4, 2
        rgb = bytes([200, 10, 30] * (w * h))
        path = tmp_path / "img.ppm"
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb)
        img = read_pnm(path)
        expected = (0.299 * 200 + 0.587 * 10 + 0.114 * 30) / 255.0
        assert np.allclose(img.data, expected, atol=1e-12)

    def test_header_comments_are_skipped(self, tmp_path):
        payload = bytes(range(6))
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        img = read_pnm(path)
        assert img.data.shape == (2, 3)
        assert img.data[1, 2] == 5 / 255.0

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(ValueError, match="truncated"):
            read_pnm(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "b.pnm"
        path.write_bytes(b"P3\n1 1\n255\n0")
        with pytest.raises(ValueError):
            read_pnm(path)
