"""Sequence I/O: cloud binaries, poses, detections, calibration, manifests, PLY.

Byte layouts are checked against struct-packed oracles, text formats against
hand-written files, and manifest validation against its documented error codes.
"""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_transform, transform_gap

from lidarup.dataset_io import (
    Calibration,
    ManifestError,
    TRACK_PALETTE,
    read_calibration,
    read_cloud_bin,
    read_cloud_ply,
    read_detections,
    read_manifest,
    read_poses,
    write_calibration,
    write_cloud_bin,
    write_cloud_ply,
    write_detections,
    write_poses,
)
from lidarup.geometry import CameraModel, PointCloud, RigidTransform
from lidarup.tracking2d import BBox


def make_calibration() -> Calibration:
    k = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    # lidar x-forward to camera z-forward
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return Calibration(
        CameraModel(k, 640, 480), RigidTransform(rot, np.array([0.1, -0.05, 0.2]))
    )


# ---------------------------------------------------------------------------
# Point cloud binaries


class TestCloudBin:
    def test_read_matches_struct_layout(self, tmp_path):
        # Two records packed by hand: the reader must see exactly these values.
        blob = struct.pack("<4f", 1.5, -2.0, 3.25, 0.5) + struct.pack(
            "<4f", -0.125, 4.0, -8.5, 1.0
        )
        p = tmp_path / "cloud.bin"
        p.write_bytes(blob)
        cloud = read_cloud_bin(p)
        assert len(cloud) == 2
        np.testing.assert_allclose(
            cloud.points, [[1.5, -2.0, 3.25], [-0.125, 4.0, -8.5]]
        )
        np.testing.assert_allclose(cloud.intensity, [0.5, 1.0])

    def test_round_trip_exact_for_float32_values(self, tmp_path):
        pts = np.array([[0.5, -1.25, 3.0], [100.0, 0.0, -7.5]])
        inten = np.array([0.25, 0.75])
        p = tmp_path / "c.bin"
        write_cloud_bin(PointCloud(pts, inten), p)
        back = read_cloud_bin(p)
        np.testing.assert_array_equal(back.points, pts)
        np.testing.assert_array_equal(back.intensity, inten)

    def test_intensity_clamped_to_unit_interval(self, tmp_path):
        blob = struct.pack("<4f", 0, 0, 0, -0.5) + struct.pack("<4f", 1, 1, 1, 3.0)
        p = tmp_path / "c.bin"
        p.write_bytes(blob)
        cloud = read_cloud_bin(p)
        np.testing.assert_array_equal(cloud.intensity, [0.0, 1.0])

    def test_missing_intensity_written_as_zero(self, tmp_path):
        p = tmp_path / "c.bin"
        write_cloud_bin(PointCloud(np.array([[1.0, 2.0, 3.0]])), p)
        assert read_cloud_bin(p).intensity[0] == 0.0

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 20)  # not a multiple of 16
        with pytest.raises(ValueError):
            read_cloud_bin(p)

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-1e4, 1e4, width=32),
                st.floats(-1e4, 1e4, width=32),
                st.floats(-1e4, 1e4, width=32),
                st.floats(0.0, 1.0, width=32),
            ),
            min_size=1,
            max_size=40,
        )
    )
    def test_round_trip_property(self, tmp_path_factory, rows):
        arr = np.array(rows, dtype=np.float32).astype(np.float64)
        p = tmp_path_factory.mktemp("rt") / "c.bin"
        write_cloud_bin(PointCloud(arr[:, :3], arr[:, 3]), p)
        back = read_cloud_bin(p)
        np.testing.assert_array_equal(back.points, arr[:, :3])
        np.testing.assert_array_equal(back.intensity, arr[:, 3])


# ---------------------------------------------------------------------------
# Poses


class TestPoses:
    def test_identity_line_parsed(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        (pose,) = read_poses(p)
        assert transform_gap(pose, RigidTransform.identity()) < 1e-15

    def test_round_trip_random_transforms(self, tmp_path):
        rng = np.random.default_rng(5)
        poses = [random_transform(rng) for _ in range(8)]
        p = tmp_path / "poses.txt"
        write_poses(poses, p)
        back = read_poses(p)
        assert len(back) == 8
        for a, b in zip(poses, back):
            assert transform_gap(a, b) < 1e-9

    def test_sloppy_rotation_is_repaired(self, tmp_path):
        rng = np.random.default_rng(6)
        rot = random_transform(rng).rotation.copy()
        rot[0, 1] += 1e-4  # past the repair threshold
        m = np.hstack([rot, np.zeros((3, 1))])
        p = tmp_path / "poses.txt"
        p.write_text(" ".join(f"{v:.17g}" for v in m.reshape(-1)) + "\n")
        (pose,) = read_poses(p)
        np.testing.assert_allclose(
            pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-12
        )

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("\n1 0 0 0 0 1 0 0 0 0 1 0\n\n")
        assert len(read_poses(p)) == 1

    def test_wrong_field_count_reports_line(self, tmp_path):
        p = tmp_path / "poses.txt"
        p.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(ValueError, match=":1"):
            read_poses(p)


# ---------------------------------------------------------------------------
# Detections


class TestDetections:
    def test_parse_line(self, tmp_path):
        p = tmp_path / "det.txt"
        p.write_text("# comment\n\n3 1 0.9 10 20 110 220\n")
        dets = read_detections(p)
        assert set(dets) == {3}
        (box,) = dets[3]
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (10, 20, 110, 220)
        assert box.class_id == 1 and box.score == pytest.approx(0.9)

    def test_round_trip(self, tmp_path):
        dets = {
            0: [BBox(1.0, 2.0, 3.0, 4.0, 2, 0.5)],
            2: [BBox(5.5, 6.5, 9.0, 12.0, 0, 1.0), BBox(0.0, 0.0, 1.0, 1.0, 1, 0.25)],
        }
        p = tmp_path / "det.txt"
        write_detections(dets, p)
        back = read_detections(p)
        assert set(back) == {0, 2}
        assert back[0] == [BBox(1.0, 2.0, 3.0, 4.0, 2, 0.5)]
        assert len(back[2]) == 2

    def test_empty_mapping_writes_empty_file(self, tmp_path):
        p = tmp_path / "det.txt"
        write_detections({}, p)
        assert p.read_text() == ""
        assert read_detections(p) == {}

    def test_wrong_field_count_rejected(self, tmp_path):
        p = tmp_path / "det.txt"
        p.write_text("0 1 0.5 10 20 30\n")
        with pytest.raises(ValueError, match="7 fields"):
            read_detections(p)

    def test_degenerate_box_rejected(self, tmp_path):
        p = tmp_path / "det.txt"
        p.write_text("0 1 0.5 10 20 10 40\n")
        with pytest.raises(ValueError, match="area"):
            read_detections(p)


# ---------------------------------------------------------------------------
# Calibration


class TestCalibration:
    def test_round_trip(self, tmp_path):
        calib = make_calibration()
        p = tmp_path / "calib.txt"
        write_calibration(calib, p)
        back = read_calibration(p)
        assert back.cam.width == 640 and back.cam.height == 480
        np.testing.assert_allclose(back.cam.intrinsic, calib.cam.intrinsic)
        assert transform_gap(back.t_lidar_to_cam, calib.t_lidar_to_cam) < 1e-9

    def test_missing_key_has_stable_code(self, tmp_path):
        p = tmp_path / "calib.txt"
        p.write_text("width 640\nheight 480\n")  # no K, no T_lidar_cam
        with pytest.raises(ManifestError) as exc:
            read_calibration(p)
        assert exc.value.code == "bad_calibration"

    def test_comments_ignored(self, tmp_path):
        calib = make_calibration()
        p = tmp_path / "calib.txt"
        write_calibration(calib, p)
        p.write_text("# sensor rig 3\n" + p.read_text())
        assert read_calibration(p).cam.width == 640


# ---------------------------------------------------------------------------
# Manifest


def write_sequence(root, frame_lines, calib_line="calib calib.txt",
                   poses_line="poses poses.txt", det_line="detections det.txt",
                   n_poses=4):
    """Lay out a minimal sequence directory and return the manifest path."""
    write_calibration(make_calibration(), root / "calib.txt")
    rng = np.random.default_rng(9)
    write_poses([random_transform(rng) for _ in range(n_poses)], root / "poses.txt")
    write_detections({0: [BBox(5, 5, 50, 50, 1, 0.8)]}, root / "det.txt")
    header = [line for line in (calib_line, poses_line, det_line) if line]
    text = "\n".join(header + list(frame_lines)) + "\n"
    manifest = root / "sequence.txt"
    manifest.write_text(text)
    return manifest


class TestManifest:
    def test_frames_parsed_and_joined(self, tmp_path):
        manifest = write_sequence(
            tmp_path,
            [
                "0.0 img0.pgm cloud0.bin 0",
                "0.1 img1.pgm - 1",
                "0.2 img2.pgm cloud2.bin 3",
            ],
        )
        seq = read_manifest(manifest)
        assert len(seq) == 3
        f0, f1, f2 = seq.frames
        assert f0.index == 0 and f0.has_cloud and f0.cloud_path == tmp_path / "cloud0.bin"
        assert f1.cloud_path is None and not f1.has_cloud
        assert f2.image_path == tmp_path / "img2.pgm"
        # detections joined on the frame index
        assert len(f0.detections) == 1 and f1.detections == ()
        # pose joined on the pose_index column
        poses = read_poses(tmp_path / "poses.txt")
        assert transform_gap(f2.pose, poses[3]) < 1e-12

    def test_detections_header_optional(self, tmp_path):
        manifest = write_sequence(tmp_path, ["0.0 img.pgm - 0"], det_line="")
        seq = read_manifest(manifest)
        assert seq.frames[0].detections == ()

    @pytest.mark.parametrize(
        "mutation, code",
        [
            (dict(calib_line=""), "missing_calibration"),
            (dict(poses_line=""), "missing_poses"),
            (dict(frame_lines=["0.0 img.pgm -"]), "bad_frame_line"),
            (dict(frame_lines=["zero img.pgm - 0"]), "bad_frame_line"),
            (dict(frame_lines=["0.0 - cloud.bin 0"]), "missing_image"),
            (dict(frame_lines=["0.0 img.pgm - 7"]), "pose_index_out_of_range"),
            (
                dict(frame_lines=["0.0 a.pgm - 0", "0.0 b.pgm - 1"]),
                "timestamps_not_increasing",
            ),
        ],
    )
    def test_validation_error_codes(self, tmp_path, mutation, code):
        kwargs = dict(frame_lines=["0.0 img.pgm - 0"])
        kwargs.update(mutation)
        manifest = write_sequence(tmp_path, **kwargs)
        with pytest.raises(ManifestError) as exc:
            read_manifest(manifest)
        assert exc.value.code == code

    def test_duplicate_calibration_rejected(self, tmp_path):
        manifest = write_sequence(tmp_path, ["0.0 img.pgm - 0"])
        manifest.write_text("calib calib.txt\n" + manifest.read_text())
        with pytest.raises(ManifestError) as exc:
            read_manifest(manifest)
        assert exc.value.code == "duplicate_calibration"


# ---------------------------------------------------------------------------
# PLY


class TestPly:
    def test_xyz_round_trip_without_color(self, tmp_path):
        pts = np.array([[1.0, 2.0, 3.0], [-4.5, 0.25, 9.0]])
        p = tmp_path / "c.ply"
        write_cloud_ply(PointCloud(pts), p)
        back, rgb = read_cloud_ply(p)
        np.testing.assert_array_equal(back.points, pts)
        assert rgb is None

    def test_label_colors_follow_palette(self, tmp_path):
        pts = np.zeros((4, 3))
        labels = np.array([-1, 0, 3, len(TRACK_PALETTE)])  # static, two tracks, wrap
        p = tmp_path / "c.ply"
        write_cloud_ply(PointCloud(pts), p, labels=labels)
        _, rgb = read_cloud_ply(p)
        assert tuple(rgb[0]) == (0, 0, 0)
        assert tuple(rgb[1]) == TRACK_PALETTE[0]
        assert tuple(rgb[2]) == TRACK_PALETTE[3]
        assert tuple(rgb[3]) == TRACK_PALETTE[0]  # palette cycles

    def test_uniform_color_override(self, tmp_path):
        p = tmp_path / "c.ply"
        write_cloud_ply(PointCloud(np.zeros((2, 3))), p, color=(0, 255, 0))
        _, rgb = read_cloud_ply(p)
        assert np.all(rgb == [0, 255, 0])

    def test_header_declares_vertex_count(self, tmp_path):
        p = tmp_path / "c.ply"
        write_cloud_ply(PointCloud(np.zeros((5, 3))), p)
        text = p.read_bytes().split(b"end_header")[0].decode()
        assert "element vertex 5" in text
        assert "format binary_little_endian 1.0" in text

    def test_non_ply_rejected(self, tmp_path):
        p = tmp_path / "junk.ply"
        p.write_bytes(b"OFF\n0 0 0\n")
        with pytest.raises(ValueError):
            read_cloud_ply(p)
