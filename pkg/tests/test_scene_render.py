import numpy as np
import pytest

from foaground.errors import FormatError, GeometryError
from foaground.scene_render import (
    CameraPose,
    InstanceMask,
    Loudspeaker,
    VisualScene,
    default_speaker_extents,
    gt_box_camera,
    read_mask,
    render_depth,
    visibility_threshold,
    visible_pixels,
    write_mask,
)
from foaground.spatial_frame import CameraIntrinsics, backproject, yaw_matrix

INTR = CameraIntrinsics(fx=554.26, fy=554.26, cx=319.5, cy=239.5, width=640, height=480)


def simple_scene(speakers, cam=(3.0, 1.2, 4.0), yaw=0.0, room=(6, 3, 5), intr=INTR):
    return VisualScene(
        room_dims=room,
        loudspeakers=speakers,
        camera=CameraPose(cam, yaw),
        intrinsics=intr,
    )


class TestRenderDepth:
    def test_frontal_wall_distance(self):
        # camera at z=4 facing -z: the z=0 wall is 4 m ahead
        scene = simple_scene([Loudspeaker(1, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))])
        depth, _ = render_depth(scene)
        assert np.all(depth.depth > 0)
        assert depth.depth[240, 320] == pytest.approx(4.0, abs=1e-6)

    def test_occlusion_removes_back_box(self):
        front = Loudspeaker(1, (3.0, 1.2, 2.5), (0.8, 0.8, 0.3))
        back = Loudspeaker(2, (3.0, 1.2, 1.0), (0.4, 0.4, 0.3))
        _, mask = render_depth(simple_scene([front, back]))
        assert visible_pixels(mask, 1) > 0
        assert visible_pixels(mask, 2) == 0

    def test_camera_outside_room(self):
        scene = simple_scene(
            [Loudspeaker(1, (1, 1, 1), (0.2, 0.2, 0.2))], cam=(7.0, 1.0, 1.0)
        )
        with pytest.raises(GeometryError):
            render_depth(scene)

    def test_backprojection_lands_on_surfaces(self):
        rng = np.random.default_rng(0)
        spk = Loudspeaker(1, (2.5, 0.9, 2.0), tuple(default_speaker_extents(rng)))
        scene = simple_scene([spk], cam=(3.0, 1.3, 4.2), yaw=12.0)
        depth, mask = render_depth(scene)
        cloud = backproject(depth)
        # world coordinates of every back-projected point
        R = yaw_matrix(scene.camera.yaw_deg)
        pts = cloud.points.reshape(-1, 3) @ R.T + np.asarray(scene.camera.position)
        dims = np.asarray(scene.room_dims)
        on_box = mask.ids.reshape(-1) == 1
        wall_dist = np.minimum(np.abs(pts), np.abs(dims - pts)).min(axis=1)
        assert np.all(wall_dist[~on_box] < 1e-4)
        lo = np.asarray(spk.center) - np.asarray(spk.extents) / 2
        hi = np.asarray(spk.center) + np.asarray(spk.extents) / 2
        face = np.minimum(np.abs(pts - lo), np.abs(pts - hi)).min(axis=1)
        inside = np.all((pts >= lo - 1e-4) & (pts <= hi + 1e-4), axis=1)
        assert np.all(face[on_box] < 1e-4) and np.all(inside[on_box])

    def test_box_pixels_inside_gt_box(self):
        rng = np.random.default_rng(1)
        spk = Loudspeaker(1, (3.4, 0.8, 1.8), tuple(default_speaker_extents(rng)))
        scene = simple_scene([spk], yaw=-25.0)
        depth, mask = render_depth(scene)
        box = gt_box_camera(scene, 1)
        cloud = backproject(depth)
        pts = cloud.points[(mask.ids == 1) & cloud.valid]
        assert len(pts) > 0
        assert np.all(pts >= box.min_corner - 1e-3)
        assert np.all(pts <= box.max_corner + 1e-3)

    def test_resolution_consistency(self):
        spk = Loudspeaker(1, (3.0, 1.0, 2.2), (0.4, 0.9, 0.4))
        full = simple_scene([spk])
        half_intr = CameraIntrinsics(
            fx=INTR.fx / 2, fy=INTR.fy / 2, cx=159.5, cy=119.5, width=320, height=240
        )
        half = simple_scene([spk], intr=half_intr)
        _, mask_full = render_depth(full)
        _, mask_half = render_depth(half)
        v_full = visible_pixels(mask_full, 1)
        v_half = visible_pixels(mask_half, 1)
        assert abs(v_full - 4 * v_half) <= 8 * np.sqrt(v_full) + 16

    def test_deterministic(self):
        spk = Loudspeaker(1, (3.0, 1.0, 2.2), (0.4, 0.9, 0.4))
        d1, m1 = render_depth(simple_scene([spk]))
        d2, m2 = render_depth(simple_scene([spk]))
        np.testing.assert_array_equal(d1.depth, d2.depth)
        np.testing.assert_array_equal(m1.ids, m2.ids)


class TestVisibility:
    def test_absent_id_zero(self):
        _, mask = render_depth(simple_scene([Loudspeaker(1, (3, 1, 2), (0.3, 0.9, 0.3))]))
        assert visible_pixels(mask, 9) == 0

    def test_full_frame_box(self):
        spk = Loudspeaker(1, (3.0, 1.5, 2.8), (2.5, 2.9, 0.5))
        _, mask = render_depth(simple_scene([spk], cam=(3.0, 1.5, 3.6)))
        assert visible_pixels(mask, 1) == 640 * 480

    def test_threshold_scaling(self):
        assert visibility_threshold(1920, 1080) == 500
        assert visibility_threshold(640, 480) == 74
        assert visibility_threshold(320, 240) == 18


class TestGtBox:
    def test_zero_yaw_on_axis(self):
        spk = Loudspeaker(1, (3.0, 0.9, 2.0), (0.3, 0.8, 0.4))
        scene = simple_scene([spk], cam=(3.0, 1.2, 4.0), yaw=0.0)
        box = gt_box_camera(scene, 1)
        np.testing.assert_allclose(box.center, [0.0, -0.3, -2.0], atol=1e-12)
        np.testing.assert_allclose(box.extents, [0.3, 0.8, 0.4], atol=1e-12)

    def test_rotated_extents_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            extents = (0.3, 0.8, 0.5)
            spk = Loudspeaker(1, (3.0, 1.0, 2.0), extents)
            yaw = float(rng.uniform(-180, 180))
            scene = simple_scene([spk], yaw=yaw)
            box = gt_box_camera(scene, 1)
            t = np.radians(yaw)
            ex = abs(np.cos(t)) * extents[0] + abs(np.sin(t)) * extents[2]
            ez = abs(np.sin(t)) * extents[0] + abs(np.cos(t)) * extents[2]
            np.testing.assert_allclose(box.extents, [ex, extents[1], ez], atol=1e-9)

    def test_quarter_turn_swaps_extents(self):
        spk = Loudspeaker(1, (3.0, 1.0, 2.0), (0.3, 0.8, 0.5))
        box = gt_box_camera(simple_scene([spk], yaw=90.0), 1)
        np.testing.assert_allclose(box.extents, [0.5, 0.8, 0.3], atol=1e-9)

    def test_unknown_id(self):
        scene = simple_scene([Loudspeaker(1, (3, 1, 2), (0.3, 0.9, 0.3))])
        with pytest.raises(KeyError):
            gt_box_camera(scene, 4)


class TestSceneValidation:
    def test_speaker_outside_room(self):
        with pytest.raises(GeometryError):
            simple_scene([Loudspeaker(1, (5.9, 1.0, 2.0), (0.4, 0.9, 0.4))])

    def test_too_many_speakers(self):
        speakers = [
            Loudspeaker(i + 1, (1.0 + i, 1.0, 2.0), (0.3, 0.8, 0.3)) for i in range(4)
        ]
        with pytest.raises(GeometryError):
            simple_scene(speakers)

    def test_duplicate_ids(self):
        speakers = [
            Loudspeaker(1, (1.0, 1.0, 2.0), (0.3, 0.8, 0.3)),
            Loudspeaker(1, (3.0, 1.0, 2.0), (0.3, 0.8, 0.3)),
        ]
        with pytest.raises(GeometryError):
            simple_scene(speakers)


class TestMaskIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        ids = rng.integers(0, 4, size=(24, 32)).astype(np.uint16)
        write_mask(InstanceMask(ids), tmp_path / "m.bin")
        back = read_mask(tmp_path / "m.bin")
        np.testing.assert_array_equal(back.ids, ids)

    def test_size_mismatch(self, tmp_path):
        write_mask(InstanceMask(np.zeros((4, 4), dtype=np.uint16)), tmp_path / "m.bin")
        (tmp_path / "m.bin").write_bytes(b"\x00" * 10)
        with pytest.raises(FormatError):
            read_mask(tmp_path / "m.bin")
