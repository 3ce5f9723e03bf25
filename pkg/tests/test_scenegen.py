"""Tests for synthetic scene generation, the scene file format and augmentation."""

import math
import struct

import numpy as np
import pytest

from scene_recon.exceptions import InvalidArgumentError, SceneFormatError
from scene_recon.geometry3d import aabb_from_points, rotate_z
from scene_recon.scenegen import (
    MIN_INSTANCE_POINTS,
    AugmentDraw,
    apply_augmentation,
    augment,
    draw_augmentation,
    generate_scene,
    read_scene,
    write_scene,
)
from scene_recon.utils import wrap_angle


class TestGenerateScene:
    def test_single_clean_object_fills_its_box(self):
        """Without noise or occlusion the box-frame bounds reproduce the box size within 2%."""
        scene = generate_scene(1, noise_sigma=0.0, dropout_fraction=0.0, seed=7)
        box = scene.instances[0].box
        local = rotate_z(scene.instance_points(0) - box.center, -box.yaw)
        _, size = aabb_from_points(local)
        np.testing.assert_allclose(size, box.size, rtol=0.02)

    def test_deterministic(self):
        a = generate_scene(3, 0.005, 0.3, seed=11, points_per_object=256, floor_points=256)
        b = generate_scene(3, 0.005, 0.3, seed=11, points_per_object=256, floor_points=256)
        assert a == b

    def test_seeds_differ(self):
        a = generate_scene(3, 0.005, 0.3, seed=11, points_per_object=256, floor_points=256)
        b = generate_scene(3, 0.005, 0.3, seed=12, points_per_object=256, floor_points=256)
        assert a != b

    def test_dropout_fraction(self):
        """Occluding 40% keeps between 55% and 65% of every object's samples."""
        scene = generate_scene(2, 0.0, 0.4, seed=5, points_per_object=1024, floor_points=0)
        for k in range(scene.num_instances):
            kept = int(scene.instance_mask(k).sum())
            assert 0.55 * 1024 <= kept <= 0.65 * 1024

    def test_minimum_points_per_instance(self):
        scene = generate_scene(2, 0.0, 0.9, seed=1, points_per_object=32, floor_points=0)
        for k in range(scene.num_instances):
            assert scene.instance_mask(k).sum() >= MIN_INSTANCE_POINTS

    def test_points_stay_near_their_box(self, scene):
        margin = 3 * 0.005 * math.sqrt(2) + 1e-4
        for k, instance in enumerate(scene.instances):
            assert instance.box.contains(scene.instance_points(k), margin=margin).all()

    def test_labels_and_floor(self):
        scene = generate_scene(4, 0.0, 0.2, seed=2, points_per_object=128, floor_points=512)
        assert set(np.unique(scene.instance_ids)) <= {-1, 0, 1, 2, 3}
        floor = scene.points[scene.instance_ids == -1]
        np.testing.assert_array_equal(floor[:, 2], 0.0)
        for instance in scene.instances:
            assert instance.class_id == int(instance.shape.kind)
            assert instance.box.center[2] == pytest.approx(instance.box.size[2] / 2, rel=1e-6)

    @pytest.mark.parametrize("num_objects", [0, 17])
    def test_object_count_bounds(self, num_objects):
        with pytest.raises(InvalidArgumentError):
            generate_scene(num_objects, 0.0, 0.0, seed=0)

    def test_dropout_bounds(self):
        with pytest.raises(InvalidArgumentError):
            generate_scene(1, 0.0, 1.0, seed=0)


class TestSceneFile:
    def test_round_trip(self, scene, tmp_path):
        path = tmp_path / "scene_00000.dscn"
        write_scene(scene, path)
        loaded = read_scene(path)
        assert loaded == scene
        assert loaded.scene_id == "scene_00000"

    def test_rewrite_is_byte_identical(self, scene, tmp_path):
        write_scene(scene, tmp_path / "a.dscn")
        write_scene(read_scene(tmp_path / "a.dscn"), tmp_path / "b.dscn")
        assert (tmp_path / "a.dscn").read_bytes() == (tmp_path / "b.dscn").read_bytes()

    def _written(self, scene, tmp_path) -> bytearray:
        write_scene(scene, tmp_path / "s.dscn")
        return bytearray((tmp_path / "s.dscn").read_bytes())

    def _read_bytes(self, data, tmp_path):
        path = tmp_path / "broken.dscn"
        path.write_bytes(bytes(data))
        return read_scene(path)

    def test_bad_magic(self, scene, tmp_path):
        data = self._written(scene, tmp_path)
        data[:4] = b"XXXX"
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(data, tmp_path)
        assert info.value.field == "magic"

    def test_bad_version(self, scene, tmp_path):
        data = self._written(scene, tmp_path)
        struct.pack_into("<I", data, 4, 99)
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(data, tmp_path)
        assert info.value.field == "version"

    def test_declared_points_exceed_payload(self, scene, tmp_path):
        data = self._written(scene, tmp_path)
        struct.pack_into("<I", data, 8, scene.num_points + 100000)
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(data, tmp_path)
        assert info.value.field == "points"

    def test_truncated_records(self, scene, tmp_path):
        data = self._written(scene, tmp_path)
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(data[:-10], tmp_path)
        assert info.value.field == "instances"

    def test_trailing_bytes(self, scene, tmp_path):
        data = self._written(scene, tmp_path)
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(data + b"\x00" * 3, tmp_path)
        assert info.value.field == "payload"

    def test_short_header(self, tmp_path):
        with pytest.raises(SceneFormatError) as info:
            self._read_bytes(b"DSC", tmp_path)
        assert info.value.field == "header"


class TestAugmentation:
    def test_identity_draw_returns_equal_scene(self, scene):
        seed = next(s for s in range(200) if draw_augmentation(s).is_identity)
        assert augment(scene, seed) == scene

    def test_rotation(self, scene):
        rotated = apply_augmentation(scene, AugmentDraw(rotate=True, angle=0.5))
        np.testing.assert_allclose(rotated.points, rotate_z(scene.points, 0.5), atol=1e-5)
        for before, after in zip(scene.instances, rotated.instances):
            assert float(wrap_angle(after.box.yaw - before.box.yaw - 0.5)) == pytest.approx(0.0, abs=1e-9)
            np.testing.assert_allclose(after.box.size, before.box.size)

    def test_scale(self, scene):
        scaled = apply_augmentation(scene, AugmentDraw(scale_enabled=True, scale=1.1))
        for before, after in zip(scene.instances, scaled.instances):
            np.testing.assert_allclose(after.box.size, before.box.size * 1.1)
            np.testing.assert_allclose(after.box.center, before.box.center * 1.1)

    def test_labels_unchanged(self, scene):
        for seed in range(5):
            augmented = augment(scene, seed)
            np.testing.assert_array_equal(augmented.instance_ids, scene.instance_ids)
            assert [i.class_id for i in augmented.instances] == [i.class_id for i in scene.instances]

    def test_boxes_follow_points(self, scene):
        """Any draw keeps every instance inside its transformed box."""
        for seed in range(8):
            augmented = augment(scene, seed)
            for k, instance in enumerate(augmented.instances):
                assert instance.box.contains(augmented.instance_points(k), margin=0.03).all()

    def test_draw_ranges(self):
        for seed in range(50):
            draw = draw_augmentation(seed)
            assert -math.pi <= draw.angle <= math.pi
            assert 0.9 <= draw.scale <= 1.1
