import numpy as np
import pytest
from pydantic import ValidationError

from mlx_handnerf import dataset
from mlx_handnerf.common.errors import ConfigurationError, GeometryError
from mlx_handnerf.dataset import (
    DatasetSpec,
    bent_finger_flexion,
    build_scene,
    camera_ring,
    flexion_pose,
    generate_dataset,
    load_spec,
    toy_scene,
)
from mlx_handnerf.formats import load_scene
from mlx_handnerf.hand import finger_joints, load_hand
from mlx_handnerf.raster import CameraModel


class TestSpec:
    def test_defaults(self):
        spec = load_spec(None)
        assert spec.hands == ["right"]
        assert spec.focal_factor == pytest.approx(1.86)

    @pytest.mark.parametrize(
        "fields", [{"hands": ["right", "right"]}, {"hands": []}, {"image_size": 4}, {"frames": 0}]
    )
    def test_invalid(self, fields):
        with pytest.raises(ValidationError):
            DatasetSpec(**fields)

    def test_load_spec_file(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text('{"hands": ["left", "right"], "image_size": 24}')
        spec = load_spec(path)
        assert spec.hands == ["left", "right"] and spec.image_size == 24
        path.write_text('{"image_size": 2}')
        with pytest.raises(ConfigurationError):
            load_spec(path)
        with pytest.raises(FileNotFoundError):
            load_spec(tmp_path / "missing.json")


class TestPoses:
    def test_flexion_pose(self):
        asset = load_hand("right", 0)
        canonical = asset.skeleton.canonical_pose
        np.testing.assert_array_equal(flexion_pose(asset, {}).joint_rotations, canonical.joint_rotations)
        bent = flexion_pose(asset, {4: 0.5})
        np.testing.assert_allclose(
            bent.joint_rotations[4] - canonical.joint_rotations[4], 0.5 * asset.skeleton.flex_axes[4]
        )

    def test_bent_fingers(self):
        angles = bent_finger_flexion(1.0)
        assert set(angles) == set(finger_joints("index")) | set(finger_joints("middle"))
        assert all(a == 1.0 for a in angles.values())


class TestCameras:
    def test_ring_looks_at_the_target(self):
        spec = DatasetSpec(train_cameras=5, test_cameras=2, image_size=32)
        target = np.array([0.1, -0.2, 0.3])
        cameras = camera_ring(spec, target)
        assert [c.camera_id for c in cameras] == ["train0", "train1", "train2", "train3", "train4", "test0", "test1"]
        assert [c.split for c in cameras].count("test") == 2
        for camera in cameras:
            u, v, z = camera.project(target[None])
            assert u[0] == pytest.approx(camera.cx)
            assert v[0] == pytest.approx(camera.cy)
            assert z[0] == pytest.approx(spec.radius)
            assert camera.fx == pytest.approx(1.86 * 32)


class TestBuildScene:
    def test_one_hand(self, one_hand_scene):
        scene = one_hand_scene
        assert [f.frame_id for f in scene.frames] == ["frame000", "frame001", "novel000"]
        assert [f.novel for f in scene.frames] == [False, False, True]
        assert len(scene.views) == len(scene.frames) * len(scene.cameras)
        for view in scene.views.values():
            surface = np.isfinite(view.depth)
            assert surface.any()
            assert np.all(view.mask[surface])
            assert np.all(view.color[~view.mask] == 0.0)
            assert view.boundary is None

    def test_two_hands_carry_occlusion_boundaries(self, two_hand_scene):
        for view in two_hand_scene.views.values():
            assert view.boundary is not None
            assert view.boundary.shape == view.mask.shape
            assert not np.any(view.boundary & ~view.mask)
        poses = two_hand_scene.frames[0].poses
        assert poses["left"].root_translation[2] < poses["right"].root_translation[2]

    def test_deterministic(self):
        a = toy_scene(image_size=8, frames=1, train_cameras=1, test_cameras=0, seed=4)
        b = toy_scene(image_size=8, frames=1, train_cameras=1, test_cameras=0, seed=4)
        np.testing.assert_array_equal(a.views[("frame000", "train0")].color, b.views[("frame000", "train0")].color)

    def test_insufficient_occlusion(self):
        spec = DatasetSpec(
            hands=["left", "right"], frames=1, train_cameras=1, test_cameras=0,
            image_size=8, min_occlusion_pixels=10**6,
        )
        with pytest.raises(ConfigurationError):
            build_scene(spec)

    def test_camera_that_misses(self, monkeypatch):
        def away(spec, target):
            return [CameraModel.look_at(target + [0.0, 0.0, 5.0], target + [0.0, 0.0, 10.0], height=8, width=8, focal=12.0)]

        monkeypatch.setattr(dataset, "camera_ring", away)
        with pytest.raises(GeometryError):
            build_scene(DatasetSpec(frames=1, image_size=8))

    def test_generate_writes_a_loadable_scene(self, tmp_path):
        spec = DatasetSpec(frames=1, train_cameras=2, test_cameras=0, image_size=8)
        scene = generate_dataset(spec, 2, tmp_path)
        assert scene.root == tmp_path
        loaded = load_scene(tmp_path / "scene.json")
        assert loaded.views.keys() == scene.views.keys()
        assert loaded.root == tmp_path
