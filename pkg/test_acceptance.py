"""
End-to-end properties of the whole pipeline. The desk-scale runs are marked
slow and need ``--runslow``.
"""
import mlx.core as mx
import mlx.nn as nn
import numpy as np
import pytest
from mlx.utils import tree_flatten, tree_unflatten

from mlx_handnerf.common.config import LossWeights, load_settings
from mlx_handnerf.dataset import INTERLOCK_ROOTS, DatasetSpec, build_scene, flexion_pose, random_flexion
from mlx_handnerf.deformation import HandState, correct, deform_rays, map_points
from mlx_handnerf.features import extract_teacher_features
from mlx_handnerf.hand import load_hand
from mlx_handnerf.losses import TERMS, TrainBatch, total_loss
from mlx_handnerf.metrics import EvalMode, evaluate
from mlx_handnerf.radiance import HandNeRF
from mlx_handnerf.raster import CameraModel
from mlx_handnerf.rendering import prepare_rays, reference_render, render_image, render_rays, sample_pixels
from mlx_handnerf.training import ablation, pose_adapt, train

F64 = mx.float64


def _model(scene, settings):
    return HandNeRF.for_canonical_mesh(settings, len(scene.training_frames), scene.canonical_vertices())


def _activate_correction(model, rng, scale=0.05):
    last = model.correction.mlp.layers[-1]
    last.weight = mx.array(rng.normal(0, scale, last.weight.shape), dtype=model.dtype)
    last.bias = mx.array(rng.normal(0, scale * 0.1, last.bias.shape), dtype=model.dtype)


def _random_states(scene, rng):
    states = []
    for side in scene.sides:
        asset = scene.assets[side]
        pose = flexion_pose(asset, random_flexion(rng, 0.8), INTERLOCK_ROOTS[side], rng.normal(0, 0.1, 3))
        states.append(HandState.build(asset, pose))
    return states


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fast_renderer_matches_reference(two_hand_scene, settings64, seed):
    rng = np.random.default_rng(seed)
    model = _model(two_hand_scene, settings64)
    _activate_correction(model, rng)
    hands = _random_states(two_hand_scene, rng)
    camera = two_hand_scene.train_cameras()[seed % 2]
    image = render_image(model, hands, camera, "full", frame=0)
    flat = rng.choice(camera.height * camera.width, 200, replace=False)
    for row, col in zip(*np.unravel_index(flat, (camera.height, camera.width))):
        color, depth, feature = reference_render(model, hands, camera, (int(row), int(col)), frame=0)
        np.testing.assert_allclose(image.color[row, col], color, atol=1e-6)
        np.testing.assert_allclose(image.depth[row, col], depth, atol=1e-6)
        np.testing.assert_allclose(image.feature[row, col], feature, atol=1e-6)


@pytest.mark.parametrize("side", ["right", "left"])
def test_canonical_pose_with_fresh_correction_is_identity(settings64, side):
    asset = load_hand(side, 0)
    state = HandState.build(asset, asset.skeleton.canonical_pose)
    model = HandNeRF.for_canonical_mesh(settings64, 1, state.posed.vertices)
    center = state.box.center
    camera = CameraModel.look_at(center + [0.0, 0.0, -1.5], center, height=24, width=24, focal=36.0)
    rays = camera.rays()
    batch = deform_rays(rays, state, n_samples=8)
    valid = np.broadcast_to(batch.hit[:, None], batch.t.shape)
    assert valid.sum() >= 1000
    x_ob = rays.origins[:, None] + batch.t[..., None] * rays.directions[:, None]
    x_can, _ = correct(batch.x_hat[valid], state.pose, side, model.correction)
    np.testing.assert_allclose(x_can, map_points(x_ob[valid], side), atol=1e-9)


def _objective(model, prepared, view, pixels, target_feature, weights):
    rows, cols = pixels[:, 0], pixels[:, 1]

    def fn(model):
        out = render_rays(model, prepared, frame=0)
        batch = TrainBatch.from_render(
            out, view.mask[rows, cols], view.depth[rows, cols], view.color[rows, cols], target_feature
        )
        return total_loss(batch, weights, check=False)[0]

    return fn


def _finite_difference_check(model, fn, rng, n_entries=20, h=1e-5):
    _, grads = nn.value_and_grad(model, fn)(model)
    grads = {k: np.array(v) for k, v in tree_flatten(grads)}
    params = {k: np.array(v) for k, v in tree_flatten(model.trainable_parameters())}
    names = sorted(params)
    offsets = np.cumsum([0] + [params[name].size for name in names])
    for flat in rng.choice(offsets[-1], n_entries, replace=False):
        leaf = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, i = names[leaf], int(flat - offsets[leaf])
        base = params[name]
        values = []
        for sign in (1, -1):
            bumped = base.copy()
            bumped.flat[i] += sign * h
            model.update(tree_unflatten([(name, mx.array(bumped, dtype=F64))]))
            values.append(float(np.array(fn(model))))
        model.update(tree_unflatten([(name, mx.array(base, dtype=F64))]))
        numeric = (values[0] - values[1]) / (2 * h)
        np.testing.assert_allclose(grads[name].flat[i], numeric, rtol=1e-4, atol=1e-8, err_msg=f"{name}[{i}]")


@pytest.mark.slow
@pytest.mark.parametrize("term", TERMS)
@pytest.mark.parametrize("seed", range(5))
def test_each_loss_gradient_through_two_hands(two_hand_scene, settings64, term, seed):
    rng = np.random.default_rng(seed)
    model = _model(two_hand_scene, settings64)
    _activate_correction(model, rng)
    frame = two_hand_scene.training_frames[0]
    camera = two_hand_scene.train_cameras()[seed % 2]
    view = two_hand_scene.views[(frame.frame_id, camera.camera_id)]
    pixels = sample_pixels(view.mask, 0.1, rng)
    prepared = prepare_rays(two_hand_scene.hand_states(frame), camera.rays(pixels), settings64.sampling, rng, model.box)
    target_feature = rng.normal(size=(len(pixels), settings64.network.feature_dim))
    weights = LossWeights(**{name: 1.0 if name == term else 0.0 for name in TERMS})
    _finite_difference_check(model, _objective(model, prepared, view, pixels, target_feature, weights), rng)


def _desk_settings(**sections):
    base = {
        "train": {"iterations": 3000, "val_every": 0, "checkpoint_every": 0, "train_views": 4},
        "sampling": {"samples_per_hand": 32},
    }
    for section, values in sections.items():
        base.setdefault(section, {}).update(values)
    return load_settings(**base)


def _with_features(scene, dim):
    features, _ = extract_teacher_features(scene, dim)
    scene.features = features
    return scene


@pytest.fixture(scope="module")
def desk_scene():
    spec = DatasetSpec(frames=3, novel_frames=1, train_cameras=4, test_cameras=2, image_size=64)
    return _with_features(build_scene(spec, seed=0), 16)


@pytest.fixture(scope="module")
def desk_run(desk_scene):
    return train(desk_scene, _desk_settings())


@pytest.mark.slow
def test_desk_scale_training_reaches_target_quality(desk_scene, desk_run):
    initial = evaluate(_model(desk_scene, desk_run.model.settings), desk_scene, EvalMode.NOVEL_VIEW)
    trained = evaluate(desk_run.model, desk_scene, EvalMode.NOVEL_VIEW)
    assert trained.psnr_masked >= 22.0
    assert trained.psnr_masked >= initial.psnr_masked + 10.0


@pytest.mark.slow
def test_pose_adaptation_reduces_depth_error(desk_scene, desk_run):
    model = desk_run.model
    before = evaluate(model, desk_scene, EvalMode.NOVEL_POSE_GENERALIZE)
    field = {k: np.array(v) for k, v in tree_flatten(model.field.parameters())}
    pose_adapt(model, desk_scene, desk_scene.novel_frames)
    for name, value in tree_flatten(model.field.parameters()):
        np.testing.assert_array_equal(np.array(value), field[name])
    after = evaluate(model, desk_scene, EvalMode.NOVEL_POSE_ADAPT, [f.frame_id for f in desk_scene.novel_frames])
    assert after.depth_error < before.depth_error


@pytest.mark.slow
def test_depth_supervision_sharpens_occlusion_boundaries():
    spec = DatasetSpec(hands=["left", "right"], frames=2, train_cameras=4, test_cameras=2, image_size=64)
    scene = _with_features(build_scene(spec, seed=0), 16)
    reports = ablation(scene, _desk_settings(), ["full", "no_depth"])
    full, no_depth = reports["full"], reports["no_depth"]
    assert full.boundary_depth_error is not None and no_depth.boundary_depth_error is not None
    assert no_depth.depth_error > full.depth_error
    assert full.boundary_depth_error <= 0.8 * no_depth.boundary_depth_error


@pytest.mark.slow
def test_teacher_features_beat_random_targets(desk_scene):
    reports = ablation(desk_scene, _desk_settings(), ["full", "random_distill"])
    assert reports["full"].psnr >= reports["random_distill"].psnr
