import json

import numpy as np
import pytest
from loguru import logger
from mlx.utils import tree_flatten

from conftest import small_settings
from mlx_handnerf.cli import build_parser, main, resolve_frames
from mlx_handnerf.common.config import load_settings
from mlx_handnerf.common.errors import UnknownFrameError
from mlx_handnerf.formats import load_checkpoint, load_scene, read_feature_map, read_pfm, read_png
from mlx_handnerf.metrics import EvalReport
from mlx_handnerf.training import build_model

SPEC = {"frames": 2, "train_cameras": 2, "test_cameras": 1, "image_size": 16, "min_occlusion_pixels": 0}


@pytest.fixture(autouse=True)
def quiet_logger():
    yield
    logger.remove()


def _generate(root, *extra):
    spec = root / "spec.json"
    spec.write_text(json.dumps(SPEC))
    assert main(["generate", "--spec", str(spec), "--out", str(root / "scene"), "--novel-frames", "1", *extra]) == 0
    return root / "scene"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = _generate(root)
    config = root / "config.json"
    config.write_text(small_settings("float64", adapt={"iterations": 2}).model_dump_json())
    run = root / "run"
    assert main(
        ["train", "--scene", str(scene), "--config", str(config), "--iterations", "1",
         "--distillation", "random", "--out", str(run)]
    ) == 0
    return {"root": root, "scene": scene, "config": config, "checkpoint": run / "checkpoints" / "final.safetensors"}


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_generate_overrides(tmp_path):
    scene = load_scene(_generate(tmp_path, "--hands", "both", "--frames", "1"))
    assert scene.sides == ["left", "right"]
    assert [f.frame_id for f in scene.frames] == ["frame000", "novel000"]


def test_resolve_frames(workspace):
    scene = load_scene(workspace["scene"])
    assert [f.frame_id for f in resolve_frames(scene, ["1", "novel000"])] == ["frame001", "novel000"]
    assert resolve_frames(scene, None) == []
    with pytest.raises(UnknownFrameError):
        resolve_frames(scene, ["7"])
    with pytest.raises(UnknownFrameError):
        resolve_frames(scene, ["frame042"])


def test_zero_iterations_write_the_initial_model(workspace, tmp_path):
    out = tmp_path / "run0"
    args = ["train", "--scene", str(workspace["scene"]), "--config", str(workspace["config"]),
            "--iterations", "0", "--distillation", "none", "--out", str(out)]
    assert main(args) == 0
    ckpt = load_checkpoint(out / "checkpoints" / "final.safetensors")
    assert ckpt.iteration == 0
    settings = load_settings(workspace["config"], train={"iterations": 0, "distillation": "none"})
    initial = build_model(load_scene(workspace["scene"]), settings)
    for name, value in tree_flatten(initial.parameters()):
        np.testing.assert_array_equal(ckpt.parameters[name], np.array(value))


def test_train_resumes_from_a_checkpoint(workspace, tmp_path):
    out = tmp_path / "resumed"
    args = ["train", "--scene", str(workspace["scene"]), "--config", str(workspace["config"]),
            "--checkpoint", str(workspace["checkpoint"]), "--iterations", "2",
            "--distillation", "random", "--out", str(out)]
    assert main(args) == 0
    assert load_checkpoint(out / "checkpoints" / "final.safetensors").iteration == 2
    records = [json.loads(line)["record"] for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["extra"]["iteration"] for r in records if r["message"] == "train"] == [2]


def test_render_is_deterministic(workspace, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["render", "--checkpoint", str(workspace["checkpoint"]), "--scene", str(workspace["scene"]),
                "--frame", "frame000", "--camera", "test0", "--out", str(out)]
        assert main(args) == 0
        outputs.append(out)
    stem = "frame000_test0"
    for suffix in ("_color.png", "_depth.pfm", "_weights.png", ".hnfm"):
        assert (outputs[0] / f"{stem}{suffix}").read_bytes() == (outputs[1] / f"{stem}{suffix}").read_bytes()
    color = read_png(outputs[0] / f"{stem}_color.png")
    depth = read_pfm(outputs[0] / f"{stem}_depth.pfm")
    weights = read_png(outputs[0] / f"{stem}_weights.png")
    assert color.shape == (16, 16, 3)
    assert depth.shape == (16, 16)
    assert np.all(weights[np.isinf(depth)] == 0)
    fmap = read_feature_map(outputs[0] / f"{stem}.hnfm")
    assert fmap.data.shape == (16, 16, 8)
    assert (fmap.frame_id, fmap.camera_id) == ("frame000", "test0")


def test_eval_writes_reports(workspace, tmp_path):
    args = ["eval", "--checkpoint", str(workspace["checkpoint"]), "--scene", str(workspace["scene"]),
            "--format", "all", "--out", str(tmp_path)]
    assert main(args) == 0
    report = EvalReport.model_validate_json((tmp_path / "report.json").read_text())
    assert report.count == 2
    assert report.mode.value == "novel-view"
    assert (tmp_path / "report.txt").read_text().startswith("mode: novel-view")


def test_eval_with_pose_adaptation(workspace, tmp_path):
    args = ["eval", "--checkpoint", str(workspace["checkpoint"]), "--scene", str(workspace["scene"]),
            "--mode", "novel-pose-adapt", "--out", str(tmp_path)]
    assert main(args) == 0
    report = EvalReport.model_validate_json((tmp_path / "report.json").read_text())
    assert report.count == 1
    assert [m.frame_id for m in report.images] == ["novel000"]


def test_adapt_only_touches_the_correction(workspace, tmp_path):
    out = tmp_path / "adapted.safetensors"
    args = ["adapt", "--checkpoint", str(workspace["checkpoint"]), "--scene", str(workspace["scene"]),
            "--iterations", "1", "--out", str(out)]
    assert main(args) == 0
    before = load_checkpoint(workspace["checkpoint"]).parameters
    after = load_checkpoint(out).parameters
    for name, value in before.items():
        if name.startswith("field."):
            np.testing.assert_array_equal(after[name], value)
    assert any(not np.array_equal(after[k], before[k]) for k in before if k.startswith("correction."))


def test_extract_features_then_train_with_the_teacher(tmp_path):
    scene = _generate(tmp_path)
    assert main(["extract-features", "--scene", str(scene), "--dim", "8"]) == 0
    doc = json.loads((scene / "scene.json").read_text())
    assert doc["features"] == "features"
    assert doc["feature_basis"] == "features/pca.npz"
    config = tmp_path / "config.json"
    config.write_text(small_settings("float64").model_dump_json())
    args = ["train", "--scene", str(scene), "--config", str(config), "--iterations", "1",
            "--distillation", "teacher", "--out", str(tmp_path / "run")]
    assert main(args) == 0


@pytest.mark.parametrize(
    "argv, error",
    [
        (["render", "--camera", "train9", "--frame", "0"], "ConfigurationError"),
        (["render", "--camera", "test0", "--frame", "42"], "UnknownFrameError"),
        (["eval", "--frames", "frame042"], "UnknownFrameError"),
    ],
)
def test_errors_exit_with_status_two(workspace, tmp_path, capsys, argv, error):
    command, *rest = argv
    args = [command, "--checkpoint", str(workspace["checkpoint"]), "--scene", str(workspace["scene"]),
            *rest, "--out", str(tmp_path)]
    assert main(args) == 2
    assert f"error: {error}" in capsys.readouterr().err


def test_missing_inputs_exit_with_status_two(workspace, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(tmp_path / "none.safetensors"), "--scene", str(workspace["scene"]),
            "--out", str(tmp_path)]
    assert main(args) == 2
    assert "FileNotFoundError" in capsys.readouterr().err
    args = ["train", "--scene", str(workspace["scene"]), "--config", str(workspace["config"]),
            "--iterations", "0", "--distillation", "teacher", "--out", str(tmp_path / "run")]
    assert main(args) == 2
    assert "MissingFeatureError" in capsys.readouterr().err
