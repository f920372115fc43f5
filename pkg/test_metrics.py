import io
import json

import numpy as np
import pytest
from rich.console import Console

from mlx_handnerf.common.errors import ShapeMismatchError
from mlx_handnerf.metrics import (
    PSNR_CAP,
    EvalMode,
    EvalReport,
    ImageMetrics,
    depth_error,
    evaluate,
    psnr,
    ssim,
)
from mlx_handnerf.radiance import HandNeRF
from mlx_handnerf.writers import get_writer, print_report


class TestPsnr:
    def test_constant_offset(self, rng):
        target = rng.uniform(0.2, 0.8, (8, 8, 3))
        assert psnr(target + 0.1, target) == pytest.approx(20.0)

    def test_identical_images_hit_the_cap(self, rng):
        image = rng.uniform(size=(4, 4, 3))
        assert psnr(image, image) == PSNR_CAP

    def test_mask_restricts_pixels(self, rng):
        target = rng.uniform(size=(6, 6, 3))
        pred = target.copy()
        pred[0] += 0.5
        mask = np.ones((6, 6), bool)
        mask[0] = False
        assert psnr(pred, target, mask) == PSNR_CAP
        assert psnr(pred, target) < 20.0

    def test_bad_masks(self, rng):
        image = rng.uniform(size=(4, 4, 3))
        with pytest.raises(ShapeMismatchError):
            psnr(image, image, np.zeros((4, 4), bool))
        with pytest.raises(ShapeMismatchError):
            psnr(image, image, np.ones((3, 4), bool))
        with pytest.raises(ShapeMismatchError):
            psnr(image, image[:3])


class TestSsim:
    def test_self_similarity(self, rng):
        image = rng.uniform(size=(32, 32, 3))
        assert ssim(image, image) == pytest.approx(1.0)

    def test_noise_lowers_similarity(self, rng):
        image = rng.uniform(size=(32, 32, 3))
        noisy = np.clip(image + rng.normal(0, 0.2, image.shape), 0, 1)
        assert ssim(noisy, image) < 0.9

    def test_needs_a_full_window(self, rng):
        with pytest.raises(ShapeMismatchError):
            ssim(rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3)))


class TestDepthError:
    def test_constant_shift(self, rng):
        target = rng.uniform(1, 2, (5, 5))
        mask = np.ones((5, 5), bool)
        mask[2] = False
        pred = target + 0.5
        pred[2] = 100.0
        assert depth_error(pred, target, mask) == pytest.approx(0.5)

    def test_empty_mask(self):
        with pytest.raises(ShapeMismatchError):
            depth_error(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))


def _metrics(frame, psnr_value, depth=None):
    return ImageMetrics(
        frame_id=frame, camera_id="test0", psnr=psnr_value, psnr_masked=psnr_value, ssim=0.5, depth_error=depth
    )


class TestReport:
    def test_aggregate_skips_missing_values(self):
        report = EvalReport.aggregate(
            EvalMode.NOVEL_VIEW, [_metrics("a", 20.0, 0.1), _metrics("b", 30.0, None)]
        )
        assert report.count == 2
        assert report.psnr == pytest.approx(25.0)
        assert report.depth_error == pytest.approx(0.1)
        assert report.boundary_depth_error is None
        assert report.lpips is None

    def test_empty(self):
        report = EvalReport.aggregate(EvalMode.NOVEL_POSE_ADAPT, [])
        assert report.count == 0
        assert report.depth_error is None

    def test_writers(self, tmp_path):
        report = EvalReport.aggregate(EvalMode.NOVEL_VIEW, [_metrics("frame000", 21.5, 0.25)])
        get_writer("all", str(tmp_path))(report, "eval")
        loaded = EvalReport.model_validate(json.loads((tmp_path / "eval.json").read_text()))
        assert loaded == report
        text = (tmp_path / "eval.txt").read_text()
        assert "mode: novel-view" in text
        assert "frame000" in text and "21.50" in text
        assert text.splitlines()[-1].startswith("mean")

    def test_console_table(self):
        report = EvalReport.aggregate(EvalMode.NOVEL_VIEW, [_metrics("frame000", 21.5)])
        buffer = io.StringIO()
        print_report(report, Console(file=buffer, width=120))
        assert "PSNR" in buffer.getvalue()
        assert "frame000" in buffer.getvalue()


class TestEvaluate:
    @pytest.fixture
    def model(self, one_hand_scene, settings64):
        return HandNeRF.for_canonical_mesh(
            settings64, len(one_hand_scene.training_frames), one_hand_scene.canonical_vertices()
        )

    def test_novel_view_covers_training_frames(self, model, one_hand_scene):
        model.field.audit.clear()
        report = evaluate(model, one_hand_scene, EvalMode.NOVEL_VIEW)
        assert report.count == len(one_hand_scene.training_frames) * len(one_hand_scene.test_cameras())
        assert {m.frame_id for m in report.images} == {f.frame_id for f in one_hand_scene.training_frames}
        assert set(model.field.audit.reads) == {0, 1}
        assert 0 <= report.psnr <= PSNR_CAP
        assert report.depth_error is not None and report.depth_error >= 0

    def test_novel_pose_uses_the_mean_latent(self, model, one_hand_scene):
        model.field.audit.clear()
        report = evaluate(model, one_hand_scene, "novel-pose-generalize")
        assert report.mode == EvalMode.NOVEL_POSE_GENERALIZE
        assert report.count == len(one_hand_scene.novel_frames)
        assert model.field.audit.reads
        assert all(read is None for read in model.field.audit.reads)

    def test_frame_selection(self, model, one_hand_scene):
        report = evaluate(model, one_hand_scene, EvalMode.NOVEL_VIEW, ["frame001"])
        assert [m.frame_id for m in report.images] == ["frame001"]
        with pytest.raises(KeyError):
            evaluate(model, one_hand_scene, EvalMode.NOVEL_VIEW, ["frame999"])
