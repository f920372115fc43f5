"""
Image-quality metrics and the evaluation report.
"""
from enum import Enum
from typing import List, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field
from skimage.metrics import structural_similarity
from tqdm import tqdm

from .common.errors import ShapeMismatchError
from .formats import Scene
from .radiance import HandNeRF
from .rendering import render_image

PSNR_CAP = 99.0
SSIM_WINDOW = 11


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs target {target.shape}")


def psnr(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10·log10(1/MSE) over the (optionally masked) pixels, capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    err = (pred - target) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[: mask.ndim]:
            raise ShapeMismatchError(f"mask {mask.shape} vs image {pred.shape}")
        if not mask.any():
            raise ShapeMismatchError("empty PSNR mask")
        err = err[mask]
    mse = float(np.mean(err))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Gaussian-window SSIM on the channel-mean grayscale images."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    if pred.ndim == 3:
        pred, target = pred.mean(axis=-1), target.mean(axis=-1)
    if min(pred.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {pred.shape}")
    return float(
        structural_similarity(
            pred,
            target,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def depth_error(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute depth difference over ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ShapeMismatchError("empty depth-error mask")
    return float(np.mean(np.abs(pred[mask] - target[mask])))


class EvalMode(str, Enum):
    NOVEL_VIEW = "novel-view"
    NOVEL_POSE_GENERALIZE = "novel-pose-generalize"
    NOVEL_POSE_ADAPT = "novel-pose-adapt"


class ImageMetrics(BaseModel):
    frame_id: str
    camera_id: str
    psnr: float
    psnr_masked: float
    ssim: float = Field(ge=-1.0, le=1.0)
    depth_error: Optional[float] = Field(default=None, ge=0.0)
    boundary_depth_error: Optional[float] = Field(default=None, ge=0.0)


class EvalReport(BaseModel):
    mode: EvalMode
    count: int
    psnr: float
    psnr_masked: float
    ssim: float = Field(ge=-1.0, le=1.0)
    depth_error: Optional[float] = Field(default=None, ge=0.0)
    boundary_depth_error: Optional[float] = Field(default=None, ge=0.0)
    lpips: None = None
    images: List[ImageMetrics] = []

    @classmethod
    def aggregate(cls, mode: EvalMode, images: List[ImageMetrics]) -> "EvalReport":
        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else None

        return cls(
            mode=mode,
            count=len(images),
            psnr=mean(m.psnr for m in images) or 0.0,
            psnr_masked=mean(m.psnr_masked for m in images) or 0.0,
            ssim=mean(m.ssim for m in images) or 0.0,
            depth_error=mean(m.depth_error for m in images),
            boundary_depth_error=mean(m.boundary_depth_error for m in images),
            images=images,
        )


def evaluate(
    model: HandNeRF,
    scene: Scene,
    mode: EvalMode = EvalMode.NOVEL_VIEW,
    frame_ids: Optional[List[str]] = None,
) -> EvalReport:
    """
    Render the test cameras of the selected frames and score them.

    Novel-view evaluation covers training frames with their own latent codes;
    the novel-pose modes cover novel frames with the mean latent code.
    """
    mode = EvalMode(mode)
    if frame_ids is None:
        frames = scene.training_frames if mode == EvalMode.NOVEL_VIEW else scene.novel_frames
    else:
        frames = [scene.frame(f) for f in frame_ids]
    cameras = scene.test_cameras() or scene.train_cameras()
    images = []
    jobs = [(f, c) for f in frames for c in cameras]
    for frame, camera in tqdm(jobs, desc=f"Evaluating {mode.value}", leave=False):
        view = scene.views.get((frame.frame_id, camera.camera_id))
        if view is None:
            logger.warning(f"No ground truth for {frame.frame_id}/{camera.camera_id}, skipped")
            continue
        hands = scene.hand_states(frame, model.settings.sampling.aabb_margin)
        latent = scene.latent_index(frame.frame_id) if mode == EvalMode.NOVEL_VIEW else None
        rendered = render_image(model, hands, camera, "full", frame=latent)
        surface = np.isfinite(view.depth)
        boundary = None
        if view.boundary is not None and np.any(view.boundary & surface):
            boundary = depth_error(rendered.depth, view.depth, view.boundary & surface)
        images.append(
            ImageMetrics(
                frame_id=frame.frame_id,
                camera_id=camera.camera_id,
                psnr=psnr(rendered.color, view.color),
                psnr_masked=psnr(rendered.color, view.color, view.mask) if view.mask.any() else PSNR_CAP,
                ssim=ssim(rendered.color, view.color),
                depth_error=depth_error(rendered.depth, view.depth, surface) if surface.any() else None,
                boundary_depth_error=boundary,
            )
        )
    report = EvalReport.aggregate(mode, images)
    logger.info(
        f"{mode.value}: PSNR {report.psnr:.2f} dB (masked {report.psnr_masked:.2f}), "
        f"SSIM {report.ssim:.4f}, DE {report.depth_error}"
    )
    return report
