"""
Optimization loops: full training, pose adaptation of the deformation field,
and the named ablation variants.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import mlx.core as mx
import mlx.nn as nn
import numpy as np
from loguru import logger
from tqdm import tqdm

from .common.config import HandNeRFSettings, LossWeights, OptimizerConfig
from .common.errors import (
    ConfigurationError,
    MissingFeatureError,
    NonFiniteError,
    TrainingDivergedError,
)
from .common.logging import add_metrics_sink, metrics_logger
from .deformation import HandState
from .features import random_features
from .formats import Checkpoint, Frame, Scene, save_checkpoint
from .losses import TERMS, TrainBatch, loss_deform, loss_depth, total_loss
from .metrics import EvalMode, EvalReport, evaluate, psnr
from .networks import make_optimizer, optimizer_step
from .radiance import HandNeRF
from .raster import CameraModel, rasterize
from .rendering import PreparedRays, prepare_rays, render_image, render_rays, sample_pixels


@dataclass
class RayTargets:
    """Supervision for one sampled view; RGB is absent during pose adaptation."""

    prepared: PreparedRays
    frame: Optional[int]
    foreground: np.ndarray
    depth: np.ndarray
    rgb: Optional[np.ndarray] = None
    feature: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    model: HandNeRF
    checkpoint: Checkpoint
    history: List[Dict[str, float]] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None


def effective_loss_weights(settings: HandNeRFSettings) -> LossWeights:
    if settings.train.distillation == "none":
        return settings.loss.model_copy(update={"distill": 0.0})
    return settings.loss


def build_model(scene: Scene, settings: HandNeRFSettings) -> HandNeRF:
    n_frames = len(scene.training_frames)
    if n_frames < 1:
        raise ConfigurationError("scene has no training frames")
    return HandNeRF.for_canonical_mesh(settings, n_frames, scene.canonical_vertices())


def distillation_targets(
    scene: Scene, settings: HandNeRFSettings
) -> Dict[Tuple[str, str], np.ndarray]:
    mode = settings.train.distillation
    if mode == "none" or settings.loss.distill == 0:
        return {}
    if mode == "random":
        return random_features(scene, settings.network.feature_dim, settings.train.seed)
    if not scene.features:
        raise MissingFeatureError("teacher distillation needs extracted features (extract-features)")
    dims = {v.shape[-1] for v in scene.features.values()}
    if dims != {settings.network.feature_dim}:
        raise ConfigurationError(
            f"feature maps have {sorted(dims)} channels, network emits {settings.network.feature_dim}"
        )
    return scene.features


def _loss_fn(model: HandNeRF, items: Sequence[RayTargets], weights: LossWeights, background):
    totals, terms = [], []
    for item in items:
        out = render_rays(model, item.prepared, item.frame, background)
        batch = TrainBatch.from_render(out, item.foreground, item.depth, item.rgb, item.feature)
        total, breakdown = total_loss(batch, weights, check=False)
        totals.append(total)
        terms.append(mx.stack([breakdown[name].astype(total.dtype) for name in TERMS]))
    return mx.mean(mx.stack(totals)), mx.mean(mx.stack(terms), axis=0)


def _adapt_loss_fn(model: HandNeRF, items: Sequence[RayTargets], weights: LossWeights, background):
    totals, terms = [], []
    for item in items:
        out = render_rays(model, item.prepared, None, background)
        batch = TrainBatch.from_render(out, item.foreground, item.depth)
        depth = loss_depth(batch, weights.beta, weights.depth_kind)
        deform = loss_deform(batch)
        totals.append(weights.depth * depth + weights.deform * deform)
        terms.append(mx.stack([depth, deform.astype(depth.dtype)]))
    return mx.mean(mx.stack(totals)), mx.mean(mx.stack(terms), axis=0)


class Trainer:
    """
    Runs the optimization of a ``HandNeRF`` over a scene's training views.

    Each step draws ``images_per_step`` (frame, camera) views, samples a
    foreground-biased pixel subset of each, renders it and applies one Adam
    update. Parameters are only written after gradients pass the finiteness
    check.
    """

    def __init__(
        self,
        scene: Scene,
        settings: HandNeRFSettings,
        out_dir: Optional[Path] = None,
        model: Optional[HandNeRF] = None,
    ):
        self.scene = scene
        self.settings = settings
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else build_model(scene, settings)
        self.weights = effective_loss_weights(settings)
        self.rng = np.random.default_rng(settings.train.seed)
        self.cameras = scene.train_cameras(settings.train.train_views)
        if not self.cameras:
            raise ConfigurationError("scene has no training cameras")
        self.frames = scene.training_frames
        self.states = [scene.hand_states(f, settings.sampling.aabb_margin) for f in self.frames]
        self.features = distillation_targets(scene, settings)
        self.views = [(i, c) for i in range(len(self.frames)) for c in self.cameras]
        self.optimizer = make_optimizer(settings.optimizer, settings.train.iterations)
        self.loss_and_grad = nn.value_and_grad(self.model, _loss_fn)
        self.iteration = 0
        self.history: List[Dict[str, float]] = []
        self.last_checkpoint: Optional[Path] = None
        logger.info(
            f"Training on {len(self.frames)} frames × {len(self.cameras)} views, "
            f"{len(scene.sides)} hand(s), precision {settings.numerics.precision}"
        )

    @classmethod
    def from_checkpoint(
        cls,
        scene: Scene,
        settings: HandNeRFSettings,
        checkpoint: Checkpoint,
        out_dir: Optional[Path] = None,
    ) -> "Trainer":
        """
        Resume a run: weights, iteration counter and rng state come from the
        checkpoint, and the learning-rate schedule continues from that step.
        """
        model = checkpoint.to_model()
        if model.field.n_frames != len(scene.training_frames):
            raise ConfigurationError(
                f"checkpoint has {model.field.n_frames} latent codes, scene has {len(scene.training_frames)} frames"
            )
        model.settings = settings
        trainer = cls(scene, settings, out_dir, model)
        trainer.iteration = checkpoint.iteration
        if checkpoint.rng_state is not None:
            trainer.rng = checkpoint.rng()
        else:
            trainer.rng = np.random.default_rng([settings.train.seed, checkpoint.iteration])
        trainer.optimizer.state["step"] = mx.array(checkpoint.iteration, dtype=mx.uint64)
        logger.info(f"Resuming at iteration {checkpoint.iteration}")
        return trainer

    def sample_view(self, frame_index: int, camera: CameraModel) -> RayTargets:
        frame = self.frames[frame_index]
        view = self.scene.views[(frame.frame_id, camera.camera_id)]
        sampling = self.settings.sampling
        pixels = sample_pixels(view.mask, sampling.budget_fraction, self.rng, sampling.foreground_fraction)
        prepared = prepare_rays(
            self.states[frame_index], camera.rays(pixels), sampling, self.rng, self.model.box
        )
        rows, cols = pixels[:, 0], pixels[:, 1]
        feature = None
        if self.weights.distill > 0:
            fmap = self.features.get((frame.frame_id, camera.camera_id))
            if fmap is None:
                raise MissingFeatureError(f"no feature map for {frame.frame_id}/{camera.camera_id}")
            feature = fmap[rows, cols]
        return RayTargets(
            prepared,
            frame_index,
            view.mask[rows, cols],
            view.depth[rows, cols],
            view.color[rows, cols],
            feature,
        )

    def step(self) -> Dict[str, float]:
        picks = self.rng.integers(len(self.views), size=self.settings.sampling.images_per_step)
        items = [self.sample_view(*self.views[k]) for k in picks]
        (loss, terms), grads = self.loss_and_grad(
            self.model, items, self.weights, self.settings.sampling.background
        )
        mx.eval(loss, terms, grads)
        record = {"loss": float(np.array(loss))}
        record.update({name: float(v) for name, v in zip(TERMS, np.array(terms))})
        if not np.isfinite(record["loss"]):
            logger.error(f"Loss diverged at iteration {self.iteration}: {record}")
            raise TrainingDivergedError(
                "training loss is not finite",
                {k: 1 for k, v in record.items() if not np.isfinite(v)},
                self.last_checkpoint,
            )
        try:
            optimizer_step(self.model, grads, self.optimizer)
        except NonFiniteError as e:
            raise TrainingDivergedError(str(e), e.diagnostics, self.last_checkpoint) from e
        mx.eval(self.model.parameters(), self.optimizer.state)
        self.iteration += 1
        record["iteration"] = self.iteration
        return record

    def validate(self) -> Optional[float]:
        cameras = self.scene.test_cameras()
        if not cameras:
            return None
        frame = self.frames[0]
        view = self.scene.views.get((frame.frame_id, cameras[0].camera_id))
        if view is None or not view.mask.any():
            return None
        rendered = render_image(self.model, self.states[0], cameras[0], "full", frame=0)
        value = psnr(rendered.color, view.color, view.mask)
        metrics_logger.bind(iteration=self.iteration, val_psnr_masked=value).info("validation")
        logger.info(f"Iteration {self.iteration}: validation masked PSNR {value:.2f} dB")
        return value

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_model(self.model, self.iteration, self.rng)

    def save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = save_checkpoint(self.out_dir / "checkpoints" / name, self.checkpoint())
        self.last_checkpoint = path
        return path

    def run(self, iterations: Optional[int] = None) -> TrainResult:
        """Train until ``iterations`` total steps; a resumed trainer only runs the remainder."""
        iterations = self.settings.train.iterations if iterations is None else iterations
        cfg = self.settings.train
        sink = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            sink = add_metrics_sink(self.out_dir / "metrics.jsonl")
        try:
            remaining = max(iterations - self.iteration, 0)
            if self.iteration and not remaining:
                logger.warning(f"Checkpoint is already at iteration {self.iteration}, nothing to train")
            progress = tqdm(range(remaining), desc="Training", disable=remaining == 0)
            for _ in progress:
                record = self.step()
                self.history.append(record)
                if self.iteration % cfg.log_every == 0 or self.iteration == iterations:
                    metrics_logger.bind(**record).info("train")
                    progress.set_postfix(loss=f"{record['loss']:.4f}", rgb=f"{record['rgb']:.4f}")
                if cfg.val_every and self.iteration % cfg.val_every == 0:
                    self.validate()
                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    self.save(f"step_{self.iteration:06d}.safetensors")
        finally:
            if sink is not None:
                logger.remove(sink)
        self.save("final.safetensors")
        return TrainResult(self.model, self.checkpoint(), self.history, self.last_checkpoint)


def train(scene: Scene, settings: HandNeRFSettings, out_dir: Optional[Path] = None) -> TrainResult:
    """Train a fresh model on ``scene``; deterministic for a fixed seed."""
    return Trainer(scene, settings, out_dir).run()


def adaptation_targets(
    hands: Sequence[HandState], camera: CameraModel
) -> Tuple[np.ndarray, np.ndarray]:
    """Pseudo-depth and dilated mask of a novel pose, rasterized from its meshes."""
    result = rasterize(camera, [h.posed for h in hands])
    return result.depth, result.mask


def pose_adapt(
    model: HandNeRF,
    scene: Scene,
    frames: Sequence[Frame],
    settings: Optional[HandNeRFSettings] = None,
    cameras: Optional[Sequence[CameraModel]] = None,
) -> Tuple[HandNeRF, List[Dict[str, float]]]:
    """
    Fine-tune only the correction network on novel poses.

    The objective is λ_depth·L_depth + λ_dfm·L_dfm with depth targets
    rasterized from the poses' meshes; no image is read.
    """
    settings = settings or model.settings
    if settings.adapt.use_rgb:
        raise ConfigurationError("pose adaptation uses depth and deformation losses only; disable use_rgb")
    if not frames:
        raise ConfigurationError("pose adaptation needs at least one frame")
    cameras = list(cameras) if cameras is not None else scene.train_cameras(settings.train.train_views)
    sampling = settings.sampling
    weights = settings.loss
    rng = np.random.default_rng(settings.train.seed)

    targets = []
    for frame in frames:
        hands = scene.hand_states(frame, sampling.aabb_margin)
        for camera in cameras:
            depth, mask = adaptation_targets(hands, camera)
            targets.append((hands, camera, depth, mask))

    lr = settings.adapt.learning_rate
    optimizer = make_optimizer(
        OptimizerConfig(learning_rate=lr, final_learning_rate=lr, betas=settings.optimizer.betas),
        settings.adapt.iterations,
    )
    model.freeze()
    model.correction.unfreeze()
    loss_and_grad = nn.value_and_grad(model, _adapt_loss_fn)
    history = []
    try:
        for it in tqdm(range(settings.adapt.iterations), desc="Adapting", disable=settings.adapt.iterations == 0):
            hands, camera, depth, mask = targets[int(rng.integers(len(targets)))]
            pixels = sample_pixels(mask, sampling.budget_fraction, rng, sampling.foreground_fraction)
            rows, cols = pixels[:, 0], pixels[:, 1]
            item = RayTargets(
                prepare_rays(hands, camera.rays(pixels), sampling, rng, model.box),
                None,
                mask[rows, cols],
                depth[rows, cols],
            )
            (loss, terms), grads = loss_and_grad(model, [item], weights, sampling.background)
            mx.eval(loss, terms, grads)
            value = float(np.array(loss))
            if not np.isfinite(value):
                raise NonFiniteError("adaptation loss is not finite", {"loss": 1})
            optimizer_step(model, grads, optimizer)
            mx.eval(model.parameters(), optimizer.state)
            depth_term, deform_term = (float(v) for v in np.array(terms))
            record = {"iteration": it + 1, "loss": value, "depth": depth_term, "deform": deform_term}
            history.append(record)
            if (it + 1) % settings.train.log_every == 0:
                metrics_logger.bind(**record).info("adapt")
    finally:
        model.unfreeze()
    logger.info(f"Adapted correction network over {len(frames)} poses, {len(history)} steps")
    return model, history


ABLATIONS = {
    "full": {},
    "no_depth": {"loss": {"depth": 0.0}},
    "gnll": {"loss": {"depth_kind": "gnll"}},
    "random_distill": {"train": {"distillation": "random"}},
    "no_distill": {"train": {"distillation": "none"}},
}


def variant_settings(settings: HandNeRFSettings, variant: str) -> HandNeRFSettings:
    if variant not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {variant!r}; choose from {sorted(ABLATIONS)}")
    data = settings.model_dump()
    for section, values in ABLATIONS[variant].items():
        data[section].update(values)
    return HandNeRFSettings(**data)


def ablation(
    scene: Scene,
    settings: HandNeRFSettings,
    variants: Sequence[str] = tuple(ABLATIONS),
    out_dir: Optional[Path] = None,
    mode: EvalMode = EvalMode.NOVEL_VIEW,
) -> Dict[str, EvalReport]:
    """Train each named variant with the same seed and evaluate it."""
    reports = {}
    for variant in variants:
        logger.info(f"Ablation variant {variant}")
        run_dir = None if out_dir is None else Path(out_dir) / variant
        result = train(scene, variant_settings(settings, variant), run_dir)
        reports[variant] = evaluate(result.model, scene, mode)
    return reports
