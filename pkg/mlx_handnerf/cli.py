"""
Command-line surface: ``handnerf <command> [options]``.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import ValidationError

from ._version import __version__
from .common.config import HandNeRFSettings, configure_threads, load_settings
from .common.errors import ConfigurationError, HandNeRFError, UnknownFrameError
from .common.logging import setup_logging
from .dataset import generate_dataset, load_spec
from .features import attach_features, extract_teacher_features
from .formats import (
    Checkpoint,
    FeatureMap,
    Frame,
    Scene,
    load_checkpoint,
    load_scene,
    save_checkpoint,
    write_feature_map,
    write_pfm,
    write_png,
)
from .metrics import EvalMode, evaluate
from .rendering import render_image
from .training import Trainer, pose_adapt
from .writers import get_writer, print_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handnerf",
        description="Pose-driven radiance fields for one or two interacting hands",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: from config)")
    common.add_argument("--single-thread", action="store_true", help="Pin CPU kernels to one thread")
    common.add_argument("--log-level", type=str, default="INFO", help="Console log level")
    common.add_argument("--log-file", type=Path, default=None, help="Also log to this file")

    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to run")

    gen = subparsers.add_parser("generate", parents=[common], help="Generate a synthetic scene")
    gen.add_argument("--spec", type=Path, default=None, help="Dataset spec JSON (default: built-in)")
    gen.add_argument("--frames", type=int, default=None, help="Number of training frames")
    gen.add_argument("--novel-frames", type=int, default=None, help="Number of bent-finger novel frames")
    gen.add_argument("--hands", choices=["right", "left", "both"], default=None, help="Hands in the scene")
    gen.add_argument("--out", type=Path, required=True, help="Scene directory to write")

    tr = subparsers.add_parser("train", parents=[common], help="Train a model on a scene")
    tr.add_argument("--scene", type=Path, required=True, help="Scene directory or scene.json")
    tr.add_argument("--config", type=Path, default=None, help="Settings JSON")
    tr.add_argument("--iterations", type=int, default=None, help="Training iterations")
    tr.add_argument("--views", type=int, default=None, help="Use the first k training cameras")
    tr.add_argument(
        "--distillation", choices=["teacher", "random", "none"], default=None, help="Distillation targets"
    )
    tr.add_argument("--checkpoint", type=Path, default=None, help="Resume from this checkpoint")
    tr.add_argument("--out", type=Path, required=True, help="Run directory")

    rd = subparsers.add_parser("render", parents=[common], help="Render one camera view")
    rd.add_argument("--checkpoint", type=Path, required=True)
    rd.add_argument("--scene", type=Path, required=True)
    rd.add_argument("--frame", type=str, default="0", help="Frame id or index")
    rd.add_argument("--camera", type=str, required=True, help="Camera id")
    rd.add_argument("--mode", choices=["full", "train-subset"], default="full")
    rd.add_argument("--out", type=Path, required=True, help="Output directory")

    ad = subparsers.add_parser("adapt", parents=[common], help="Adapt the deformation field to novel poses")
    ad.add_argument("--checkpoint", type=Path, required=True)
    ad.add_argument("--scene", type=Path, required=True)
    ad.add_argument("--frames", nargs="+", default=None, help="Frame ids or indices (default: novel frames)")
    ad.add_argument("--iterations", type=int, default=None, help="Adaptation iterations")
    ad.add_argument("--views", type=int, default=None, help="Use the first k training cameras")
    ad.add_argument("--out", type=Path, required=True, help="Adapted checkpoint path")

    ev = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--scene", type=Path, required=True)
    ev.add_argument("--mode", choices=[m.value for m in EvalMode], default=EvalMode.NOVEL_VIEW.value)
    ev.add_argument("--frames", nargs="+", default=None, help="Frame ids or indices")
    ev.add_argument("--format", choices=["json", "txt", "all"], default="json", help="Report format")
    ev.add_argument("--out", type=Path, required=True, help="Output directory")

    fx = subparsers.add_parser("extract-features", parents=[common], help="Build distillation targets")
    fx.add_argument("--scene", type=Path, required=True)
    fx.add_argument("--teacher", choices=["toy", "external"], default="toy")
    fx.add_argument("--raw-dir", type=Path, default=None, help="Raw feature maps for the external teacher")
    fx.add_argument("--dim", type=int, default=16, help="Feature channels after PCA")
    return parser


def resolve_frames(scene: Scene, selectors: Optional[Sequence[str]]) -> List[Frame]:
    """Frames by id or by index into the scene's frame list."""
    if selectors is None:
        return []
    frames = []
    for s in selectors:
        if s.isdigit():
            index = int(s)
            if index >= len(scene.frames):
                raise UnknownFrameError(f"frame index {index} out of range ({len(scene.frames)} frames)")
            frames.append(scene.frames[index])
            continue
        try:
            frames.append(scene.frame(s))
        except KeyError:
            raise UnknownFrameError(f"no frame {s!r} in scene") from None
    return frames


def _override(settings: HandNeRFSettings, **sections) -> HandNeRFSettings:
    data = settings.model_dump()
    for section, values in sections.items():
        data[section].update({k: v for k, v in values.items() if v is not None})
    try:
        return HandNeRFSettings(**data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def cmd_generate(args) -> None:
    spec = load_spec(args.spec)
    update = {}
    if args.frames is not None:
        update["frames"] = args.frames
    if args.novel_frames is not None:
        update["novel_frames"] = args.novel_frames
    if args.hands is not None:
        update["hands"] = ["left", "right"] if args.hands == "both" else [args.hands]
    try:
        spec = spec.model_validate({**spec.model_dump(), **update})
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e
    scene = generate_dataset(spec, args.seed or 0, args.out)
    logger.info(f"Scene with {len(scene.views)} views written to {args.out}")


def cmd_train(args) -> None:
    settings = load_settings(
        args.config,
        train={
            k: v
            for k, v in {
                "seed": args.seed,
                "iterations": args.iterations,
                "train_views": args.views,
                "distillation": args.distillation,
            }.items()
            if v is not None
        },
        numerics={"single_thread": True} if args.single_thread else {},
    )
    scene = load_scene(args.scene)
    if args.checkpoint is not None:
        trainer = Trainer.from_checkpoint(scene, settings, load_checkpoint(args.checkpoint), args.out)
    else:
        trainer = Trainer(scene, settings, args.out)
    result = trainer.run()
    logger.info(f"Final checkpoint: {result.last_checkpoint}")


def cmd_render(args) -> None:
    model = load_checkpoint(args.checkpoint).to_model()
    scene = load_scene(args.scene)
    (frame,) = resolve_frames(scene, [args.frame])
    try:
        camera = scene.camera(args.camera)
    except KeyError:
        raise ConfigurationError(f"no camera {args.camera!r} in scene") from None
    hands = scene.hand_states(frame, model.settings.sampling.aabb_margin)
    rng = np.random.default_rng(args.seed if args.seed is not None else model.settings.train.seed)
    image = render_image(model, hands, camera, args.mode, frame=scene.latent_index(frame.frame_id), rng=rng)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{frame.frame_id}_{camera.camera_id}"
    write_png(out / f"{stem}_color.png", image.color)
    write_pfm(out / f"{stem}_depth.pfm", np.where(image.weight_sum > 0, image.depth, np.inf))
    write_png(out / f"{stem}_weights.png", image.weight_sum)
    write_feature_map(out / f"{stem}.hnfm", FeatureMap(image.feature, frame.frame_id, camera.camera_id))
    logger.info(f"Rendered {stem} into {out}")


def cmd_adapt(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    scene = load_scene(args.scene)
    frames = resolve_frames(scene, args.frames) or scene.novel_frames
    settings = _override(
        model.settings,
        adapt={"iterations": args.iterations},
        train={"seed": args.seed, "train_views": args.views},
    )
    pose_adapt(model, scene, frames, settings)
    save_checkpoint(args.out, Checkpoint.from_model(model, ckpt.iteration))
    logger.info(f"Adapted checkpoint written to {args.out}")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.checkpoint).to_model()
    scene = load_scene(args.scene)
    mode = EvalMode(args.mode)
    frames = resolve_frames(scene, args.frames)
    frame_ids = [f.frame_id for f in frames] or None
    if mode == EvalMode.NOVEL_POSE_ADAPT:
        settings = _override(model.settings, train={"seed": args.seed})
        pose_adapt(model, scene, frames or scene.novel_frames, settings)
    report = evaluate(model, scene, mode, frame_ids)
    get_writer(args.format, str(args.out))(report, "report")
    print_report(report)


def cmd_extract_features(args) -> None:
    scene = load_scene(args.scene)
    features, basis = extract_teacher_features(
        scene, args.dim, args.teacher, args.raw_dir, seed=args.seed or 0
    )
    attach_features(scene, features, basis)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "extract-features": cmd_extract_features,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.log_level)
    configure_threads(args.single_thread)
    try:
        COMMANDS[args.command](args)
    except (HandNeRFError, FileNotFoundError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
