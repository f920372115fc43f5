"""
Synthetic dataset generation: procedural hands posed over a few frames, seen by
a ring of cameras, with rasterized ground-truth color, pseudo-depth and masks.
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage
from tqdm import tqdm

from .common.errors import ConfigurationError, GeometryError
from .formats import Frame, Scene, View, save_scene
from .hand import FINGERS, HandAsset, Pose, PosedMesh, finger_joints, load_hand
from .raster import CameraModel, rasterize

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
MIN_OCCLUSION_PIXELS = 50
# root placement of interlocking hands: right in front, left behind and raised
INTERLOCK_ROOTS = {"right": (0.12, 0.0, 0.2), "left": (-0.12, 0.05, -0.2)}


class DatasetSpec(BaseModel):
    hands: List[Literal["left", "right"]] = ["right"]
    frames: int = Field(default=3, ge=1)
    novel_frames: int = Field(default=0, ge=0)
    train_cameras: int = Field(default=8, ge=1)
    test_cameras: int = Field(default=2, ge=0)
    image_size: int = Field(default=64, ge=8)
    focal_factor: float = Field(default=1.86, gt=0.0)
    radius: float = Field(default=4.5, gt=0.0)
    elevation: float = 0.25
    pose_amplitude: float = Field(default=0.5, ge=0.0)
    novel_bend: float = Field(default=1.0, ge=0.0)
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    min_occlusion_pixels: int = MIN_OCCLUSION_PIXELS

    @field_validator("hands")
    @classmethod
    def _one_or_two_hands(cls, v):
        if not 1 <= len(v) <= 2 or len(set(v)) != len(v):
            raise ValueError("one hand, or one left and one right hand")
        return v


def flexion_pose(
    asset: HandAsset,
    angles: Dict[int, float],
    root_translation=(0.0, 0.0, 0.0),
    root_rotation=(0.0, 0.0, 0.0),
) -> Pose:
    """Canonical pose plus flexion ``angles`` (radians) about each joint's flex axis."""
    rotations = asset.skeleton.canonical_pose.joint_rotations.copy()
    for joint, angle in angles.items():
        rotations[joint] = rotations[joint] + angle * asset.skeleton.flex_axes[joint]
    return Pose(rotations, np.asarray(root_translation), np.asarray(root_rotation))


def random_flexion(rng: np.random.Generator, amplitude: float) -> Dict[int, float]:
    angles = {}
    for finger in FINGERS:
        curl = rng.uniform(0.0, amplitude)
        for k, joint in enumerate(finger_joints(finger)):
            angles[joint] = curl * (1.0, 0.8, 0.6)[k]
    return angles


def bent_finger_flexion(bend: float, fingers=("index", "middle")) -> Dict[int, float]:
    return {j: bend for finger in fingers for j in finger_joints(finger)}


def camera_ring(spec: DatasetSpec, target: np.ndarray) -> List[CameraModel]:
    """
    Train cameras on golden-angle azimuths (any prefix is spread around the
    hands) at alternating elevations; test cameras evenly between them.
    """
    size = spec.image_size
    focal = spec.focal_factor * size
    cameras = []

    def place(azimuth: float, elevation: float, camera_id: str, split: str) -> CameraModel:
        eye = target + spec.radius * np.array(
            [np.sin(azimuth) * np.cos(elevation), np.sin(elevation), np.cos(azimuth) * np.cos(elevation)]
        )
        return CameraModel.look_at(eye, target, (0.0, 1.0, 0.0), focal, size, size, camera_id, split)

    for k in range(spec.train_cameras):
        elevation = spec.elevation if k % 2 == 0 else -spec.elevation
        cameras.append(place(k * GOLDEN_ANGLE, elevation, f"train{k}", "train"))
    for k in range(spec.test_cameras):
        azimuth = 2 * np.pi * (k + 0.5) / spec.test_cameras + 0.3
        cameras.append(place(azimuth, 0.5 * spec.elevation, f"test{k}", "test"))
    return cameras


def occlusion_audit(
    camera: CameraModel, meshes: List[PosedMesh]
) -> Tuple[int, np.ndarray]:
    """
    Pixels covered by both hands, and the inter-hand occlusion boundary.

    The boundary holds joint-render foreground pixels whose 3×3 neighbourhood
    sees both hands.
    """
    if len(meshes) < 2:
        return 0, np.zeros((camera.height, camera.width), dtype=bool)
    coverage = [np.isfinite(rasterize(camera, m).depth) for m in meshes]
    overlap = int(np.count_nonzero(coverage[0] & coverage[1]))
    joint = rasterize(camera, meshes)
    near = [
        ndimage.binary_dilation(joint.mesh_index == i, structure=np.ones((3, 3), bool))
        for i in range(2)
    ]
    return overlap, near[0] & near[1] & joint.hit


def build_scene(spec: DatasetSpec, seed: int = 0) -> Scene:
    """Generate the full scene in memory."""
    rng = np.random.default_rng(seed)
    assets = {side: load_hand(side, seed) for side in spec.hands}
    two_hands = len(assets) == 2

    frames = []
    for k in range(spec.frames + spec.novel_frames):
        novel = k >= spec.frames
        poses = {}
        for side, asset in sorted(assets.items()):
            if novel:
                angles = bent_finger_flexion(spec.novel_bend)
            else:
                angles = random_flexion(rng, spec.pose_amplitude)
            root_rotation = rng.normal(0.0, 0.05, size=3)
            root = INTERLOCK_ROOTS[side] if two_hands else (0.0, 0.0, 0.0)
            poses[side] = flexion_pose(asset, angles, root, root_rotation)
        frame_id = f"novel{k - spec.frames:03d}" if novel else f"frame{k:03d}"
        frames.append(Frame(frame_id, poses, novel))

    first = [PosedMesh.from_asset(assets[s], frames[0].poses[s]) for s in sorted(assets)]
    vertices = np.concatenate([m.vertices for m in first])
    target = (vertices.min(axis=0) + vertices.max(axis=0)) / 2
    cameras = camera_ring(spec, target)

    scene = Scene(assets, frames, cameras, background=spec.background)
    best_overlap = 0
    for frame in tqdm(frames, desc="Rendering frames", leave=False):
        meshes = [PosedMesh.from_asset(assets[s], frame.poses[s]) for s in sorted(assets)]
        for camera in cameras:
            result = rasterize(camera, meshes, spec.background)
            if not np.any(result.hit):
                raise GeometryError(f"camera {camera.camera_id} does not see the hands in {frame.frame_id}")
            overlap, boundary = occlusion_audit(camera, meshes)
            best_overlap = max(best_overlap, overlap)
            scene.views[(frame.frame_id, camera.camera_id)] = View(
                result.color, result.depth, result.mask,
                boundary if two_hands else None, overlap,
            )
    if two_hands and best_overlap < spec.min_occlusion_pixels:
        raise ConfigurationError(
            f"interlocking spec produced at most {best_overlap} occluded pixels "
            f"(need {spec.min_occlusion_pixels})"
        )
    logger.info(
        f"Generated {len(frames)} frames × {len(cameras)} cameras, "
        f"max inter-hand overlap {best_overlap} px"
    )
    return scene


def generate_dataset(spec: DatasetSpec, seed: int, out: Path) -> Scene:
    """Generate a scene and write it under ``out``."""
    scene = build_scene(spec, seed)
    save_scene(scene, out, seeds={side: seed for side in scene.assets})
    scene.root = Path(out)
    return scene


def toy_scene(
    hands: Tuple[str, ...] = ("right",),
    image_size: int = 16,
    frames: int = 1,
    train_cameras: int = 2,
    test_cameras: int = 1,
    seed: int = 0,
    novel_frames: int = 0,
) -> Scene:
    """Small in-memory scene for tests and smoke runs."""
    spec = DatasetSpec(
        hands=list(hands),
        frames=frames,
        novel_frames=novel_frames,
        train_cameras=train_cameras,
        test_cameras=test_cameras,
        image_size=image_size,
        min_occlusion_pixels=0,
    )
    return build_scene(spec, seed)


def load_spec(path: Optional[Path]) -> DatasetSpec:
    if path is None:
        return DatasetSpec()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset spec not found: {path}")
    try:
        return DatasetSpec.model_validate_json(path.read_text())
    except ValueError as e:
        raise ConfigurationError(f"{path}: {e}") from e
