"""
On-disk formats: the scene document and its blobs, feature maps, checkpoints
and images.

Layout of a scene directory::

    scene.json                 SceneFile document
    assets/<side>.npz          skeleton + skinned mesh per hand
    views/<frame>_<camera>_color.png / _depth.pfm / _mask.png / _boundary.png
    features/<frame>_<camera>.hnfm, features/pca.npz
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import imageio.v3 as iio
import mlx.core as mx
import numpy as np
from loguru import logger
from mlx.utils import tree_flatten, tree_unflatten
from pydantic import BaseModel, ValidationError, model_validator
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save as safetensors_save

from .common.config import settings_from_snapshot
from .common.errors import (
    ChecksumError,
    FormatError,
    MagicError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .deformation import HandState
from .geometry import AABB, RigidTransform
from .hand import HandAsset, Pose, Skeleton, SkinnedHandMesh, mirror_map_point
from .networks import ParameterStore
from .radiance import HandNeRF
from .raster import CameraModel

SCENE_VERSION = 1
FEATURE_MAGIC = b"HNFM"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1
# magic, version, reserved, height, width, channels, frame id, camera id
_FEATURE_HEADER = struct.Struct("<4sHHIII32s32s")

PathLike = Union[str, Path]


# --- images -----------------------------------------------------------------


def write_png(path: PathLike, image: np.ndarray) -> None:
    """Write a [0, 1] float image or boolean mask as 8-bit PNG."""
    image = np.asarray(image)
    if image.dtype == bool:
        data = image.astype(np.uint8) * 255
    else:
        data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    iio.imwrite(path, data, extension=".png")


def read_png(path: PathLike, mask: bool = False) -> np.ndarray:
    data = np.asarray(iio.imread(path))
    if mask:
        return (data[..., 0] if data.ndim == 3 else data) > 127
    return data[..., :3].astype(np.float64) / 255.0


def write_pfm(path: PathLike, image: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows are stored bottom to top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ShapeMismatchError(f"PFM writer takes (H, W) maps, got {image.shape}")
    H, W = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise TruncatedFileError(f"{path}: incomplete PFM header")
    if parts[0] != b"Pf":
        raise MagicError(f"{path}: not a single-channel PFM file")
    try:
        W, H = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise FormatError(f"{path}: bad PFM header ({e})") from e
    dtype = "<f4" if scale < 0 else ">f4"
    if len(parts[3]) != 4 * H * W:
        raise TruncatedFileError(f"{path}: expected {4 * H * W} payload bytes, got {len(parts[3])}")
    return np.frombuffer(parts[3], dtype=dtype).reshape(H, W)[::-1].astype(np.float32)


# --- feature maps -------------------------------------------------------------


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32
    frame_id: str
    camera_id: str


def _pack_id(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 32:
        raise FormatError(f"identifier {value!r} exceeds 32 bytes")
    return raw


def encode_feature_map(fmap: FeatureMap) -> bytes:
    data = np.asarray(fmap.data, dtype="<f4")
    if data.ndim != 3:
        raise ShapeMismatchError(f"feature maps are (H, W, C), got {data.shape}")
    H, W, C = data.shape
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, 0, H, W, C, _pack_id(fmap.frame_id), _pack_id(fmap.camera_id)
    )
    return header + np.ascontiguousarray(data).tobytes()


def decode_feature_map(blob: bytes, source: str = "<bytes>") -> FeatureMap:
    if len(blob) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{source}: {len(blob)} bytes, header needs {_FEATURE_HEADER.size}")
    magic, version, reserved, H, W, C, frame_id, camera_id = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise MagicError(f"{source}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{source}: feature map version {version}, expected {FEATURE_VERSION}")
    if reserved != 0:
        raise FormatError(f"{source}: reserved header field is {reserved}")
    expected = _FEATURE_HEADER.size + 4 * H * W * C
    if len(blob) < expected:
        raise TruncatedFileError(f"{source}: {len(blob)} bytes, header implies {expected}")
    if len(blob) > expected:
        raise FormatError(f"{source}: {len(blob) - expected} trailing bytes")
    try:
        frame = frame_id.rstrip(b"\0").decode("utf-8")
        camera = camera_id.rstrip(b"\0").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{source}: identifiers are not UTF-8") from e
    data = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(H, W, C)
    return FeatureMap(data.copy(), frame, camera)


def write_feature_map(path: PathLike, fmap: FeatureMap) -> None:
    Path(path).write_bytes(encode_feature_map(fmap))


def read_feature_map(path: PathLike) -> FeatureMap:
    return decode_feature_map(Path(path).read_bytes(), str(path))


# --- scene document -------------------------------------------------------------


class PoseEntry(BaseModel):
    joint_rotations: List[List[float]]
    root_translation: List[float]
    root_rotation: List[float]

    def to_pose(self) -> Pose:
        return Pose.from_dict(self.model_dump())


class FrameEntry(BaseModel):
    frame_id: str
    poses: Dict[str, PoseEntry]
    novel: bool = False


class CameraEntry(BaseModel):
    camera_id: str
    split: Literal["train", "test"]
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: List[List[float]]
    translation: List[float]


class HandEntry(BaseModel):
    side: Literal["left", "right"]
    asset: str
    seed: int = 0


class ViewEntry(BaseModel):
    frame_id: str
    camera_id: str
    color: str
    depth: str
    mask: str
    boundary: Optional[str] = None
    occlusion_pixels: int = 0


class SceneFile(BaseModel):
    version: int = SCENE_VERSION
    units: str = "scene unit"
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    hands: List[HandEntry]
    cameras: List[CameraEntry]
    frames: List[FrameEntry]
    views: List[ViewEntry] = []
    features: Optional[str] = None
    feature_basis: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        ids = [c.camera_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError("camera ids must be unique")
        sides = {h.side for h in self.hands}
        if len(sides) != len(self.hands) or not 1 <= len(sides) <= 2:
            raise ValueError("a scene holds one or two hands with distinct sides")
        for frame in self.frames:
            if set(frame.poses) != sides:
                raise ValueError(f"frame {frame.frame_id} poses {sorted(frame.poses)} != hands {sorted(sides)}")
        return self


@dataclass
class Frame:
    frame_id: str
    poses: Dict[str, Pose]
    novel: bool = False


@dataclass
class View:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), +inf off the hands
    mask: np.ndarray  # (H, W) dilated silhouette
    boundary: Optional[np.ndarray] = None  # inter-hand occlusion boundary
    occlusion_pixels: int = 0


@dataclass
class Scene:
    """A loaded scene: hand assets, poses, cameras and their rendered views."""

    assets: Dict[str, HandAsset]
    frames: List[Frame]
    cameras: List[CameraModel]
    views: Dict[Tuple[str, str], View] = field(default_factory=dict)
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    features: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    root: Optional[Path] = None

    @property
    def sides(self) -> List[str]:
        return sorted(self.assets)

    @property
    def training_frames(self) -> List[Frame]:
        return [f for f in self.frames if not f.novel]

    @property
    def novel_frames(self) -> List[Frame]:
        return [f for f in self.frames if f.novel]

    def frame(self, frame_id: str) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"no frame {frame_id!r}")

    def latent_index(self, frame_id: str) -> Optional[int]:
        """Row of the latent table for a training frame, ``None`` for novel frames."""
        for i, f in enumerate(self.training_frames):
            if f.frame_id == frame_id:
                return i
        return None

    def camera(self, camera_id: str) -> CameraModel:
        for c in self.cameras:
            if c.camera_id == camera_id:
                return c
        raise KeyError(f"no camera {camera_id!r}")

    def train_cameras(self, k: Optional[int] = None) -> List[CameraModel]:
        cams = [c for c in self.cameras if c.split == "train"]
        return cams if k is None else cams[:k]

    def test_cameras(self) -> List[CameraModel]:
        return [c for c in self.cameras if c.split == "test"]

    def hand_states(self, frame: Frame, margin_fraction: float = 0.05) -> List[HandState]:
        return [
            HandState.build(self.assets[side], frame.poses[side], margin_fraction)
            for side in self.sides
        ]

    def canonical_vertices(self) -> np.ndarray:
        """Canonical rest vertices in the shared (right-hand) frame."""
        if "right" in self.assets:
            return self.assets["right"].mesh.vertices
        return mirror_map_point(self.assets["left"].mesh.vertices)


def save_asset(path: PathLike, asset: HandAsset) -> None:
    sk, mesh = asset.skeleton, asset.mesh
    np.savez(
        path,
        parents=sk.parents,
        offsets=sk.offsets,
        tip_offsets=sk.tip_offsets,
        flex_axes=sk.flex_axes,
        canonical_rotations=sk.canonical_pose.joint_rotations,
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        weights=mesh.weights,
        albedo=mesh.albedo,
        side=np.array(mesh.side),
    )


def load_asset(path: PathLike) -> HandAsset:
    try:
        with np.load(path) as data:
            side = str(data["side"])
            skeleton = Skeleton(
                data["parents"], data["offsets"], data["tip_offsets"], data["flex_axes"],
                Pose(data["canonical_rotations"]), side,
            )
            mesh = SkinnedHandMesh(
                data["vertices"], data["triangles"], data["weights"], data["albedo"], side
            ).validate()
    except KeyError as e:
        raise FormatError(f"{path}: missing array {e}") from e
    return HandAsset(skeleton, mesh)


def _camera_entry(camera: CameraModel) -> CameraEntry:
    return CameraEntry(
        camera_id=camera.camera_id,
        split=camera.split,
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        height=camera.height,
        width=camera.width,
        rotation=camera.extrinsics.rotation.tolist(),
        translation=camera.extrinsics.translation.tolist(),
    )


def _camera_from_entry(entry: CameraEntry) -> CameraModel:
    extrinsics = RigidTransform(np.asarray(entry.rotation), np.asarray(entry.translation))
    return CameraModel(
        entry.fx, entry.fy, entry.cx, entry.cy, entry.height, entry.width,
        extrinsics, entry.camera_id, entry.split,
    )


def _view_stem(frame_id: str, camera_id: str) -> str:
    return f"{frame_id}_{camera_id}"


def save_scene(scene: Scene, root: PathLike, seeds: Optional[Dict[str, int]] = None) -> Path:
    """Write the scene document and every blob it references; returns the document path."""
    root = Path(root)
    (root / "assets").mkdir(parents=True, exist_ok=True)
    (root / "views").mkdir(exist_ok=True)
    hands = []
    for side, asset in sorted(scene.assets.items()):
        rel = f"assets/{side}.npz"
        save_asset(root / rel, asset)
        hands.append(HandEntry(side=side, asset=rel, seed=(seeds or {}).get(side, 0)))

    views = []
    for (frame_id, camera_id), view in sorted(scene.views.items()):
        stem = f"views/{_view_stem(frame_id, camera_id)}"
        write_png(root / f"{stem}_color.png", view.color)
        write_pfm(root / f"{stem}_depth.pfm", view.depth)
        write_png(root / f"{stem}_mask.png", view.mask)
        boundary = None
        if view.boundary is not None:
            boundary = f"{stem}_boundary.png"
            write_png(root / boundary, view.boundary)
        views.append(
            ViewEntry(
                frame_id=frame_id,
                camera_id=camera_id,
                color=f"{stem}_color.png",
                depth=f"{stem}_depth.pfm",
                mask=f"{stem}_mask.png",
                boundary=boundary,
                occlusion_pixels=view.occlusion_pixels,
            )
        )

    features = None
    if scene.features:
        features = "features"
        save_features(root / features, scene.features)

    doc = SceneFile(
        background=tuple(scene.background),
        hands=hands,
        cameras=[_camera_entry(c) for c in scene.cameras],
        frames=[
            FrameEntry(
                frame_id=f.frame_id,
                poses={side: PoseEntry(**pose.to_dict()) for side, pose in f.poses.items()},
                novel=f.novel,
            )
            for f in scene.frames
        ],
        views=views,
        features=features,
    )
    path = root / "scene.json"
    path.write_text(doc.model_dump_json(indent=2))
    logger.info(f"Wrote scene with {len(views)} views to {path}")
    return path


def load_scene(path: PathLike) -> Scene:
    """Load a scene document (or its directory) with all referenced blobs."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    root = path.parent
    try:
        doc = SceneFile.model_validate_json(path.read_text())
    except ValidationError as e:
        raise FormatError(f"{path}: {e}") from e
    if doc.version != SCENE_VERSION:
        raise VersionMismatchError(f"{path}: scene version {doc.version}, expected {SCENE_VERSION}")

    assets = {h.side: load_asset(root / h.asset) for h in doc.hands}
    frames = [
        Frame(f.frame_id, {side: p.to_pose() for side, p in f.poses.items()}, f.novel)
        for f in doc.frames
    ]
    views = {}
    for v in doc.views:
        views[(v.frame_id, v.camera_id)] = View(
            read_png(root / v.color),
            read_pfm(root / v.depth).astype(np.float64),
            read_png(root / v.mask, mask=True),
            read_png(root / v.boundary, mask=True) if v.boundary else None,
            v.occlusion_pixels,
        )
    features = load_features(root / doc.features) if doc.features else {}
    return Scene(
        assets,
        frames,
        [_camera_from_entry(c) for c in doc.cameras],
        views,
        tuple(doc.background),
        features,
        root,
    )


def save_features(directory: PathLike, features: Dict[Tuple[str, str], np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (frame_id, camera_id), data in sorted(features.items()):
        write_feature_map(
            directory / f"{_view_stem(frame_id, camera_id)}.hnfm",
            FeatureMap(data, frame_id, camera_id),
        )


def load_features(directory: PathLike) -> Dict[Tuple[str, str], np.ndarray]:
    features = {}
    for path in sorted(Path(directory).glob("*.hnfm")):
        fmap = read_feature_map(path)
        features[(fmap.frame_id, fmap.camera_id)] = fmap.data.astype(np.float64)
    return features


# --- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its random stream."""

    parameters: Dict[str, np.ndarray]
    settings_json: str
    box: np.ndarray  # (2, 3) normalization box
    n_frames: int
    iteration: int = 0
    rng_state: Optional[dict] = None
    format_version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(
        cls, model: HandNeRF, iteration: int = 0, rng: Optional[np.random.Generator] = None
    ) -> "Checkpoint":
        mx.eval(model.parameters())
        return cls(
            parameters={k: np.array(v) for k, v in tree_flatten(model.parameters())},
            settings_json=model.settings.model_dump_json(),
            box=model.box.as_array(),
            n_frames=model.field.n_frames,
            iteration=iteration,
            rng_state=None if rng is None else rng.bit_generator.state,
        )

    def to_model(self) -> HandNeRF:
        settings = settings_from_snapshot(self.settings_json)
        model = HandNeRF(settings, self.n_frames, AABB(self.box[0], self.box[1]))
        store = ParameterStore.from_module(model)
        if set(store.names()) != set(self.parameters):
            missing = sorted(set(store.names()) ^ set(self.parameters))
            raise ShapeMismatchError(f"checkpoint does not match the configured model: {missing[:5]}")
        store.assign({k: mx.array(v, dtype=model.dtype) for k, v in self.parameters.items()})
        model.update(tree_unflatten(list(store.arrays().items())))
        mx.eval(model.parameters())
        return model

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def tensor_checksum(tensors: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        value = np.ascontiguousarray(tensors[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(value.dtype).encode("ascii"))
        digest.update(str(value.shape).encode("ascii"))
        digest.update(value.tobytes())
    return digest.hexdigest()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "format_version": ckpt.format_version,
        "settings": ckpt.settings_json,
        "box": ckpt.box.tolist(),
        "n_frames": ckpt.n_frames,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "checksum": tensor_checksum(ckpt.parameters),
    }
    tensors = {k: np.ascontiguousarray(v) for k, v in ckpt.parameters.items()}
    return safetensors_save(tensors, metadata={"handnerf": json.dumps(meta, sort_keys=True)})


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.debug(f"Saved checkpoint at iteration {ckpt.iteration} to {path}")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="np") as f:
            metadata = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except SafetensorError as e:
        raise TruncatedFileError(f"{path}: unreadable checkpoint ({e})") from e
    try:
        meta = json.loads(metadata["handnerf"])
        version = int(meta["format_version"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: missing or malformed checkpoint metadata") from e
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if tensor_checksum(tensors) != meta.get("checksum"):
        raise ChecksumError(f"{path}: tensor checksum mismatch")
    return Checkpoint(
        parameters=tensors,
        settings_json=meta["settings"],
        box=np.asarray(meta["box"], dtype=np.float64),
        n_frames=int(meta["n_frames"]),
        iteration=int(meta["iteration"]),
        rng_state=meta.get("rng_state"),
        format_version=version,
    )
