"""
Per-pixel distillation targets: raw feature maps from a teacher, L2-normalized
and reduced to D channels with a PCA basis fit once per dataset.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import linalg

from .common.errors import ConfigurationError, FormatError
from .formats import PathLike, Scene, SceneFile, read_feature_map, save_features

TOY_CHANNELS = 27
MAX_PCA_SAMPLES = 100_000


def toy_raw_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 27) stack of the RGB values in each pixel's 3×3 neighbourhood."""
    image = np.asarray(image, dtype=np.float64)
    H, W, _ = image.shape
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    shifts = [padded[dy : dy + H, dx : dx + W] for dy in range(3) for dx in range(3)]
    return np.concatenate(shifts, axis=-1)


def l2_normalize(raw: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    return raw / np.maximum(norm, eps)


@dataclass
class PcaBasis:
    mean: np.ndarray  # (C,)
    components: np.ndarray  # (C, D), columns ordered by decreasing variance
    eigenvalues: np.ndarray  # (C,) all eigenvalues, decreasing

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        return y @ self.components.T + self.mean

    def save(self, path: PathLike) -> None:
        np.savez(path, mean=self.mean, components=self.components, eigenvalues=self.eigenvalues)

    @classmethod
    def load(cls, path: PathLike) -> "PcaBasis":
        with np.load(path) as data:
            return cls(data["mean"], data["components"], data["eigenvalues"])


def fit_pca(samples: np.ndarray, dim: int) -> PcaBasis:
    """Principal axes of (P, C) samples from the population covariance."""
    samples = np.asarray(samples, dtype=np.float64)
    channels = samples.shape[1]
    if dim > channels:
        raise ConfigurationError(f"cannot reduce {channels} raw channels to {dim}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / len(samples)
    eigenvalues, vectors = linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]
    # sign convention: the largest-magnitude entry of every axis is positive
    pivot = np.argmax(np.abs(vectors), axis=0)
    vectors = vectors * np.sign(vectors[pivot, np.arange(channels)])
    return PcaBasis(mean, vectors[:, :dim], np.clip(eigenvalues, 0.0, None))


def _raw_maps(scene: Scene, teacher: str, raw_dir: Optional[Path]) -> Dict[Tuple[str, str], np.ndarray]:
    raw = {}
    for key, view in scene.views.items():
        if teacher == "toy":
            raw[key] = toy_raw_features(view.color)
        elif teacher == "external":
            if raw_dir is None:
                raise ConfigurationError("external teacher needs a raw feature directory")
            path = Path(raw_dir) / f"{key[0]}_{key[1]}.hnfm"
            if not path.exists():
                raise FileNotFoundError(f"raw feature map not found: {path}")
            fmap = read_feature_map(path)
            if fmap.data.shape[:2] != view.color.shape[:2]:
                raise FormatError(f"{path}: map {fmap.data.shape[:2]} vs image {view.color.shape[:2]}")
            raw[key] = fmap.data.astype(np.float64)
        else:
            raise ConfigurationError(f"unknown teacher {teacher!r}")
    return raw


def extract_teacher_features(
    scene: Scene,
    dim: int = 16,
    teacher: str = "toy",
    raw_dir: Optional[PathLike] = None,
    seed: int = 0,
    max_samples: int = MAX_PCA_SAMPLES,
) -> Tuple[Dict[Tuple[str, str], np.ndarray], PcaBasis]:
    """
    Normalized, PCA-reduced (H, W, D) targets for every view of ``scene``.

    The basis is fit on at most ``max_samples`` foreground pixels drawn across
    the dataset; with no foreground at all every pixel is eligible.
    """
    raw = {k: l2_normalize(v) for k, v in _raw_maps(scene, teacher, raw_dir).items()}
    if not raw:
        raise ConfigurationError("scene has no views to extract features from")
    pool = [v[scene.views[k].mask] for k, v in sorted(raw.items())]
    pool = np.concatenate(pool) if sum(len(p) for p in pool) else np.concatenate(
        [v.reshape(-1, v.shape[-1]) for _, v in sorted(raw.items())]
    )
    rng = np.random.default_rng(seed)
    if len(pool) > max_samples:
        pool = pool[np.sort(rng.choice(len(pool), max_samples, replace=False))]
    basis = fit_pca(pool, dim)
    kept = basis.eigenvalues[:dim].sum() / max(basis.eigenvalues.sum(), 1e-12)
    logger.info(f"PCA on {len(pool)} pixels: {dim} of {pool.shape[1]} channels keep {kept:.1%} variance")
    features = {k: basis.project(v) for k, v in raw.items()}
    return features, basis


def random_features(scene: Scene, dim: int, seed: int = 0) -> Dict[Tuple[str, str], np.ndarray]:
    """Random per-pixel targets with the same shape as the teacher features."""
    rng = np.random.default_rng(seed)
    return {
        key: l2_normalize(rng.normal(size=(*view.color.shape[:2], dim)))
        for key, view in sorted(scene.views.items())
    }


def attach_features(
    scene: Scene,
    features: Dict[Tuple[str, str], np.ndarray],
    basis: PcaBasis,
    root: Optional[PathLike] = None,
) -> Path:
    """Write feature maps and their basis next to a scene and reference them from scene.json."""
    root = Path(root if root is not None else scene.root)
    doc_path = root / "scene.json"
    if not doc_path.exists():
        raise FileNotFoundError(f"scene file not found: {doc_path}")
    save_features(root / "features", features)
    basis.save(root / "features" / "pca.npz")
    doc = SceneFile.model_validate_json(doc_path.read_text())
    doc.features = "features"
    doc.feature_basis = "features/pca.npz"
    doc_path.write_text(doc.model_dump_json(indent=2))
    scene.features = features
    logger.info(f"Attached {len(features)} feature maps ({basis.dim} channels) to {doc_path}")
    return doc_path
