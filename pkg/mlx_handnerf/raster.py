"""
Pinhole cameras and the z-buffered triangle rasterizer that synthesises
ground-truth color, pseudo-depth and foreground masks from posed hand meshes.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numba
import numpy as np
from scipy import ndimage

from .common.errors import GeometryError
from .geometry import RayBundle, RigidTransform
from .hand import PosedMesh

LIGHT_DIRECTION = np.array([0.35, -0.55, -0.76])
AMBIENT = 0.35
MASK_DILATION = 3


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)
    camera_id: str = "cam0"
    split: str = "train"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"camera {self.camera_id}: principal point outside image")
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"camera {self.camera_id}: empty image")

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 1.0, 0.0),
        focal: float = 100.0,
        height: int = 64,
        width: int = 64,
        camera_id: str = "cam0",
        split: str = "train",
    ) -> "CameraModel":
        """Camera at ``eye`` with +z toward ``target``, +y image-down, +x image-right."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-9:
            raise GeometryError("camera eye coincides with its target")
        forward /= norm
        right = np.cross(forward, -np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise GeometryError("camera up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])  # rows: camera axes in world
        extrinsics = RigidTransform(rotation, -rotation @ eye)
        return cls(focal, focal, width / 2, height / 2, height, width, extrinsics, camera_id, split)

    @property
    def center(self) -> np.ndarray:
        return -self.extrinsics.rotation.T @ self.extrinsics.translation

    @property
    def base_radius(self) -> float:
        return 2.0 / np.sqrt(12.0) / self.fx

    def all_pixels(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1)

    def pixel_directions(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        d_cam = np.stack(
            [
                (pixels[:, 1] + 0.5 - self.cx) / self.fx,
                (pixels[:, 0] + 0.5 - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=-1,
        )
        d_world = d_cam @ self.extrinsics.rotation
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def rays(self, pixels: Optional[np.ndarray] = None) -> RayBundle:
        pixels = self.all_pixels() if pixels is None else np.asarray(pixels, dtype=np.int64)
        directions = self.pixel_directions(pixels)
        origins = np.broadcast_to(self.center, directions.shape).copy()
        radii = np.full(len(pixels), self.base_radius)
        return RayBundle(origins, directions, pixels.reshape(-1, 2), radii)

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (u, v, z): pixel column/row coordinates and camera depth."""
        cam = self.extrinsics.apply(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return u, v, z


@dataclass
class RasterResult:
    depth: np.ndarray  # (H, W), +inf where nothing was hit
    color: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) dilated silhouette
    hit: np.ndarray  # (H, W) undilated coverage
    triangle: np.ndarray  # (H, W) global triangle id, -1 for none
    mesh_index: np.ndarray  # (H, W) which input mesh, -1 for none
    bary: np.ndarray  # (H, W, 3)


@numba.jit(nopython=True, parallel=True)
def _raster_kernel(origin, cam_to_world, fx, fy, cx, cy, vertices, triangles, boxes, depth, tri_id, bary):
    H, W = depth.shape
    for row in numba.prange(H):
        for t in range(triangles.shape[0]):
            if row < boxes[t, 0] or row > boxes[t, 1]:
                continue
            ia, ib, ic = triangles[t, 0], triangles[t, 1], triangles[t, 2]
            ax, ay, az = vertices[ia, 0], vertices[ia, 1], vertices[ia, 2]
            e1x, e1y, e1z = vertices[ib, 0] - ax, vertices[ib, 1] - ay, vertices[ib, 2] - az
            e2x, e2y, e2z = vertices[ic, 0] - ax, vertices[ic, 1] - ay, vertices[ic, 2] - az
            sx, sy, sz = origin[0] - ax, origin[1] - ay, origin[2] - az
            yc = (row + 0.5 - cy) / fy
            for col in range(boxes[t, 2], boxes[t, 3] + 1):
                xc = (col + 0.5 - cx) / fx
                dx = cam_to_world[0, 0] * xc + cam_to_world[0, 1] * yc + cam_to_world[0, 2]
                dy = cam_to_world[1, 0] * xc + cam_to_world[1, 1] * yc + cam_to_world[1, 2]
                dz = cam_to_world[2, 0] * xc + cam_to_world[2, 1] * yc + cam_to_world[2, 2]
                n = np.sqrt(dx * dx + dy * dy + dz * dz)
                dx, dy, dz = dx / n, dy / n, dz / n
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < 1e-14:
                    continue
                inv = 1.0 / det
                u = (sx * px + sy * py + sz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = sy * e1z - sz * e1y
                qy = sz * e1x - sx * e1z
                qz = sx * e1y - sy * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                tt = (e2x * qx + e2y * qy + e2z * qz) * inv
                if tt > 1e-9 and tt < depth[row, col]:
                    depth[row, col] = tt
                    tri_id[row, col] = t
                    bary[row, col, 0] = 1.0 - u - v
                    bary[row, col, 1] = u
                    bary[row, col, 2] = v


def _pixel_boxes(camera: CameraModel, vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Conservative per-triangle (row0, row1, col0, col1) pixel-center ranges."""
    u, v, z = camera.project(vertices)
    H, W = camera.height, camera.width
    tu, tv, tz = u[triangles], v[triangles], z[triangles]
    boxes = np.empty((len(triangles), 4), dtype=np.int64)
    in_front = np.all(tz > 1e-6, axis=1)
    with np.errstate(invalid="ignore"):
        boxes[:, 0] = np.floor(np.nan_to_num(tv.min(1)) - 1.5)
        boxes[:, 1] = np.ceil(np.nan_to_num(tv.max(1)) + 0.5)
        boxes[:, 2] = np.floor(np.nan_to_num(tu.min(1)) - 1.5)
        boxes[:, 3] = np.ceil(np.nan_to_num(tu.max(1)) + 0.5)
    straddling = ~in_front & np.any(tz > 1e-6, axis=1)
    boxes[straddling] = (0, H - 1, 0, W - 1)
    behind = ~in_front & ~straddling
    boxes[behind] = (1, 0, 1, 0)
    boxes[:, 0:2] = np.clip(boxes[:, 0:2], -1, H)
    boxes[:, 2:4] = np.clip(boxes[:, 2:4], -1, W)
    boxes[:, 2] = np.maximum(boxes[:, 2], 0)
    boxes[:, 3] = np.minimum(boxes[:, 3], W - 1)
    return boxes


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    face = np.cross(b - a, c - a)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals / np.maximum(norm, 1e-12)


def dilate_mask(hit: np.ndarray, pixels: int = MASK_DILATION) -> np.ndarray:
    if pixels <= 0:
        return hit.copy()
    return ndimage.binary_dilation(hit, structure=np.ones((3, 3), bool), iterations=pixels)


def rasterize(
    camera: CameraModel,
    meshes: Union[PosedMesh, Sequence[PosedMesh]],
    background: Sequence[float] = (0.0, 0.0, 0.0),
    light_direction: np.ndarray = LIGHT_DIRECTION,
    ambient: float = AMBIENT,
) -> RasterResult:
    """
    Render all meshes jointly with one z-buffer.

    Depth is the distance along each pixel's unit camera ray to the first
    surface; pixels without a hit carry +inf depth and the background color.
    """
    if isinstance(meshes, PosedMesh):
        meshes = [meshes]
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    tri_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), (H, W, 3)).copy()
    mesh_index = np.full((H, W), -1, dtype=np.int64)
    if not meshes:
        hit = np.zeros((H, W), bool)
        return RasterResult(depth, color, hit.copy(), hit, tri_id, mesh_index, bary)

    vertices, triangles, albedo, normals, owner = [], [], [], [], []
    offset = 0
    for i, mesh in enumerate(meshes):
        vertices.append(mesh.vertices)
        triangles.append(mesh.triangles + offset)
        albedo.append(mesh.albedo)
        normals.append(vertex_normals(mesh.vertices, mesh.triangles))
        owner.append(np.full(len(mesh.triangles), i, dtype=np.int64))
        offset += len(mesh.vertices)
    vertices = np.ascontiguousarray(np.concatenate(vertices), dtype=np.float64)
    triangles = np.ascontiguousarray(np.concatenate(triangles), dtype=np.int64)
    albedo = np.concatenate(albedo)
    normals = np.concatenate(normals)
    owner = np.concatenate(owner)

    boxes = _pixel_boxes(camera, vertices, triangles)
    cam_to_world = np.ascontiguousarray(camera.extrinsics.rotation.T)
    _raster_kernel(
        camera.center, cam_to_world, float(camera.fx), float(camera.fy),
        float(camera.cx), float(camera.cy), vertices, triangles, boxes, depth, tri_id, bary,
    )

    hit = tri_id >= 0
    if np.any(hit):
        corners = triangles[tri_id[hit]]  # (P, 3)
        b = bary[hit][:, :, None]
        base = np.sum(albedo[corners] * b, axis=1)
        n = np.sum(normals[corners] * b, axis=1)
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        light = np.asarray(light_direction, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = np.clip(n @ light, 0.0, None)
        shade = ambient + (1.0 - ambient) * lambert
        color[hit] = np.clip(base * shade[:, None], 0.0, 1.0)
        mesh_index[hit] = owner[tri_id[hit]]
    return RasterResult(depth, color, dilate_mask(hit), hit, tri_id, mesh_index, bary)


def project_bounds(camera: CameraModel, posed: Union[PosedMesh, Sequence[PosedMesh]]):
    """
    Image-space bounds of the mesh(es) and the dilated silhouette mask.

    Returns ((row_min, row_max, col_min, col_max), mask).
    """
    meshes = [posed] if isinstance(posed, PosedMesh) else list(posed)
    vertices = np.concatenate([m.vertices for m in meshes])
    u, v, z = camera.project(vertices)
    front = z > 1e-6
    if not np.any(front):
        raise GeometryError(f"mesh lies entirely behind camera {camera.camera_id}")
    bbox = (
        int(np.clip(np.floor(v[front].min()), 0, camera.height - 1)),
        int(np.clip(np.ceil(v[front].max()), 0, camera.height - 1)),
        int(np.clip(np.floor(u[front].min()), 0, camera.width - 1)),
        int(np.clip(np.ceil(u[front].max()), 0, camera.width - 1)),
    )
    return bbox, rasterize(camera, meshes).mask
