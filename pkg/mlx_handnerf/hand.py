"""
Procedural 16-joint hand: skeleton, capsule skin, forward kinematics, linear
blend skinning, nearest-facet blend-weight queries and the left/right mirror.

Joint layout: 0 is the palm root, followed by index (1-3), middle (4-6),
ring (7-9), pinky (10-12) and thumb (13-15), each finger ordered base to tip.
The right hand is the reference side; the left hand is its mirror image under
``x -> (-x1, x2, x3)``.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from .common import config as handnerf_config
from .common.errors import GeometryError
from .geometry import AABB, RigidTransform, axis_angle_to_matrix, blend_transforms

N_JOINTS = 16
FINGERS = ("index", "middle", "ring", "pinky", "thumb")
SIDES = ("left", "right")
MIRROR = np.diag([-1.0, 1.0, 1.0])

# base offset from the root, phalanx lengths, capsule radius at the base
_FINGER_LAYOUT = {
    "index": ((0.26, 0.78, 0.0), (0.40, 0.25, 0.21), 0.075),
    "middle": ((0.085, 0.82, 0.0), (0.44, 0.28, 0.22), 0.078),
    "ring": ((-0.09, 0.78, 0.0), (0.41, 0.26, 0.21), 0.074),
    "pinky": ((-0.26, 0.70, 0.0), (0.32, 0.20, 0.18), 0.066),
    "thumb": ((0.25, 0.20, -0.06), (0.34, 0.28, 0.25), 0.085),
}
_THUMB_DIRECTION = np.array([0.75, 0.62, -0.2])
_PALM_RADIUS = 0.13
_TAPER = (1.0, 0.88, 0.78)
# canonical abduction (about the palm normal) per finger base; fingers slightly spread
_CANONICAL_SPREAD = {"index": -0.09, "middle": -0.02, "ring": 0.05, "pinky": 0.12, "thumb": -0.12}
_FINGER_TINTS = {
    "index": (1.0, 0.86, 0.82),
    "middle": (0.9, 1.0, 0.86),
    "ring": (0.86, 0.9, 1.0),
    "pinky": (1.0, 0.95, 0.75),
    "thumb": (0.95, 0.8, 0.95),
    "palm": (1.0, 1.0, 1.0),
}
_SKIN = np.array([0.86, 0.64, 0.52])


def finger_joints(finger: str) -> Tuple[int, int, int]:
    base = 1 + 3 * FINGERS.index(finger)
    return base, base + 1, base + 2


@dataclass(frozen=True)
class Pose:
    """Per-joint local axis-angle rotations plus a global root transform."""

    joint_rotations: np.ndarray = field(default_factory=lambda: np.zeros((N_JOINTS, 3)))
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.joint_rotations, dtype=np.float64).reshape(N_JOINTS, 3)
        trans = np.array(self.root_translation, dtype=np.float64).reshape(3)
        root = np.array(self.root_rotation, dtype=np.float64).reshape(3)
        for arr in (rot, trans, root):
            if not np.all(np.isfinite(arr)):
                raise GeometryError("pose has non-finite entries")
        if np.linalg.norm(rot, axis=-1).max() >= 2 * np.pi or np.linalg.norm(root) >= 2 * np.pi:
            raise GeometryError("axis-angle magnitudes must stay below 2π")
        object.__setattr__(self, "joint_rotations", rot)
        object.__setattr__(self, "root_translation", trans)
        object.__setattr__(self, "root_rotation", root)

    def flattened(self) -> np.ndarray:
        return self.joint_rotations.reshape(-1)

    def with_joint(self, joint: int, rotvec: Sequence[float]) -> "Pose":
        rot = self.joint_rotations.copy()
        rot[joint] = rotvec
        return replace(self, joint_rotations=rot)

    def to_dict(self) -> Dict[str, list]:
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_translation": self.root_translation.tolist(),
            "root_rotation": self.root_rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "Pose":
        return cls(
            np.asarray(data["joint_rotations"]),
            np.asarray(data["root_translation"]),
            np.asarray(data["root_rotation"]),
        )


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray  # (16,), -1 for the root
    offsets: np.ndarray  # (16, 3) rest offset from the parent joint
    tip_offsets: np.ndarray  # (16, 3) local bone end for leaf joints, zero otherwise
    flex_axes: np.ndarray  # (16, 3) local flexion axis per joint
    canonical_pose: Pose
    side: str = "right"

    def __post_init__(self):
        parents = np.asarray(self.parents)
        if parents.shape != (N_JOINTS,) or parents[0] != -1:
            raise GeometryError("skeleton needs 16 joints rooted at joint 0")
        if np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, N_JOINTS)):
            raise GeometryError("parents must precede their children")
        if not np.all(np.isfinite(self.offsets)):
            raise GeometryError("skeleton offsets must be finite")

    def children(self, joint: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.parents == joint)]


@dataclass
class SkinnedHandMesh:
    vertices: np.ndarray  # (V, 3) canonical rest positions
    triangles: np.ndarray  # (T, 3)
    weights: np.ndarray  # (V, 16)
    albedo: np.ndarray  # (V, 3)
    side: str = "right"

    def validate(self) -> "SkinnedHandMesh":
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise GeometryError("empty mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index out of range")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(1) - 1).max() > 1e-6:
            raise GeometryError("vertex blend weights must be a partition of unity")
        return self


@dataclass
class HandAsset:
    skeleton: Skeleton
    mesh: SkinnedHandMesh

    @property
    def side(self) -> str:
        return self.mesh.side


def mirror_map_point(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x[..., 0] = -x[..., 0]
    return x


def _mirror_rotvec(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a[..., 1:] = -a[..., 1:]
    return a


def mirror_map_pose(pose: Pose) -> Pose:
    """Conjugate every rotation by diag(-1, 1, 1); mirror the root translation."""
    return Pose(
        _mirror_rotvec(pose.joint_rotations),
        mirror_map_point(pose.root_translation),
        _mirror_rotvec(pose.root_rotation),
    )


def build_skeleton(seed: int = 0, side: str = "right") -> Skeleton:
    """Right-hand skeleton with seed-jittered bone lengths, mirrored for ``left``."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    rng = np.random.default_rng(seed)
    parents = np.full(N_JOINTS, -1, dtype=np.int64)
    offsets = np.zeros((N_JOINTS, 3))
    tips = np.zeros((N_JOINTS, 3))
    flex = np.zeros((N_JOINTS, 3))
    canonical = np.zeros((N_JOINTS, 3))
    palm_normal = np.array([0.0, 0.0, -1.0])

    for finger in FINGERS:
        base, lengths, _ = _FINGER_LAYOUT[finger]
        jitter = 1.0 + rng.uniform(-0.03, 0.03, size=3)
        lengths = np.asarray(lengths) * jitter
        direction = (
            _THUMB_DIRECTION / np.linalg.norm(_THUMB_DIRECTION)
            if finger == "thumb"
            else np.array([0.0, 1.0, 0.0])
        )
        axis = np.cross(direction, palm_normal)
        axis /= np.linalg.norm(axis)
        joints = finger_joints(finger)
        for k, j in enumerate(joints):
            parents[j] = 0 if k == 0 else joints[k - 1]
            offsets[j] = np.asarray(base) if k == 0 else lengths[k - 1] * direction
            flex[j] = axis
        tips[joints[-1]] = lengths[-1] * direction
        canonical[joints[0]] = _CANONICAL_SPREAD[finger] * np.array([0.0, 0.0, 1.0])
        canonical[joints[1]] = 0.08 * axis

    skeleton = Skeleton(
        parents=parents,
        offsets=offsets,
        tip_offsets=tips,
        flex_axes=flex,
        canonical_pose=Pose(canonical),
        side="right",
    )
    return mirror_skeleton(skeleton) if side == "left" else skeleton


def mirror_skeleton(skeleton: Skeleton) -> Skeleton:
    return Skeleton(
        parents=skeleton.parents.copy(),
        offsets=mirror_map_point(skeleton.offsets),
        tip_offsets=mirror_map_point(skeleton.tip_offsets),
        flex_axes=_mirror_rotvec(skeleton.flex_axes),
        canonical_pose=mirror_map_pose(skeleton.canonical_pose),
        side="left" if skeleton.side == "right" else "right",
    )


def forward_kinematics_matrices(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """(16, 4, 4) joint-local to world transforms, composed root to leaf."""
    local_rot = axis_angle_to_matrix(pose.joint_rotations)
    world = np.zeros((N_JOINTS, 4, 4))
    for j in range(N_JOINTS):
        local = np.eye(4)
        local[:3, :3] = local_rot[j]
        local[:3, 3] = skeleton.offsets[j]
        p = skeleton.parents[j]
        if p < 0:
            root = np.eye(4)
            root[:3, :3] = axis_angle_to_matrix(pose.root_rotation)
            root[:3, 3] = pose.root_translation
            world[j] = root @ local
        else:
            world[j] = world[p] @ local
    return world


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> List[RigidTransform]:
    return [RigidTransform.from_matrix(m) for m in forward_kinematics_matrices(skeleton, pose)]


def joint_positions(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    return forward_kinematics_matrices(skeleton, pose)[:, :3, 3]


def _invert_rigid(m: np.ndarray) -> np.ndarray:
    inv = np.zeros_like(m)
    rt = np.swapaxes(m[..., :3, :3], -1, -2)
    inv[..., :3, :3] = rt
    inv[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, m[..., :3, 3])
    inv[..., 3, 3] = 1.0
    return inv


def canonical_to_posed_matrices(
    skeleton: Skeleton, pose: Pose, canonical_pose: Optional[Pose] = None
) -> np.ndarray:
    """(16, 4, 4) per-joint ``G_j(p) · G_j(p̄)^-1``."""
    canonical_pose = canonical_pose or skeleton.canonical_pose
    g = forward_kinematics_matrices(skeleton, pose)
    g_bar = forward_kinematics_matrices(skeleton, canonical_pose)
    return g @ _invert_rigid(g_bar)


def observation_to_canonical_matrices(
    skeleton: Skeleton, pose: Pose, canonical_pose: Optional[Pose] = None
) -> np.ndarray:
    """(16, 3, 4) per-joint ``T_j = G_j(p̄) · G_j(p)^-1``."""
    canonical_pose = canonical_pose or skeleton.canonical_pose
    g = forward_kinematics_matrices(skeleton, pose)
    g_bar = forward_kinematics_matrices(skeleton, canonical_pose)
    return (g_bar @ _invert_rigid(g))[:, :3, :]


def observation_to_canonical_joint_transforms(
    skeleton: Skeleton, pose: Pose, canonical_pose: Optional[Pose] = None
) -> List[RigidTransform]:
    mats = observation_to_canonical_matrices(skeleton, pose, canonical_pose)
    return [RigidTransform(m[:, :3], m[:, 3]) for m in mats]


def skin_vertices(mesh: SkinnedHandMesh, skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Linear blend skinning of the canonical rest vertices into ``pose``."""
    transforms = canonical_to_posed_matrices(skeleton, pose)[:, :3, :]
    blended = blend_transforms(mesh.weights, transforms)
    return np.einsum("vij,vj->vi", blended[..., :3], mesh.vertices) + blended[..., 3]


# --- procedural skin -------------------------------------------------------


def _perpendicular_frame(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = np.cross(u, helper)
    v /= np.linalg.norm(v)
    return v, np.cross(u, v)


def capsule_mesh(
    a: np.ndarray,
    b: np.ndarray,
    radius_a: float,
    radius_b: float,
    segments: int = 12,
    cap_rings: int = 3,
    body_rings: int = 4,
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed tapered capsule around segment ``a -> b`` with outward winding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    v, w = _perpendicular_frame(u)

    profile = []  # (axial position, ring radius)
    for k in range(1, cap_rings + 1):
        theta = 0.5 * np.pi * k / cap_rings
        profile.append((-radius_a * np.cos(theta), radius_a * np.sin(theta)))
    for m in range(1, body_rings + 1):
        s = m / (body_rings + 1)
        profile.append((length * s, (1 - s) * radius_a + s * radius_b))
    for k in range(cap_rings, 0, -1):
        theta = 0.5 * np.pi * k / cap_rings
        profile.append((length + radius_b * np.cos(theta), radius_b * np.sin(theta)))

    alpha = 2 * np.pi * np.arange(segments) / segments
    radial = np.cos(alpha)[:, None] * v + np.sin(alpha)[:, None] * w
    rings = [a + s * u + rho * radial for s, rho in profile]
    vertices = np.concatenate(
        [(a - radius_a * u)[None], *rings, (b + radius_b * u)[None]]
    )

    tris = []
    n_rings = len(profile)
    ring_start = lambda i: 1 + i * segments  # noqa: E731
    for k in range(segments):
        k1 = (k + 1) % segments
        tris.append((0, ring_start(0) + k1, ring_start(0) + k))
    for i in range(n_rings - 1):
        r0, r1 = ring_start(i), ring_start(i + 1)
        for k in range(segments):
            k1 = (k + 1) % segments
            tris.append((r0 + k, r1 + k1, r1 + k))
            tris.append((r0 + k, r0 + k1, r1 + k1))
    pole = len(vertices) - 1
    last = ring_start(n_rings - 1)
    for k in range(segments):
        k1 = (k + 1) % segments
        tris.append((pole, last + k, last + k1))
    return vertices, np.asarray(tris, dtype=np.int64)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def bone_segments(skeleton: Skeleton, pose: Pose) -> Dict[int, List[Tuple[np.ndarray, np.ndarray]]]:
    """World-space segments owned by each joint's bone."""
    mats = forward_kinematics_matrices(skeleton, pose)
    pos = mats[:, :3, 3]
    segments: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {}
    for j in range(N_JOINTS):
        children = skeleton.children(j)
        if children:
            segments[j] = [(pos[j], pos[c]) for c in children]
        else:
            tip = mats[j, :3, :3] @ skeleton.tip_offsets[j] + pos[j]
            segments[j] = [(pos[j], tip)]
    return segments


def inverse_distance_weights(
    points: np.ndarray,
    segments: Dict[int, List[Tuple[np.ndarray, np.ndarray]]],
    power: float = 6.0,
) -> np.ndarray:
    """Partition-of-unity weights from inverse distance to the two nearest bones."""
    dist = np.full((len(points), N_JOINTS), np.inf)
    for j, segs in segments.items():
        for a, b in segs:
            dist[:, j] = np.minimum(dist[:, j], point_segment_distance(points, a, b))
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(len(points))
    d1 = dist[rows, order[:, 0]]
    d2 = dist[rows, order[:, 1]]
    ratio = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1.0), 1.0)
    w1 = 1.0 / (1.0 + ratio**power)
    weights = np.zeros((len(points), N_JOINTS))
    weights[rows, order[:, 0]] = w1
    weights[rows, order[:, 1]] = 1.0 - w1
    return weights


def _procedural_albedo(
    vertices: np.ndarray, owner: List[str], axial: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    tints = np.array([_FINGER_TINTS[name] for name in owner])
    bands = np.where(np.floor(axial / 0.09) % 2 == 0, 1.0, 0.82)
    albedo = _SKIN * tints * bands[:, None]
    albedo = albedo + rng.uniform(-0.06, 0.06, size=albedo.shape)
    return np.clip(albedo, 0.0, 1.0)


def generate_procedural_hand(side: str = "right", seed: int = 0) -> Tuple[Skeleton, SkinnedHandMesh]:
    """
    Build a capsule-skinned hand in its canonical pose.

    The left hand is constructed as the exact mirror image of the right hand
    with the same seed (mirrored vertices, flipped winding, shared weights).
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    skeleton = build_skeleton(seed, "right")
    rng = np.random.default_rng(seed + 7919)
    segments = bone_segments(skeleton, skeleton.canonical_pose)

    chunks, tris, owner, axial = [], [], [], []
    offset = 0
    for j in range(N_JOINTS):
        if j == 0:
            finger, radii = "palm", (_PALM_RADIUS, _PALM_RADIUS * 0.85)
        else:
            finger = FINGERS[(j - 1) // 3]
            step = (j - 1) % 3
            base_r = _FINGER_LAYOUT[finger][2]
            r_end = base_r * (_TAPER[step + 1] if step < 2 else 0.72)
            radii = (base_r * _TAPER[step], r_end)
        for a, b in segments[j]:
            verts, faces = capsule_mesh(a, b, *radii)
            chunks.append(verts)
            tris.append(faces + offset)
            offset += len(verts)
            owner.extend([finger] * len(verts))
            axial.append((verts - a) @ ((b - a) / np.linalg.norm(b - a)))

    vertices = np.concatenate(chunks)
    triangles = np.concatenate(tris)
    weights = inverse_distance_weights(vertices, segments)
    albedo = _procedural_albedo(vertices, owner, np.concatenate(axial), rng)
    mesh = SkinnedHandMesh(vertices, triangles, weights, albedo, "right").validate()
    logger.debug(
        f"Procedural hand seed={seed}: {len(vertices)} vertices, {len(triangles)} triangles"
    )
    if side == "left":
        return mirror_skeleton(skeleton), mirror_mesh(mesh)
    return skeleton, mesh


def mirror_mesh(mesh: SkinnedHandMesh) -> SkinnedHandMesh:
    return SkinnedHandMesh(
        vertices=mirror_map_point(mesh.vertices),
        triangles=mesh.triangles[:, [0, 2, 1]].copy(),
        weights=mesh.weights.copy(),
        albedo=mesh.albedo.copy(),
        side="left" if mesh.side == "right" else "right",
    )


def load_hand(side: str, seed: int) -> HandAsset:
    skeleton, mesh = generate_procedural_hand(side, seed)
    return HandAsset(skeleton, mesh)


# --- nearest facet ---------------------------------------------------------


@numba.jit(nopython=True, inline="always")
def _closest_barycentric(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.jit(nopython=True, inline="always")
def _triangle_query(points, vertices, triangles, i, t):
    a = triangles[t, 0]
    b = triangles[t, 1]
    c = triangles[t, 2]
    l0, l1, l2 = _closest_barycentric(
        points[i, 0], points[i, 1], points[i, 2],
        vertices[a, 0], vertices[a, 1], vertices[a, 2],
        vertices[b, 0], vertices[b, 1], vertices[b, 2],
        vertices[c, 0], vertices[c, 1], vertices[c, 2],
    )
    qx = l0 * vertices[a, 0] + l1 * vertices[b, 0] + l2 * vertices[c, 0]
    qy = l0 * vertices[a, 1] + l1 * vertices[b, 1] + l2 * vertices[c, 1]
    qz = l0 * vertices[a, 2] + l1 * vertices[b, 2] + l2 * vertices[c, 2]
    dx = points[i, 0] - qx
    dy = points[i, 1] - qy
    dz = points[i, 2] - qz
    return dx * dx + dy * dy + dz * dz, l0, l1, l2


@numba.jit(nopython=True, parallel=True)
def nearest_facet_brute(points, vertices, triangles, out_facet, out_bary, out_d2):
    for i in numba.prange(points.shape[0]):
        best = np.inf
        best_t = -1
        b0 = b1 = b2 = 0.0
        for t in range(triangles.shape[0]):
            d2, l0, l1, l2 = _triangle_query(points, vertices, triangles, i, t)
            if d2 < best:
                best, best_t, b0, b1, b2 = d2, t, l0, l1, l2
        out_facet[i] = best_t
        out_d2[i] = best
        out_bary[i, 0] = b0
        out_bary[i, 1] = b1
        out_bary[i, 2] = b2


@numba.jit(nopython=True, parallel=True)
def nearest_facet_candidates(points, vertices, triangles, candidates, out_facet, out_bary, out_d2):
    for i in numba.prange(points.shape[0]):
        best = np.inf
        best_t = triangles.shape[0]
        b0 = b1 = b2 = 0.0
        for k in range(candidates.shape[1]):
            t = candidates[i, k]
            if t < 0:
                continue
            d2, l0, l1, l2 = _triangle_query(points, vertices, triangles, i, t)
            if d2 < best or (d2 == best and t < best_t):
                best, best_t, b0, b1, b2 = d2, t, l0, l1, l2
        out_facet[i] = best_t
        out_d2[i] = best
        out_bary[i, 0] = b0
        out_bary[i, 1] = b1
        out_bary[i, 2] = b2


class FacetLocator:
    """
    Exact nearest-triangle search over a fixed posed mesh.

    With ``accelerate`` the candidate set comes from the ``k`` nearest vertices
    (kd-tree). A candidate answer at distance ``d`` is certified when
    ``d + longest_edge`` is below the k-th vertex distance; every other query
    falls back to the exhaustive scan, so answers equal the brute-force ones.
    """

    def __init__(
        self,
        vertices: np.ndarray,
        triangles: np.ndarray,
        k: int = 24,
        accelerate: bool = True,
        workers: int = -1,
    ):
        if len(vertices) == 0 or len(triangles) == 0:
            raise GeometryError("empty mesh")
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.accelerate = accelerate
        self.workers = workers
        self.k = min(k, len(self.vertices))
        if accelerate:
            self._tree = cKDTree(self.vertices)
            self._incidence = self._vertex_incidence()
            edges = self.vertices[self.triangles] - self.vertices[np.roll(self.triangles, 1, axis=1)]
            self._max_edge = float(np.linalg.norm(edges, axis=-1).max())

    def _vertex_incidence(self) -> np.ndarray:
        n = len(self.vertices)
        counts = np.bincount(self.triangles.reshape(-1), minlength=n)
        table = np.full((n, int(counts.max())), -1, dtype=np.int64)
        fill = np.zeros(n, dtype=np.int64)
        for t, tri in enumerate(self.triangles):
            for v in tri:
                table[v, fill[v]] = t
                fill[v] += 1
        return table

    def brute_force(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        facet = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 3))
        d2 = np.empty(len(points))
        if len(points):
            nearest_facet_brute(points, self.vertices, self.triangles, facet, bary, d2)
        return facet, bary, np.sqrt(d2)

    def query(self, points: np.ndarray):
        """Return (facet ids, barycentric coordinates, distances) for (P, 3) points."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.accelerate or len(points) == 0:
            return self.brute_force(points)
        dist_k, idx = self._tree.query(points, k=self.k, workers=self.workers)
        dist_k = dist_k.reshape(len(points), -1)
        idx = idx.reshape(len(points), -1)
        candidates = np.ascontiguousarray(self._incidence[idx].reshape(len(points), -1))
        facet = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 3))
        d2 = np.empty(len(points))
        nearest_facet_candidates(points, self.vertices, self.triangles, candidates, facet, bary, d2)
        distance = np.sqrt(d2)
        uncertified = ~(distance + self._max_edge < dist_k[:, -1])
        if np.any(uncertified):
            f, b, d = self.brute_force(points[uncertified])
            facet[uncertified], bary[uncertified], distance[uncertified] = f, b, d
        return facet, bary, distance


@dataclass
class PosedMesh:
    """A hand mesh skinned into one pose, with a cached facet locator."""

    vertices: np.ndarray
    triangles: np.ndarray
    weights: np.ndarray
    albedo: np.ndarray
    side: str = "right"

    @classmethod
    def from_asset(cls, asset: HandAsset, pose: Pose) -> "PosedMesh":
        mesh = asset.mesh
        return cls(
            skin_vertices(mesh, asset.skeleton, pose),
            mesh.triangles,
            mesh.weights,
            mesh.albedo,
            mesh.side,
        )

    @cached_property
    def locator(self) -> FacetLocator:
        return FacetLocator(
            self.vertices, self.triangles, workers=handnerf_config.KDTREE_WORKERS
        )

    def translated(self, t: np.ndarray) -> "PosedMesh":
        return replace(self, vertices=self.vertices + np.asarray(t))


def query_blend_weights(posed: PosedMesh, x_ob: np.ndarray):
    """
    Blend weights at the closest surface point of the nearest triangle.

    Returns (weights (..., 16), facet ids (...), distances (...)).
    """
    x_ob = np.asarray(x_ob, dtype=np.float64)
    single = x_ob.ndim == 1
    facet, bary, distance = posed.locator.query(x_ob.reshape(-1, 3))
    corner_weights = posed.weights[posed.triangles[facet]]  # (P, 3, 16)
    weights = np.einsum("pk,pkj->pj", bary, corner_weights)
    if single:
        return weights[0], int(facet[0]), float(distance[0])
    return weights, facet, distance


def scene_bounds(vertices: np.ndarray, margin_fraction: float = 0.05) -> AABB:
    """Vertex AABB inflated on every side by a fraction of its diagonal."""
    vertices = np.asarray(getattr(vertices, "vertices", vertices))
    if len(vertices) == 0:
        raise GeometryError("empty mesh")
    box = AABB.of_points(vertices)
    return box.inflate(margin_fraction * box.diagonal)
