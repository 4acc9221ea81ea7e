"""Kinematic template: joint tree, forward kinematics, prior skinning field.

The template is point-sampled only. Each surface sample carries a prior
skinning weight vector; off-surface weights come from a kernel average over
the nearest samples (:meth:`KinematicTemplate.prior_skinning`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import (
    RigidTransform,
    axis_angle_to_quat,
    axis_angle_to_rotation,
    axis_angle_to_rotation_jacobian,
    invert_rigid_matrices,
    quat_to_axis_angle,
    quat_to_rotation,
)

PRIOR_NEIGHBORS = 32


class InvalidStateError(RuntimeError):
    pass


@dataclass
class Capsule:
    joint: int
    start: np.ndarray
    end: np.ndarray
    radius: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def area(self) -> float:
        return 2.0 * np.pi * self.radius * self.length + 4.0 * np.pi * self.radius**2

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance from points to the capsule surface."""
        seg = self.end - self.start
        denom = max(float(seg @ seg), 1e-12)
        t = np.clip((points - self.start) @ seg / denom, 0.0, 1.0)
        closest = self.start + t[:, None] * seg
        return np.linalg.norm(points - closest, axis=1) - self.radius

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        axis = self.end - self.start
        length = np.linalg.norm(axis)
        axis_dir = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis_dir[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u = np.cross(axis_dir, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis_dir, u)
        cyl_area = 2.0 * np.pi * self.radius * length
        p_cyl = cyl_area / self.area
        pick = rng.random(n)
        phi = rng.random(n) * 2.0 * np.pi
        t = rng.random(n)
        sphere = rng.normal(size=(n, 3))
        sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
        ring = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
        on_cyl = self.start + t[:, None] * axis + self.radius * ring
        along = sphere @ axis_dir
        cap_center = np.where((along >= 0)[:, None], self.end, self.start)
        on_cap = cap_center + self.radius * sphere
        return np.where((pick < p_cyl)[:, None], on_cyl, on_cap)


@dataclass
class KinematicTemplate:
    parents: np.ndarray
    rest_transforms: np.ndarray  # (n_b, 4, 4) global joint frames in canonical space
    sample_positions: np.ndarray  # (S, 3)
    sample_weights: np.ndarray  # (S, n_b)
    skinning_sigma: float
    joint_names: list[str] = field(default_factory=list)
    capsules: list[Capsule] = field(default_factory=list)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_transforms = np.asarray(self.rest_transforms, dtype=np.float64)
        self.sample_positions = np.asarray(self.sample_positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.parents)
        self.sample_weights = np.asarray(self.sample_weights, dtype=np.float64).reshape(len(self.sample_positions), n)
        if self.rest_transforms.shape != (n, 4, 4):
            raise ValueError("rest_transforms must have shape (n_joints, 4, 4)")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1:
            raise ValueError(f"template needs exactly one root joint, found {len(roots)}")
        self._order = _topological_order(self.parents)
        if np.any(self.sample_weights < 0) or np.any(np.abs(self.sample_weights.sum(1) - 1.0) > 1e-6):
            raise ValueError("prior sample weights must be nonnegative and sum to 1")
        if not self.skinning_sigma > 0:
            raise ValueError("skinning_sigma must be positive")
        self._tree = None
        rest_inv = invert_rigid_matrices(self.rest_transforms)
        local = np.empty_like(self.rest_transforms)
        for k in range(n):
            p = self.parents[k]
            local[k] = self.rest_transforms[k] if p < 0 else rest_inv[p] @ self.rest_transforms[k]
        self._rest_inv = rest_inv
        self._local_rest = local

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parents < 0)[0])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.sample_positions if len(self.sample_positions) else self.rest_transforms[:, :3, 3]
        return pts.min(0), pts.max(0)

    def extent(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    # -- forward kinematics -------------------------------------------------

    def global_transforms(self, rotations: np.ndarray, root_translation) -> np.ndarray:
        """Posed global joint frames G_k for local joint rotations (n_b, 3, 3)."""
        rot4 = _rot4(rotations)
        g = np.empty((self.joint_count, 4, 4))
        t = np.eye(4)
        t[:3, 3] = root_translation
        for k in self._order:
            p = self.parents[k]
            base = t @ self._local_rest[k] if p < 0 else g[p] @ self._local_rest[k]
            g[k] = base @ rot4[k]
        return g

    def bones_from_rotations(self, rotations: np.ndarray, root_translation) -> np.ndarray:
        return self.global_transforms(rotations, root_translation) @ self._rest_inv

    def bones_vjp(self, rotations: np.ndarray, root_translation, grad_bones: np.ndarray):
        """Gradient of a scalar through :meth:`bones_from_rotations`.

        ``grad_bones`` has shape (n_b, 3, 4) or (n_b, 4, 4). Returns the gradient
        w.r.t. the local rotation matrices and the root translation.
        """
        g = self.global_transforms(rotations, root_translation)
        rot4 = _rot4(rotations)
        dg = np.zeros((self.joint_count, 4, 4))
        dg[:, : grad_bones.shape[1], :] = grad_bones
        dg = dg @ np.swapaxes(self._rest_inv, -1, -2)
        drot = np.zeros((self.joint_count, 3, 3))
        dt = np.zeros(3)
        t = np.eye(4)
        t[:3, 3] = root_translation
        for k in self._order[::-1]:
            p = self.parents[k]
            base = t @ self._local_rest[k] if p < 0 else g[p] @ self._local_rest[k]
            drot[k] = (base.T @ dg[k])[:3, :3]
            dbase = dg[k] @ rot4[k].T
            if p < 0:
                dt += dbase[:3, 3]
            else:
                dg[p] += dbase @ self._local_rest[k].T
        return drot, dt

    # -- prior skinning -----------------------------------------------------

    def _kdtree(self) -> cKDTree:
        if self._tree is None:
            if len(self.sample_positions) == 0:
                raise InvalidStateError("template has no surface samples")
            self._tree = cKDTree(self.sample_positions)
        return self._tree

    def prior_skinning(self, points, with_grad: bool = False):
        """Diffused prior skinning weights at arbitrary canonical points.

        A Gaussian kernel (bandwidth ``skinning_sigma``) over the K nearest
        samples, shifted by the kernel value of the (K+1)-th nearest sample so
        the field stays continuous when the neighbour set changes.
        """
        tree = self._kdtree()
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        n_samples = len(self.sample_positions)
        k = min(PRIOR_NEIGHBORS, n_samples - 1)
        if k < 1:
            w = np.broadcast_to(self.sample_weights[0], (len(pts), self.joint_count)).copy()
            jac = np.zeros((len(pts), self.joint_count, 3))
            return _maybe_single(w, jac, single, with_grad)
        _, idx = tree.query(pts, k=k + 1)
        diff = pts[:, None, :] - self.sample_positions[idx]  # (n, k+1, 3)
        d2 = np.sum(diff * diff, axis=-1)
        inv2s2 = 0.5 / self.skinning_sigma**2
        a = (d2 - d2[:, :1]) * inv2s2
        e = np.exp(-a)
        raw = e[:, :k] - e[:, k:]
        total = raw.sum(1)
        degenerate = total <= 1e-300
        raw = np.where(degenerate[:, None], 1.0, raw)
        total = np.where(degenerate, float(k), total)
        sw = self.sample_weights[idx[:, :k]]  # (n, k, n_b)
        w = (raw[:, None, :] @ sw)[:, 0] / total[:, None]
        if not with_grad:
            return w[0] if single else w
        # d raw_j / dx = -2 inv2s2 (e_j (x - p_j) - e_K (x - p_K)), relative to the shift which cancels
        de = -2.0 * inv2s2 * e[:, :, None] * diff
        draw = de[:, :k] - de[:, k:]
        draw = np.where(degenerate[:, None, None], 0.0, draw)
        jac = np.swapaxes(np.swapaxes(draw, 1, 2) @ (sw - w[:, None, :]), 1, 2) / total[:, None, None]
        return _maybe_single(w, jac, single, True)


def _maybe_single(w, jac, single, with_grad):
    if single:
        w, jac = w[0], jac[0]
    return (w, jac) if with_grad else w


def _rot4(rotations: np.ndarray) -> np.ndarray:
    r = np.zeros(rotations.shape[:-2] + (4, 4))
    r[..., :3, :3] = rotations
    r[..., 3, 3] = 1.0
    return r


def _topological_order(parents: np.ndarray) -> list[int]:
    n = len(parents)
    children: list[list[int]] = [[] for _ in range(n)]
    for k, p in enumerate(parents):
        if p >= n:
            raise ValueError(f"joint {k} has out-of-range parent {p}")
        if p >= 0:
            children[p].append(k)
    order = []
    stack = [int(k) for k in np.flatnonzero(parents < 0)]
    while stack:
        k = stack.pop()
        order.append(k)
        stack.extend(reversed(children[k]))
    if len(order) != n:
        raise ValueError("joint parent array contains a cycle")
    return order


# ---------------------------------------------------------------------------
# pose


@dataclass
class Pose:
    joint_rotations: np.ndarray  # (n_b, 4) quaternions (w, x, y, z), local to parent
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        return cls(q)

    @classmethod
    def from_axis_angle(cls, axis_angle, root_translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(axis_angle_to_quat(np.asarray(axis_angle, dtype=np.float64).reshape(-1, 3)), root_translation)

    def axis_angle(self) -> np.ndarray:
        return quat_to_axis_angle(self.joint_rotations)

    def __len__(self) -> int:
        return len(self.joint_rotations)


def bone_transforms(tpl: KinematicTemplate, pose: Pose) -> np.ndarray:
    """Per-joint rigid bone transforms B_k = G_k(pose) G_k(rest)^-1, shape (n_b, 4, 4)."""
    if len(pose) != tpl.joint_count:
        raise ValueError(f"pose has {len(pose)} joints, template has {tpl.joint_count}")
    return tpl.bones_from_rotations(quat_to_rotation(pose.joint_rotations), pose.root_translation)


def bone_transforms_axis_angle(tpl: KinematicTemplate, axis_angle: np.ndarray, root_translation) -> np.ndarray:
    if axis_angle.shape != (tpl.joint_count, 3):
        raise ValueError("axis-angle pose has wrong shape")
    return tpl.bones_from_rotations(axis_angle_to_rotation(axis_angle), root_translation)


def bone_transforms_axis_angle_vjp(tpl: KinematicTemplate, axis_angle, root_translation, grad_bones):
    drot, dt = tpl.bones_vjp(axis_angle_to_rotation(axis_angle), root_translation, grad_bones)
    jac = axis_angle_to_rotation_jacobian(axis_angle)  # (n_b, 3, 3, 3)
    daa = np.einsum("kij,kijc->kc", drot, jac)
    return daa, dt


def lbs_point(x_c, weights, bones) -> np.ndarray:
    """Linear blend skinning of one point with homogeneous matrix blending."""
    if len(bones) and isinstance(bones[0], RigidTransform):
        bones = np.stack([b.matrix() for b in bones])
    bones = np.asarray(bones, dtype=np.float64)
    blend = np.einsum("k,kij->ij", np.asarray(weights, dtype=np.float64), bones[:, :3, :])
    return blend[:, :3] @ np.asarray(x_c, dtype=np.float64) + blend[:, 3]


def prior_skinning_query(tpl: KinematicTemplate, x_c) -> np.ndarray:
    return tpl.prior_skinning(x_c)


# ---------------------------------------------------------------------------
# procedural biped


@dataclass
class BipedConfig:
    pelvis_radius: float = 0.13
    torso_length: float = 0.25
    chest_radius: float = 0.14
    head_radius: float = 0.10
    neck_length: float = 0.05
    shoulder_offset: float = 0.18
    upper_arm_length: float = 0.27
    forearm_length: float = 0.25
    arm_radius: float = 0.05
    hip_offset: float = 0.09
    thigh_length: float = 0.42
    shin_length: float = 0.42
    leg_radius: float = 0.065
    sample_density: float = 2500.0  # samples per unit area
    skinning_sigma: float = 0.04
    seed: int = 0


JOINT_NAMES = [
    "pelvis",
    "spine",
    "head",
    "l_shoulder",
    "l_elbow",
    "r_shoulder",
    "r_elbow",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
]
PARENTS = [-1, 0, 1, 1, 3, 1, 5, 0, 7, 0, 9]


def biped_capsules(cfg: BipedConfig) -> tuple[np.ndarray, list[Capsule]]:
    """Joint rest positions and one capsule per joint (canonical T-pose, +y up)."""
    dims = [v for k, v in vars(cfg).items() if k not in ("seed",)]
    if any(not (d > 0) for d in dims):
        raise ValueError("all biped dimensions, density and sigma must be positive")
    t = cfg.torso_length
    chest_top = 2 * t
    neck = chest_top + cfg.neck_length
    sh_y = chest_top - 0.05
    hip_y = -0.05
    j = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, t, 0.0],
            [0.0, neck, 0.0],
            [cfg.shoulder_offset, sh_y, 0.0],
            [cfg.shoulder_offset + cfg.upper_arm_length, sh_y, 0.0],
            [-cfg.shoulder_offset, sh_y, 0.0],
            [-cfg.shoulder_offset - cfg.upper_arm_length, sh_y, 0.0],
            [cfg.hip_offset, hip_y, 0.0],
            [cfg.hip_offset, hip_y - cfg.thigh_length, 0.0],
            [-cfg.hip_offset, hip_y, 0.0],
            [-cfg.hip_offset, hip_y - cfg.thigh_length, 0.0],
        ]
    )
    fa = cfg.forearm_length
    ends = [
        j[1],
        np.array([0.0, chest_top - cfg.chest_radius * 0.5, 0.0]),
        np.array([0.0, neck + 2 * cfg.head_radius, 0.0]),
        j[4],
        j[4] + np.array([fa, 0.0, 0.0]),
        j[6],
        j[6] - np.array([fa, 0.0, 0.0]),
        j[8],
        j[8] - np.array([0.0, cfg.shin_length, 0.0]),
        j[10],
        j[10] - np.array([0.0, cfg.shin_length, 0.0]),
    ]
    starts = [
        j[0],
        j[1],
        j[2] + np.array([0.0, cfg.head_radius, 0.0]),
        j[3],
        j[4],
        j[5],
        j[6],
        j[7],
        j[8],
        j[9],
        j[10],
    ]
    radii = [
        cfg.pelvis_radius,
        cfg.chest_radius,
        cfg.head_radius,
        cfg.arm_radius,
        cfg.arm_radius * 0.9,
        cfg.arm_radius,
        cfg.arm_radius * 0.9,
        cfg.leg_radius,
        cfg.leg_radius * 0.85,
        cfg.leg_radius,
        cfg.leg_radius * 0.85,
    ]
    caps = [Capsule(k, np.asarray(s, float), np.asarray(e, float), r) for k, (s, e, r) in enumerate(zip(starts, ends, radii))]
    return j, caps


def build_synthetic_biped(cfg: BipedConfig | None = None) -> KinematicTemplate:
    """Deterministic 11-joint capsule skeleton with rigid per-capsule prior weights."""
    cfg = cfg or BipedConfig()
    joints, caps = biped_capsules(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_b = len(joints)
    pos, wts = [], []
    for cap in caps:
        n = int(round(cap.area * cfg.sample_density))
        p = cap.sample_surface(n, rng)
        w = np.zeros((n, n_b))
        w[:, cap.joint] = 1.0
        pos.append(p)
        wts.append(w)
    rest = np.tile(np.eye(4), (n_b, 1, 1))
    rest[:, :3, 3] = joints
    return KinematicTemplate(
        parents=np.array(PARENTS),
        rest_transforms=rest,
        sample_positions=np.concatenate(pos),
        sample_weights=np.concatenate(wts),
        skinning_sigma=cfg.skinning_sigma,
        joint_names=list(JOINT_NAMES),
        capsules=caps,
    )
