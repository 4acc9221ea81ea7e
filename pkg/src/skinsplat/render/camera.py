from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import RigidTransform


@dataclass
class Camera:
    """Pinhole camera; pixel (row r, col c) samples image coordinate (c, r).

    ``extrinsics`` maps world points into the camera frame (x right, y down,
    z forward).
    """

    K: np.ndarray
    extrinsics: RigidTransform = field(default_factory=RigidTransform)
    width: int = 64
    height: int = 64
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, width, height, extrinsics=None, near=0.01, far=100.0) -> "Camera":
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(k, extrinsics or RigidTransform(), int(width), int(height), near, far)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        e = self.extrinsics
        return -e.rotation.T @ e.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and unit directions (H, W, 3) through pixel samples."""
        cols, rows = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        d = np.stack([(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(cols)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.center, d @ self.extrinsics.rotation

    def scaled(self, factor: float) -> "Camera":
        k = self.K.copy()
        k[:2] *= factor
        return Camera(k, self.extrinsics, int(round(self.width * factor)), int(round(self.height * factor)), self.near, self.far)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    ``up`` is the world up direction; image y points down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return RigidTransform(rot, -rot @ eye)
