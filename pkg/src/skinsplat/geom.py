"""Rigid-body, quaternion, axis-angle and spherical-harmonics math.

Everything here works on plain numpy arrays. Batched functions accept a
leading batch dimension; single-item wrappers exist where a scalar API reads
better in calling code. Quaternions are stored scalar-first ``(w, x, y, z)``
and follow the Hamilton product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3


class UnsupportedDegreeError(ValueError):
    pass


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# quaternions


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64)
        return cls(*(float(v) for v in q))

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalize(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero-norm quaternion")
        return Quaternion.from_array(self.as_array() / n)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def to_rotation(self) -> np.ndarray:
        return quat_to_rotation(self.as_array())


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading dimensions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _unit_quat(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("zero-norm quaternion has no rotation")
    return q / n, n


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (batch of) quaternion(s); input is normalized first."""
    u, _ = _unit_quat(q)
    w, x, y, z = np.moveaxis(u, -1, 0)
    r = np.empty(u.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def quat_to_rotation_vjp(q, grad_r) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back to the raw quaternion."""
    u, n = _unit_quat(q)
    g = np.asarray(grad_r, dtype=np.float64)
    w, x, y, z = np.moveaxis(u, -1, 0)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2.0 * (
        y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22
    )
    dy = 2.0 * (
        -2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22
    )
    dz = 2.0 * (
        -2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21
    )
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # through the normalization q / |q|
    du = du - u * np.sum(du * u, axis=-1, keepdims=True)
    return du / n


def rotation_to_quat(r) -> np.ndarray:
    """Quaternion (w >= 0) of a rotation matrix, batched."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return out.reshape(r.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# axis-angle


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    k = np.zeros(v.shape[:-1] + (3, 3))
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


def axis_angle_to_rotation(w) -> np.ndarray:
    """Rodrigues' formula, batched, stable near zero angle."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    k = skew(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axis_angle_to_rotation_jacobian(w) -> np.ndarray:
    """dR/dw_i stacked on the last axis: shape (..., 3, 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    r = axis_angle_to_rotation(w)
    theta2 = np.sum(w * w, axis=-1)
    basis = np.eye(3)
    out = np.empty(w.shape[:-1] + (3, 3, 3))
    kw = skew(w)
    for i in range(3):
        ei = np.broadcast_to(basis[i], w.shape)
        kei = skew(ei)
        small_form = kei + 0.5 * (kei @ kw + kw @ kei)
        # Gallego & Yezzi closed form for the derivative of the exponential map.
        v = np.cross(w, ((np.eye(3) - r) @ ei[..., None])[..., 0])
        safe = np.where(theta2 < 1e-12, 1.0, theta2)
        big_form = ((w[..., i, None, None] * kw + skew(v)) / safe[..., None, None]) @ r
        out[..., i] = np.where((theta2 < 1e-12)[..., None, None], small_form, big_form)
    return out


def rotation_to_axis_angle(r) -> np.ndarray:
    q = rotation_to_quat(r)
    return quat_to_axis_angle(q)


def quat_to_axis_angle(q) -> np.ndarray:
    u, _ = _unit_quat(q)
    u = np.where(u[..., :1] < 0, -u, u)
    s = np.linalg.norm(u[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(s, u[..., 0])
    scale = np.where(s < 1e-12, 2.0, angle / np.where(s < 1e-12, 1.0, s))
    return u[..., 1:] * scale[..., None]


def axis_angle_to_quat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half)[..., None], w * k[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# rigid and affine transforms


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @classmethod
    def from_axis_angle(cls, w, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_to_rotation(w), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation


@dataclass
class Affine:
    """3x4 affine map; the linear part need not be a rotation."""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def from_matrix(cls, m) -> "Affine":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m


def affine_apply(a: Affine, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ a.linear.T + a.translation


def invert_rigid_matrices(m: np.ndarray) -> np.ndarray:
    """Inverse of a stack of 4x4 rigid matrices."""
    out = np.zeros_like(m)
    rt = np.swapaxes(m[..., :3, :3], -1, -2)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -(rt @ m[..., :3, 3, None])[..., 0]
    out[..., 3, 3] = 1.0
    return out


# ---------------------------------------------------------------------------
# covariance and polar decomposition


def covariance_from_rotation_scale(r, s) -> np.ndarray:
    """``R diag(s^2) R^T``, batched."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def polar_rotation(a: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Orthogonal polar factor ``U V^T`` of a stack of 3x3 matrices.

    Returns the factor and the SVD pieces needed by :func:`polar_rotation_vjp`.
    """
    u, s, vt = np.linalg.svd(a)
    return u @ vt, (u, s, vt)


def polar_rotation_vjp(svd: tuple, grad_r: np.ndarray) -> np.ndarray:
    """Gradient of ``polar_rotation`` w.r.t. its input matrix.

    With ``A = R P`` and ``P = V S V^T`` the differential is ``dR = R X`` where
    the skew ``X`` solves ``P X + X P = R^T dA - dA^T R``.
    """
    u, s, vt = svd
    r = u @ vt
    v = np.swapaxes(vt, -1, -2)
    m = np.swapaxes(r, -1, -2) @ grad_r
    denom = s[..., :, None] + s[..., None, :]
    denom = np.where(denom < 1e-12, 1e-12, denom)
    z = (vt @ m @ v) / denom
    w = v @ z @ vt
    return r @ (w - np.swapaxes(w, -1, -2))


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_eval(degree: int, dirs) -> np.ndarray:
    """Real SH basis values for unit direction(s); shape (..., (degree+1)^2)."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(f"SH degree {degree} not supported (0..{MAX_SH_DEGREE})")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_eval_grad(degree: int, dirs) -> np.ndarray:
    """Partial derivatives of the SH polynomials: shape (..., K, 3)."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(f"SH degree {degree} not supported (0..{MAX_SH_DEGREE})")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full(x.shape, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        c = SH_C2
        rows += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (c[2] * -2 * x * y, c[2] * (4 * zz - xx - 3 * yy), c[2] * 8 * y * z),
            (c[3] * -6 * x * z, c[3] * -6 * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), c[4] * -2 * x * y, c[4] * 8 * x * z),
            (c[5] * 2 * x * z, c[5] * -2 * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), c[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
