"""Canonical Gaussian mixture with learnable forward skinning and latent bones.

A model couples a :class:`~skinsplat.template.KinematicTemplate` with

* a canonical Gaussian mixture (means, rotations, log-scales, opacity logits,
  SH colour coefficients),
* a voxel grid holding an additive correction to the template's prior
  skinning weights and the skinning weights of the latent bones,
* a per-frame table of latent rigid bones.

:func:`articulate` poses the mixture; :func:`articulate_backward` is its exact
reverse-mode derivative and feeds the optimizer.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import (
    SH_C0,
    axis_angle_to_rotation,
    axis_angle_to_rotation_jacobian,
    polar_rotation,
    polar_rotation_vjp,
    quat_to_rotation,
    quat_to_rotation_vjp,
    sh_basis_count,
    sh_eval,
)
from .template import KinematicTemplate, Pose, bone_transforms_axis_angle, bone_transforms_axis_angle_vjp

SCALE_FLOOR = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# containers


@dataclass
class GaussianMixture:
    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions, unnormalized storage
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, (deg+1)^2)
    sh_degree: int = 1

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales), SCALE_FLOOR)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotation(self.rotations)

    def covariances(self) -> np.ndarray:
        m = self.rotation_matrices() * self.scales[:, None, :]
        return m @ np.swapaxes(m, -1, -2)

    def as_posed(self) -> "PosedGaussians":
        rot = self.rotation_matrices()
        return PosedGaussians(
            means=self.means.copy(),
            cov_factors=rot * self.scales[:, None, :],
            opacities=self.opacities,
            sh=self.sh.copy(),
            sh_rotations=rot,
            sh_degree=self.sh_degree,
        )


@dataclass
class PosedGaussians:
    """Articulated mixture handed to the renderer.

    ``cov_factors`` L gives the covariance ``L L^T``; ``sh_rotations`` is the
    orthonormal frame used to look up view-dependent colour.
    """

    means: np.ndarray
    cov_factors: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_rotations: np.ndarray
    sh_degree: int

    @property
    def count(self) -> int:
        return len(self.means)

    def covariances(self) -> np.ndarray:
        return self.cov_factors @ np.swapaxes(self.cov_factors, -1, -2)

    def subset(self, idx) -> "PosedGaussians":
        return PosedGaussians(
            self.means[idx],
            self.cov_factors[idx],
            self.opacities[idx],
            self.sh[idx],
            self.sh_rotations[idx],
            self.sh_degree,
        )

    @staticmethod
    def empty(sh_degree: int = 0) -> "PosedGaussians":
        k = sh_basis_count(sh_degree)
        return PosedGaussians(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3, k)), np.zeros((0, 3, 3)), sh_degree
        )


@dataclass
class PosedGradients:
    means: np.ndarray
    cov_factors: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_rotations: np.ndarray

    @staticmethod
    def zeros_like(p: PosedGaussians) -> "PosedGradients":
        return PosedGradients(
            np.zeros_like(p.means),
            np.zeros_like(p.cov_factors),
            np.zeros_like(p.opacities),
            np.zeros_like(p.sh),
            np.zeros_like(p.sh_rotations),
        )


@dataclass
class SkinningGrid:
    lower: np.ndarray
    upper: np.ndarray
    delta: np.ndarray  # (gx, gy, gz, n_b)
    latent: np.ndarray  # (gx, gy, gz, n_l)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.delta.shape[:3])

    @classmethod
    def zeros(cls, lower, upper, resolution, n_b, n_l) -> "SkinningGrid":
        res = tuple(int(r) for r in np.broadcast_to(resolution, 3))
        if min(res) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        return cls(
            np.asarray(lower, dtype=np.float64),
            np.asarray(upper, dtype=np.float64),
            np.zeros(res + (n_b,)),
            np.zeros(res + (n_l,)),
        )

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.lower[d], self.upper[d], self.resolution[d]) for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def corners(self, points: np.ndarray):
        """Trilinear stencil: flat node indices (n, 8), weights (n, 8), d weights/dx (n, 8, 3).

        Points outside the box are clamped to the boundary (zero spatial gradient there).
        """
        res = np.asarray(self.resolution)
        h = (self.upper - self.lower) / (res - 1)
        u = (points - self.lower) / h
        inside = (u > 0) & (u < res - 1)
        u = np.clip(u, 0, res - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        f = u - i0
        du = np.where(inside, 1.0 / h, 0.0)
        idx = np.empty((len(points), 8), dtype=np.int64)
        w = np.empty((len(points), 8))
        dw = np.empty((len(points), 8, 3))
        c = 0
        for a in (0, 1):
            wa = f[:, 0] if a else 1 - f[:, 0]
            sa = 1.0 if a else -1.0
            for b in (0, 1):
                wb = f[:, 1] if b else 1 - f[:, 1]
                sb = 1.0 if b else -1.0
                for g in (0, 1):
                    wg = f[:, 2] if g else 1 - f[:, 2]
                    sg = 1.0 if g else -1.0
                    idx[:, c] = ((i0[:, 0] + a) * res[1] + (i0[:, 1] + b)) * res[2] + (i0[:, 2] + g)
                    w[:, c] = wa * wb * wg
                    dw[:, c, 0] = sa * du[:, 0] * wb * wg
                    dw[:, c, 1] = sb * du[:, 1] * wa * wg
                    dw[:, c, 2] = sg * du[:, 2] * wa * wb
                    c += 1
        return idx, w, dw

    @staticmethod
    def interpolate(values: np.ndarray, stencil) -> np.ndarray:
        idx, w, _ = stencil
        if values.shape[-1] == 0:
            return np.zeros((len(idx), 0))
        flat = values.reshape(-1, values.shape[-1])
        return np.einsum("nc,ncd->nd", w, flat[idx])


@dataclass
class LatentBoneTable:
    params: np.ndarray  # (M, n_l, 6): axis-angle then translation

    @property
    def n_latent(self) -> int:
        return self.params.shape[1]

    @property
    def frames(self) -> int:
        return self.params.shape[0]

    @classmethod
    def identity(cls, frames: int, n_l: int) -> "LatentBoneTable":
        return cls(np.zeros((frames, n_l, 6)))

    def transforms(self, frame: int) -> np.ndarray:
        if self.n_latent == 0:
            return np.zeros((0, 4, 4))
        if not 0 <= frame < self.frames:
            raise ValueError(f"frame {frame} outside latent table of {self.frames} frames")
        p = self.params[frame]
        out = np.tile(np.eye(4), (self.n_latent, 1, 1))
        out[:, :3, :3] = axis_angle_to_rotation(p[:, :3])
        out[:, :3, 3] = p[:, 3:]
        return out

    def transforms_vjp(self, frame: int, grad: np.ndarray) -> np.ndarray:
        p = self.params[frame]
        jac = axis_angle_to_rotation_jacobian(p[:, :3])
        out = np.empty_like(p)
        out[:, :3] = np.einsum("qij,qijc->qc", grad[:, :3, :3], jac)
        out[:, 3:] = grad[:, :3, 3]
        return out

    def fill_untrained(self, trained_frames) -> None:
        """Linearly interpolate rows of frames never optimized from trained neighbours."""
        trained = np.unique(np.asarray(trained_frames, dtype=np.int64))
        if len(trained) == 0 or self.n_latent == 0:
            return
        all_frames = np.arange(self.frames)
        flat = self.params.reshape(self.frames, -1)
        src = flat[trained].copy()
        for j in range(flat.shape[1]):
            flat[:, j] = np.interp(all_frames, trained, src[:, j])


@dataclass
class AvatarModel:
    template: KinematicTemplate
    gaussians: GaussianMixture
    skinning: SkinningGrid
    latent: LatentBoneTable
    # per-Gaussian skinning bypassing the grid; only used for ablations
    free_delta: np.ndarray | None = None
    free_latent: np.ndarray | None = None

    @property
    def n_latent(self) -> int:
        return self.latent.n_latent

    @property
    def uses_grid(self) -> bool:
        return self.free_delta is None

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every optimizable array."""
        g = self.gaussians
        out = {
            "means": g.means,
            "rotations": g.rotations,
            "log_scales": g.log_scales,
            "opacity_logits": g.opacity_logits,
            "sh": g.sh,
            "delta_grid": self.skinning.delta,
            "latent_grid": self.skinning.latent,
            "latent_table": self.latent.params,
        }
        if not self.uses_grid:
            out["free_delta"] = self.free_delta
            out["free_latent"] = self.free_latent
        return out

    def copy(self) -> "AvatarModel":
        tpl = self.template
        clone = copy.deepcopy(
            AvatarModel(None, self.gaussians, self.skinning, self.latent, self.free_delta, self.free_latent)
        )
        clone.template = tpl
        return clone


PER_GAUSSIAN_KEYS = ("means", "rotations", "log_scales", "opacity_logits", "sh", "free_delta", "free_latent")


@dataclass
class ModelConfig:
    n_gaussians: int = 5000
    sh_degree: int = 1
    n_latent: int = 8
    grid_resolution: int = 32
    grid_margin: float = 0.2
    init_opacity: float = 0.5
    init_gray: float = 0.5
    latent_init_std: float = 1e-3
    frames: int = 1
    seed: int = 0
    # store skinning corrections per Gaussian instead of on the grid (ablation only)
    free_skinning: bool = False


def grid_bounds(tpl: KinematicTemplate, margin: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = tpl.bounds()
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + margin)
    return center - half, center + half


def init_from_template(tpl: KinematicTemplate, cfg: ModelConfig | None = None) -> AvatarModel:
    """Seeded model initialized on the template surface samples."""
    cfg = cfg or ModelConfig()
    if cfg.n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(cfg.seed)
    samples = tpl.sample_positions
    n = cfg.n_gaussians
    if n <= len(samples):
        means = samples[np.sort(rng.choice(len(samples), size=n, replace=False))].copy()
    else:
        means = samples[rng.integers(0, len(samples), size=n)] + rng.normal(scale=0.25 * tpl.skinning_sigma, size=(n, 3))
    if n > 1:
        k = min(3, n - 1)
        d, _ = cKDTree(means).query(means, k=k + 1)
        scale = 0.5 * d[:, 1:].mean(1)
    else:
        scale = np.array([0.5 * tpl.skinning_sigma])
    scale = np.maximum(scale, SCALE_FLOOR)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    kb = sh_basis_count(cfg.sh_degree)
    sh = np.zeros((n, 3, kb))
    sh[:, :, 0] = cfg.init_gray / SH_C0
    gm = GaussianMixture(
        means=means,
        rotations=rotations,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(cfg.init_opacity))),
        sh=sh,
        sh_degree=cfg.sh_degree,
    )
    lo, hi = grid_bounds(tpl, cfg.grid_margin)
    grid = SkinningGrid.zeros(lo, hi, cfg.grid_resolution, tpl.joint_count, cfg.n_latent)
    latent = LatentBoneTable.identity(cfg.frames, cfg.n_latent)
    if cfg.n_latent and cfg.latent_init_std > 0:
        # identical latent bones receive identical gradients forever; break the tie
        latent.params[:] = rng.normal(scale=cfg.latent_init_std, size=latent.params.shape)
    if cfg.free_skinning:
        return AvatarModel(tpl, gm, grid, latent, np.zeros((n, tpl.joint_count)), np.zeros((n, cfg.n_latent)))
    return AvatarModel(tpl, gm, grid, latent)


# ---------------------------------------------------------------------------
# skinning


@dataclass
class SkinningEval:
    prior: np.ndarray
    prior_jac: np.ndarray
    stencil: tuple | None
    w_hat: np.ndarray
    w_lat: np.ndarray


def eval_skinning(model: AvatarModel, points: np.ndarray) -> SkinningEval:
    prior, jac = model.template.prior_skinning(points, with_grad=True)
    if model.uses_grid:
        stencil = model.skinning.corners(points)
        w_hat = prior + SkinningGrid.interpolate(model.skinning.delta, stencil)
        w_lat = SkinningGrid.interpolate(model.skinning.latent, stencil)
    else:
        stencil = None
        w_hat = prior + model.free_delta
        w_lat = model.free_latent.copy()
    return SkinningEval(prior, jac, stencil, w_hat, w_lat)


def skinning_weights_at(model: AvatarModel, mu) -> tuple[np.ndarray, np.ndarray]:
    """Corrected template weights and latent-bone weights at canonical point(s)."""
    pts = np.asarray(mu, dtype=np.float64)
    single = pts.ndim == 1
    if not model.uses_grid and single:
        raise ValueError("per-Gaussian skinning has no field to query at arbitrary points")
    ev = eval_skinning(model, pts.reshape(-1, 3))
    if single:
        return ev.w_hat[0], ev.w_lat[0]
    return ev.w_hat, ev.w_lat


def scatter_add_rows(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """``target[idx[i]] += values[i]`` with duplicates summed in a fixed order."""
    n = target.shape[0]
    for c in range(values.shape[1]):
        target[:, c] += np.bincount(idx, weights=values[:, c], minlength=n)


def skinning_backward(
    model: AvatarModel, ev: SkinningEval, g_hat: np.ndarray, g_lat: np.ndarray, grads: dict, g_delta=None
):
    """Accumulate gradients of weights (n, n_b) / (n, n_l) into means and skinning params.

    ``g_delta`` is an extra gradient on the learned correction alone, which
    bypasses the prior field.
    """
    g_mu = np.einsum("nb,nbd->nd", g_hat, ev.prior_jac)
    if g_delta is not None:
        g_hat = g_hat + g_delta
    if model.uses_grid:
        idx, w, dw = ev.stencil
        flat_d = model.skinning.delta.reshape(-1, model.template.joint_count)
        g_mu += (((flat_d[idx] @ g_hat[:, :, None])[:, :, 0])[:, None, :] @ dw)[:, 0]
        gd = grads.setdefault("delta_grid", np.zeros_like(model.skinning.delta)).reshape(flat_d.shape)
        scatter_add_rows(gd, idx.ravel(), (w[:, :, None] * g_hat[:, None, :]).reshape(-1, flat_d.shape[1]))
        if model.n_latent:
            flat_l = model.skinning.latent.reshape(-1, model.n_latent)
            g_mu += (((flat_l[idx] @ g_lat[:, :, None])[:, :, 0])[:, None, :] @ dw)[:, 0]
            gl = grads.setdefault("latent_grid", np.zeros_like(model.skinning.latent)).reshape(flat_l.shape)
            scatter_add_rows(gl, idx.ravel(), (w[:, :, None] * g_lat[:, None, :]).reshape(-1, flat_l.shape[1]))
    else:
        grads["free_delta"] = grads.get("free_delta", 0) + g_hat
        grads["free_latent"] = grads.get("free_latent", 0) + g_lat
    grads["means"] = grads.get("means", 0) + g_mu


# ---------------------------------------------------------------------------
# articulation


def articulation_from_bones(w_hat, w_lat, bones, latent_bones) -> np.ndarray:
    """Per-Gaussian blended 3x4 transforms from bone matrices."""
    a = np.einsum("nk,kij->nij", w_hat, bones[:, :3, :])
    if len(latent_bones):
        a += np.einsum("nq,qij->nij", w_lat, latent_bones[:, :3, :])
    return a


def articulation_transforms(model: AvatarModel, pose: Pose, frame: int = 0) -> np.ndarray:
    """Blended transforms A^(i) as an (N, 3, 4) array."""
    aa = pose.axis_angle()
    bones = bone_transforms_axis_angle(model.template, aa, pose.root_translation)
    ev = eval_skinning(model, model.gaussians.means)
    return articulation_from_bones(ev.w_hat, ev.w_lat, bones, _latent_for(model, frame))


def _latent_for(model: AvatarModel, frame: int | None) -> np.ndarray:
    # frame=None: a pose not tied to any recorded frame, latent bones at identity
    if model.n_latent == 0:
        return np.zeros((0, 4, 4))
    if frame is None:
        return np.tile(np.eye(4), (model.n_latent, 1, 1))
    return model.latent.transforms(frame)


@dataclass
class ArticulationCache:
    axis_angle: np.ndarray
    root_translation: np.ndarray
    frame: int
    bones: np.ndarray
    latent_bones: np.ndarray
    skin: SkinningEval
    a: np.ndarray
    rq: np.ndarray
    scales: np.ndarray
    polar: np.ndarray
    svd: tuple


def pose_from_bones(model: AvatarModel, bones: np.ndarray, latent_bones: np.ndarray):
    """Articulate with explicitly given bone matrices (no kinematics)."""
    return _articulate(model, bones, latent_bones, None, None, -1)[0]


def articulate(model: AvatarModel, pose: Pose, frame: int = 0) -> PosedGaussians:
    return articulate_with_cache(model, pose.axis_angle(), pose.root_translation, frame)[0]


def articulate_with_cache(model: AvatarModel, axis_angle, root_translation, frame: int = 0):
    axis_angle = np.asarray(axis_angle, dtype=np.float64)
    root_translation = np.asarray(root_translation, dtype=np.float64)
    bones = bone_transforms_axis_angle(model.template, axis_angle, root_translation)
    return _articulate(model, bones, _latent_for(model, frame), axis_angle, root_translation, frame)


def _articulate(model, bones, latent_bones, axis_angle, root_translation, frame):
    g = model.gaussians
    skin = eval_skinning(model, g.means)
    a = articulation_from_bones(skin.w_hat, skin.w_lat, bones, latent_bones)
    a_rot = a[:, :, :3]
    rq = g.rotation_matrices()
    scales = g.scales
    ra = a_rot @ rq
    polar, svd = polar_rotation(a_rot)
    posed = PosedGaussians(
        means=(a_rot @ g.means[:, :, None])[:, :, 0] + a[:, :, 3],
        cov_factors=ra * scales[:, None, :],
        opacities=g.opacities,
        sh=g.sh,
        sh_rotations=polar @ rq,
        sh_degree=g.sh_degree,
    )
    cache = ArticulationCache(axis_angle, root_translation, frame, bones, latent_bones, skin, a, rq, scales, polar, svd)
    return posed, cache


def articulate_backward(
    model: AvatarModel,
    cache: ArticulationCache,
    pg: PosedGradients,
    extra_w_hat: np.ndarray | None = None,
    extra_w_lat: np.ndarray | None = None,
    extra_delta: np.ndarray | None = None,
) -> tuple[dict, np.ndarray, np.ndarray]:
    """Reverse-mode pass through :func:`articulate_with_cache`.

    ``extra_w_*`` are additional gradients w.r.t. the per-Gaussian skinning
    weights (from regularizers) folded into the same skinning backward;
    ``extra_delta`` targets the learned correction only.
    Returns parameter gradients plus gradients w.r.t. the pose axis-angles and
    root translation.
    """
    g = model.gaussians
    a = cache.a
    a_rot = a[:, :, :3]
    rq = cache.rq
    ra = a_rot @ rq
    s = cache.scales
    grads: dict[str, np.ndarray] = {}

    g_ra = pg.cov_factors * s[:, None, :]
    g_s = np.einsum("nij,nij->nj", ra, pg.cov_factors)
    g_polar = pg.sh_rotations @ np.swapaxes(rq, -1, -2)
    g_arot = pg.means[:, :, None] * g.means[:, None, :]
    g_arot += g_ra @ np.swapaxes(rq, -1, -2)
    g_arot += polar_rotation_vjp(cache.svd, g_polar)
    g_rq = np.swapaxes(a_rot, -1, -2) @ g_ra + np.swapaxes(cache.polar, -1, -2) @ pg.sh_rotations
    g_a = np.concatenate([g_arot, pg.means[:, :, None]], axis=2)

    grads["means"] = (np.swapaxes(a_rot, -1, -2) @ pg.means[:, :, None])[:, :, 0]
    grads["rotations"] = quat_to_rotation_vjp(g.rotations, g_rq)
    grads["log_scales"] = g_s * s * (np.exp(g.log_scales) > SCALE_FLOOR)
    op = g.opacities
    grads["opacity_logits"] = pg.opacities * op * (1.0 - op)
    grads["sh"] = pg.sh.copy()

    g_hat = np.einsum("nij,kij->nk", g_a, cache.bones[:, :3, :])
    g_lat = np.zeros_like(cache.skin.w_lat)
    if model.n_latent:
        g_lat = np.einsum("nij,qij->nq", g_a, cache.latent_bones[:, :3, :])
        g_lb = np.einsum("nq,nij->qij", cache.skin.w_lat, g_a)
        table = np.zeros_like(model.latent.params)
        table[cache.frame] = model.latent.transforms_vjp(cache.frame, g_lb)
        grads["latent_table"] = table
    if extra_w_hat is not None:
        g_hat = g_hat + extra_w_hat
    if extra_w_lat is not None and model.n_latent:
        g_lat = g_lat + extra_w_lat
    skinning_backward(model, cache.skin, g_hat, g_lat, grads, extra_delta)

    g_bones = np.einsum("nk,nij->kij", cache.skin.w_hat, g_a)
    if cache.axis_angle is not None:
        g_aa, g_t = bone_transforms_axis_angle_vjp(model.template, cache.axis_angle, cache.root_translation, g_bones)
    else:
        g_aa, g_t = None, None
    return grads, g_aa, g_t


# ---------------------------------------------------------------------------
# radiance field evaluation


def _as_posed(m) -> PosedGaussians:
    return m.as_posed() if isinstance(m, GaussianMixture) else m


def _component_densities(p: PosedGaussians, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if p.count == 0:
        return np.zeros(0)
    y = np.linalg.solve(p.cov_factors, (x - p.means)[:, :, None])[:, :, 0]
    return p.opacities * np.exp(-0.5 * np.sum(y * y, axis=1))


def eval_density(mixture, x) -> float:
    """Sum over components of opacity times the unnormalized Gaussian at ``x``."""
    return float(np.sum(_component_densities(_as_posed(mixture), x)))


def eval_color(mixture, x, d) -> np.ndarray:
    """Density-weighted SH radiance at ``x`` seen along unit direction ``d``."""
    p = _as_posed(mixture)
    if p.count == 0:
        return np.zeros(3)
    sig = _component_densities(p, x)
    local = np.swapaxes(p.sh_rotations, -1, -2) @ np.asarray(d, dtype=np.float64)
    basis = sh_eval(p.sh_degree, local)  # (N, K)
    rgb = np.einsum("nck,nk->nc", p.sh, basis)
    return sig @ rgb
