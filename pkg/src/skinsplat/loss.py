"""Photometric losses, image metrics and the attribute regularizers.

Every loss that takes part in training comes with its analytic gradient.
Gradients of the regularizers are split into direct parameter gradients and
gradients with respect to per-Gaussian skinning weights; the latter are routed
through the skinning field by :func:`skinsplat.model.articulate_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .model import SCALE_FLOOR, AvatarModel, SkinningEval, eval_skinning, scatter_add_rows
from .template import InvalidStateError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    ssim: float = 0.2
    rotation_std: float = 0.01
    scale_std: float = 0.01
    opacity_std: float = 0.01
    sh_std: float = 0.01
    w_hat_std: float = 0.01
    w_lat_std: float = 0.01
    w_hat_norm: float = 0.1
    w_lat_norm: float = 0.1
    scale_norm: float = 1.0
    knn_k: int = 8

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if name != "knn_k" and val < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.knn_k < 2:
            raise ValueError("knn_k must be >= 2")

    def std_weights(self) -> dict[str, float]:
        return {
            "rotation": self.rotation_std,
            "scale": self.scale_std,
            "opacity": self.opacity_std,
            "sh": self.sh_std,
            "w_hat": self.w_hat_std,
            "w_lat": self.w_lat_std,
        }

    def without_knn(self) -> "LossWeights":
        out = LossWeights(**self.__dict__)
        for name in ("rotation_std", "scale_std", "opacity_std", "sh_std", "w_hat_std", "w_lat_std"):
            setattr(out, name, 0.0)
        return out


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    return img, ref


def l1(img, ref) -> float:
    img, ref = _check_pair(img, ref)
    return float(np.mean(np.abs(img - ref)))


def l1_grad(img, ref) -> np.ndarray:
    img, ref = _check_pair(img, ref)
    return np.sign(img - ref) / img.size


def psnr(img, ref) -> float:
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation over the first two axes."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    x = np.einsum("i...k,k->i...", rows, g)
    cols = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    return np.einsum("ij...k,k->ij...", cols, g)


def _filter_adjoint(y, g, shape):
    """Transpose of :func:`_filter_valid` (scatter back onto the input grid)."""
    k = len(g)
    h, w = y.shape[:2]
    tmp = np.zeros((h, shape[1]) + y.shape[2:])
    for j in range(k):
        tmp[:, j : j + w] += g[j] * y
    out = np.zeros(shape)
    for i in range(k):
        out[i : i + h] += g[i] * tmp
    return out


def _ssim_parts(img, ref):
    img, ref = _check_pair(img, ref)
    if img.shape[0] < SSIM_WINDOW or img.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = gaussian_window()
    mx, my = _filter_valid(img, g), _filter_valid(ref, g)
    exx = _filter_valid(img * img, g)
    eyy = _filter_valid(ref * ref, g)
    exy = _filter_valid(img * ref, g)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return img, ref, g, mx, my, a1, a2, b1, b2, smap


def ssim(img, ref) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), computed per channel and averaged."""
    return float(np.mean(_ssim_parts(img, ref)[-1]))


def ssim_with_grad(img, ref) -> tuple[float, np.ndarray]:
    img, ref, g, mx, my, a1, a2, b1, b2, smap = _ssim_parts(img, ref)
    n = smap.size
    # partials of the map w.r.t. the local statistics mu_x, E[x^2], E[xy]
    d_mx = smap * (2.0 * my / a1 - 2.0 * mx / b1 - 2.0 * my / a2 + 2.0 * mx / b2) / n
    d_exx = -smap / b2 / n
    d_exy = 2.0 * smap / a2 / n
    grad = _filter_adjoint(d_mx, g, img.shape)
    grad += 2.0 * img * _filter_adjoint(d_exx, g, img.shape)
    grad += ref * _filter_adjoint(d_exy, g, img.shape)
    return float(np.mean(smap)), grad


# ---------------------------------------------------------------------------
# regularizers


@dataclass
class RegularizerGrads:
    """Gradients of the regularizers.

    ``params`` holds direct gradients keyed like :meth:`AvatarModel.params`;
    ``w_hat``, ``delta`` and ``w_lat`` are gradients w.r.t. the per-Gaussian
    corrected weights, the correction alone and the latent weights.
    """

    params: dict = field(default_factory=dict)
    w_hat: np.ndarray | None = None
    delta: np.ndarray | None = None
    w_lat: np.ndarray | None = None


def knn_indices(means: np.ndarray, k: int) -> np.ndarray:
    """(N, k) neighbour table; column 0 is always the component itself."""
    n = len(means)
    if n < k:
        raise InvalidStateError(f"need at least {k} Gaussians for the neighbourhood regularizer, have {n}")
    _, nb = cKDTree(means).query(means, k=min(k + 1, n))
    nb = nb.reshape(n, -1)
    self_idx = np.arange(n)[:, None]
    others = nb != self_idx
    order = np.argsort(~others, axis=1, kind="stable")
    rest = np.take_along_axis(nb, order, axis=1)[:, : k - 1]
    return np.concatenate([self_idx, rest], axis=1)


def _std_term(values, nb, weight, n):
    """Value and gradient of weight * mean_i mean_d STD_{j in nb_i}(values_jd)."""
    v = values[nb]  # (N, k, D)
    k, d = v.shape[1], v.shape[2]
    centered = v - v.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=1))  # (N, D)
    val = weight * float(np.sum(std)) / (n * d)
    safe = np.where(std > 0, std, 1.0)
    dv = np.where(std[:, None, :] > 0, centered / (k * safe[:, None, :]), 0.0) * (weight / (n * d))
    grad = np.zeros_like(values)
    scatter_add_rows(grad, nb.ravel(), dv.reshape(-1, d))
    return val, grad


def knn_std_reg(
    model: AvatarModel, weights: LossWeights, neighbors: np.ndarray | None = None, skin: SkinningEval | None = None
) -> tuple[float, RegularizerGrads]:
    """Neighbourhood standard-deviation penalty on Gaussian attributes."""
    g = model.gaussians
    n = g.count
    if neighbors is None:
        neighbors = knn_indices(g.means, weights.knn_k)
    elif n < neighbors.shape[1]:
        raise InvalidStateError("neighbour table larger than the mixture")
    skin = skin or eval_skinning(model, g.means)
    lam = weights.std_weights()
    out = RegularizerGrads()
    total = 0.0

    if lam["rotation"] > 0:
        qn_norm = np.linalg.norm(g.rotations, axis=1, keepdims=True)
        qn = g.rotations / qn_norm
        sign = np.where(np.einsum("nkc,nc->nk", qn[neighbors], qn) < 0, -1.0, 1.0)
        v = qn[neighbors] * sign[:, :, None]
        k = neighbors.shape[1]
        centered = v - v.mean(axis=1, keepdims=True)
        std = np.sqrt(np.mean(centered * centered, axis=1))
        total += lam["rotation"] * float(np.sum(std)) / (n * 4)
        safe = np.where(std > 0, std, 1.0)
        dv = np.where(std[:, None, :] > 0, centered / (k * safe[:, None, :]), 0.0) * (lam["rotation"] / (n * 4))
        dqn = np.zeros_like(qn)
        scatter_add_rows(dqn, neighbors.ravel(), (dv * sign[:, :, None]).reshape(-1, 4))
        dq = (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / qn_norm
        out.params["rotations"] = dq
    if lam["scale"] > 0:
        s = g.scales
        val, gs = _std_term(s, neighbors, lam["scale"], n)
        total += val
        out.params["log_scales"] = gs * s * (np.exp(g.log_scales) > SCALE_FLOOR)
    if lam["opacity"] > 0:
        op = g.opacities
        val, go = _std_term(op[:, None], neighbors, lam["opacity"], n)
        total += val
        out.params["opacity_logits"] = go[:, 0] * op * (1.0 - op)
    if lam["sh"] > 0:
        val, gf = _std_term(g.sh.reshape(n, -1), neighbors, lam["sh"], n)
        total += val
        out.params["sh"] = gf.reshape(g.sh.shape)
    if lam["w_hat"] > 0:
        val, out.w_hat = _std_term(skin.w_hat, neighbors, lam["w_hat"], n)
        total += val
    if lam["w_lat"] > 0 and skin.w_lat.shape[1] > 0:
        val, out.w_lat = _std_term(skin.w_lat, neighbors, lam["w_lat"], n)
        total += val
    return total, out


def _l2_rows(x):
    norm = np.linalg.norm(x, axis=1)
    grad = np.where(norm[:, None] > 0, x / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    return norm, grad


def norm_reg(model: AvatarModel, weights: LossWeights, skin: SkinningEval | None = None) -> tuple[float, RegularizerGrads]:
    """Mean over Gaussians of the weighted correction norm, latent-weight norm and largest scale."""
    g = model.gaussians
    n = g.count
    out = RegularizerGrads()
    if n == 0:
        return 0.0, out
    skin = skin or eval_skinning(model, g.means)
    total = 0.0
    if weights.w_hat_norm > 0:
        norm, grad = _l2_rows(skin.w_hat - skin.prior)
        total += weights.w_hat_norm * float(norm.mean())
        out.delta = grad * (weights.w_hat_norm / n)
    if weights.w_lat_norm > 0 and skin.w_lat.shape[1] > 0:
        norm, grad = _l2_rows(skin.w_lat)
        total += weights.w_lat_norm * float(norm.mean())
        out.w_lat = grad * (weights.w_lat_norm / n)
    if weights.scale_norm > 0:
        s = g.scales
        arg = np.argmax(s, axis=1)
        total += weights.scale_norm * float(s[np.arange(n), arg].mean())
        gl = np.zeros_like(s)
        gl[np.arange(n), arg] = weights.scale_norm / n * s[np.arange(n), arg]
        out.params["log_scales"] = gl * (np.exp(g.log_scales) > SCALE_FLOOR)
    return total, out


def merge_grads(*parts: RegularizerGrads) -> RegularizerGrads:
    out = RegularizerGrads()
    for p in parts:
        for key, val in p.params.items():
            out.params[key] = out.params[key] + val if key in out.params else val.copy()
        for name in ("w_hat", "delta", "w_lat"):
            val = getattr(p, name)
            if val is not None:
                cur = getattr(out, name)
                setattr(out, name, val.copy() if cur is None else cur + val)
    return out


@dataclass
class LossResult:
    total: float
    l1: float
    ssim_term: float
    std_term: float
    norm_term: float
    grad_image: np.ndarray
    reg: RegularizerGrads


def total_loss(
    render,
    ref,
    model: AvatarModel,
    weights: LossWeights,
    neighbors: np.ndarray | None = None,
    skin: SkinningEval | None = None,
) -> LossResult:
    """Photometric loss plus regularizers, with image-space and parameter gradients.

    With ``model=None`` only the image terms are evaluated.
    """
    img = render.color if hasattr(render, "color") else render
    img, ref = _check_pair(img, ref)
    val_l1 = l1(img, ref)
    grad = l1_grad(img, ref)
    ssim_term = 0.0
    if weights.ssim > 0:
        s, gs = ssim_with_grad(img, ref)
        ssim_term = weights.ssim * (1.0 - s)
        grad = grad - weights.ssim * gs
    std_val, std_g = 0.0, RegularizerGrads()
    norm_val, norm_g = 0.0, RegularizerGrads()
    if model is not None:
        skin = skin or eval_skinning(model, model.gaussians.means)
        if any(v > 0 for v in weights.std_weights().values()):
            std_val, std_g = knn_std_reg(model, weights, neighbors, skin)
        norm_val, norm_g = norm_reg(model, weights, skin)
    return LossResult(
        total=val_l1 + ssim_term + std_val + norm_val,
        l1=val_l1,
        ssim_term=ssim_term,
        std_term=std_val,
        norm_term=norm_val,
        grad_image=grad,
        reg=merge_grads(std_g, norm_g),
    )
