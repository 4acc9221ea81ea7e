"""Adam, densify-and-prune, the reconstruction loop and pose refinement."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import quat_to_rotation
from .loss import LossResult, LossWeights, knn_indices, l1, l1_grad, ssim_with_grad, total_loss
from .model import (
    PER_GAUSSIAN_KEYS,
    AvatarModel,
    ModelConfig,
    PosedGradients,
    articulate_backward,
    articulate_with_cache,
    init_from_template,
)
from .render import render_splat, render_splat_backward
from .template import InvalidStateError, KinematicTemplate

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


class NumericalError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: dict[str, float]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    def reindex(self, key: str, keep: np.ndarray, n_new: int) -> None:
        """Keep moment rows ``keep`` and append ``n_new`` zero rows."""
        for store in (self.m, self.v):
            if key in store:
                old = store[key][keep]
                pad = np.zeros((n_new,) + old.shape[1:])
                store[key] = np.concatenate([old, pad], axis=0)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    Groups without a gradient or without a learning rate are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, g in grads.items():
        lr = state.lr.get(key, 0.0)
        if lr == 0.0 or key not in params:
            continue
        p = params[key]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(key)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        state.m[key] = m
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class FitConfig:
    iterations: int = 3000
    lr_means: float = 1.6e-4
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 0.05
    lr_sh: float = 2.5e-3
    lr_delta_grid: float = 1e-3
    lr_latent_grid: float = 1e-3
    # rows of one frame see about 1/n_frames of the updates
    lr_latent_table: float = 3e-3
    # None: 0.1 x the mean of the Gaussian learning rates
    lr_pose: float | None = None
    refine_pose: bool = True
    densify_interval: int = 300
    densify_start: int = 500
    densify_stop_fraction: float = 0.8
    tau_grad: float = 2e-4
    tau_opacity: float = 0.005
    # None: 1% of the template bounding-box diagonal
    tau_scale: float | None = None
    split_factor: float = 1.6
    knn_every: int = 100
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    render_dtype: str = "float32"
    checkpoint_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.tau_grad <= 0 or self.tau_opacity <= 0 or (self.tau_scale is not None and self.tau_scale <= 0):
            raise ValueError("densification thresholds must be positive")
        if self.densify_interval < 1 or self.knn_every < 1:
            raise ValueError("intervals must be >= 1")
        if not 0.0 <= self.densify_stop_fraction <= 1.0:
            raise ValueError("densify_stop_fraction must lie in [0, 1]")

    def learning_rates(self) -> dict[str, float]:
        lr = {
            "means": self.lr_means,
            "rotations": self.lr_rotations,
            "log_scales": self.lr_log_scales,
            "opacity_logits": self.lr_opacity_logits,
            "sh": self.lr_sh,
            "delta_grid": self.lr_delta_grid,
            "latent_grid": self.lr_latent_grid,
            "latent_table": self.lr_latent_table,
            "free_delta": self.lr_delta_grid,
            "free_latent": self.lr_latent_grid,
        }
        pose = self.lr_pose
        if pose is None:
            pose = 0.1 * float(np.mean([lr[k] for k in ("means", "rotations", "log_scales", "opacity_logits", "sh")]))
        lr["pose_axis_angle"] = pose if self.refine_pose else 0.0
        lr["pose_translation"] = pose if self.refine_pose else 0.0
        return lr

    def densify_stop(self) -> int:
        return int(self.densify_stop_fraction * self.iterations)


# ---------------------------------------------------------------------------
# one differentiable step


@dataclass
class StepResult:
    loss: LossResult
    grads: dict
    grad_axis_angle: np.ndarray
    grad_translation: np.ndarray
    grad2d: np.ndarray
    visible: np.ndarray
    color: np.ndarray


def loss_and_grads(
    model: AvatarModel,
    camera,
    image: np.ndarray,
    axis_angle: np.ndarray,
    root_translation: np.ndarray,
    time: int,
    weights: LossWeights,
    neighbors: np.ndarray | None = None,
    background=(0.0, 0.0, 0.0),
    dtype=np.float32,
) -> StepResult:
    """Render one frame, evaluate the full loss and back-propagate to every parameter group."""
    posed, cache = articulate_with_cache(model, axis_angle, root_translation, time)
    out = render_splat(posed, camera, background, dtype=dtype)
    res = total_loss(out, image, model, weights, neighbors, cache.skin)
    rg = render_splat_backward(posed, camera, background, res.grad_image, forward=out)
    pg = PosedGradients(rg.means, rg.cov_factors, rg.opacities, rg.sh, rg.sh_rotations)
    grads, g_aa, g_t = articulate_backward(model, cache, pg, res.reg.w_hat, res.reg.w_lat, res.reg.delta)
    for key, val in res.reg.params.items():
        grads[key] = grads[key] + val if key in grads else val
    return StepResult(res, grads, g_aa, g_t, rg.grad2d, rg.visible, out.color)


# ---------------------------------------------------------------------------
# densification


@dataclass
class DensifyStats:
    grad2d: np.ndarray
    count: np.ndarray
    grad3d: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def add(self, grad2d, visible, grad_means) -> None:
        self.grad2d[visible] += grad2d[visible]
        self.count[visible] += 1
        self.grad3d += grad_means


def default_tau_scale(tpl: KinematicTemplate) -> float:
    lo, hi = tpl.bounds()
    return 0.01 * float(np.linalg.norm(hi - lo))


def densify_and_prune(
    model: AvatarModel,
    stats: DensifyStats,
    config: FitConfig,
    state: AdamState | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, int]:
    """Prune transparent Gaussians, clone small and split large high-gradient ones.

    Mutates ``model`` (and the Adam moments) in place; returns the counts.
    """
    rng = rng or np.random.default_rng(config.seed)
    g = model.gaussians
    n = g.count
    tau_s = config.tau_scale if config.tau_scale is not None else default_tau_scale(model.template)
    avg = stats.grad2d / np.maximum(stats.count, 1)
    prune = g.opacities < config.tau_opacity
    hot = (avg > config.tau_grad) & ~prune
    max_scale = g.scales.max(axis=1)
    clone = hot & (max_scale <= tau_s)
    split = hot & (max_scale > tau_s)
    if prune.all():
        raise InvalidStateError("densify_and_prune would remove every Gaussian")

    keep = np.flatnonzero(~prune & ~split)
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    arrays = {k: getattr(g, k) for k in ("means", "rotations", "log_scales", "opacity_logits", "sh")}
    if not model.uses_grid:
        arrays["free_delta"] = model.free_delta
        arrays["free_latent"] = model.free_latent

    new_rows: dict[str, list[np.ndarray]] = {k: [v[keep]] for k, v in arrays.items()}

    # clones: copy and nudge along the descent direction of the accumulated gradient
    if len(clone_idx):
        for k, v in arrays.items():
            new_rows[k].append(v[clone_idx].copy())
        d = stats.grad3d[clone_idx]
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(norm > 0, d / np.where(norm > 0, norm, 1.0), 0.0)
        new_rows["means"][-1] -= 0.01 * max_scale[clone_idx, None] * d

    # splits: two children sampled from the parent's Gaussian, scales shrunk
    if len(split_idx):
        rot = quat_to_rotation(g.rotations[split_idx])
        s = g.scales[split_idx]
        for _ in range(2):
            for k, v in arrays.items():
                new_rows[k].append(v[split_idx].copy())
            z = rng.normal(size=(len(split_idx), 3)) * s
            new_rows["means"][-1] = g.means[split_idx] + np.einsum("nij,nj->ni", rot, z)
            new_rows["log_scales"][-1] = g.log_scales[split_idx] - np.log(config.split_factor)

    merged = {k: np.concatenate(v, axis=0) for k, v in new_rows.items()}
    g.means = merged["means"]
    g.rotations = merged["rotations"]
    g.log_scales = merged["log_scales"]
    g.opacity_logits = merged["opacity_logits"]
    g.sh = merged["sh"]
    if not model.uses_grid:
        model.free_delta = merged["free_delta"]
        model.free_latent = merged["free_latent"]

    n_added = len(clone_idx) + 2 * len(split_idx)
    if state is not None:
        for key in PER_GAUSSIAN_KEYS:
            state.reindex(key, keep, n_added)
    return {
        "pruned": int(prune.sum()),
        "cloned": int(len(clone_idx)),
        "split": int(len(split_idx)),
        "before": n,
        "after": g.count,
    }


# ---------------------------------------------------------------------------
# reconstruction loop


@dataclass
class FitResult:
    model: AvatarModel
    axis_angles: np.ndarray  # (frames, n_b, 3), refined
    root_translations: np.ndarray  # (frames, 3)
    log: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "l1", "ssim_term", "std_term", "norm_term", "total"])
            for row in self.log:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def _dtype(name):
    return {"float32": np.float32, "float64": np.float64}[name]


def fit(
    dataset,
    config: FitConfig,
    model: AvatarModel | None = None,
    model_config: ModelConfig | None = None,
    checkpoint_path=None,
    progress=None,
) -> FitResult:
    """Reconstruct the avatar from a training split.

    ``dataset`` yields frames with ``camera``, ``axis_angle``,
    ``root_translation``, ``time`` and ``image()``. When ``model`` is not
    given one is initialized on the dataset's template.
    """
    from .data import save_model

    frames = list(dataset.frames)
    if not frames:
        raise ValueError("empty dataset")
    tpl = dataset.template
    if model is None:
        mc = model_config or ModelConfig()
        mc.frames = max(mc.frames, dataset.sequence_length)
        model = init_from_template(tpl, mc)
    rng = np.random.default_rng(config.seed)
    dtype = _dtype(config.render_dtype)
    weights = config.weights
    images = [f.image() for f in frames]
    aa = np.stack([np.asarray(f.axis_angle, dtype=np.float64) for f in frames])
    tr = np.stack([np.asarray(f.root_translation, dtype=np.float64) for f in frames])
    state = AdamState(lr=config.learning_rates())
    stats = DensifyStats.zeros(model.gaussians.count)
    need_knn = any(v > 0 for v in weights.std_weights().values())
    neighbors = None
    order: list[int] = []
    result = FitResult(model, aa, tr)
    last_good = model.copy()

    for step in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(frames)))
        fi = order.pop(0)
        fr = frames[fi]
        if need_knn and (neighbors is None or (step - 1) % config.knn_every == 0):
            neighbors = knn_indices(model.gaussians.means, weights.knn_k)
        sr = loss_and_grads(
            model, fr.camera, images[fi], aa[fi], tr[fi], fr.time, weights, neighbors, config.background, dtype
        )
        lr = sr.loss
        if not np.isfinite(lr.total) or not all(np.all(np.isfinite(v)) for v in sr.grads.values()):
            if checkpoint_path is not None:
                save_model(last_good, checkpoint_path)
            raise NumericalError(f"non-finite loss or gradient at step {step}")
        result.log.append((step, lr.l1, lr.ssim_term, lr.std_term, lr.norm_term, lr.total))
        stats.add(sr.grad2d, sr.visible, sr.grads["means"])

        params = model.params()
        grads = dict(sr.grads)
        params["pose_axis_angle"] = aa
        params["pose_translation"] = tr
        g_aa = np.zeros_like(aa)
        g_aa[fi] = sr.grad_axis_angle
        g_t = np.zeros_like(tr)
        g_t[fi] = sr.grad_translation
        grads["pose_axis_angle"] = g_aa
        grads["pose_translation"] = g_t
        adam_step(state, params, grads)

        if config.densify_start <= step <= config.densify_stop() and step % config.densify_interval == 0:
            info = densify_and_prune(model, stats, config, state, rng)
            log.info("step %d densify %s", step, info)
            stats = DensifyStats.zeros(model.gaussians.count)
            neighbors = None
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good = model.copy()
            if checkpoint_path is not None:
                save_model(model, checkpoint_path)
        if progress is not None:
            progress(step, lr)

    model.latent.fill_untrained(sorted({f.time for f in frames}))
    return result


def refine_pose(
    model: AvatarModel,
    image: np.ndarray,
    camera,
    axis_angle,
    root_translation,
    time: int = 0,
    steps: int = 50,
    lr: float = 1e-3,
    ssim_weight: float = 0.2,
    background=(0.0, 0.0, 0.0),
    dtype=np.float32,
):
    """Adam on the pose alone against L1 + SSIM; the model is left untouched.

    Returns refined axis-angles, root translation and the image L1 before
    every step plus one final value after the last update.
    """
    aa = np.array(axis_angle, dtype=np.float64)
    tr = np.array(root_translation, dtype=np.float64)
    state = AdamState(lr={"aa": lr, "t": lr})
    history = []
    for _ in range(steps):
        posed, cache = articulate_with_cache(model, aa, tr, time)
        out = render_splat(posed, camera, background, dtype=dtype)
        val = l1(out.color, image)
        grad = l1_grad(out.color, image)
        if ssim_weight > 0:
            s, gs = ssim_with_grad(out.color, image)
            val += ssim_weight * (1.0 - s)
            grad = grad - ssim_weight * gs
        if not np.isfinite(val):
            raise NumericalError("non-finite loss during pose refinement")
        history.append(l1(out.color, image))
        rg = render_splat_backward(posed, camera, background, grad, forward=out)
        pg = PosedGradients(rg.means, rg.cov_factors, rg.opacities, rg.sh, rg.sh_rotations)
        _, g_aa, g_t = articulate_backward(model, cache, pg)
        adam_step(state, {"aa": aa, "t": tr}, {"aa": g_aa, "t": g_t})
    if steps:
        posed = articulate_with_cache(model, aa, tr, time)[0]
        history.append(l1(render_splat(posed, camera, background, dtype=dtype).color, image))
    return aa, tr, history


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = ("full", "no-latent", "no-learnable-skinning", "no-knn", "no-vox")


def apply_ablation(name: str, model_cfg: ModelConfig, fit_cfg: FitConfig) -> tuple[ModelConfig, FitConfig]:
    """Return copies of both configs with the named component switched off."""
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    mc, fc = replace(model_cfg), replace(fit_cfg)
    if name in ("no-latent", "no-learnable-skinning"):
        mc.n_latent = 0
    if name == "no-learnable-skinning":
        fc.lr_delta_grid = 0.0
    elif name == "no-knn":
        fc.weights = fc.weights.without_knn()
    elif name == "no-vox":
        mc.free_skinning = True
    return mc, fc


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class FrameScore:
    index: int
    time: int
    psnr: float
    ssim: float


def evaluate(model: AvatarModel, dataset, background=None, refine_steps: int = 0, refine_lr: float = 1e-3) -> list[FrameScore]:
    """PSNR / SSIM of 8-bit renders against each frame's stored image.

    With ``refine_steps`` > 0 the frame pose is refined first, with the model frozen.
    """
    from .data import quantize
    from .loss import psnr, ssim

    bg = dataset.background if background is None else background
    scores = []
    for fr in dataset.frames:
        aa, tr = fr.axis_angle, fr.root_translation
        if refine_steps:
            aa, tr, _ = refine_pose(model, fr.image(), fr.camera, aa, tr, fr.time, refine_steps, refine_lr, background=bg)
        posed = articulate_with_cache(model, aa, tr, fr.time)[0]
        img = quantize(render_splat(posed, fr.camera, bg).color)
        ref = fr.image()
        scores.append(FrameScore(fr.index, fr.time, psnr(img, ref), ssim(img, ref)))
    return scores
