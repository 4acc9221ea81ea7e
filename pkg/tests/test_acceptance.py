"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 to 6 train full models and dominate the runtime of the whole suite.
"""
import csv
import json
import os
import time

import numpy as np

from conftest import record_criterion
from skinsplat.cli import bench_scene, main
from skinsplat.geom import SH_C0, axis_angle_to_rotation
from skinsplat.loss import LossWeights, knn_indices
from skinsplat.data import SynthConfig, generate_synthetic_sequence
from skinsplat.model import ModelConfig, PosedGaussians, init_from_template, pose_from_bones
from skinsplat.optim import FitConfig, apply_ablation, evaluate, fit, loss_and_grads
from skinsplat.render import Camera, look_at, render_raymarch_oracle, render_splat
from skinsplat.template import BipedConfig, Pose, bone_transforms, build_synthetic_biped


def read_kv(line):
    return dict(tok.split("=", 1) for tok in line.split() if "=" in tok)


# ---------------------------------------------------------------------------
# 1. gradients


def test_criterion_1_gradients(biped):
    t0 = time.perf_counter()
    model = init_from_template(biped, ModelConfig(n_gaussians=10, n_latent=2, frames=2, grid_resolution=4, seed=11))
    rng = np.random.default_rng(12)
    g = model.gaussians
    # jitter breaks the ties of isotropic init, where the largest-scale penalty has a kink
    g.log_scales += 0.7 + rng.normal(scale=0.1, size=g.log_scales.shape)
    g.opacity_logits[:] = rng.normal(scale=0.5, size=g.count)
    g.sh += rng.normal(scale=0.1, size=g.sh.shape)
    model.skinning.delta[:] = rng.normal(scale=0.05, size=model.skinning.delta.shape)
    model.skinning.latent[:] = rng.uniform(0.1, 0.3, size=model.skinning.latent.shape)
    model.latent.params[:] = rng.normal(scale=0.1, size=model.latent.params.shape)
    aa = rng.normal(scale=0.2, size=(biped.joint_count, 3))
    tr = rng.normal(scale=0.05, size=3)
    cam = Camera.from_intrinsics(24, 24, 7.5, 7.5, 16, 16, look_at((0, 0, 3), (0, -0.07, 0)), 0.1, 20)
    target = rng.uniform(size=(16, 16, 3))
    weights = LossWeights(knn_k=4)
    nbr = knn_indices(g.means, 4)

    def evaluate(m, a, t):
        return loss_and_grads(m, cam, target, a, t, 1, weights, nbr, dtype=np.float64)

    sr = evaluate(model, aa, tr)
    analytic = dict(sr.grads, pose_axis_angle=sr.grad_axis_angle, pose_translation=sr.grad_translation)
    h = 1e-6
    worst = {}
    for key in list(model.params()) + ["pose_axis_angle", "pose_translation"]:
        shape = analytic[key].shape
        bad = 0.0
        for flat in range(int(np.prod(shape))):
            idx = np.unravel_index(flat, shape)
            vals = []
            for sgn in (1.0, -1.0):
                m, a, t = model.copy(), aa.copy(), tr.copy()
                arr = {"pose_axis_angle": a, "pose_translation": t}.get(key)
                arr = m.params()[key] if arr is None else arr
                arr[idx] += sgn * h
                vals.append(evaluate(m, a, t).loss.total)
            fd = (vals[0] - vals[1]) / (2 * h)
            an = analytic[key][idx]
            # allowance: 1e-7 absolute plus 1e-3 relative
            bad = max(bad, abs(fd - an) / (1e-7 + 1e-3 * abs(an)))
        worst[key] = bad
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1.0 and elapsed < 120
    detail = f"worst error/allowance {max(worst.values()):.3f} ({max(worst, key=worst.get)}), {len(worst)} groups, {elapsed:.1f}s"
    assert record_criterion(1, ok, detail), worst


# ---------------------------------------------------------------------------
# 2. splat vs ray-march oracle


def isotropic_scene(seed, n=10):
    """Non-overlapping isotropic Gaussians, each spanning about 12 pixels at z=20.

    Scale 1/sqrt(2 pi) makes the oracle's peak opacity 1 - exp(-eta), so the
    splat's eta differs from it only at second order.
    """
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(2 * np.pi)
    centres = []
    while len(centres) < n:
        c = rng.uniform(-10.5, 10.5, size=2)
        if all(np.linalg.norm(c - d) > 8 * s for d in centres):
            centres.append(c)
    means = np.column_stack([np.array(centres), rng.uniform(19.0, 21.0, n)])
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = rng.uniform(0.1, 0.9, size=(n, 3)) / SH_C0
    proxy = PosedGaussians(means, np.eye(3)[None] * s * np.ones((n, 1, 1)), rng.uniform(0.05, 0.15, n), sh, np.tile(np.eye(3), (n, 1, 1)), 0)
    cam = Camera.from_intrinsics(100.0, 100.0, 63.5, 63.5, 128, 128, near=0.1, far=40.0)
    return proxy, cam, s


def test_criterion_2_splat_matches_oracle():
    diffs, conv = [], []
    for seed in range(10):
        proxy, cam, s = isotropic_scene(seed)
        bg = (0.2, 0.3, 0.4)
        oracle = render_raymarch_oracle(proxy, cam, bg, step=s / 20).color
        finer = render_raymarch_oracle(proxy, cam, bg, step=s / 40).color
        splat = render_splat(proxy, cam, bg, dtype=np.float64).color
        diffs.append(np.abs(splat - oracle).max())
        conv.append(np.abs(finer - oracle).max())
    ok = max(diffs) < 0.02 and max(conv) < 1e-3
    detail = f"max |splat - oracle| {max(diffs):.4f} (< 0.02), oracle step-halving change {max(conv):.2e} (< 1e-3), 10 seeds"
    assert record_criterion(2, ok, detail)


# ---------------------------------------------------------------------------
# 3. articulation invariants


def test_criterion_3_invariants():
    rest_err, equi_err = 0.0, 0.0
    templates = [build_synthetic_biped(BipedConfig(seed=s, sample_density=200.0)) for s in range(4)]
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        tpl = templates[i % 4]
        n_l = int(rng.integers(0, 4))
        mc = ModelConfig(n_gaussians=int(rng.integers(1, 80)), n_latent=n_l, frames=3, grid_resolution=4,
                         sh_degree=int(rng.integers(0, 3)), seed=i)
        m = init_from_template(tpl, mc)
        g = m.gaussians
        g.rotations = rng.normal(size=g.rotations.shape)
        g.log_scales = rng.normal(-3, 0.5, size=g.log_scales.shape)
        g.sh = rng.normal(size=g.sh.shape)
        m.latent.params[:] = rng.normal(scale=0.3, size=m.latent.params.shape)
        canon = g.as_posed()

        # rest pose with zero grids: identity on every field
        rest = pose_from_bones(m, bone_transforms(tpl, Pose.rest(tpl.joint_count)), m.latent.transforms(1))
        for f in ("means", "cov_factors", "opacities", "sh", "sh_rotations"):
            rest_err = max(rest_err, np.abs(getattr(rest, f) - getattr(canon, f)).max())

        # a rigid motion applied to all bones moves the posed Gaussians rigidly
        aa = rng.normal(scale=0.5, size=(tpl.joint_count, 3))
        bones = bone_transforms(tpl, Pose.from_axis_angle(aa, rng.normal(size=3)))
        lat = m.latent.transforms(2)
        T = np.eye(4)
        T[:3, :3] = axis_angle_to_rotation(rng.normal(size=3))
        T[:3, 3] = rng.normal(size=3)
        base = pose_from_bones(m, bones, lat)
        moved = pose_from_bones(m, T @ bones, T @ lat)
        rot = T[:3, :3]
        equi_err = max(
            equi_err,
            np.abs(moved.means - (base.means @ rot.T + T[:3, 3])).max(),
            np.abs(moved.covariances() - rot @ base.covariances() @ rot.T).max(),
        )
    ok = rest_err <= 1e-12 and equi_err <= 1e-9
    detail = f"rest-pose identity error {rest_err:.1e} (<= 1e-12), rigid equivariance error {equi_err:.1e} (<= 1e-9), 100 models"
    assert record_criterion(3, ok, detail)


# ---------------------------------------------------------------------------
# 4. reconstruction quality


def test_criterion_4_reconstruction():
    t0 = time.perf_counter()
    train, test, _ = generate_synthetic_sequence(SynthConfig(frames=60, width=128, height=128, n_gaussians=5000, seed=0), None, write=False)
    result = fit(train, FitConfig(iterations=3000, seed=0), model_config=ModelConfig(n_gaussians=5000, seed=0))
    scores = evaluate(result.model, test)
    elapsed = time.perf_counter() - t0
    p = float(np.mean([s.psnr for s in scores]))
    q = float(np.mean([s.ssim for s in scores]))
    ok = p >= 28.0 and q >= 0.92 and elapsed < 1800
    detail = (f"test PSNR {p:.2f} dB (>= 28), SSIM {q:.4f} (>= 0.92), {len(scores)} test frames, "
              f"{result.model.gaussians.count} Gaussians after densification, {elapsed / 60:.1f} min (< 30) on {os.cpu_count()} core(s)")
    assert record_criterion(4, ok, detail)


# ---------------------------------------------------------------------------
# 5 and 6. ablations
#
# Both use a reduced sequence (64x64 images, 2000 Gaussians, 1500 iterations)
# so that nine fits per criterion stay within the suite's time budget.


def ablation_psnr(seed, variants, **synth):
    train, test, _ = generate_synthetic_sequence(SynthConfig(width=64, height=64, n_gaussians=2000, seed=seed, **synth), None, write=False)
    out = {}
    for name in variants:
        mc, fc = apply_ablation(name, ModelConfig(n_gaussians=2000, seed=seed), FitConfig(iterations=1500, seed=seed))
        model = fit(train, fc, model_config=mc).model
        out[name] = float(np.mean([s.psnr for s in evaluate(model, test)]))
    return out


def _table(per_seed, variants):
    return "; ".join(f"seed {i}: " + ", ".join(f"{v} {r[v]:.2f}" for v in variants) for i, r in enumerate(per_seed))


def test_criterion_5_ablation_ordering():
    variants = ("full", "no-latent", "no-learnable-skinning")
    per_seed = [ablation_psnr(seed, variants, hidden_appendage=True) for seed in range(3)]
    mean = {v: float(np.mean([r[v] for r in per_seed])) for v in variants}
    gap_latent = mean["full"] - mean["no-latent"]
    gap_skinning = mean["no-latent"] - mean["no-learnable-skinning"]
    ok = gap_latent >= 0.2 and gap_skinning >= 0.2
    detail = (f"3-seed mean PSNR full {mean['full']:.2f} > no-latent {mean['no-latent']:.2f} > no-learnable-skinning "
              f"{mean['no-learnable-skinning']:.2f}; gaps {gap_latent:.2f} and {gap_skinning:.2f} dB (>= 0.2) [{_table(per_seed, variants)}]")
    assert record_criterion(5, ok, detail)


def test_criterion_6_regularizer_effect():
    variants = ("full", "no-knn", "no-vox")
    per_seed = [ablation_psnr(seed, variants, pose_noise=0.03) for seed in range(3)]
    median = {v: float(np.median([r[v] for r in per_seed])) for v in variants}
    ok = median["full"] >= median["no-knn"] and median["full"] >= median["no-vox"]
    detail = (f"median PSNR over 3 seeds, pose noise 0.03 rad: full {median['full']:.3f} vs no-knn {median['no-knn']:.3f} "
              f"and no-vox {median['no-vox']:.3f} [{_table(per_seed, variants)}]")
    assert record_criterion(6, ok, detail)


# ---------------------------------------------------------------------------
# 7. performance


def test_criterion_7_performance(tmp_path, capsys):
    assert main(["bench", "--size", "256", "--gaussians", "10000", "--csv", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    splat = float(next(r["total_ms"] for r in rows if r["renderer"] == "splat"))
    oracle = float(next(r["total_ms"] for r in rows if r["renderer"] == "oracle"))

    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"synth": {"frames": 2, "out": str(tmp_path / "data")}}))
    assert main(["synth", "--config", str(cfg)]) == 0
    capsys.readouterr()
    code = main(["render", "--checkpoint", str(tmp_path / "data/ground_truth.ckpt"), "--data", str(tmp_path / "data/train.json"),
                 "--out", str(tmp_path / "r.png"), "--bench"])
    assert code == 0
    info = read_kv([ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("fps=")][0])
    speed, cv = oracle / splat, float(info["cv"])
    ok = speed >= 10 and cv < 0.10
    detail = f"splat {splat:.0f} ms vs oracle {oracle:.0f} ms = {speed:.1f}x (>= 10x, 256x256, 10k); render --bench fps {info['fps']} cv {cv:.3f} (< 0.10)"
    with capsys.disabled():
        assert record_criterion(7, ok, detail)


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synth": {"frames": 8, "width": 32, "height": 32, "n_gaussians": 400, "grid_resolution": 8},
        "model": {"n_gaussians": 200, "grid_resolution": 8},
        "fit": {"iterations": 40, "densify_start": 10, "densify_interval": 10},
    }))
    for d in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--seed", "5", "--threads", "1", "--out", str(tmp_path / d / "data")]) == 0
        assert main(["fit", "--config", str(cfg), "--seed", "5", "--threads", "1",
                     "--data", str(tmp_path / d / "data/train.json"), "--out", str(tmp_path / d / "run")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    names = {f.name for f in files}
    assert {"model.ckpt", "loss.csv", "train.json", "ground_truth.ckpt"} <= names

    proxy, cam, _ = bench_scene(3000, 96, 0)
    renders = [render_splat(proxy, cam, threads=k).color.tobytes() for k in (1, 2, 3, 8)]
    threads_ok = all(r == renders[0] for r in renders)
    ok = same and threads_ok
    detail = f"{len(files)} dataset/checkpoint/log files byte-identical: {same}; renders at 1, 2, 3, 8 threads byte-identical: {threads_ok}"
    capsys.readouterr()
    with capsys.disabled():
        assert record_criterion(8, ok, detail)
