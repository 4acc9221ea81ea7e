"""Command-line entry point: ``skinsplat {synth,fit,render,eval,bench}``.

Every subcommand reads an optional JSON config (``--config``); command-line
flags override file values. Exit codes: 0 success, 2 usage / config / IO
problems, 3 numerical failure during fitting.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import gc
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import render as rnd
from .data import (
    CheckpointError,
    FrameDataset,
    ImageFormatError,
    SynthConfig,
    camera_from_dict,
    generate_synthetic_sequence,
    load_model,
    quantize,
    save_model,
    synth_config_dict,
    write_image,
)
from .loss import psnr, ssim
from .model import ModelConfig, PosedGaussians, articulate_with_cache
from .optim import ABLATIONS, FitConfig, NumericalError, apply_ablation, evaluate, fit
from .template import InvalidStateError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# request sections (paths and switches that are not part of a library config)


@dataclass
class SynthRequest:
    out: str = "data"


@dataclass
class FitRequest:
    data: str = "data/train.json"
    # None: test.json next to the training manifest, when present
    test: str | None = None
    out: str = "run"
    ablate: str = "full"
    log_every: int = 100


@dataclass
class RenderRequest:
    checkpoint: str = "run/model.ckpt"
    data: str | None = None
    frame: int = 0
    # fitted poses written by ``fit``; overrides the manifest pose of the frame
    poses: str | None = None
    # novel pose JSON: axis_angle, root_translation, optional frame and camera
    pose_file: str | None = None
    out: str = "render.png"
    bench: bool = False
    bench_renders: int = 100
    warmup: int = 10


@dataclass
class EvalRequest:
    checkpoint: str = "run/model.ckpt"
    data: str = "data/test.json"
    csv: str | None = None
    refine_steps: int = 0


@dataclass
class BenchRequest:
    # None: a random synthetic scene of ``gaussians`` components
    checkpoint: str | None = None
    size: int = 256
    gaussians: int = 10000
    repeat: int = 1
    csv: str | None = None
    # oracle step as a fraction of the scene extent
    step_fraction: float = 1.0 / 256.0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    synth: SynthRequest = field(default_factory=SynthRequest)
    synth_config: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fit: FitRequest = field(default_factory=FitRequest)
    fit_config: FitConfig = field(default_factory=FitConfig)
    render: RenderRequest = field(default_factory=RenderRequest)
    eval: EvalRequest = field(default_factory=EvalRequest)
    bench: BenchRequest = field(default_factory=BenchRequest)

    def to_dict(self) -> dict:
        fc = asdict(self.fit_config)
        return {
            "seed": self.seed,
            "threads": self.threads,
            "synth": {**asdict(self.synth), **_drop_seed(synth_config_dict(self.synth_config))},
            "model": _drop_seed(asdict(self.model)),
            "fit": {**asdict(self.fit), **_drop_seed(fc)},
            "render": asdict(self.render),
            "eval": asdict(self.eval),
            "bench": asdict(self.bench),
        }


def _drop_seed(d: dict) -> dict:
    d.pop("seed", None)
    return d


# sections split across a request and a library config; ``seed`` lives only at the top level
_SECTIONS = {
    "synth": (("synth", SynthRequest), ("synth_config", SynthConfig)),
    "model": (("model", ModelConfig),),
    "fit": (("fit", FitRequest), ("fit_config", FitConfig)),
    "render": (("render", RenderRequest),),
    "eval": (("eval", EvalRequest),),
    "bench": (("bench", BenchRequest),),
}


def _coerce(default, value):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(name: str, data: dict, cfg: RunConfig) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    targets = _SECTIONS[name]
    owner = {}
    for attr, cls in targets:
        for f in fields(cls):
            if f.name != "seed":
                owner.setdefault(f.name, attr)
    unknown = sorted(set(data) - set(owner))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    for attr, cls in targets:
        current = getattr(cfg, attr)
        updates = {k: _coerce(getattr(current, k), v) for k, v in data.items() if owner[k] == attr}
        if "motion" in updates:
            updates["motion"] = {j: (list(a), float(p), list(o)) for j, (a, p, o) in updates["motion"].items()}
        try:
            setattr(cfg, attr, dataclasses.replace(current, **updates))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in raw.items():
        if key in ("seed", "threads"):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key} must be an integer")
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            _build_section(key, value, cfg)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return cfg


def _apply_seed(cfg: RunConfig) -> None:
    # one seed drives every random stream
    cfg.synth_config = dataclasses.replace(cfg.synth_config, seed=cfg.seed)
    cfg.model = dataclasses.replace(cfg.model, seed=cfg.seed)
    cfg.fit_config = dataclasses.replace(cfg.fit_config, seed=cfg.seed)


# ---------------------------------------------------------------------------
# argument parsing


def _override(cfg: RunConfig, args, mapping) -> None:
    """Copy non-None flag values onto ``cfg``; ``mapping`` maps flag -> (section attr, field)."""
    for flag, (attr, name) in mapping.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = getattr(cfg, attr)
        try:
            setattr(cfg, attr, dataclasses.replace(target, **{name: value}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--{flag.replace('_', '-')}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skinsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--out")
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int, help="image width and height")
    p.add_argument("--gaussians", type=int)
    p.add_argument("--hidden-appendage", action="store_true", default=None)
    p.add_argument("--pose-noise", type=float)

    p = common(sub.add_parser("fit", help="fit a model to a training split"))
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--gaussians", type=int)
    p.add_argument("--ablate", choices=ABLATIONS)

    p = common(sub.add_parser("render", help="render a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--frame", type=int)
    p.add_argument("--poses")
    p.add_argument("--pose-file")
    p.add_argument("--out")
    p.add_argument("--bench", action="store_true", default=None)
    p.add_argument("--bench-renders", type=int)

    p = common(sub.add_parser("eval", help="score a checkpoint on a split"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--csv")
    p.add_argument("--refine-steps", type=int)

    p = common(sub.add_parser("bench", help="time splatting against the ray-march oracle"))
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int)
    p.add_argument("--gaussians", type=int)
    p.add_argument("--repeat", type=int)
    p.add_argument("--csv")
    return parser


_FLAGS = {
    "synth": {
        "out": ("synth", "out"),
        "frames": ("synth_config", "frames"),
        "gaussians": ("synth_config", "n_gaussians"),
        "hidden_appendage": ("synth_config", "hidden_appendage"),
        "pose_noise": ("synth_config", "pose_noise"),
    },
    "fit": {
        "data": ("fit", "data"),
        "test": ("fit", "test"),
        "out": ("fit", "out"),
        "ablate": ("fit", "ablate"),
        "iterations": ("fit_config", "iterations"),
        "gaussians": ("model", "n_gaussians"),
    },
    "render": {k: ("render", k) for k in ("checkpoint", "data", "frame", "poses", "pose_file", "out", "bench", "bench_renders")},
    "eval": {k: ("eval", k) for k in ("checkpoint", "data", "csv", "refine_steps")},
    "bench": {k: ("bench", k) for k in ("checkpoint", "size", "gaussians", "repeat", "csv")},
}


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    _override(cfg, args, _FLAGS[args.command])
    if args.command == "synth" and args.size is not None:
        cfg.synth_config = dataclasses.replace(cfg.synth_config, width=args.size, height=args.size)
    _apply_seed(cfg)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.synth.out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    train, test, gt = generate_synthetic_sequence(cfg.synth_config, out)
    with open(out / "synth_config.json", "w") as fh:
        json.dump(synth_config_dict(cfg.synth_config), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"frames={cfg.synth_config.frames} gaussians={gt.gaussians.count} train={len(train)} test={len(test)} out={out}")
    return EXIT_OK


def _load_dataset(path) -> FrameDataset:
    try:
        return FrameDataset.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset manifest not found: {path}") from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed manifest ({exc})") from exc


def _mean_scores(scores):
    return float(np.mean([s.psnr for s in scores])), float(np.mean([s.ssim for s in scores]))


def _write_scores(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time", "psnr", "ssim"])
        for s in scores:
            w.writerow([s.index, s.time, f"{s.psnr:.6f}", f"{s.ssim:.6f}"])


def _dataset_with_poses(ds: FrameDataset, aa, tr) -> FrameDataset:
    frames = [dataclasses.replace(f, axis_angle=aa[i], root_translation=tr[i]) for i, f in enumerate(ds.frames)]
    return dataclasses.replace(ds, frames=frames)


def write_poses(path, ds: FrameDataset, aa, tr) -> None:
    doc = {
        "frames": [
            {"index": f.index, "time": f.time, "axis_angle": aa[i].tolist(), "root_translation": tr[i].tolist()}
            for i, f in enumerate(ds.frames)
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def cmd_fit(cfg: RunConfig) -> int:
    req = cfg.fit
    train = _load_dataset(req.data)
    test_path = Path(req.test) if req.test else Path(req.data).with_name("test.json")
    test = _load_dataset(test_path) if (req.test or test_path.exists()) else None
    mc, fc = apply_ablation(req.ablate, cfg.model, cfg.fit_config)
    out = Path(req.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    ckpt = out / "model.ckpt"
    t0 = time.perf_counter()

    def progress(step, lr):
        if req.log_every and step % req.log_every == 0:
            print(f"step={step} loss={lr.total:.6f} l1={lr.l1:.6f}", file=sys.stderr, flush=True)

    try:
        result = fit(train, fc, model_config=mc, checkpoint_path=ckpt, progress=progress)
    except NumericalError as exc:
        print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_NUMERIC
    elapsed = time.perf_counter() - t0
    save_model(result.model, ckpt)
    result.write_csv(out / "loss.csv")
    write_poses(out / "poses.json", train, result.axis_angles, result.root_translations)
    fitted_train = _dataset_with_poses(train, result.axis_angles, result.root_translations)
    train_scores = evaluate(result.model, fitted_train)
    _write_scores(out / "train_scores.csv", train_scores)
    summary = {"train_psnr": _mean_scores(train_scores)[0], "train_ssim": _mean_scores(train_scores)[1]}
    if test is not None:
        test_scores = evaluate(result.model, test)
        _write_scores(out / "test_scores.csv", test_scores)
        summary["test_psnr"], summary["test_ssim"] = _mean_scores(test_scores)
    summary["gaussians"] = result.model.gaussians.count
    summary["seconds"] = elapsed
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _render_request_scene(req: RenderRequest):
    """Resolve the posed Gaussians, camera, reference image and background for ``render``."""
    model = _load_checkpoint(req.checkpoint)
    ds = _load_dataset(req.data) if req.data else None
    reference = None
    if req.pose_file:
        doc = _read_json(req.pose_file)
        try:
            aa = np.asarray(doc["axis_angle"], dtype=np.float64)
            tr = np.asarray(doc.get("root_translation", [0.0, 0.0, 0.0]), dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{req.pose_file}: bad pose ({exc})") from exc
        time_index = doc.get("frame")
        if "camera" in doc:
            cam = camera_from_dict(doc["camera"])
        elif ds is not None:
            cam = ds.frames[req.frame].camera
        else:
            raise ConfigError("a novel pose needs a camera: put one in the pose file or pass --data")
    else:
        if ds is None:
            raise ConfigError("render needs --data (a manifest frame) or --pose-file")
        if not 0 <= req.frame < len(ds):
            raise ConfigError(f"frame {req.frame} outside dataset of {len(ds)} frames")
        fr = ds.frames[req.frame]
        aa, tr, cam, time_index = fr.axis_angle, fr.root_translation, fr.camera, fr.time
        if req.poses:
            entries = _read_json(req.poses).get("frames", [])
            match = [e for e in entries if e.get("index") == req.frame]
            if not match:
                raise ConfigError(f"{req.poses}: no pose for frame {req.frame}")
            aa = np.asarray(match[0]["axis_angle"], dtype=np.float64)
            tr = np.asarray(match[0]["root_translation"], dtype=np.float64)
        reference = fr.image()
    bg = ds.background if ds is not None else (0.0, 0.0, 0.0)
    try:
        posed = articulate_with_cache(model, aa, tr, time_index)[0]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return posed, cam, reference, bg


def cmd_render(cfg: RunConfig) -> int:
    req = cfg.render
    posed, cam, reference, bg = _render_request_scene(req)
    out = rnd.render_splat(posed, cam, bg)
    img = quantize(out.color)
    write_image(req.out, img)
    line = f"wrote {req.out}"
    if reference is not None:
        line += f" psnr={psnr(img, reference):.4f} ssim={ssim(img, reference):.4f}"
    print(line)
    if req.bench:
        if req.bench_renders < 100:
            raise ConfigError("--bench-renders must be at least 100")
        for _ in range(req.warmup):
            rnd.render_splat(posed, cam, bg)
        times = np.empty(req.bench_renders)
        gc.disable()
        try:
            for i in range(req.bench_renders):
                t = time.perf_counter()
                rnd.render_splat(posed, cam, bg)
                times[i] = time.perf_counter() - t
        finally:
            gc.enable()
        cv = float(np.std(times) / np.mean(times))
        print(f"fps={1.0 / np.mean(times):.3f} cv={cv:.4f} renders={req.bench_renders}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    req = cfg.eval
    model = _load_checkpoint(req.checkpoint)
    ds = _load_dataset(req.data)
    scores = evaluate(model, ds, refine_steps=req.refine_steps)
    if req.csv:
        _write_scores(req.csv, scores)
    print(f"{'index':>5} {'time':>5} {'psnr':>9} {'ssim':>7}")
    for s in scores:
        print(f"{s.index:>5} {s.time:>5} {s.psnr:>9.4f} {s.ssim:>7.4f}")
    mp, ms = _mean_scores(scores)
    print(f"mean_psnr={mp:.4f} mean_ssim={ms:.4f} frames={len(scores)}")
    return EXIT_OK


def _square_camera(eye, target, size, focal):
    c = (size - 1) / 2.0
    return rnd.Camera.from_intrinsics(focal, focal, c, c, size, size, rnd.look_at(eye, target))


def bench_scene(n: int, size: int, seed: int):
    """Random degree-0 scene of ``n`` Gaussians in a unit cube, seen from 3 units away."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-0.5, 0.5, size=(n, 3))
    scale = 0.5 / n ** (1.0 / 3.0)
    factors = np.eye(3)[None] * rng.uniform(0.3 * scale, scale, size=(n, 1, 1))
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = rng.uniform(0.0, 1.0, size=(n, 3)) / 0.28209479177387814
    posed = PosedGaussians(
        means=means,
        cov_factors=factors,
        opacities=rng.uniform(0.2, 0.9, size=n),
        sh=sh,
        sh_rotations=np.tile(np.eye(3), (n, 1, 1)),
        sh_degree=0,
    )
    return posed, _square_camera((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), size, 1.2 * size), 1.0


def _checkpoint_scene(path, size):
    model = _load_checkpoint(path)
    g = model.gaussians.as_posed()
    lo, hi = g.means.min(0), g.means.max(0)
    extent = float((hi - lo).max())
    center = 0.5 * (lo + hi)
    eye = center + np.array([0.0, 0.0, 3.0 * extent])
    return g, _square_camera(eye, center, size, 1.5 * size), extent


def cmd_bench(cfg: RunConfig) -> int:
    req = cfg.bench
    if req.repeat < 1 or req.size < 1 or req.gaussians < 1:
        raise ConfigError("repeat, size and gaussians must be positive")
    if req.checkpoint:
        posed, cam, extent = _checkpoint_scene(req.checkpoint, req.size)
    else:
        posed, cam, extent = bench_scene(req.gaussians, req.size, cfg.seed)
    step = extent * req.step_fraction
    header = ["renderer", "repeat", "width", "height", "gaussians", "total_ms", "project_ms", "sort_ms", "composite_ms"]
    rows = []
    for r in range(req.repeat):
        out = rnd.render_splat(posed, cam)
        tm = out.timings
        rows.append(["splat", r, cam.width, cam.height, posed.count, sum(tm.values()) * 1e3,
                     tm["project"] * 1e3, tm["sort"] * 1e3, tm["composite"] * 1e3])
        t = time.perf_counter()
        rnd.render_raymarch_oracle(posed, cam, step=step)
        total = time.perf_counter() - t
        rows.append(["oracle", r, cam.width, cam.height, posed.count, total * 1e3, "", "", total * 1e3])
    splat = np.mean([row[5] for row in rows if row[0] == "splat"])
    oracle = np.mean([row[5] for row in rows if row[0] == "oracle"])
    fmt = [[f"{v:.3f}" if isinstance(v, float) else v for v in row] for row in rows]
    if req.csv:
        with open(req.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(fmt)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(fmt)
    print(f"# speedup={oracle / splat:.2f} backend={rnd.BACKEND} step={step:.6g}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return EXIT_OK
        rnd.set_threads(cfg.threads)
        return COMMANDS[args.command](cfg)
    except (ConfigError, OSError, CheckpointError, ImageFormatError, InvalidStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
