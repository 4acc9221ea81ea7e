"""Image I/O, model checkpoints, dataset manifests and the synthetic sequence generator.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SKSPLAT\\x00"
    offset 8   uint32    format version
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          float64 sections, back to back, in header order

The header lists every section with its name and shape, so a reader never
needs to seek.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import SH_C0, RigidTransform, axis_angle_to_rotation, rotation_to_axis_angle
from .model import (
    AvatarModel,
    GaussianMixture,
    LatentBoneTable,
    ModelConfig,
    SkinningGrid,
    init_from_template,
    logit,
)
from .render import Camera, look_at, render_splat
from .template import (
    BipedConfig,
    Capsule,
    KinematicTemplate,
    bone_transforms_axis_angle,
    build_synthetic_biped,
)

MAGIC = b"SKSPLAT\x00"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1


class ImageFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    """Malformed checkpoint; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VersionMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# images


def _check_png(path) -> Path:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageFormatError(f"unsupported image format {path.suffix or '(none)'!r}; only PNG is supported")
    return path


def write_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) image in [0, 1] as an 8-bit RGB PNG."""
    path = _check_png(path)
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG", optimize=False)


def quantize(image: np.ndarray) -> np.ndarray:
    """The values an image takes after a PNG round trip."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def read_image(path) -> np.ndarray:
    path = _check_png(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path} holds {im.format} data, expected PNG")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# template / camera (de)serialization


def template_to_dict(tpl: KinematicTemplate) -> dict:
    return {
        "joint_names": list(tpl.joint_names),
        "parents": [int(p) for p in tpl.parents],
        "rest_transforms": tpl.rest_transforms.tolist(),
        "skinning_sigma": float(tpl.skinning_sigma),
        "sample_positions": tpl.sample_positions.tolist(),
        "sample_weights": tpl.sample_weights.tolist(),
        "capsules": [
            {"joint": c.joint, "start": c.start.tolist(), "end": c.end.tolist(), "radius": float(c.radius)}
            for c in tpl.capsules
        ],
    }


def template_from_dict(d: dict) -> KinematicTemplate:
    caps = [Capsule(c["joint"], np.array(c["start"]), np.array(c["end"]), c["radius"]) for c in d.get("capsules", [])]
    return KinematicTemplate(
        parents=np.array(d["parents"]),
        rest_transforms=np.array(d["rest_transforms"]),
        sample_positions=np.array(d["sample_positions"]),
        sample_weights=np.array(d["sample_weights"]),
        skinning_sigma=d["skinning_sigma"],
        joint_names=list(d.get("joint_names", [])),
        capsules=caps,
    )


def camera_to_dict(cam: Camera) -> dict:
    return {
        "K": cam.K.ravel().tolist(),
        "rotation": cam.extrinsics.rotation.ravel().tolist(),
        "translation": cam.extrinsics.translation.tolist(),
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def camera_from_dict(d: dict) -> Camera:
    ext = RigidTransform(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))
    return Camera(np.array(d["K"]).reshape(3, 3), ext, int(d["width"]), int(d["height"]), d["near"], d["far"])


# ---------------------------------------------------------------------------
# checkpoints


def _model_sections(model: AvatarModel) -> list[tuple[str, np.ndarray]]:
    g = model.gaussians
    tpl = model.template
    out = [
        ("means", g.means),
        ("rotations", g.rotations),
        ("log_scales", g.log_scales),
        ("opacity_logits", g.opacity_logits),
        ("sh", g.sh),
        ("grid_lower", model.skinning.lower),
        ("grid_upper", model.skinning.upper),
        ("delta_grid", model.skinning.delta),
        ("latent_grid", model.skinning.latent),
        ("latent_table", model.latent.params),
        ("template_rest_transforms", tpl.rest_transforms),
        ("template_sample_positions", tpl.sample_positions),
        ("template_sample_weights", tpl.sample_weights),
    ]
    if not model.uses_grid:
        out += [("free_delta", model.free_delta), ("free_latent", model.free_latent)]
    return out


def save_model(model: AvatarModel, path) -> None:
    sections = _model_sections(model)
    tpl = model.template
    header = {
        "version": FORMAT_VERSION,
        "N": model.gaussians.count,
        "n_b": tpl.joint_count,
        "n_l": model.n_latent,
        "sh_degree": model.gaussians.sh_degree,
        "frames": model.latent.frames,
        "grid": {"resolution": list(model.skinning.resolution)},
        "template": {
            "joint_names": list(tpl.joint_names),
            "parents": [int(p) for p in tpl.parents],
            "skinning_sigma": float(tpl.skinning_sigma),
            "capsules": [
                {"joint": c.joint, "start": c.start.tolist(), "end": c.end.tolist(), "radius": float(c.radius)}
                for c in tpl.capsules
            ],
        },
        "sections": [{"name": n, "shape": list(a.shape)} for n, a in sections],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in sections:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, offset: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated file while reading {what}: wanted {n} bytes, got {len(data)}", offset + len(data))
    return data


def load_model(path) -> AvatarModel:
    """Read a checkpoint written by :func:`save_model` in one forward pass."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise VersionMismatchError(f"not a model checkpoint: magic {magic!r}", 0)
        version, hlen = struct.unpack("<II", _read_exact(fh, 8, 8, "version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, this reader supports {FORMAT_VERSION}", 8)
        try:
            header = json.loads(_read_exact(fh, hlen, 16, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}", 16) from None
        offset = 16 + hlen
        arrays = {}
        for sec in header["sections"]:
            shape = tuple(sec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * count, offset, f"section {sec['name']}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            bad = np.flatnonzero(~np.isfinite(arr.ravel()))
            if len(bad):
                raise CheckpointError(f"non-finite value in section {sec['name']}", offset + 8 * int(bad[0]))
            arrays[sec["name"]] = arr
            offset += 8 * count
        if fh.read(1):
            raise CheckpointError("trailing bytes after last section", offset)
    th = header["template"]
    tpl = KinematicTemplate(
        parents=np.array(th["parents"]),
        rest_transforms=arrays["template_rest_transforms"],
        sample_positions=arrays["template_sample_positions"],
        sample_weights=arrays["template_sample_weights"],
        skinning_sigma=th["skinning_sigma"],
        joint_names=th["joint_names"],
        capsules=[Capsule(c["joint"], np.array(c["start"]), np.array(c["end"]), c["radius"]) for c in th["capsules"]],
    )
    gm = GaussianMixture(
        arrays["means"], arrays["rotations"], arrays["log_scales"], arrays["opacity_logits"], arrays["sh"],
        int(header["sh_degree"]),
    )
    grid = SkinningGrid(arrays["grid_lower"], arrays["grid_upper"], arrays["delta_grid"], arrays["latent_grid"])
    return AvatarModel(
        tpl, gm, grid, LatentBoneTable(arrays["latent_table"]), arrays.get("free_delta"), arrays.get("free_latent")
    )


def checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise VersionMismatchError("not a model checkpoint", 0)
        _, hlen = struct.unpack("<II", _read_exact(fh, 8, 8, "version"))
        return json.loads(_read_exact(fh, hlen, 16, "header"))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Frame:
    index: int  # position within the split
    time: int  # frame number in the full sequence (latent table row)
    camera: Camera
    axis_angle: np.ndarray
    root_translation: np.ndarray
    image_path: Path | None = None
    pixels: np.ndarray | None = None

    def image(self) -> np.ndarray:
        if self.pixels is None:
            if self.image_path is None:
                raise ValueError(f"frame {self.index} has neither pixels nor an image path")
            img = read_image(self.image_path)
            if img.shape[:2] != (self.camera.height, self.camera.width):
                raise ValueError(f"{self.image_path}: image size does not match its camera")
            self.pixels = img
        return self.pixels


@dataclass
class FrameDataset:
    template: KinematicTemplate
    frames: list[Frame]
    split: str = "train"
    sequence_length: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    root: Path | None = None
    ground_truth: str | None = None

    def __post_init__(self):
        if [f.index for f in self.frames] != list(range(len(self.frames))):
            raise ValueError("frame indices must be contiguous from 0")
        if self.frames:
            self.sequence_length = max(self.sequence_length, max(f.time for f in self.frames) + 1)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def ground_truth_path(self) -> Path | None:
        if self.ground_truth is None or self.root is None:
            return None
        return self.root / self.ground_truth

    def to_manifest(self) -> dict:
        return {
            "schema_version": MANIFEST_VERSION,
            "split": self.split,
            "sequence_length": self.sequence_length,
            "background": list(self.background),
            "ground_truth": self.ground_truth,
            "template": template_to_dict(self.template),
            "frames": [
                {
                    "index": f.index,
                    "time": f.time,
                    "image": None if f.image_path is None else str(Path(f.image_path).relative_to(self.root)),
                    "camera": camera_to_dict(f.camera),
                    "pose": {
                        "axis_angle": np.asarray(f.axis_angle).tolist(),
                        "root_translation": np.asarray(f.root_translation).tolist(),
                    },
                }
                for f in self.frames
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            json.dump(self.to_manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FrameDataset":
        path = Path(path)
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema_version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest schema version {d.get('schema_version')!r}")
        root = path.parent
        frames = [
            Frame(
                index=f["index"],
                time=f["time"],
                camera=camera_from_dict(f["camera"]),
                axis_angle=np.array(f["pose"]["axis_angle"], dtype=np.float64),
                root_translation=np.array(f["pose"]["root_translation"], dtype=np.float64),
                image_path=None if f["image"] is None else root / f["image"],
            )
            for f in d["frames"]
        ]
        return cls(
            template_from_dict(d["template"]),
            frames,
            d["split"],
            d["sequence_length"],
            tuple(d["background"]),
            root,
            d.get("ground_truth"),
        )


# ---------------------------------------------------------------------------
# synthetic sequences


def _default_motion() -> dict:
    # joint -> (amplitude xyz, phase, offset xyz); axis-angle radians
    half = np.pi
    return {
        "spine": ([0.10, 0.15, 0.0], 0.0, [0.0, 0.0, 0.0]),
        "head": ([0.15, 0.25, 0.0], 1.0, [0.0, 0.0, 0.0]),
        "l_shoulder": ([0.0, 0.3, 0.45], 0.0, [0.0, 0.0, -0.7]),
        "l_elbow": ([0.0, 0.5, 0.0], 0.5, [0.0, 0.5, 0.0]),
        "r_shoulder": ([0.0, 0.3, 0.45], half, [0.0, 0.0, 0.7]),
        "r_elbow": ([0.0, 0.5, 0.0], half + 0.5, [0.0, -0.5, 0.0]),
        "l_hip": ([0.5, 0.0, 0.05], 0.0, [0.0, 0.0, 0.0]),
        "l_knee": ([0.4, 0.0, 0.0], -0.5 * half, [0.4, 0.0, 0.0]),
        "r_hip": ([0.5, 0.0, 0.05], half, [0.0, 0.0, 0.0]),
        "r_knee": ([0.4, 0.0, 0.0], 0.5 * half, [0.4, 0.0, 0.0]),
    }


@dataclass
class SynthConfig:
    frames: int = 60
    width: int = 128
    height: int = 128
    focal_scale: float = 1.5  # focal length in units of image width
    orbit_radius: float = 3.0
    orbit_height: float = 0.4
    orbit_degrees: float = 120.0
    target: tuple = (0.0, -0.07, 0.0)
    motion_scale: float = 1.0
    motion_cycles: float = 2.0
    motion: dict = field(default_factory=_default_motion)
    root_bob: float = 0.02
    hidden_appendage: bool = False
    appendage_amplitude: float = 0.4
    appendage_cycles: float = 3.0
    appendage_fraction: float = 0.15
    n_gaussians: int = 5000
    sh_degree: int = 1
    view_dependence: float = 0.1
    opacity: float = 0.9
    skinning_perturbation: float = 0.3
    pose_noise: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    grid_resolution: int = 32
    seed: int = 0
    biped: BipedConfig = field(default_factory=BipedConfig)

    def __post_init__(self):
        if isinstance(self.biped, dict):
            self.biped = BipedConfig(**self.biped)
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        if self.pose_noise < 0:
            raise ValueError("pose noise must be >= 0")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        unknown = set(self.motion) - set(_default_motion())
        if unknown:
            raise ValueError(f"motion script names unknown joints: {sorted(unknown)}")


# skirt-like shell around the upper legs, elliptical so it stays inside the grid
SKIRT_AXES = (0.21, 0.12)
SKIRT_TOP, SKIRT_BOTTOM = -0.12, -0.42
SKIRT_PIVOT = np.array([0.0, -0.08, 0.0])


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def appendage_mask(points: np.ndarray) -> np.ndarray:
    """Smooth indicator of the region carried by the hidden bone."""
    rho = np.hypot(points[..., 0] / SKIRT_AXES[0], points[..., 2] / SKIRT_AXES[1])
    radial = _smoothstep(0.78, 0.92, rho)
    vertical = _smoothstep(SKIRT_TOP + 0.03, SKIRT_TOP - 0.01, points[..., 1]) * _smoothstep(
        SKIRT_BOTTOM - 0.06, SKIRT_BOTTOM - 0.02, points[..., 1]
    )
    return radial * vertical


def _skirt_samples(n: int, rng) -> np.ndarray:
    phi = rng.uniform(0, 2 * np.pi, n)
    y = rng.uniform(SKIRT_BOTTOM, SKIRT_TOP, n)
    # flare slightly towards the hem
    flare = 1.0 + 0.1 * (SKIRT_TOP - y) / (SKIRT_TOP - SKIRT_BOTTOM)
    return np.stack([SKIRT_AXES[0] * flare * np.cos(phi), y, SKIRT_AXES[1] * np.sin(phi)], axis=1)


def motion_axis_angles(cfg: SynthConfig, tpl: KinematicTemplate) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free joint axis-angles (M, n_b, 3) and root translations (M, 3)."""
    m = cfg.frames
    t = np.arange(m)
    aa = np.zeros((m, tpl.joint_count, 3))
    names = list(tpl.joint_names)
    w = 2.0 * np.pi * cfg.motion_cycles / m
    for joint, (amp, phase, offset) in cfg.motion.items():
        k = names.index(joint)
        aa[:, k] = cfg.motion_scale * (np.asarray(offset) + np.sin(w * t + phase)[:, None] * np.asarray(amp))
    root = np.zeros((m, 3))
    root[:, 1] = cfg.motion_scale * cfg.root_bob * np.sin(2.0 * w * t)
    return aa, root


def appendage_transforms(cfg: SynthConfig, tpl: KinematicTemplate, aa: np.ndarray, root: np.ndarray) -> np.ndarray:
    """Per-frame world transforms (M, 4, 4) of the hidden pendulum bone."""
    m = cfg.frames
    w = 2.0 * np.pi * cfg.appendage_cycles / m
    out = np.empty((m, 4, 4))
    pelvis = tpl.joint_names.index("pelvis")
    for i in range(m):
        bones = bone_transforms_axis_angle(tpl, aa[i], root[i])
        theta = cfg.appendage_amplitude * np.sin(w * i)
        swing = np.eye(4)
        swing[:3, :3] = axis_angle_to_rotation(np.array([theta, 0.0, 0.0]))
        swing[:3, 3] = SKIRT_PIVOT - swing[:3, :3] @ SKIRT_PIVOT
        out[i] = bones[pelvis] @ swing
    return out


def _parent_shift(weights: np.ndarray, parents: np.ndarray) -> np.ndarray:
    shifted = np.zeros_like(weights)
    for b, p in enumerate(parents):
        shifted[..., p if p >= 0 else b] += weights[..., b]
    return shifted


def build_ground_truth(cfg: SynthConfig, tpl: KinematicTemplate, aa: np.ndarray, root: np.ndarray) -> AvatarModel:
    rng = np.random.default_rng(cfg.seed + 1)
    n_app = int(round(cfg.appendage_fraction * cfg.n_gaussians)) if cfg.hidden_appendage else 0
    mc = ModelConfig(
        n_gaussians=cfg.n_gaussians - n_app,
        sh_degree=cfg.sh_degree,
        n_latent=1 if cfg.hidden_appendage else 0,
        grid_resolution=cfg.grid_resolution,
        latent_init_std=0.0,
        frames=cfg.frames,
        seed=cfg.seed + 2,
    )
    model = init_from_template(tpl, mc)
    g = model.gaussians
    if n_app:
        from scipy.spatial import cKDTree

        pts = _skirt_samples(n_app, rng)
        d, _ = cKDTree(pts).query(pts, k=4)
        scale = 0.5 * d[:, 1:].mean(1)
        g.means = np.concatenate([g.means, pts])
        g.rotations = np.concatenate([g.rotations, np.tile([1.0, 0, 0, 0], (n_app, 1))])
        g.log_scales = np.concatenate([g.log_scales, np.repeat(np.log(scale)[:, None], 3, axis=1)])
        g.opacity_logits = np.concatenate([g.opacity_logits, np.zeros(n_app)])
        g.sh = np.concatenate([g.sh, np.zeros((n_app,) + g.sh.shape[1:])])
    n = g.count
    g.opacity_logits[:] = float(logit(cfg.opacity))

    # colour: per-joint palette modulated by smooth stripes, plus mild view dependence
    palette = rng.uniform(0.25, 0.85, size=(tpl.joint_count, 3))
    prior = tpl.prior_skinning(g.means)
    base = prior @ palette
    freq = rng.normal(size=(3, 3)) * 12.0
    stripes = 0.5 + 0.5 * np.sin(g.means @ freq + rng.uniform(0, 2 * np.pi, 3))
    color = base * (0.7 + 0.3 * stripes)
    if n_app:
        skirt = np.array([0.85, 0.3, 0.35]) * (0.75 + 0.25 * stripes[-n_app:])
        color[-n_app:] = skirt
    g.sh[:, :, 0] = (np.clip(color, 0.05, 0.95)) / SH_C0
    if g.sh.shape[2] > 1:
        g.sh[:, :, 1:4] = rng.normal(scale=cfg.view_dependence, size=(n, 3, 3))

    # skinning: smooth instance-specific deviation from the prior, and the hidden bone
    nodes = model.skinning.node_positions().reshape(-1, 3)
    node_prior = tpl.prior_skinning(nodes)
    k = rng.normal(size=(3,)) * 6.0
    phi = 0.5 + 0.5 * np.sin(nodes @ k + rng.uniform(0, 2 * np.pi))
    delta = cfg.skinning_perturbation * phi[:, None] * (_parent_shift(node_prior, tpl.parents) - node_prior)
    if cfg.hidden_appendage:
        mask = appendage_mask(nodes)[:, None]
        delta = (1.0 - mask) * delta - mask * node_prior
        model.skinning.latent[:] = mask.reshape(model.skinning.latent.shape)
        tr = appendage_transforms(cfg, tpl, aa, root)
        model.latent.params[:, 0, :3] = rotation_to_axis_angle(tr[:, :3, :3])
        model.latent.params[:, 0, 3:] = tr[:, :3, 3]
    model.skinning.delta[:] = delta.reshape(model.skinning.delta.shape)
    return model


def orbit_camera(cfg: SynthConfig, i: int) -> Camera:
    ang = np.deg2rad(cfg.orbit_degrees) * i / max(cfg.frames - 1, 1)
    target = np.asarray(cfg.target, dtype=np.float64)
    eye = target + np.array([cfg.orbit_radius * np.sin(ang), cfg.orbit_height, cfg.orbit_radius * np.cos(ang)])
    f = cfg.focal_scale * cfg.width
    return Camera.from_intrinsics(
        f, f, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0, cfg.width, cfg.height, look_at(eye, target), 0.1, 20.0
    )


def generate_synthetic_sequence(cfg: SynthConfig, out_dir, write: bool = True):
    """Build, render and (optionally) write a synthetic sequence.

    Returns ``(train, test, ground_truth_model)``. Train frames are
    0, 4, 8, ...; test frames are 2, 6, 10, ....
    """
    tpl = build_synthetic_biped(cfg.biped)
    aa, root = motion_axis_angles(cfg, tpl)
    gt = build_ground_truth(cfg, tpl, aa, root)
    noise_rng = np.random.default_rng(cfg.seed + 3)
    exported = aa + noise_rng.normal(scale=cfg.pose_noise, size=aa.shape) if cfg.pose_noise > 0 else aa.copy()

    out = Path(out_dir) if out_dir is not None else None
    if write:
        try:
            (out / "images").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    from .model import articulate_with_cache

    cams, images, paths = [], [], []
    for i in range(cfg.frames):
        cam = orbit_camera(cfg, i)
        posed = articulate_with_cache(gt, aa[i], root[i], i)[0]
        img = quantize(render_splat(posed, cam, cfg.background).color)
        cams.append(cam)
        images.append(img)
        if write:
            p = out / "images" / f"frame_{i:04d}.png"
            write_image(p, img)
            paths.append(p)
        else:
            paths.append(None)
    gt_name = "ground_truth.ckpt"
    if write:
        save_model(gt, out / gt_name)

    def split(name, start):
        times = list(range(start, cfg.frames, 4))
        frames = [
            Frame(j, t, cams[t], exported[t].copy(), root[t].copy(), paths[t], images[t]) for j, t in enumerate(times)
        ]
        ds = FrameDataset(tpl, frames, name, cfg.frames, tuple(cfg.background), out, gt_name if write else None)
        if write:
            ds.save(out / f"{name}.json")
        return ds

    return split("train", 0), split("test", 2), gt


def synth_config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["motion"] = {k: [list(a), p, list(o)] for k, (a, p, o) in cfg.motion.items()}
    return d
