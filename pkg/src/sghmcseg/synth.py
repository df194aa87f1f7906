"""Synthetic cardiac-like segmentation scenes with a controllable domain shift.

Each scene is a bright disk (class 1, "LV") inside an annulus (class 2,
"MYO") with a crescent-shaped blob on one side (class 3, "RV") over a
textured background (class 0).  All structures lie inside the inscribed
circle of the frame, so any rotation about the image centre keeps them in
view.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

SPLITS = ("train", "val", "test_in", "test_shift")
CLASS_NAMES = ("background", "LV", "MYO", "RV")


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    lv_radius: tuple[float, float] = (3.0, 4.5)
    myo_thickness: tuple[float, float] = (1.5, 2.5)
    rv_axes: tuple[tuple[float, float], tuple[float, float]] = ((2.5, 3.5), (4.0, 6.0))
    center_jitter: float = 1.5
    intensity: tuple[float, float, float, float] = (0.15, 0.85, 0.35, 0.7)
    intensity_jitter: float = 0.1
    background_blobs: int = 3
    blur_sigma: float = 0.7
    noise_std: float = 0.05
    # domain shift applied to test_shift; severity is drawn per image in [0, 1]
    shift_gamma: float = 8.0
    shift_invert: bool = False
    shift_noise: float = 0.2

    def __post_init__(self):
        if self.lv_radius[0] <= 0:
            raise ValueError("degenerate geometry: LV radius must be > 0")
        if self.myo_thickness[0] <= 0:
            raise ValueError("degenerate geometry: myocardium thickness must be > 0")
        if self.size % 4:
            raise ValueError("image size must be a multiple of 4")
        if self.reach() >= (self.size - 1) / 2:
            raise ValueError("structures do not fit inside the inscribed circle of the frame")

    def reach(self) -> float:
        """Largest distance of any structure voxel from the frame centre."""
        d = self.lv_radius[1] + self.myo_thickness[1] + self.rv_axes[0][1] - 1.0
        phi = np.linspace(0.0, np.pi, 721)
        rv = np.sqrt((d + self.rv_axes[0][1] * np.cos(phi)) ** 2 + (self.rv_axes[1][1] * np.sin(phi)) ** 2)
        far = max(rv.max(), self.lv_radius[1] + self.myo_thickness[1])
        return float(self.center_jitter * np.sqrt(2) + far)

    @property
    def identity_shift(self) -> bool:
        return self.shift_gamma == 1.0 and not self.shift_invert and self.shift_noise == 0.0


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_h: float = 0.5
    flip_v: float = 0.5
    rotation: float = 15.0          # degrees, uniform in [-rotation, rotation]
    scale: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.02


@dataclass
class Dataset:
    splits: dict[str, tuple[np.ndarray, np.ndarray]]
    scene: SceneConfig
    seed: int
    severity: np.ndarray | None = None   # per-image shift severity of test_shift

    def __getitem__(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return self.splits[split]


def _stream(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(split.encode()), index]))


def render_scene(cfg: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image, label) pair; image float32 (H, W) in roughly [0, 1]."""
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c0 = (s - 1) / 2.0
    cy = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    cx = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    r_lv = rng.uniform(*cfg.lv_radius)
    r_myo = r_lv + rng.uniform(*cfg.myo_thickness)
    a = rng.uniform(*cfg.rv_axes[0])
    b = rng.uniform(*cfg.rv_axes[1])
    theta = np.deg2rad(rng.uniform(150.0, 210.0))
    d = r_myo + a - 1.0
    ry, rx = cy - d * np.sin(theta), cx + d * np.cos(theta)

    dist = np.hypot(yy - cy, xx - cx)
    # RV ellipse with its short axis pointing at the LV centre
    u = (yy - ry) * -np.sin(theta) + (xx - rx) * np.cos(theta)
    v = (yy - ry) * np.cos(theta) + (xx - rx) * np.sin(theta)
    rv = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    label = np.zeros((s, s), dtype=np.int64)
    label[rv] = 3
    label[dist <= r_myo] = 2
    label[dist <= r_lv] = 1

    means = np.asarray(cfg.intensity) * rng.uniform(1 - cfg.intensity_jitter, 1 + cfg.intensity_jitter, 4)
    img = means[label]
    bg = label == 0
    for _ in range(cfg.background_blobs):
        by, bx = rng.uniform(0, s, 2)
        sig = rng.uniform(2.0, 5.0)
        amp = rng.uniform(-0.1, 0.25)
        img = img + bg * amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sig ** 2))
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.blur_sigma)
    img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    return img.astype(np.float32), label


def apply_shift(image: np.ndarray, cfg: SceneConfig, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma contrast change, optional inversion and extra noise, scaled by ``severity`` in [0, 1]."""
    if cfg.identity_shift:
        return image
    img = np.clip(image.astype(np.float64), 0.0, 1.0)
    img = img ** (cfg.shift_gamma ** severity)
    if cfg.shift_invert:
        img = 1.0 - img
    if cfg.shift_noise > 0:
        img = img + rng.normal(0.0, severity * cfg.shift_noise, img.shape)
    return img.astype(np.float32)


def generate_split(cfg: SceneConfig, split: str, count: int, seed: int,
                   shifted: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if count < 1:
        raise ValueError("split counts must be >= 1")
    images = np.empty((count, 1, cfg.size, cfg.size), dtype=np.float32)
    labels = np.empty((count, cfg.size, cfg.size), dtype=np.int64)
    severity = np.zeros(count)
    for i in range(count):
        rng = _stream(seed, split, i)
        img, lab = render_scene(cfg, rng)
        if shifted:
            severity[i] = rng.uniform(0.0, 1.0)
            img = apply_shift(img, cfg, severity[i], rng)
        images[i, 0] = img
        labels[i] = lab
    return images, labels, severity


def generate_dataset(cfg: SceneConfig, counts: dict[str, int], seed: int) -> Dataset:
    """Deterministic train/val/test_in/test_shift splits; only test_shift is shifted."""
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown splits {sorted(unknown)}")
    splits = {}
    severity = None
    for split in SPLITS:
        if split not in counts:
            continue
        x, y, sev = generate_split(cfg, split, counts[split], seed, shifted=(split == "test_shift"))
        splits[split] = (x, y)
        if split == "test_shift":
            severity = sev
    return Dataset(splits, cfg, seed, severity)


def _rot_exact(a: np.ndarray, angle: float) -> np.ndarray | None:
    k = angle / 90.0
    if abs(k - round(k)) < 1e-12:
        return np.rot90(a, int(round(k)) % 4, axes=(-2, -1))
    return None


def augment(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random flips and rotation (shared by image and label), then intensity scale and noise.

    ``image`` is (..., H, W); ``label`` is (H, W).  Images are resampled
    bilinearly, labels with nearest neighbour.
    """
    if not cfg.enabled:
        return image, label
    img = np.asarray(image)
    lab = np.asarray(label)
    if cfg.flip_h > 0 and rng.random() < cfg.flip_h:
        img, lab = img[..., ::-1], lab[..., ::-1]
    if cfg.flip_v > 0 and rng.random() < cfg.flip_v:
        img, lab = img[..., ::-1, :], lab[..., ::-1, :]
    if cfg.rotation > 0:
        angle = rng.uniform(-cfg.rotation, cfg.rotation)
        img, lab = rotate_pair(img, lab, angle)
    lo, hi = cfg.scale
    if hi > lo:
        img = img * np.float32(rng.uniform(lo, hi))
    elif lo != 1.0:
        img = img * np.float32(lo)
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, img.shape).astype(np.float32)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def rotate_pair(img: np.ndarray, lab: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the image centre; multiples of 90 degrees are exact."""
    ei, el = _rot_exact(img, angle), _rot_exact(lab, angle)
    if ei is not None:
        return ei, el
    axes = (img.ndim - 1, img.ndim - 2)
    ri = ndimage.rotate(img, angle, axes=axes, reshape=False, order=1, mode="nearest")
    rl = ndimage.rotate(lab, angle, axes=(1, 0), reshape=False, order=0, mode="nearest")
    return ri.astype(np.float32), rl


def batch_augmenter(cfg: AugmentConfig):
    """Adapter with the sampler's ``augment(xb, yb, rng)`` signature."""
    def _aug(xb, yb, rng):
        if not cfg.enabled:
            return xb, yb
        xs = np.empty_like(xb)
        ys = np.empty_like(yb)
        for i in range(len(xb)):
            xs[i], ys[i] = augment(xb[i], yb[i], cfg, rng)
        return xs, ys
    return _aug


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Write one .npy pair per split plus ``manifest.json`` (seed and configs)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": ds.seed, "scene": asdict(ds.scene), "splits": {}}
    for split, (x, y) in ds.splits.items():
        np.save(d / f"{split}_images.npy", x)
        np.save(d / f"{split}_labels.npy", y)
        manifest["splits"][split] = {"count": int(len(x)), "shape": list(x.shape[1:])}
    if ds.severity is not None:
        np.save(d / "test_shift_severity.npy", ds.severity)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    scene = SceneConfig(**{k: _tuplify(v) for k, v in manifest["scene"].items()})
    splits = {s: (np.load(d / f"{s}_images.npy"), np.load(d / f"{s}_labels.npy"))
              for s in manifest["splits"]}
    sev_path = d / "test_shift_severity.npy"
    severity = np.load(sev_path) if sev_path.exists() else None
    return Dataset(splits, scene, int(manifest["seed"]), severity)
