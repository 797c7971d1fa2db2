"""Synthetic multi-domain binary image benchmark.

Class content is drawn by one generator shared by every domain (class 0:
filled elliptical blobs, class 1: oriented sinusoidal stripes). Each domain
then applies its own style transform: contrast, RGB tint, a low-frequency
amplitude perturbation and additive Gaussian noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

SPLITS = ("train", "val", "test")

# Low-frequency window used by the style transform (half-width = floor(0.1 * H)).
STYLE_BETA = 0.1


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    tint: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: float = 1.0
    noise_sigma: float = 0.0
    lowfreq_shift: float = 0.0

    def is_identity(self) -> bool:
        return (
            tuple(self.tint) == (1.0, 1.0, 1.0)
            and self.contrast == 1.0
            and self.noise_sigma == 0.0
            and self.lowfreq_shift == 0.0
        )


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: int
    domain_id: int
    sample_id: str


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    splits: Dict[int, Dict[str, Tuple[LabeledImage, ...]]]
    seed: int
    specs: Tuple[DomainSpec, ...]
    image_size: int
    patch_size: int
    n_classes: int = 2
    _index: Dict[str, LabeledImage] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for dom in self.splits.values():
            for items in dom.values():
                for im in items:
                    self._index[im.sample_id] = im

    @property
    def domain_ids(self) -> List[int]:
        return sorted(self.splits)

    def get(self, sample_id: str) -> LabeledImage:
        return self._index[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def arrays(self, domain_id: int, split: str) -> Tuple[np.ndarray, np.ndarray]:
        items = self.splits[domain_id][split]
        if not items:
            size = self.image_size
            return np.zeros((0, size, size, 3), np.float32), np.zeros(0, np.int64)
        x = np.stack([im.pixels for im in items]).astype(np.float32)
        y = np.array([im.label for im in items], dtype=np.int64)
        return x, y

    def test_splits(self) -> Dict[int, List[str]]:
        return {d: [im.sample_id for im in self.splits[d]["test"]] for d in self.domain_ids}


# Style presets for the first domains; domain 0 is the unshifted source.
_PRESETS = [
    dict(tint=(1.0, 1.0, 1.0), contrast=1.0, noise_sigma=0.0, lowfreq_shift=0.0),
    dict(tint=(1.15, 1.0, 0.85), contrast=0.8, noise_sigma=0.0, lowfreq_shift=1.0),
    dict(tint=(0.85, 1.0, 1.15), contrast=1.2, noise_sigma=0.03, lowfreq_shift=-0.4),
    dict(tint=(1.05, 1.1, 0.9), contrast=0.7, noise_sigma=0.02, lowfreq_shift=0.6),
    dict(tint=(0.9, 0.9, 1.1), contrast=0.6, noise_sigma=0.04, lowfreq_shift=0.3),
]

def default_domain_specs(n_domains: int, seed: int = 0) -> Tuple[DomainSpec, ...]:
    specs = []
    for d in range(n_domains):
        if d < len(_PRESETS):
            specs.append(DomainSpec(domain_id=d, **_PRESETS[d]))
            continue
        rng = np.random.default_rng([seed, 2, d])
        specs.append(
            DomainSpec(
                domain_id=d,
                tint=tuple(float(v) for v in np.round(rng.uniform(0.7, 1.3, 3), 3)),
                contrast=float(np.round(rng.uniform(0.45, 1.5), 3)),
                noise_sigma=float(np.round(rng.uniform(0.02, 0.15), 3)),
                lowfreq_shift=float(np.round(rng.uniform(-0.4, 1.2), 3)),
            )
        )
    return tuple(specs)


def _lowfreq_window(h: int, w: int, beta: float) -> Tuple[slice, slice]:
    bh, bw = max(1, int(math.floor(beta * h))), max(1, int(math.floor(beta * w)))
    ch, cw = h // 2, w // 2
    return slice(max(0, ch - bh), min(h, ch + bh + 1)), slice(max(0, cw - bw), min(w, cw + bw + 1))


def _shift_lowfreq(x: np.ndarray, strength: float) -> np.ndarray:
    h, w = x.shape[:2]
    spec = np.fft.fftshift(np.fft.fft2(x, axes=(0, 1)), axes=(0, 1))
    amp, phase = np.abs(spec), np.angle(spec)
    rows, cols = _lowfreq_window(h, w, STYLE_BETA)
    gain = np.ones((h, w))
    gain[rows, cols] = 1.0 + strength
    gain[h // 2, w // 2] = 1.0  # DC untouched: mean brightness is handled by tint/contrast
    amp = amp * gain[:, :, None]
    out = np.fft.ifft2(np.fft.ifftshift(amp * np.exp(1j * phase), axes=(0, 1)), axes=(0, 1))
    return out.real


def apply_domain_style(
    image: LabeledImage, spec: DomainSpec, rng: Optional[np.random.Generator] = None
) -> LabeledImage:
    """Contrast about mid-gray, per-channel gain, low-frequency amplitude
    scaling and additive noise, clamped to [0, 1]."""
    x = image.pixels.astype(np.float64)
    if spec.contrast != 1.0:
        x = 0.5 + spec.contrast * (x - 0.5)
    x = x * np.asarray(spec.tint, dtype=np.float64)
    if spec.lowfreq_shift != 0.0:
        x = _shift_lowfreq(x, spec.lowfreq_shift)
    if spec.noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=x, label=image.label, domain_id=spec.domain_id, sample_id=image.sample_id)


def _draw_blobs(rng, yy, xx, size):
    mask = np.zeros_like(yy)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        a, b = rng.uniform(0.08, 0.22, 2) * size
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask = np.maximum(mask, ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64))
    return mask


def _draw_stripes(rng, yy, xx, size):
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    a, b = rng.uniform(0.3, 0.45, 2) * size
    t = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(t) + dy * np.sin(t)
    v = -dx * np.sin(t) + dy * np.cos(t)
    region = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
    period = rng.uniform(3.0, 5.0)
    theta = rng.uniform(0, np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
    return region * wave


def render_content(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Domain-independent class content on a random colored background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, 3)
    fg_shift = rng.uniform(0.15, 0.3) * rng.choice([-1.0, 1.0])
    fg_color = np.clip(background + fg_shift + rng.uniform(-0.05, 0.05, 3), 0, 1)
    if label == 0:
        mask = _draw_blobs(rng, yy, xx, size)
    else:
        mask = _draw_stripes(rng, yy, xx, size)
    img = background[None, None, :] * (1 - mask[..., None]) + fg_color[None, None, :] * mask[..., None]
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_sizes(n: int) -> Dict[str, int]:
    n_val = int(math.floor(0.15 * n))
    n_test = int(math.floor(0.25 * n))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def generate_dataset(
    n_domains: int,
    n_per_domain: int,
    image_size: int = 32,
    n_classes: int = 2,
    seed: int = 0,
    patch_size: int = 8,
    specs: Optional[Sequence[DomainSpec]] = None,
) -> DatasetBundle:
    if n_domains < 2:
        raise ConfigError(f"n_domains must be >= 2, got {n_domains}")
    if n_per_domain < 20:
        raise ConfigError(f"n_per_domain must be >= 20, got {n_per_domain}")
    if patch_size <= 0 or image_size <= 0 or image_size % patch_size:
        raise ConfigError(f"image_size={image_size} is not divisible by patch_size={patch_size}")
    if n_classes != 2:
        raise ConfigError(f"n_classes must be 2 (binary benchmark), got {n_classes}")
    if specs is None:
        specs = default_domain_specs(n_domains, seed)
    specs = tuple(specs)
    if len(specs) != n_domains:
        raise ConfigError(f"specs: expected {n_domains} entries, got {len(specs)}")

    sizes = _split_sizes(n_per_domain)
    splits: Dict[int, Dict[str, Tuple[LabeledImage, ...]]] = {}
    for spec in specs:
        d = spec.domain_id
        images = []
        for idx in range(n_per_domain):
            label = idx % n_classes
            content = render_content(label, image_size, np.random.default_rng([seed, 0, d, idx]))
            raw = LabeledImage(content, label, d, f"d{d}-{idx:05d}")
            images.append(apply_domain_style(raw, spec, np.random.default_rng([seed, 1, d, idx])))
        n_test, n_val = sizes["test"], sizes["val"]
        splits[d] = {
            "test": tuple(images[:n_test]),
            "val": tuple(images[n_test : n_test + n_val]),
            "train": tuple(images[n_test + n_val :]),
        }
    return DatasetBundle(splits=splits, seed=seed, specs=specs, image_size=image_size, patch_size=patch_size, n_classes=n_classes)


def save_dataset(bundle: DatasetBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": bundle.seed,
        "image_size": bundle.image_size,
        "patch_size": bundle.patch_size,
        "n_classes": bundle.n_classes,
        "specs": [asdict(s) for s in bundle.specs],
        "splits": {},
    }
    for d in bundle.domain_ids:
        manifest["splits"][str(d)] = {}
        for split in SPLITS:
            x, y = bundle.arrays(d, split)
            fname = f"d{d}_{split}.npy"
            np.save(path / fname, x)
            manifest["splits"][str(d)][split] = {
                "file": fname,
                "sample_ids": [im.sample_id for im in bundle.splits[d][split]],
                "labels": [int(v) for v in y],
            }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> DatasetBundle:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    specs = tuple(
        DomainSpec(
            domain_id=s["domain_id"],
            tint=tuple(s["tint"]),
            contrast=s["contrast"],
            noise_sigma=s["noise_sigma"],
            lowfreq_shift=s["lowfreq_shift"],
        )
        for s in manifest["specs"]
    )
    splits = {}
    for d_str, dom in manifest["splits"].items():
        d = int(d_str)
        splits[d] = {}
        for split, rec in dom.items():
            x = np.load(path / rec["file"])
            splits[d][split] = tuple(
                LabeledImage(x[i], int(lab), d, sid) for i, (sid, lab) in enumerate(zip(rec["sample_ids"], rec["labels"]))
            )
    return DatasetBundle(
        splits=splits,
        seed=manifest["seed"],
        specs=specs,
        image_size=manifest["image_size"],
        patch_size=manifest["patch_size"],
        n_classes=manifest["n_classes"],
    )
