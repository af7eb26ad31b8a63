"""Datasets: seeded synthetic shapes, PNG pairs, corruptions, splits.

The synthetic generator paints 1-3 saturated shapes (ellipses, rectangles,
soft blobs) over a desaturated textured-noise background; the mask is the
union of shape supports. Every sample is fully determined by (seed, index),
and a rejection loop keeps the foreground fraction inside [0.05, 0.6].

Corruptions emulate shifted test conditions. Photometric kinds alter the
image only; geometric kinds warp image and mask jointly (nearest-neighbor
for the mask); occlusion blanks an image patch while the mask keeps
labeling the hidden object. Severity 1..5 indexes the fixed parameter
tables below; severity 0 is the identity.
"""

from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

FOREGROUND_FRACTION_RANGE = (0.05, 0.6)

SEVERITY_TABLES: dict[str, tuple] = {
    "gaussian_noise": (0.02, 0.05, 0.08, 0.12, 0.18),   # additive sigma
    "blur": (0.5, 1.0, 1.5, 2.5, 4.0),                  # gaussian sigma, px
    "brightness": (0.08, 0.15, 0.22, 0.30, 0.40),       # +- shift
    "contrast": (0.75, 0.60, 0.45, 0.30, 0.20),         # scale about 0.5
    "rotation": (15, 30, 60, 90, 180),                  # degrees
    "scale": (1.10, 1.20, 1.40, 1.65, 2.00),            # zoom factor
    "occlusion": (0.15, 0.20, 0.30, 0.40, 0.50),        # patch side / min(H,W)
}

CORRUPTION_KINDS = tuple(SEVERITY_TABLES)


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray           # (H, W) bool
    id: str
    provenance: str
    corruption: tuple[str, int] | None = None

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class Dataset:
    samples: list[Sample]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str) -> list[Sample]:
        if split not in self.splits:
            raise KeyError(f"dataset has no split named {split!r}")
        return [self.samples[i] for i in self.splits[split]]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _shape_support(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    base = min(h, w)
    dy, dx = yy - cy, xx - cx
    if kind == "ellipse":
        ry = rng.uniform(0.10, 0.26) * base
        rx = rng.uniform(0.10, 0.26) * base
        theta = rng.uniform(0, math.pi)
        xr = math.cos(theta) * dx + math.sin(theta) * dy
        yr = -math.sin(theta) * dx + math.cos(theta) * dy
        return (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0
    if kind == "rectangle":
        hw = rng.uniform(0.09, 0.24) * base
        hh = rng.uniform(0.09, 0.24) * base
        theta = rng.uniform(0, math.pi)
        xr = math.cos(theta) * dx + math.sin(theta) * dy
        yr = -math.sin(theta) * dx + math.cos(theta) * dy
        return (np.abs(xr) <= hw) & (np.abs(yr) <= hh)
    if kind == "blob":
        r0 = rng.uniform(0.12, 0.24) * base
        dist = np.hypot(dx, dy)
        ang = np.arctan2(dy, dx)
        rlim = np.full_like(dist, r0)
        for harmonic in (2, 3, 4):
            amp = rng.uniform(0.0, 0.18)
            phase = rng.uniform(0, 2 * math.pi)
            rlim += r0 * amp * np.sin(harmonic * ang + phase)
        return dist <= rlim
    raise ValueError(f"unknown shape kind {kind!r}")


def _draw_sample(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # desaturated textured background
    base = rng.uniform(0.3, 0.65)
    tint = rng.uniform(-0.05, 0.05, size=3)
    tex = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=1.5)
    tex *= rng.uniform(0.03, 0.09) / max(tex.std(), 1e-6)
    image = np.empty((h, w, 3), dtype=np.float32)
    for c in range(3):
        image[:, :, c] = base + tint[c] + tex
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        kind = ("ellipse", "rectangle", "blob")[int(rng.integers(0, 3))]
        support = _shape_support(kind, h, w, rng)
        hue = rng.uniform(0, 1)
        sat = rng.uniform(0.55, 1.0)
        val = rng.uniform(0.55, 1.0)
        color = np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float32)
        image[support] = color
        mask |= support
    image += rng.normal(0.0, 0.02, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image.astype(np.float32), mask


def generate_synthetic(n: int, size: tuple[int, int] = (64, 64), seed: int = 0) -> Dataset:
    """n seeded samples; each is a pure function of (seed, index)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"size must be at least 16x16, got {size}")
    lo, hi = FOREGROUND_FRACTION_RANGE
    samples = []
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        for _ in range(100):
            image, mask = _draw_sample(h, w, rng)
            frac = mask.mean()
            if lo <= frac <= hi:
                break
        else:  # pragma: no cover - generator parameters make this unreachable
            raise RuntimeError(f"sample {index}: rejection loop failed to converge")
        samples.append(Sample(
            image=image, mask=mask,
            id=f"synth-{index:05d}",
            provenance=f"synthetic:seed={seed},index={index}",
        ))
    return Dataset(samples=samples)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

def _rot90_exact(image: np.ndarray, mask: np.ndarray, quarter_turns: int):
    return np.rot90(image, quarter_turns, axes=(0, 1)).copy(), np.rot90(mask, quarter_turns).copy()


def _rotate(image: np.ndarray, mask: np.ndarray, degrees: float):
    q, rem = divmod(round(degrees), 90)
    if rem == 0 and (q % 2 == 0 or image.shape[0] == image.shape[1]):
        return _rot90_exact(image, mask, q % 4)
    img = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1,
                         mode="constant", cval=0.0)
    msk = ndimage.rotate(mask.astype(np.uint8), degrees, axes=(1, 0), reshape=False,
                         order=0, mode="constant", cval=0)
    return img.astype(np.float32), msk.astype(bool)


def _center_to(arr: np.ndarray, h: int, w: int, fill=0):
    """Center-crop or zero-pad the first two axes to (h, w)."""
    out_shape = (h, w) + arr.shape[2:]
    out = np.full(out_shape, fill, dtype=arr.dtype)
    sh, sw = arr.shape[:2]
    top_src, top_dst = max(0, (sh - h) // 2), max(0, (h - sh) // 2)
    left_src, left_dst = max(0, (sw - w) // 2), max(0, (w - sw) // 2)
    ch, cw = min(h, sh), min(w, sw)
    out[top_dst:top_dst + ch, left_dst:left_dst + cw] = \
        arr[top_src:top_src + ch, left_src:left_src + cw]
    return out


def corrupt(sample: Sample, kind: str, severity: int, seed: int) -> Sample:
    """Apply one corruption at the given severity; severity 0 is a no-op."""
    if kind not in SEVERITY_TABLES:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if not 0 <= severity <= 5:
        raise ValueError(f"severity must be in 0..5, got {severity}")
    if severity == 0:
        return sample
    level = SEVERITY_TABLES[kind][severity - 1]
    rng = np.random.default_rng(seed)
    image, mask = sample.image.copy(), sample.mask.copy()
    h, w = mask.shape

    if kind == "gaussian_noise":
        image += rng.normal(0.0, level, image.shape)
    elif kind == "blur":
        image = ndimage.gaussian_filter(image, sigma=(level, level, 0))
    elif kind == "brightness":
        image += level * (1 if rng.random() < 0.5 else -1)
    elif kind == "contrast":
        image = (image - 0.5) * level + 0.5
    elif kind == "rotation":
        image, mask = _rotate(image, mask, level)
    elif kind == "scale":
        image = ndimage.zoom(image, (level, level, 1), order=1)
        mask = ndimage.zoom(mask.astype(np.uint8), (level, level), order=0).astype(bool)
        image = _center_to(image, h, w)
        mask = _center_to(mask, h, w, fill=False)
    elif kind == "occlusion":
        side = max(1, int(round(level * min(h, w))))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        image[top:top + side, left:left + side, :] = 0.0

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=image, mask=mask,
                   id=f"{sample.id}__{kind}_s{severity}",
                   corruption=(kind, severity))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split(dataset: Dataset, ratios: tuple[float, float, float], seed: int) -> Dataset:
    """Seeded shuffle, then contiguous train/val/test with remainder to train."""
    if min(ratios) <= 0:
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    n = len(dataset)
    n_val = int(math.floor(ratios[1] * n))
    n_test = int(math.floor(ratios[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(f"split of {n} samples at {ratios} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return Dataset(samples=dataset.samples, splits={
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val:]),
    })


# ---------------------------------------------------------------------------
# PNG + manifest I/O
# ---------------------------------------------------------------------------

def _save_image_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(image * 255.0).astype(np.uint8), mode="RGB").save(path)


def _save_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def _load_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _load_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 127  # robust to anti-aliased masks


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write PNG pairs plus a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    index_to_split = {}
    for name, idxs in dataset.splits.items():
        for i in idxs:
            index_to_split[i] = name
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "image_path", "mask_path", "split",
                         "corruption_kind", "severity"])
        for i, sample in enumerate(dataset.samples):
            img_rel = f"images/{sample.id}.png"
            msk_rel = f"masks/{sample.id}.png"
            _save_image_png(sample.image, out / img_rel)
            _save_mask_png(sample.mask, out / msk_rel)
            kind, severity = sample.corruption or ("", "")
            writer.writerow([sample.id, img_rel, msk_rel,
                             index_to_split.get(i, ""), kind, severity])
    return manifest


def load_dataset(dir_or_manifest: str | Path) -> Dataset:
    """Inverse of save_dataset."""
    path = Path(dir_or_manifest)
    manifest = path / "manifest.csv" if path.is_dir() else path
    root = manifest.parent
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    samples: list[Sample] = []
    splits: dict[str, list[int]] = {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            corruption = None
            if row["corruption_kind"]:
                corruption = (row["corruption_kind"], int(row["severity"]))
            samples.append(Sample(
                image=_load_image_png(root / row["image_path"]),
                mask=_load_mask_png(root / row["mask_path"]),
                id=row["id"],
                provenance=str(root / row["image_path"]),
                corruption=corruption,
            ))
            if row["split"]:
                splits.setdefault(row["split"], []).append(len(samples) - 1)
    if not samples:
        raise ValueError(f"{manifest}: empty manifest")
    return Dataset(samples=samples, splits=splits)


def load_png_pairs(image_dir: str | Path, mask_dir: str | Path,
                   resize_to: tuple[int, int] | None = None) -> Dataset:
    """Pair images and masks by filename stem, ordered lexicographically."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    images = sorted(p for p in image_dir.glob("*.png"))
    if not images:
        raise FileNotFoundError(f"no PNG images found in {image_dir}")
    mask_by_stem = {p.stem: p for p in mask_dir.glob("*.png")}
    samples = []
    for img_path in images:
        mask_path = mask_by_stem.get(img_path.stem)
        if mask_path is None:
            raise FileNotFoundError(f"{img_path.name}: no matching mask in {mask_dir}")
        image = _load_image_png(img_path)
        mask = _load_mask_png(mask_path)
        if image.shape[:2] != mask.shape:
            raise ValueError(
                f"{img_path.name}: image {image.shape[:2]} vs mask {mask.shape} size mismatch")
        if resize_to is not None:
            image = _center_to(image, *resize_to)
            mask = _center_to(mask, *resize_to, fill=False)
        samples.append(Sample(image=image.astype(np.float32), mask=mask,
                              id=img_path.stem, provenance=str(img_path)))
    return Dataset(samples=samples)
