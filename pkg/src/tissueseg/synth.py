"""Deterministic synthetic tissue-like label maps, augmentation, tiling and dataset layout."""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import SynthConfig
from .imageio import quantize, read_image, read_label, write_image, write_label

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    label: np.ndarray  # H x W ints
    id: int
    seed: int


def class_colors(num_classes: int) -> np.ndarray:
    """Evenly spaced hues with alternating lightness, K x 3 in [0, 1]."""
    cols = []
    for c in range(num_classes):
        light = 0.45 if c % 2 == 0 else 0.65
        cols.append(colorsys.hls_to_rgb(c / max(num_classes, 1), light, 0.6))
    return np.array(cols)


def _assign_classes(rng: np.random.Generator, pts: np.ndarray, K: int, adjacency: str) -> np.ndarray:
    classes = np.zeros(len(pts), dtype=np.int64)
    classes[0] = rng.integers(K)
    for n in range(1, len(pts)):
        if adjacency == "uniform":
            classes[n] = rng.integers(K)
            continue
        nearest = np.argmin(((pts[:n] - pts[n]) ** 2).sum(axis=1))
        base = classes[nearest]
        step = rng.choice([-1, 1]) if rng.random() < 0.8 else rng.integers(-K + 1, K)
        classes[n] = (base + step) % K
    return classes


def _merge_small_regions(label: np.ndarray, min_px: int) -> np.ndarray:
    """Relabel connected components smaller than ``min_px`` to their most common neighbor class."""
    label = label.copy()
    struct = np.ones((3, 3), dtype=bool)
    changed = True
    while changed:
        changed = False
        for c in np.unique(label):
            comps, n = ndimage.label(label == c)
            for k in range(1, n + 1):
                region = comps == k
                if region.sum() >= min_px or region.all():
                    continue
                ring = ndimage.binary_dilation(region, struct) & ~region
                neighbors = label[ring]
                if neighbors.size == 0:
                    continue
                label[region] = np.bincount(neighbors).argmax()
                changed = True
    return label


def generate(config: SynthConfig, sample_id: int) -> Sample:
    """Render sample ``sample_id``; a pure function of (config, sample_id)."""
    K, S = config.num_classes, config.image_size
    seed = int.from_bytes(hashlib.sha256(f"{config.seed}:{sample_id}".encode()).digest()[:4], "little")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    if K == 1:
        label = np.zeros((S, S), dtype=np.int64)
    else:
        n = int(rng.integers(config.blobs_min, config.blobs_max + 1))
        pts = rng.uniform(0, S, size=(n, 2))
        classes = _assign_classes(rng, pts, K, config.adjacency)
        # smooth coordinate warp gives organic, non-polygonal boundaries
        amp = S / 16.0
        f1, f2 = rng.uniform(1.0, 3.0, size=2) * 2 * np.pi / S
        ph = rng.uniform(0, 2 * np.pi, size=2)
        wy = yy + amp * np.sin(f1 * xx + ph[0])
        wx = xx + amp * np.sin(f2 * yy + ph[1])
        d2 = (wy[None] - pts[:, 0, None, None]) ** 2 + (wx[None] - pts[:, 1, None, None]) ** 2
        label = classes[d2.argmin(axis=0)]
        label = _merge_small_regions(label, config.min_region_px)
    colors = class_colors(max(K, 2))
    image = colors[label].transpose(2, 0, 1).copy()
    # per-class stripe texture plus white noise
    freq = 2 * np.pi * (1 + np.arange(max(K, 2))) / 12.0
    stripes = 0.05 * np.sin(freq[label] * (xx + yy))
    image += stripes[None]
    image += rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, label.astype(np.int64), sample_id, seed)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal/vertical flips and a rotation by a multiple of 90 degrees."""
    img, lab = sample.image, sample.label
    if rng.random() < 0.5:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
    if rng.random() < 0.5:
        img, lab = img[:, ::-1, :], lab[::-1, :]
    k = int(rng.integers(4))
    img, lab = np.rot90(img, k, axes=(1, 2)), np.rot90(lab, k)
    return replace(sample, image=np.ascontiguousarray(img), label=np.ascontiguousarray(lab))


def tile_origins(size: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def tile(image: np.ndarray, label: np.ndarray, patch: int, stride: int) -> list[Sample]:
    """Overlapping patches covering the whole canvas; the last row/column is clamped to the border."""
    _, H, W = image.shape
    if patch > H or patch > W:
        raise ValueError(f"patch {patch} larger than image {H}x{W}")
    if not 0 < stride <= patch:
        raise ValueError(f"stride must lie in (0, patch], got {stride}")
    out = []
    for y in tile_origins(H, patch, stride):
        for x in tile_origins(W, patch, stride):
            out.append(Sample(image[:, y:y + patch, x:x + patch].copy(), label[y:y + patch, x:x + patch].copy(), len(out), y * W + x))
    return out


# -- dataset directory -------------------------------------------------------------

def split_ids(config: SynthConfig) -> dict[str, list[int]]:
    a, b, c = config.n_train, config.n_val, config.n_test
    return {"train": list(range(a)), "val": list(range(a, a + b)), "test": list(range(a + b, a + b + c))}


def manifest_for(config: SynthConfig) -> dict:
    return {
        "num_classes": config.num_classes,
        "image_size": config.image_size,
        "config_checksum": config.checksum(),
        "splits": split_ids(config),
    }


def write_dataset(root: str | Path, config: SynthConfig, force: bool = False) -> dict:
    """Materialize all splits under ``root``; refuses to overwrite a different dataset unless forced."""
    root = Path(root)
    manifest = manifest_for(config)
    mpath = root / "manifest"
    if mpath.exists():
        existing = json.loads(mpath.read_text())
        if existing == manifest and all((root / s / f"lab_{i}.pgm").exists() for s, ids in manifest["splits"].items() for i in ids):
            return manifest
        if existing != manifest and not force:
            raise FileExistsError(f"{mpath} describes a different dataset; pass force to overwrite")
    for split, ids in manifest["splits"].items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for i in ids:
            s = generate(config, i)
            write_image(root / split / f"img_{i}.ppm", s.image)
            write_label(root / split / f"lab_{i}.pgm", s.label)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    for key in ("num_classes", "splits"):
        if key not in manifest:
            raise ValueError(f"manifest {path} lacks '{key}'")
    return manifest


def load_split(root: str | Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    """All images (N x 3 x H x W) and labels (N x H x W) of one split."""
    root = Path(root)
    manifest = read_manifest(root)
    K = manifest["num_classes"]
    ids = manifest["splits"][split]
    images = np.stack([read_image(root / split / f"img_{i}.ppm") for i in ids]) if ids else np.zeros((0, 3, 0, 0))
    labels = np.stack([read_label(root / split / f"lab_{i}.pgm", K) for i in ids]) if ids else np.zeros((0, 0, 0), int)
    return images, labels


def dataset_checksum(root: str | Path) -> str:
    """SHA-256 over the manifest and every split file, in sorted path order.

    Files outside the layout (such as a ``config.json`` echo, which records
    the directory's own path) do not contribute.
    """
    root = Path(root)
    h = hashlib.sha256()
    files = [root / "manifest"] + [p for s in SPLITS if (root / s).is_dir() for p in (root / s).iterdir()]
    for path in sorted(p for p in files if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def quantized(sample: Sample) -> Sample:
    """The sample as it reads back from disk (8-bit image)."""
    return replace(sample, image=quantize(sample.image).astype(np.float64) / 255.0)
