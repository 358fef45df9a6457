"""Dataset handling: discovery, lazy loading, RLE codec, train/val split and synthetic data.

Expected layout on disk:

    <root>/images/<stem>.png   H x W x 3
    <root>/masks/<stem>.png    H x W, foreground stored as 255

The manifest is persisted as CSV with header ``stem,split,has_positive``.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

IMAGES_DIRNAME = "images"
MASKS_DIRNAME = "masks"

# 8-bit rasters are binarized at >127 so lossy artifacts near 0/255 survive.
MASK_THRESHOLD = 127


@dataclass
class Sample:
    stem: str
    image_path: Path
    mask_path: Path
    has_positive: bool | None = None  # None until the mask has been decoded


@dataclass
class RleMask:
    """Run-length encoded binary mask: 1-indexed (start, length) runs over the
    row-major flattened array."""

    runs: list[tuple[int, int]]
    width: int
    height: int

    def to_text(self) -> str:
        return " ".join(f"{s} {l}" for s, l in self.runs)

    @classmethod
    def from_text(cls, text: str, width: int, height: int) -> "RleMask":
        tokens = text.split()
        if len(tokens) % 2 != 0:
            raise ValueError("RLE text must contain an even number of integers")
        values = [int(t) for t in tokens]
        runs = list(zip(values[0::2], values[1::2]))
        return cls(runs=runs, width=width, height=height)


def split_sizes(n: int, train_fraction: float) -> tuple[int, int]:
    """Train/val sizes for an n-sample dataset: floor(fraction * n) goes to train.

    Exact rational arithmetic, so e.g. (20, 0.85) -> (17, 3) and not a float
    rounding artifact. Both splits are guaranteed nonempty.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples to form both splits, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(Fraction(str(train_fraction)) * n)
    n_train = min(max(n_train, 1), n - 1)
    return n_train, n - n_train


def decode_mask(raw: np.ndarray) -> np.ndarray:
    """Binarize a single-channel 8-bit raster: values > 127 map to 1, else 0."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError(f"mask raster must be single-channel, got shape {raw.shape}")
    return (raw > MASK_THRESHOLD).astype(np.uint8)


def read_image(path: Path | str) -> np.ndarray:
    """Load an image as float32 H x W x 3 in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise IOError(f"unreadable image file: {path}")
    return img.astype(np.float32) / 255.0


def read_mask(path: Path | str) -> np.ndarray:
    """Load a mask PNG as a binary uint8 H x W array."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise IOError(f"unreadable mask file: {path}")
    return decode_mask(raw)


def rle_encode(mask: np.ndarray) -> RleMask:
    """Encode a binary mask as 1-indexed (start, length) runs, row-major order."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    height, width = mask.shape
    flat = mask.reshape(-1).astype(np.int8)
    padded = np.concatenate([[0], flat, [0]])
    changes = np.flatnonzero(np.diff(padded))
    starts = changes[0::2] + 1  # 1-indexed
    ends = changes[1::2]
    runs = [(int(s), int(e - s + 1)) for s, e in zip(starts, ends)]
    return RleMask(runs=runs, width=width, height=height)


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode runs back into the binary mask; inverse of rle_encode."""
    size = rle.width * rle.height
    flat = np.zeros(size, dtype=np.uint8)
    prev_end = 0
    for start, length in rle.runs:
        if start < 1 or length < 1:
            raise ValueError(f"invalid run ({start}, {length}): start and length must be >= 1")
        if start <= prev_end:
            raise ValueError(f"runs must be sorted and non-overlapping (start {start} after {prev_end})")
        end = start + length - 1
        if end > size:
            raise ValueError(f"run ({start}, {length}) exceeds mask size {rle.width}x{rle.height}")
        flat[start - 1 : end] = 1
        prev_end = end
    return flat.reshape(rle.height, rle.width)


@dataclass
class Manifest:
    samples: list[Sample]
    split: dict[str, str]  # stem -> "train" | "val"
    seed: int
    _counts: tuple[int, int, int] | None = field(default=None, repr=False)

    def train_samples(self) -> list[Sample]:
        return [s for s in self.samples if self.split[s.stem] == "train"]

    def val_samples(self) -> list[Sample]:
        return [s for s in self.samples if self.split[s.stem] == "val"]

    def counts(self) -> tuple[int, int, int]:
        """(total, positive, negative); decodes masks on first call and caches."""
        if self._counts is None:
            positive = 0
            for s in self.samples:
                if s.has_positive is None:
                    s.has_positive = bool(read_mask(s.mask_path).any())
                positive += int(s.has_positive)
            self._counts = (len(self.samples), positive, len(self.samples) - positive)
        return self._counts

    def save_csv(self, path: Path | str) -> None:
        self.counts()  # fill has_positive so the CSV doubles as a decode cache
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stem", "split", "has_positive"])
            for s in self.samples:
                writer.writerow([s.stem, self.split[s.stem], int(s.has_positive)])


def load_manifest_csv(path: Path | str, image_dir: Path | str, mask_dir: Path | str, seed: int = 0) -> Manifest:
    """Rebuild a Manifest from a saved CSV; has_positive comes from the CSV, no decoding."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    samples, split = [], {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            stem = row["stem"]
            samples.append(
                Sample(
                    stem=stem,
                    image_path=image_dir / f"{stem}.png",
                    mask_path=mask_dir / f"{stem}.png",
                    has_positive=bool(int(row["has_positive"])),
                )
            )
            split[stem] = row["split"]
    if not samples:
        raise ValueError(f"no samples found in manifest {path}")
    return Manifest(samples=samples, split=split, seed=seed)


def load_manifest(
    image_dir: Path | str,
    mask_dir: Path | str,
    seed: int,
    train_fraction: float = 0.85,
    stratify: bool = False,
) -> Manifest:
    """Discover image/mask pairs and assign a reproducible random train/val split.

    Construction touches only file paths; masks are not decoded unless
    ``stratify`` is set (the stratified split needs per-sample labels) or
    counts are requested later.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory does not exist: {image_dir}")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"mask directory does not exist: {mask_dir}")

    stems = sorted(p.stem for p in image_dir.glob("*.png"))
    if not stems:
        raise ValueError(f"no samples found under {image_dir}")

    samples = []
    for stem in stems:
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for stem {stem!r} (expected {mask_path})")
        samples.append(Sample(stem=stem, image_path=image_dir / f"{stem}.png", mask_path=mask_path))

    n_train, _ = split_sizes(len(samples), train_fraction)
    if stratify:
        for s in samples:
            s.has_positive = bool(read_mask(s.mask_path).any())
        train_stems = _stratified_train_stems(samples, n_train, seed)
    else:
        shuffled = [s.stem for s in samples]
        random.Random(seed).shuffle(shuffled)
        train_stems = set(shuffled[:n_train])

    split = {s.stem: ("train" if s.stem in train_stems else "val") for s in samples}
    return Manifest(samples=samples, split=split, seed=seed)


def _stratified_train_stems(samples: list[Sample], n_train: int, seed: int) -> set:
    rng = random.Random(seed)
    positives = [s.stem for s in samples if s.has_positive]
    negatives = [s.stem for s in samples if not s.has_positive]
    rng.shuffle(positives)
    rng.shuffle(negatives)
    n_pos = min(math.floor(n_train * len(positives) / len(samples)), len(positives))
    train = positives[:n_pos] + negatives[: n_train - n_pos]
    # class exhaustion: top up from the other class to keep |train| exact
    if len(train) < n_train:
        train += positives[n_pos : n_pos + (n_train - len(train))]
    return set(train[:n_train])


def make_synthetic(
    out_dir: Path | str,
    n: int,
    resolution: int,
    seed: int,
    negative_fraction: float = 0.25,
) -> Path:
    """Write n synthetic image/mask PNG pairs under out_dir/{images,masks}.

    Images are noisy gradients; positive samples carry a brighter elliptical
    blob along a simulated lung edge, and the mask marks the blob. A
    ``negative_fraction`` share of samples gets an empty mask. Deterministic
    in (n, resolution, seed, negative_fraction): reruns are byte-identical.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    out_dir = Path(out_dir)
    image_dir = out_dir / IMAGES_DIRNAME
    mask_dir = out_dir / MASKS_DIRNAME
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    n_negative = int(n * negative_fraction + 0.5)
    is_negative = np.zeros(n, dtype=bool)
    is_negative[rng.choice(n, size=n_negative, replace=False)] = True

    for i in range(n):
        image, mask = _synthetic_pair(rng, resolution, negative=bool(is_negative[i]))
        stem = f"sample_{i:04d}"
        if not cv2.imwrite(str(image_dir / f"{stem}.png"), image):
            raise OSError(f"failed to write {image_dir / f'{stem}.png'}")
        if not cv2.imwrite(str(mask_dir / f"{stem}.png"), mask):
            raise OSError(f"failed to write {mask_dir / f'{stem}.png'}")
    return out_dir


def _synthetic_pair(rng: np.random.Generator, resolution: int, negative: bool) -> tuple[np.ndarray, np.ndarray]:
    size = resolution
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size

    # dark chest background: vertical gradient + low-frequency shading + grain
    base = 0.25 + 0.2 * yy + 0.1 * np.sin(2 * np.pi * xx * rng.uniform(0.5, 1.5))
    base += rng.normal(0.0, 0.03, size=(size, size)).astype(np.float32)

    mask = np.zeros((size, size), dtype=np.uint8)
    if not negative:
        margin = size // 4
        center = (
            int(rng.integers(margin, size - margin)),
            int(rng.integers(margin, size - margin)),
        )
        axes = (
            int(rng.integers(max(2, size // 10), size // 5)),
            int(rng.integers(max(2, size // 12), size // 6)),
        )
        angle = float(rng.uniform(0.0, 180.0))
        cv2.ellipse(mask, center, axes, angle, 0, 360, 1, thickness=-1)
        base[mask == 1] += rng.uniform(0.3, 0.45)

    image = np.clip(base, 0.0, 1.0)
    image_u8 = (image * 255.0).round().astype(np.uint8)
    return np.repeat(image_u8[:, :, None], 3, axis=2), mask * 255
