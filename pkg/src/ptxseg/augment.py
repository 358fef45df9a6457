"""Paired image/mask augmentation: probability-gated geometric and photometric
transforms applied identically to both, plus deterministic resizing.

Geometric transforms (resize, flip, affine, optical distortion) use bilinear
interpolation for images and nearest-neighbor for masks, so masks stay binary.
Photometric transforms touch the image only. A call is fully determined by
(pipeline, inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

KINDS = ("resize", "horizontal_flip", "affine", "optical_distortion", "brightness_contrast")


@dataclass
class TransformSpec:
    kind: str
    probability: float = 1.0
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


@dataclass
class AugmentPipeline:
    transforms: list[TransformSpec]
    mode: str  # "train" | "val"


def default_train_specs(target_resolution: int) -> list[TransformSpec]:
    """Default training transforms. All parameters are intentionally exposed:
    shift/scale/distortion strengths this high can already displace subtle
    findings, so runs may want to dial them down."""
    return [
        TransformSpec("resize", 1.0, {"target": target_resolution}),
        TransformSpec("horizontal_flip", 0.5),
        TransformSpec("affine", 0.5, {"shift_limit": 0.10, "scale_limit": 0.10, "rotate_limit": 15.0}),
        TransformSpec("optical_distortion", 0.3, {"strength": 0.2}),
        TransformSpec("brightness_contrast", 0.3, {"brightness_limit": 0.2, "contrast_limit": 0.2}),
    ]


def build_pipeline(mode: str, target_resolution: int, overrides: list[TransformSpec] | None = None) -> AugmentPipeline:
    """val -> [resize]; train -> resize followed by the randomized transforms."""
    if mode not in ("train", "val"):
        raise ValueError(f"mode must be 'train' or 'val', got {mode!r}")
    if target_resolution < 32:
        raise ValueError("target_resolution must be >= 32")
    if overrides is not None:
        transforms = [
            t if isinstance(t, TransformSpec) else TransformSpec(**t)
            for t in overrides
        ]
    elif mode == "val":
        transforms = [TransformSpec("resize", 1.0, {"target": target_resolution})]
    else:
        transforms = default_train_specs(target_resolution)
    return AugmentPipeline(transforms=transforms, mode=mode)


def derive_seed(global_seed: int, epoch: int, sample_index: int) -> int:
    """Stable per-sample seed so multi-worker prefetch stays reproducible."""
    ss = np.random.SeedSequence([abs(int(global_seed)), int(epoch), int(sample_index)])
    return int(ss.generate_state(1)[0])


def apply_paired(
    pipeline: AugmentPipeline,
    image: np.ndarray,
    mask: np.ndarray,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the pipeline on an image/mask pair with one RNG stream.

    Resize steps are applied unconditionally; every other transform fires with
    its configured probability. Identical geometric parameters are used for
    image and mask.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape[:2] or mask.ndim != 2:
        raise ValueError(f"image/mask shape mismatch: {image.shape} vs {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    mask = mask.astype(np.uint8)

    rng = np.random.default_rng(seed)
    for spec in pipeline.transforms:
        if spec.kind != "resize" and rng.random() >= spec.probability:
            continue
        image, mask = _APPLY[spec.kind](image, mask, spec.parameters, rng)
    return np.clip(image, 0.0, 1.0), mask


def _resize(image, mask, params, rng):
    target = int(params.get("target", 512))
    image = cv2.resize(image, (target, target), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(mask, (target, target), interpolation=cv2.INTER_NEAREST)
    return image, mask


def _horizontal_flip(image, mask, params, rng):
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(mask[:, ::-1])


def _affine(image, mask, params, rng):
    shift = float(params.get("shift_limit", 0.10))
    scale = float(params.get("scale_limit", 0.10))
    rotate = float(params.get("rotate_limit", 15.0))
    h, w = mask.shape
    angle = rng.uniform(-rotate, rotate)
    zoom = 1.0 + rng.uniform(-scale, scale)
    tx = rng.uniform(-shift, shift) * w
    ty = rng.uniform(-shift, shift) * h
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, zoom)
    m[0, 2] += tx
    m[1, 2] += ty
    image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.warpAffine(mask, m, (w, h), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return image, mask


def _optical_distortion(image, mask, params, rng):
    strength = float(params.get("strength", 0.2))
    k = rng.uniform(-strength, strength)
    h, w = mask.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = (np.arange(w, dtype=np.float32) - cx) / max(cx, 1.0)
    ys = (np.arange(h, dtype=np.float32) - cy) / max(cy, 1.0)
    grid_x, grid_y = np.meshgrid(xs, ys)
    factor = 1.0 + k * (grid_x**2 + grid_y**2)
    map_x = (grid_x * factor * max(cx, 1.0) + cx).astype(np.float32)
    map_y = (grid_y * factor * max(cy, 1.0) + cy).astype(np.float32)
    image = cv2.remap(image, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                      borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    mask = cv2.remap(mask, map_x, map_y, interpolation=cv2.INTER_NEAREST,
                     borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return image, mask


def _brightness_contrast(image, mask, params, rng):
    brightness = float(params.get("brightness_limit", 0.2))
    contrast = float(params.get("contrast_limit", 0.2))
    b = rng.uniform(-brightness, brightness)
    c = 1.0 + rng.uniform(-contrast, contrast)
    image = np.clip((image - 0.5) * c + 0.5 + b, 0.0, 1.0)
    return image, mask


_APPLY = {
    "resize": _resize,
    "horizontal_flip": _horizontal_flip,
    "affine": _affine,
    "optical_distortion": _optical_distortion,
    "brightness_contrast": _brightness_contrast,
}
