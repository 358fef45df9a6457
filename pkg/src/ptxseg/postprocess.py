"""Probability-map post-processing: binarization, small-component removal, grid search."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .metrics import ConfusionCounts, confusion, metrics_from_counts

# Grid includes 0.05 because tuned thresholds can sit that low on imbalanced data.
DEFAULT_BT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_RT_GRID = (0, 128, 256, 512, 1024, 2048, 4096)

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8),
    8: np.ones((3, 3), dtype=np.uint8),
}


@dataclass
class PostprocessParams:
    binarization_threshold: float
    removal_threshold: int
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 <= self.binarization_threshold <= 1.0:
            raise ValueError("binarization_threshold must be in [0, 1]")
        if self.removal_threshold < 0:
            raise ValueError("removal_threshold must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class GridSearchResult:
    best: PostprocessParams
    best_iou: float
    bt_grid: list
    rt_grid: list
    connectivity: int
    surface: list  # [{"bt", "rt", "iou"}, ...] covering the full grid

    def to_dict(self) -> dict:
        return {
            "best": {
                "binarization_threshold": self.best.binarization_threshold,
                "removal_threshold": self.best.removal_threshold,
                "connectivity": self.best.connectivity,
            },
            "best_iou": self.best_iou,
            "bt_grid": list(self.bt_grid),
            "rt_grid": list(self.rt_grid),
            "connectivity": self.connectivity,
            "surface": self.surface,
        }

    def save_json(self, path: Path | str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_json(cls, path: Path | str) -> "GridSearchResult":
        with open(path) as f:
            d = json.load(f)
        best = PostprocessParams(
            binarization_threshold=d["best"]["binarization_threshold"],
            removal_threshold=d["best"]["removal_threshold"],
            connectivity=d["best"]["connectivity"],
        )
        return cls(
            best=best,
            best_iou=d["best_iou"],
            bt_grid=d["bt_grid"],
            rt_grid=d["rt_grid"],
            connectivity=d["connectivity"],
            surface=d["surface"],
        )


def binarize(probabilities: np.ndarray, bt: float) -> np.ndarray:
    """Strict threshold: 1 where p > BT, else 0. BT is compared in the map's dtype."""
    if not 0.0 <= bt <= 1.0:
        raise ValueError("binarization threshold must be in [0, 1]")
    p = np.asarray(probabilities)
    return (p > np.asarray(bt, dtype=p.dtype)).astype(np.uint8)


def remove_small_components(mask: np.ndarray, rt: int, connectivity: int = 8) -> np.ndarray:
    """Zero out connected components with pixel area < RT. RT = 0 is the identity."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    mask = mask.astype(np.uint8)
    if rt <= 0 or not mask.any():
        return mask.copy()
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())
    keep = areas >= rt
    keep[0] = False
    return keep[labels].astype(np.uint8)


def apply_postprocess(probabilities: np.ndarray, params: PostprocessParams) -> np.ndarray:
    mask = binarize(probabilities, params.binarization_threshold)
    return remove_small_components(mask, params.removal_threshold, params.connectivity)


def resize_probabilities(probabilities: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample a probability map to the ground-truth resolution, so the
    removal threshold is denominated in ground-truth pixels."""
    h, w = target_hw
    if probabilities.shape == (h, w):
        return probabilities
    return cv2.resize(probabilities.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)


def grid_search(
    probability_maps: list[np.ndarray],
    truth_masks: list[np.ndarray],
    bt_grid=DEFAULT_BT_GRID,
    rt_grid=DEFAULT_RT_GRID,
    connectivity: int = 8,
) -> GridSearchResult:
    """Sweep (BT, RT) over the validation predictions and return the pooled-IoU argmax.

    Probability maps are consumed as given (compute them once upstream). Ties
    break toward the lowest BT, then the lowest RT.
    """
    if not probability_maps or len(probability_maps) != len(truth_masks):
        raise ValueError("need equal-length, nonempty prediction and truth lists")
    if len(bt_grid) == 0 or len(rt_grid) == 0:
        raise ValueError("grids must be nonempty")
    for p, t in zip(probability_maps, truth_masks):
        if p.shape != t.shape:
            raise ValueError(f"resolution mismatch: prediction {p.shape} vs truth {t.shape}")

    surface = []
    best_params, best_iou = None, -1.0
    for bt in bt_grid:
        binarized = [binarize(p, bt) for p in probability_maps]
        for rt in rt_grid:
            pooled = ConfusionCounts(0, 0, 0, 0)
            for mask, truth in zip(binarized, truth_masks):
                cleaned = remove_small_components(mask, rt, connectivity)
                pooled = pooled + confusion(cleaned, truth)
            iou = metrics_from_counts(pooled).iou
            surface.append({"bt": float(bt), "rt": int(rt), "iou": float(iou)})
            if iou > best_iou:
                best_iou = iou
                best_params = PostprocessParams(float(bt), int(rt), connectivity)
    return GridSearchResult(
        best=best_params,
        best_iou=float(best_iou),
        bt_grid=list(bt_grid),
        rt_grid=list(rt_grid),
        connectivity=connectivity,
        surface=surface,
    )
