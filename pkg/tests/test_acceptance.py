"""Acceptance suite: one test per release criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see every verdict. The
slowest tests (overfit, end-to-end command chain) stay under a few minutes on
a laptop CPU.
"""

import itertools
import json

import numpy as np
import pytest
import torch

from ptxseg import cli
from ptxseg import dataset as ds
from ptxseg import trainer as tr
from ptxseg.augment import TransformSpec, apply_paired, build_pipeline
from ptxseg.metrics import ConfusionCounts, confusion, metrics_from_counts
from ptxseg.model import build_model, tiny_config
from ptxseg.objective import ScheduleConfig, bce, combined_loss, cosine_lr, dice_loss
from ptxseg.postprocess import binarize, grid_search, remove_small_components
from tests.test_postprocess import _spurious_blob_case, flood_fill_removal


def _criterion(name: str, passed: bool, detail: str = ""):
    verdict = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[ACCEPTANCE] {name}: {verdict}{suffix}")
    assert passed, f"{name}{suffix}"


# --------------------------------------------------------------------------
# published-metric identity
# --------------------------------------------------------------------------


def test_published_metric_identity():
    """precision 0.9269 and recall 0.7418 must reproduce F1 0.8241 and pooled
    IoU 0.7008 through the same formulas the evaluation code uses."""
    # Integer counts chosen so tp/(tp+fp) and tp/(tp+fn) hit the published
    # precision/recall exactly: tp = 9269*7418, tp+fp = 7418*10000,
    # tp+fn = 9269*10000.
    tp = 9269 * 7418
    fp = 7418 * (10000 - 9269)
    fn = 9269 * (10000 - 7418)
    tn = 1_759_806_176  # sized so accuracy lands at 0.9842
    report = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))

    checks = [
        abs(report.precision - 0.9269) < 1e-12,
        abs(report.recall - 0.7418) < 1e-12,
        abs(report.f1 - 0.8241) < 5e-4,
        abs(report.iou - 0.7008) < 5e-4,
        abs(report.iou - report.f1 / (2.0 - report.f1)) < 1e-12,
        abs(report.accuracy - 0.9842) < 5e-4,
    ]
    detail = (f"precision={report.precision:.4f} recall={report.recall:.4f} "
              f"f1={report.f1:.6f} iou={report.iou:.6f} accuracy={report.accuracy:.6f}")
    _criterion("published-metric identity (F1 0.8241, IoU 0.7008 within 5e-4)",
               all(checks), detail)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


def _numeric_grad(fn, p, h=1e-6):
    grad = torch.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        hi = float(fn(p))
        flat[i] = orig - h
        lo = float(fn(p))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def test_gradient_check():
    """Analytic gradients of all three losses vs central finite differences,
    relative error < 1e-3 over 21 random 8x8 double-precision trials."""
    losses = {
        "bce": lambda p, y: bce(p, y),
        "dice": lambda p, y: dice_loss(p, y),
        "combined": lambda p, y: combined_loss(p, y).combined,
    }
    worst = 0.0
    trials = 0
    for name, fn in losses.items():
        for trial in range(7):
            rng = np.random.default_rng(1000 * trial + hash(name) % 1000)
            p = torch.tensor(rng.uniform(0.02, 0.98, (8, 8)), dtype=torch.float64,
                             requires_grad=True)
            y = torch.tensor((rng.random((8, 8)) < 0.5).astype(np.float64))
            fn(p, y).backward()
            numeric = _numeric_grad(lambda q: fn(q, y), p.detach().clone())
            rel = float((p.grad - numeric).norm() / (numeric.norm() + 1e-12))
            worst = max(worst, rel)
            trials += 1
    _criterion("gradient check (rel err < 1e-3, >= 20 trials)",
               trials >= 20 and worst < 1e-3,
               f"{trials} trials, worst rel err {worst:.2e}")


# --------------------------------------------------------------------------
# overfit oracle
# --------------------------------------------------------------------------


class _TargetReached(Exception):
    pass


def test_overfit_oracle(tmp_path):
    """Tiny encoder on 8 synthetic 128x128 samples: train IoU >= 0.95
    (threshold 0.5, no component removal) within 200 epochs, and mean loss over
    the last 10 epochs below the mean over the first 10."""
    data_dir = tmp_path / "overfit"
    ds.make_synthetic(data_dir, n=8, resolution=128, seed=21)
    samples = [
        ds.Sample(p.stem, p, data_dir / ds.MASKS_DIRNAME / p.name)
        for p in sorted((data_dir / ds.IMAGES_DIRNAME).glob("*.png"))
    ]
    manifest = ds.Manifest(samples=samples, split={s.stem: "train" for s in samples}, seed=0)
    train_pipe = build_pipeline("train", 128,
                                overrides=[TransformSpec("resize", 1.0, {"target": 128})])
    val_pipe = build_pipeline("val", 128)

    torch.manual_seed(0)
    model = build_model(tiny_config(128))
    config = tr.TrainConfig(batch_size=4, max_epochs=200, early_stop_patience=200,
                            lr_max=3e-3, lr_min=1e-4, seed=0,
                            checkpoint_dir=str(tmp_path / "ckpt"), device="cpu")

    records = []

    def stop_when_reached(record):
        records.append(record)
        if record.val_iou >= 0.95 and record.epoch >= 19:
            raise _TargetReached

    def train_split_iou(m):
        return tr.validate(m, manifest.train_samples(), val_pipe, "cpu")

    try:
        tr.fit(model, manifest, train_pipe, val_pipe, config,
               validate_fn=train_split_iou, on_epoch_end=stop_when_reached)
    except _TargetReached:
        pass

    best_iou = max(r.val_iou for r in records)
    first10 = float(np.mean([r.train_loss for r in records[:10]]))
    last10 = float(np.mean([r.train_loss for r in records[-10:]]))
    passed = best_iou >= 0.95 and len(records) <= 200 and last10 < first10
    _criterion("overfit oracle (train IoU >= 0.95 within 200 epochs, loss decreasing)",
               passed,
               f"IoU {best_iou:.4f} after {len(records)} epochs; "
               f"loss {first10:.4f} -> {last10:.4f}")


# --------------------------------------------------------------------------
# component removal vs flood fill
# --------------------------------------------------------------------------


def test_component_removal_oracle():
    """remove_small_components agrees with a brute-force flood fill on all 512
    3x3 masks and 1000 random 16x16 masks, both connectivities, RT in
    {0,1,2,3,5}."""
    rts = (0, 1, 2, 3, 5)
    mismatches = 0
    checked = 0

    for bits in range(512):
        mask = np.array([(bits >> k) & 1 for k in range(9)], dtype=np.uint8).reshape(3, 3)
        for connectivity, rt in itertools.product((4, 8), rts):
            got = remove_small_components(mask, rt, connectivity)
            want = flood_fill_removal(mask, rt, connectivity)
            mismatches += int(not np.array_equal(got, want))
            checked += 1

    rng = np.random.default_rng(42)
    for _ in range(1000):
        mask = (rng.random((16, 16)) < rng.uniform(0.05, 0.8)).astype(np.uint8)
        for connectivity, rt in itertools.product((4, 8), rts):
            got = remove_small_components(mask, rt, connectivity)
            want = flood_fill_removal(mask, rt, connectivity)
            mismatches += int(not np.array_equal(got, want))
            checked += 1

    _criterion("component-removal oracle (512 exhaustive + 1000 random masks)",
               mismatches == 0, f"{checked} comparisons, {mismatches} mismatches")


# --------------------------------------------------------------------------
# cosine schedule
# --------------------------------------------------------------------------


def test_cosine_schedule():
    """lr(0) = 1e-4 and lr(total) = 1e-6 exactly; nonincreasing over 10,000 steps."""
    config = ScheduleConfig(lr_max=1e-4, lr_min=1e-6, total_steps=10_000)
    values = [cosine_lr(step, config) for step in range(10_001)]
    endpoints_exact = values[0] == 1e-4 and values[-1] == 1e-6
    monotone = all(a >= b for a, b in zip(values, values[1:]))
    _criterion("cosine schedule (exact endpoints, monotone over 10,000 steps)",
               endpoints_exact and monotone,
               f"lr(0)={values[0]:.0e} lr(total)={values[-1]:.0e}")


# --------------------------------------------------------------------------
# RLE round trip
# --------------------------------------------------------------------------


def test_rle_round_trip():
    """Round-trip identity on 1000 random masks; empty mask <-> empty string."""
    rng = np.random.default_rng(7)
    shapes = [(1, 1), (1, 64), (64, 1), (16, 16), (13, 29), (64, 64), (7, 111)]
    failures = 0
    for i in range(1000):
        shape = shapes[i % len(shapes)]
        mask = (rng.random(shape) < rng.uniform(0.0, 1.0)).astype(np.uint8)
        text = ds.rle_encode(mask).to_text()
        decoded = ds.rle_decode(ds.RleMask.from_text(text, shape[1], shape[0]))
        failures += int(not np.array_equal(decoded, mask))

    empty = np.zeros((9, 9), np.uint8)
    empty_ok = (ds.rle_encode(empty).to_text() == ""
                and np.array_equal(ds.rle_decode(ds.RleMask.from_text("", 9, 9)),
                                   np.zeros((9, 9), np.uint8)))
    _criterion("RLE round trip (1000 random masks + empty-string identity)",
               failures == 0 and empty_ok, f"{failures} round-trip failures")


# --------------------------------------------------------------------------
# paired augmentation geometry
# --------------------------------------------------------------------------


def test_paired_augmentation_geometry():
    """Over 100 delta-pixel trials under flip/shift/rotate, the image's hot
    pixel tracks the mask's foreground (1-px rounding band allowed, since the
    image resamples bilinearly and the mask nearest-neighbor); masks stay
    binary under every pipeline."""
    rigid = build_pipeline("train", 96, overrides=[
        TransformSpec("horizontal_flip", 0.5),
        TransformSpec("affine", 1.0,
                      {"shift_limit": 0.10, "scale_limit": 0.0, "rotate_limit": 15.0}),
    ])
    bad_trials = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        r, c = int(rng.integers(30, 66)), int(rng.integers(30, 66))
        image = np.zeros((96, 96, 3), np.float32)
        image[r, c] = 1.0
        mask = np.zeros((96, 96), np.uint8)
        mask[r, c] = 1
        out_image, out_mask = apply_paired(rigid, image, mask, seed=trial)
        gray = out_image.mean(axis=2)
        foreground = np.argwhere(out_mask == 1)
        if len(foreground) == 0:
            bad_trials += int(gray.max() >= 0.5)
            continue
        hot = np.array(np.unravel_index(np.argmax(gray), gray.shape))
        bad_trials += int(np.abs(foreground - hot).max(axis=1).min() > 1)

    rng = np.random.default_rng(0)
    binary_ok = True
    pipelines = [build_pipeline("train", 64), build_pipeline("val", 64)]
    for kind in ("horizontal_flip", "affine", "optical_distortion", "brightness_contrast"):
        pipelines.append(build_pipeline("train", 64, overrides=[TransformSpec(kind, 1.0)]))
    for pipe in pipelines:
        for seed in range(10):
            m = (rng.random((64, 64)) < 0.35).astype(np.uint8)
            img = rng.random((64, 64, 3)).astype(np.float32)
            _, out_mask = apply_paired(pipe, img, m, seed)
            binary_ok &= bool(set(np.unique(out_mask)) <= {0, 1})

    _criterion("paired-augmentation geometry (100 delta-pixel trials + binarity)",
               bad_trials == 0 and binary_ok,
               f"{bad_trials} geometry failures; binarity {'ok' if binary_ok else 'BROKEN'}")


# --------------------------------------------------------------------------
# grid search vs exhaustive recompute
# --------------------------------------------------------------------------


def test_grid_search_argmax():
    """On the spurious-blob validation set, the returned argmax matches an
    independent exhaustive recompute, and the stored best IoU is reproducible."""
    maps, truths = _spurious_blob_case()
    bt_grid = (0.2, 0.3, 0.35, 0.5, 0.7, 0.9)
    rt_grid = (0, 8, 64, 512)
    result = grid_search(maps, truths, bt_grid, rt_grid)

    best = None
    for bt in bt_grid:
        for rt in rt_grid:
            pooled = ConfusionCounts(0, 0, 0, 0)
            for p, t in zip(maps, truths):
                pred = remove_small_components(binarize(p, bt), rt, 8)
                pooled = pooled + confusion(pred, t)
            iou = metrics_from_counts(pooled).iou
            if best is None or iou > best[2]:
                best = (bt, rt, iou)

    argmax_matches = (result.best.binarization_threshold == best[0]
                      and result.best.removal_threshold == best[1])
    iou_matches = abs(result.best_iou - best[2]) < 1e-12

    # recompute at the stored best params from scratch
    pooled = ConfusionCounts(0, 0, 0, 0)
    for p, t in zip(maps, truths):
        pred = remove_small_components(
            binarize(p, result.best.binarization_threshold),
            result.best.removal_threshold, result.best.connectivity)
        pooled = pooled + confusion(pred, t)
    replay_matches = abs(metrics_from_counts(pooled).iou - result.best_iou) < 1e-12

    _criterion("grid-search argmax (matches exhaustive recompute)",
               argmax_matches and iou_matches and replay_matches,
               f"best BT={result.best.binarization_threshold} "
               f"RT={result.best.removal_threshold} IoU={result.best_iou:.4f}")


# --------------------------------------------------------------------------
# end-to-end command chain
# --------------------------------------------------------------------------


def test_end_to_end_chain(tmp_path):
    """prepare(synthetic) -> train(tiny) -> tune -> evaluate -> predict, all
    exit 0, producing every expected artifact."""
    root = tmp_path / "data"
    train_out = tmp_path / "train"
    tune_out = tmp_path / "tune"
    eval_out = tmp_path / "eval"
    pred_out = tmp_path / "pred"

    steps = [
        ["prepare", "--data-root", root, "--synthetic", "10", "--resolution", "64", "--seed", "1"],
        ["train", "--data-root", root, "--out", train_out,
         "--resolution", "64", "--max-epochs", "2", "--batch-size", "4"],
        ["tune", "--data-root", root, "--checkpoint", train_out / "checkpoints" / "best.pt",
         "--out", tune_out, "--bt-grid", "0.3,0.5,0.7", "--rt-grid", "0,8"],
        ["evaluate", "--data-root", root, "--checkpoint", train_out / "checkpoints" / "best.pt",
         "--params", tune_out / "grid_search.json", "--out", eval_out, "--overlays", "2"],
        ["predict", "--checkpoint", train_out / "checkpoints" / "best.pt",
         "--params", tune_out / "grid_search.json",
         "--images", root / "images", "--out", pred_out, "--rle"],
    ]
    exit_codes = [cli.main([str(a) for a in argv]) for argv in steps]

    artifacts = {
        "manifest": root / "manifest.csv",
        "best checkpoint": train_out / "checkpoints" / "best.pt",
        "epoch log": train_out / "epochs.jsonl",
        "curve figure": train_out / "curves.png",
        "surface json": tune_out / "grid_search.json",
        "metrics json": eval_out / "metrics.json",
        "confusion figure": eval_out / "confusion_matrix.png",
        "run json": pred_out / "run.json",
        "rle csv": pred_out / "rle.csv",
    }
    missing = [name for name, path in artifacts.items() if not path.exists()]
    overlays = len(list(eval_out.glob("overlay_*.png")))
    pred_masks = len(list(pred_out.glob("sample_*.png")))
    metrics_parse = json.loads((eval_out / "metrics.json").read_text()) if not missing else {}

    passed = (exit_codes == [0, 0, 0, 0, 0] and not missing
              and overlays == 2 and pred_masks == 10
              and "metrics" in metrics_parse)
    _criterion("end-to-end chain (prepare -> train -> tune -> evaluate -> predict)",
               passed,
               f"exit codes {exit_codes}; missing {missing or 'none'}; "
               f"{overlays} overlays, {pred_masks} predicted masks")
