"""Command-line pipeline driver.

Subcommands: synth, prepare, train, tune, evaluate, predict. Settings resolve
as defaults < YAML config (--config) < CLI flags; every run writes the fully
resolved configuration to run.json in its output directory. Exit codes:
0 success, 1 user/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import cv2
import numpy as np
import yaml

from . import dataset as ds
from . import postprocess as pp
from .augment import TransformSpec, apply_paired, build_pipeline
from .metrics import ConfusionCounts, confusion, evaluate_set
from .model import ModelConfig, build_model, count_parameters, tiny_config
from .trainer import (
    TrainConfig,
    fit,
    load_checkpoint,
    model_from_checkpoint,
    predict_probabilities,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PTXSEG_OUTPUT_ROOT"


class UserError(Exception):
    """Bad flags, config, or input layout; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def default_config() -> dict:
    """Full default run configuration; minimal usage trains the tiny model on
    synthetic data."""
    return {
        "data": {
            "root": "data/synthetic",
            "seed": 0,
            "train_fraction": 0.85,
            "stratify": False,
        },
        "model": {
            "encoder": "tiny",
            "resolution": 128,
            "decoder_channels": list(tiny_config().decoder_channels),
            "upsample_mode": "nearest_then_conv",
            "pretrained_path": None,
        },
        "augment": {
            # null -> built-in training defaults; else a list of
            # {kind, probability, parameters} entries.
            "train": None,
        },
        "train": {
            "batch_size": 8,
            "max_epochs": 40,
            "early_stop_patience": 20,
            "lr_max": 1e-4,
            "lr_min": 1e-6,
            "mixed_precision": False,
            "seed": 0,
            "device": None,
        },
        "postprocess": {
            "bt_grid": list(pp.DEFAULT_BT_GRID),
            "rt_grid": list(pp.DEFAULT_RT_GRID),
            "connectivity": 8,
        },
        "output": {
            "root": os.environ.get(OUTPUT_ROOT_ENV, "runs"),
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(args) -> dict:
    config = default_config()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise UserError(f"config file must hold a mapping: {path}")
        config = _deep_merge(config, loaded)

    flag_map = {
        "data_root": ("data", "root"),
        "seed": ("data", "seed"),
        "train_fraction": ("data", "train_fraction"),
        "encoder": ("model", "encoder"),
        "resolution": ("model", "resolution"),
        "pretrained": ("model", "pretrained_path"),
        "batch_size": ("train", "batch_size"),
        "max_epochs": ("train", "max_epochs"),
        "patience": ("train", "early_stop_patience"),
        "lr_max": ("train", "lr_max"),
        "lr_min": ("train", "lr_min"),
        "device": ("train", "device"),
        "connectivity": ("postprocess", "connectivity"),
    }
    for flag, (section, key) in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            config[section][key] = value
    if getattr(args, "stratify", False):
        config["data"]["stratify"] = True
    if getattr(args, "mixed_precision", False):
        config["train"]["mixed_precision"] = True
    if getattr(args, "from_scratch", False):
        config["model"]["pretrained_path"] = None
    if getattr(args, "bt_grid", None):
        config["postprocess"]["bt_grid"] = [float(v) for v in args.bt_grid.split(",")]
    if getattr(args, "rt_grid", None):
        config["postprocess"]["rt_grid"] = [int(v) for v in args.rt_grid.split(",")]
    config["train"]["seed"] = config["data"]["seed"] if config["train"].get("seed") is None else config["train"]["seed"]
    return config


def _model_config(config: dict) -> ModelConfig:
    m = config["model"]
    return ModelConfig(
        encoder=m["encoder"],
        decoder_channels=tuple(m["decoder_channels"]),
        upsample_mode=m["upsample_mode"],
        resolution=int(m["resolution"]),
        pretrained_path=m["pretrained_path"],
    )


def _train_config(config: dict, checkpoint_dir: Path) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        max_epochs=int(t["max_epochs"]),
        early_stop_patience=int(t["early_stop_patience"]),
        lr_max=float(t["lr_max"]),
        lr_min=float(t["lr_min"]),
        mixed_precision=bool(t["mixed_precision"]),
        seed=int(t["seed"]),
        checkpoint_dir=str(checkpoint_dir),
        device=t["device"],
    )


def _pipelines(config: dict, no_augment: bool = False):
    resolution = int(config["model"]["resolution"])
    overrides = None
    if no_augment:
        overrides = [TransformSpec("resize", 1.0, {"target": resolution})]
    elif config["augment"]["train"] is not None:
        overrides = [TransformSpec(**spec) for spec in config["augment"]["train"]]
    train_pipe = build_pipeline("train", resolution, overrides)
    val_pipe = build_pipeline("val", resolution)
    return train_pipe, val_pipe


def _write_run_json(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": config,
    }
    with open(out_dir / "run.json", "w") as f:
        json.dump(payload, f, indent=2, default=str)


def _load_manifest(config: dict) -> ds.Manifest:
    root = Path(config["data"]["root"])
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        raise UserError(f"manifest not found at {manifest_path}; run `ptxseg prepare` first")
    return ds.load_manifest_csv(
        manifest_path, root / ds.IMAGES_DIRNAME, root / ds.MASKS_DIRNAME, seed=config["data"]["seed"]
    )


def _load_model(path: Path | str):
    state = load_checkpoint(path)
    model = model_from_checkpoint(state)
    model.eval()
    return model, state


def _inference_resolution(args, state: dict) -> int:
    """The checkpoint records its training resolution; --resolution overrides."""
    if getattr(args, "resolution", None) is not None:
        return int(args.resolution)
    return int(state["model_config"]["resolution"])


def _predict_native(model, image: np.ndarray, mask_shape, resolution: int, device: str) -> np.ndarray:
    """Model probability map, upsampled to the ground-truth resolution."""
    resized = cv2.resize(image, (resolution, resolution), interpolation=cv2.INTER_LINEAR)
    prob = predict_probabilities(model, resized, device)
    return pp.resize_probabilities(prob, mask_shape)


def _load_params(args, out_dir: Path) -> pp.PostprocessParams:
    path = getattr(args, "params", None)
    if path:
        if not Path(path).exists():
            raise UserError(f"postprocess params file not found: {path}")
        return pp.GridSearchResult.load_json(path).best
    default_path = out_dir / "grid_search.json"
    if default_path.exists():
        return pp.GridSearchResult.load_json(default_path).best
    logger.warning("no postprocess params file; falling back to BT=0.5, RT=0")
    return pp.PostprocessParams(0.5, 0)


# ---------------------------------------------------------------- figures


def save_curve_figure(records, path: Path) -> None:
    fig, ax_loss = plt.subplots(figsize=(8, 5))
    epochs = [r.epoch for r in records]
    ax_loss.plot(epochs, [r.train_loss for r in records], color="tab:blue", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:blue")
    ax_metric = ax_loss.twinx()
    ax_metric.plot(epochs, [r.val_iou for r in records], color="tab:orange", label="val IoU")
    ax_metric.plot(epochs, [r.val_f1 for r in records], color="tab:green", label="val F1")
    ax_metric.set_ylabel("validation IoU / F1")
    ax_metric.set_ylim(0.0, 1.05)
    lines = ax_loss.get_lines() + ax_metric.get_lines()
    ax_loss.legend(lines, [l.get_label() for l in lines], loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_figure(counts: ConfusionCounts, path: Path) -> None:
    matrix = np.array([[counts.tn, counts.fp], [counts.fn, counts.tp]], dtype=np.int64)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, cmap="Blues")
    for (row, col), value in np.ndenumerate(matrix):
        color = "white" if value > matrix.max() / 2 else "black"
        ax.text(col, row, f"{value:,}", ha="center", va="center", color=color)
    ax.set_xticks([0, 1], ["background", "pneumothorax"])
    ax.set_yticks([0, 1], ["background", "pneumothorax"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_overlay_figure(image: np.ndarray, truth: np.ndarray, pred: np.ndarray, path: Path) -> None:
    """Side-by-side: ground truth, prediction, and a combined overlay
    (green = truth only, red = prediction only, yellow = agreement)."""
    gray = image.mean(axis=2)
    combined = np.stack([gray, gray, gray], axis=2) * 0.6
    combined[(truth == 1) & (pred == 0)] = (0.1, 0.8, 0.1)
    combined[(pred == 1) & (truth == 0)] = (0.9, 0.15, 0.15)
    combined[(pred == 1) & (truth == 1)] = (0.95, 0.9, 0.2)

    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
    for ax in axes:
        ax.axis("off")
    axes[0].imshow(gray, cmap="gray")
    axes[0].contour(truth, levels=[0.5], colors="lime", linewidths=1.2)
    axes[0].set_title("ground truth")
    axes[1].imshow(gray, cmap="gray")
    axes[1].contour(pred, levels=[0.5], colors="red", linewidths=1.2)
    axes[1].set_title("prediction")
    axes[2].imshow(np.clip(combined, 0, 1))
    axes[2].set_title("overlay")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    config = resolve_config(args)
    root = Path(args.out or config["data"]["root"])
    ds.make_synthetic(root, args.n, args.resolution, config["data"]["seed"], args.negative_fraction)
    _write_run_json(root, "synth", config)
    print(f"wrote {args.n} synthetic pairs at {args.resolution}x{args.resolution} under {root}")
    return 0


def cmd_prepare(args) -> int:
    config = resolve_config(args)
    root = Path(config["data"]["root"])
    if args.synthetic:
        ds.make_synthetic(
            root, args.synthetic, args.resolution or int(config["model"]["resolution"]),
            config["data"]["seed"], args.negative_fraction,
        )
    manifest = ds.load_manifest(
        root / ds.IMAGES_DIRNAME,
        root / ds.MASKS_DIRNAME,
        seed=config["data"]["seed"],
        train_fraction=config["data"]["train_fraction"],
        stratify=config["data"]["stratify"],
    )
    total, positive, negative = manifest.counts()
    manifest.save_csv(root / "manifest.csv")
    _write_run_json(root, "prepare", config)
    n_train = len(manifest.train_samples())
    print(f"manifest: {total} samples ({positive} positive, {negative} negative), "
          f"split {n_train} train / {total - n_train} val -> {root / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or Path(config["output"]["root"]) / "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(config)
    train_pipe, val_pipe = _pipelines(config, no_augment=args.no_augment)
    train_cfg = _train_config(config, out_dir / "checkpoints")

    start_epoch, global_step, best_val_iou, optimizer_state = 0, 0, None, None
    if args.resume:
        state = load_checkpoint(args.resume)
        model = model_from_checkpoint(state)
        start_epoch = state["epoch"] + 1
        global_step = state["global_step"]
        best_val_iou = state["best_val_iou"]
        optimizer_state = state["optimizer_state"]
        print(f"resuming from {args.resume} at epoch {start_epoch} (step {global_step})")
    else:
        model = build_model(_model_config(config))
    print(f"model: {config['model']['encoder']} encoder, {count_parameters(model):,} parameters")

    _write_run_json(out_dir, "train", config)
    log_path = out_dir / "epochs.jsonl"
    records = []

    def on_epoch_end(record):
        records.append(record)
        with open(log_path, "a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")

    try:
        best_path, _ = fit(
            model, manifest, train_pipe, val_pipe, train_cfg,
            on_epoch_end=on_epoch_end,
            start_epoch=start_epoch,
            global_step=global_step,
            best_val_iou=best_val_iou,
            optimizer_state=optimizer_state,
        )
    finally:
        # The epoch log and curve figure must survive early stops and aborts.
        if records:
            save_curve_figure(records, out_dir / "curves.png")

    if records:
        best_iou = max(r.val_iou for r in records)
        print(f"trained {len(records)} epochs; best val IoU {best_iou:.4f}; "
              f"checkpoint {best_path}; log {log_path}")
    return 0


def cmd_tune(args) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or Path(config["output"]["root"]) / "tune")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, state = _load_model(args.checkpoint)
    device = TrainConfig(device=config["train"]["device"]).resolve_device()
    manifest = _load_manifest(config)
    resolution = _inference_resolution(args, state)

    probability_maps, truths = [], []
    for sample in manifest.val_samples():
        image = ds.read_image(sample.image_path)
        mask = ds.read_mask(sample.mask_path)
        probability_maps.append(_predict_native(model, image, mask.shape, resolution, device))
        truths.append(mask)

    result = pp.grid_search(
        probability_maps, truths,
        bt_grid=config["postprocess"]["bt_grid"],
        rt_grid=config["postprocess"]["rt_grid"],
        connectivity=config["postprocess"]["connectivity"],
    )
    result.save_json(out_dir / "grid_search.json")
    _write_run_json(out_dir, "tune", config)
    print(f"grid search over {len(result.surface)} cells: best BT={result.best.binarization_threshold} "
          f"RT={result.best.removal_threshold} (val IoU {result.best_iou:.4f}) "
          f"-> {out_dir / 'grid_search.json'}")
    return 0


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or Path(config["output"]["root"]) / "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, state = _load_model(args.checkpoint)
    device = TrainConfig(device=config["train"]["device"]).resolve_device()
    manifest = _load_manifest(config)
    resolution = _inference_resolution(args, state)
    params = _load_params(args, out_dir)

    samples = manifest.train_samples() if args.split == "train" else manifest.val_samples()
    if not samples:
        raise UserError(f"no samples in split {args.split!r}")

    pairs, overlay_budget = [], max(0, args.overlays)
    pooled = ConfusionCounts(0, 0, 0, 0)
    for i, sample in enumerate(samples):
        image = ds.read_image(sample.image_path)
        mask = ds.read_mask(sample.mask_path)
        prob = _predict_native(model, image, mask.shape, resolution, device)
        pred = pp.apply_postprocess(prob, params)
        pairs.append((pred, mask))
        pooled = pooled + confusion(pred, mask)
        if i < overlay_budget:
            save_overlay_figure(image, mask, pred, out_dir / f"overlay_{sample.stem}.png")

    report = evaluate_set(pairs, aggregation=args.aggregation)
    payload = {
        "metrics": report.to_dict(),
        "postprocess": {
            "binarization_threshold": params.binarization_threshold,
            "removal_threshold": params.removal_threshold,
            "connectivity": params.connectivity,
        },
        "split": args.split,
        "confusion": {"tp": pooled.tp, "fp": pooled.fp, "fn": pooled.fn, "tn": pooled.tn},
    }
    with open(out_dir / "metrics.json", "w") as f:
        json.dump(payload, f, indent=2)
    save_confusion_figure(pooled, out_dir / "confusion_matrix.png")
    _write_run_json(out_dir, "evaluate", config)
    print(f"{args.split} split ({report.n_images} images, {report.aggregation}): "
          f"IoU {report.iou:.4f} F1 {report.f1:.4f} accuracy {report.accuracy:.4f} "
          f"precision {report.precision:.4f} recall {report.recall:.4f} -> {out_dir / 'metrics.json'}")
    return 0


def cmd_predict(args) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or Path(config["output"]["root"]) / "predict")
    out_dir.mkdir(parents=True, exist_ok=True)
    model, state = _load_model(args.checkpoint)
    device = TrainConfig(device=config["train"]["device"]).resolve_device()
    resolution = _inference_resolution(args, state)
    params = _load_params(args, out_dir)

    image_paths = _collect_images(args.images)
    rle_rows, failures = [], []
    for path in image_paths:
        try:
            image = ds.read_image(path)
            prob = _predict_native(model, image, image.shape[:2], resolution, device)
            mask = pp.apply_postprocess(prob, params)
            cv2.imwrite(str(out_dir / f"{path.stem}.png"), mask * 255)
            rle_rows.append((path.stem, ds.rle_encode(mask).to_text()))
        except Exception as exc:
            logger.error("failed on %s: %s", path, exc)
            failures.append(path)

    if args.rle:
        with open(out_dir / "rle.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stem", "rle"])
            writer.writerows(rle_rows)
    _write_run_json(out_dir, "predict", config)
    print(f"wrote {len(rle_rows)} masks to {out_dir}" +
          (f"; {len(failures)} failed" if failures else ""))
    return 2 if failures else 0


def _collect_images(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        paths = sorted(path.glob("*.png"))
        if not paths:
            raise UserError(f"no .png images found in {path}")
        return paths
    if path.exists():
        return [path]
    raise UserError(f"input image path not found: {path}")


# ---------------------------------------------------------------- parser


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file; flags override its values")
    parser.add_argument("--data-root", dest="data_root", help="dataset root with images/ and masks/")
    parser.add_argument("--out", help="output directory for this command")
    parser.add_argument("--seed", type=int, help="seed for split/shuffle/augmentation")
    parser.add_argument("--device", help="cpu or cuda (default: auto)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptxseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--negative-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="index a dataset and write the manifest CSV")
    _add_common(p)
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic pairs first")
    p.add_argument("--resolution", type=int, help="resolution for --synthetic")
    p.add_argument("--negative-fraction", type=float, default=0.25)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--stratify", action="store_true", help="stratify the split by positive label")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the model, logging one JSON line per epoch")
    _add_common(p)
    p.add_argument("--encoder", help="tiny or b0..b7")
    p.add_argument("--resolution", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--mixed-precision", dest="mixed_precision", action="store_true")
    p.add_argument("--no-augment", dest="no_augment", action="store_true",
                   help="train with resize only (no randomized transforms)")
    p.add_argument("--pretrained", help="path to encoder weights")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true",
                   help="ignore any configured pretrained encoder weights")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="grid-search (BT, RT) on the validation split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--bt-grid", dest="bt_grid", help="comma-separated thresholds")
    p.add_argument("--rt-grid", dest="rt_grid", help="comma-separated pixel areas")
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", help="apply postprocessing and report metrics + figures")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--params", help="grid_search.json with tuned (BT, RT)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--aggregation", choices=("pooled", "mean_per_image"), default="pooled")
    p.add_argument("--overlays", type=int, default=4, help="number of overlay figures to emit")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write post-processed binary mask PNGs (and optional RLE)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--params", help="grid_search.json with tuned (BT, RT)")
    p.add_argument("--images", required=True, help="input image file or directory of .png files")
    p.add_argument("--rle", action="store_true", help="also write rle.csv")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("command failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
