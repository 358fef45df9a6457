"""Training loop: seeded batching, Adam + cosine schedule, per-epoch validation,
best-checkpoint tracking and early stopping on validation IoU."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPipeline, apply_paired, derive_seed
from .dataset import Manifest, Sample, read_image, read_mask
from .metrics import ConfusionCounts, confusion, metrics_from_counts
from .model import ModelConfig, SegmentationModel, build_model
from .objective import ScheduleConfig, combined_loss, cosine_lr
from .postprocess import binarize

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# Validation threshold before any (BT, RT) tuning has happened.
VALIDATION_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 300
    early_stop_patience: int = 20
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    mixed_precision: bool = False
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    # Strictly-greater-by-delta comparison guards float jitter in "improved".
    min_improvement: float = 1e-5
    device: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    def resolve_device(self) -> str:
        if self.device is not None:
            return self.device
        return "cuda" if torch.cuda.is_available() else "cpu"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    val_f1: float
    lr: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


def _load_batch(samples: list[Sample], pipeline: AugmentPipeline, seeds: list[int]):
    images, masks = [], []
    for sample, seed in zip(samples, seeds):
        image = read_image(sample.image_path)
        mask = read_mask(sample.mask_path)
        image, mask = apply_paired(pipeline, image, mask, seed)
        images.append(image.transpose(2, 0, 1))
        masks.append(mask.astype(np.float32))
    x = torch.from_numpy(np.stack(images))
    y = torch.from_numpy(np.stack(masks))
    return x, y


def predict_probabilities(model: SegmentationModel, image: np.ndarray, device: str = "cpu") -> np.ndarray:
    """Single-image inference: H x W x 3 float image -> H x W probability map."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(image.transpose(2, 0, 1)[None]).to(device)
        prob = model(x)[0, 0].cpu().numpy()
    return prob


def validate(
    model: SegmentationModel,
    samples: list[Sample],
    pipeline: AugmentPipeline,
    device: str = "cpu",
) -> tuple[float, float]:
    """Pooled IoU/F1 over the given samples at the pre-tuning 0.5 threshold."""
    if not samples:
        raise ValueError("validation split is empty")
    pooled = ConfusionCounts(0, 0, 0, 0)
    for sample in samples:
        image = read_image(sample.image_path)
        mask = read_mask(sample.mask_path)
        image, mask = apply_paired(pipeline, image, mask, seed=0)
        prob = predict_probabilities(model, image, device)
        pooled = pooled + confusion(binarize(prob, VALIDATION_THRESHOLD), mask)
    report = metrics_from_counts(pooled)
    return report.iou, report.f1


def save_checkpoint(
    path: Path | str,
    model: SegmentationModel,
    optimizer: torch.optim.Optimizer | None,
    epoch: int,
    global_step: int,
    best_val_iou: float,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": asdict(model.config),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "global_step": global_step,
            "best_val_iou": best_val_iou,
        },
        path,
    )
    return path


def load_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {version} != supported version {CHECKPOINT_VERSION}")
    return state


def model_from_checkpoint(state: dict) -> SegmentationModel:
    cfg = dict(state["model_config"])
    cfg["decoder_channels"] = tuple(cfg["decoder_channels"])
    # Weights are restored directly; no need to re-fetch pretrained encoders.
    cfg["pretrained_path"] = None
    model = build_model(ModelConfig(**cfg))
    model.load_state_dict(state["model_state"])
    return model


def fit(
    model: SegmentationModel,
    manifest: Manifest,
    train_pipeline: AugmentPipeline,
    val_pipeline: AugmentPipeline,
    config: TrainConfig,
    validate_fn=None,
    on_epoch_end=None,
    start_epoch: int = 0,
    global_step: int = 0,
    best_val_iou: float | None = None,
    optimizer_state: dict | None = None,
) -> tuple[Path | None, list[EpochRecord]]:
    """Train until early stopping or max_epochs; returns (best checkpoint path, epoch log).

    Each epoch shuffles the train split with a seeded RNG, steps Adam at the
    cosine-scheduled rate, then validates on the full val split. A checkpoint
    is written whenever validation IoU improves; training stops after
    ``early_stop_patience`` consecutive non-improving epochs. ``validate_fn``
    and ``on_epoch_end`` are seams for tests and incremental log persistence.
    """
    device = config.resolve_device()
    train_samples = manifest.train_samples()
    val_samples = manifest.val_samples()
    if not train_samples:
        raise ValueError("manifest train split is empty")
    if not val_samples and validate_fn is None:
        raise ValueError("manifest val split is empty and no validate_fn was given")

    steps_per_epoch = len(train_samples) // config.batch_size  # drop-last batching
    if steps_per_epoch == 0:
        raise ValueError(
            f"batch_size {config.batch_size} exceeds train split size {len(train_samples)}"
        )
    schedule = ScheduleConfig(config.lr_max, config.lr_min, config.max_epochs * steps_per_epoch)

    torch.manual_seed(config.seed)
    shuffle_rng = np.random.default_rng(config.seed)
    model.to(device)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.lr_max,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    # Loss scaling only matters for float16 on CUDA; CPU autocast runs bfloat16.
    scaler = torch.amp.GradScaler(device, enabled=config.mixed_precision and device == "cuda")
    autocast_dtype = torch.float16 if device == "cuda" else torch.bfloat16

    ckpt_dir = Path(config.checkpoint_dir)
    best_path: Path | None = None
    best = -float("inf") if best_val_iou is None else best_val_iou
    if best_val_iou is not None and (ckpt_dir / "best.pt").exists():
        best_path = ckpt_dir / "best.pt"
    epochs_without_improvement = 0
    records: list[EpochRecord] = []
    indices = np.arange(len(train_samples))

    for epoch in range(start_epoch, config.max_epochs):
        epoch_start = time.monotonic()
        model.train()
        shuffle_rng.shuffle(indices)
        losses = []
        lr = cosine_lr(min(global_step, schedule.total_steps), schedule)
        for batch_idx in range(steps_per_epoch):
            batch_indices = indices[batch_idx * config.batch_size : (batch_idx + 1) * config.batch_size]
            batch = [train_samples[i] for i in batch_indices]
            seeds = [derive_seed(config.seed, epoch, int(i)) for i in batch_indices]
            x, y = _load_batch(batch, train_pipeline, seeds)
            x, y = x.to(device), y.to(device)

            lr = cosine_lr(min(global_step, schedule.total_steps), schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr

            optimizer.zero_grad()
            with torch.autocast(device_type=device, dtype=autocast_dtype, enabled=config.mixed_precision):
                prob = model(x)[:, 0]
            terms = combined_loss(prob.float(), y)  # loss reduction in full precision
            loss = terms.combined
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} batch {batch_idx} (lr={lr:.3e})"
                )
            scaler.scale(loss).backward()
            scaler.step(optimizer)
            scaler.update()
            losses.append(float(loss.detach()))
            global_step += 1

        if validate_fn is not None:
            val_iou, val_f1 = validate_fn(model)
        else:
            val_iou, val_f1 = validate(model, val_samples, val_pipeline, device)

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_iou=float(val_iou),
            val_f1=float(val_f1),
            lr=lr,
            wall_time=time.monotonic() - epoch_start,
        )
        records.append(record)
        logger.info(
            "epoch %d: loss=%.4f val_iou=%.4f val_f1=%.4f lr=%.2e",
            epoch, record.train_loss, val_iou, val_f1, lr,
        )

        if val_iou > best + config.min_improvement:
            best = val_iou
            epochs_without_improvement = 0
            best_path = save_checkpoint(ckpt_dir / "best.pt", model, optimizer, epoch, global_step, best)
        else:
            epochs_without_improvement += 1
        save_checkpoint(ckpt_dir / "last.pt", model, optimizer, epoch, global_step, best)

        if on_epoch_end is not None:
            on_epoch_end(record)

        if epochs_without_improvement >= config.early_stop_patience:
            logger.info("early stopping at epoch %d (no improvement for %d epochs)",
                        epoch, epochs_without_improvement)
            break

    return best_path, records
