"""U-Net segmentation model: pluggable 5-stage encoder + skip-connected decoder
with a sigmoid pixel-probability head.

Any encoder exposing ``feature_channels`` and returning 5 feature maps at
strides (2, 4, 8, 16, 32) plugs into the decoder. Two families are provided:
a compound-scaled inverted-residual encoder ("b0".."b7", width/depth grown
together from one baseline) and a small plain-conv encoder ("tiny") for tests
and CPU-scale runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

ENCODER_STRIDES = (2, 4, 8, 16, 32)

# (width_coefficient, depth_coefficient) per variant; resolution is configured
# separately through ModelConfig.resolution.
COMPOUND_COEFFS = {
    "b0": (1.0, 1.0),
    "b1": (1.0, 1.1),
    "b2": (1.1, 1.2),
    "b3": (1.2, 1.4),
    "b4": (1.4, 1.8),
    "b5": (1.6, 2.2),
    "b6": (1.8, 2.6),
    "b7": (2.0, 3.1),
}

# Baseline block groups: (expand_ratio, channels, repeats, kernel, stride).
_BASE_BLOCKS = (
    (1, 16, 1, 3, 1),
    (6, 24, 2, 3, 2),
    (6, 40, 2, 5, 2),
    (6, 80, 3, 3, 2),
    (6, 112, 3, 5, 1),
    (6, 192, 4, 5, 2),
    (6, 320, 1, 3, 1),
)
_BASE_STEM = 32
# Groups whose outputs feed the decoder (strides 2, 4, 8, 16, 32).
_FEATURE_GROUPS = (0, 1, 2, 4, 6)

TINY_STAGE_CHANNELS = (8, 16, 24, 32, 48)
TINY_DECODER_CHANNELS = (64, 48, 32, 24, 16)


@dataclass
class ModelConfig:
    encoder: str = "b4"
    decoder_channels: tuple = (256, 128, 64, 32, 16)
    upsample_mode: str = "nearest_then_conv"  # or "transposed_conv"
    in_channels: int = 3
    resolution: int = 512
    pretrained_path: str | None = None

    def __post_init__(self):
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.decoder_channels) != 5:
            raise ValueError("decoder_channels must have exactly 5 entries")
        if self.upsample_mode not in ("nearest_then_conv", "transposed_conv"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.encoder != "tiny" and self.encoder not in COMPOUND_COEFFS:
            raise ValueError(f"unknown encoder {self.encoder!r}")


def tiny_config(resolution: int = 128) -> ModelConfig:
    """Small configuration used for tests and CPU overfit runs (< 1M parameters)."""
    return ModelConfig(encoder="tiny", decoder_channels=TINY_DECODER_CHANNELS, resolution=resolution)


def round_channels(channels: float, divisor: int = 8) -> int:
    """Width scaling rounds to the nearest multiple of ``divisor`` without
    dropping more than 10% of the requested width."""
    rounded = max(divisor, int(channels + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * channels:
        rounded += divisor
    return rounded


def round_repeats(repeats: int, depth_coefficient: float) -> int:
    return int(math.ceil(depth_coefficient * repeats))


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class InvertedResidual(nn.Module):
    """Expand -> depthwise -> project block with a residual when shapes allow."""

    def __init__(self, in_ch, out_ch, stride, expand_ratio, kernel):
        super().__init__()
        mid = in_ch * expand_ratio
        layers = []
        if expand_ratio != 1:
            layers += [
                nn.Conv2d(in_ch, mid, 1, bias=False),
                nn.BatchNorm2d(mid),
                nn.SiLU(inplace=True),
            ]
        layers += [
            nn.Conv2d(mid, mid, kernel, stride=stride, padding=kernel // 2, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(inplace=True),
            nn.Conv2d(mid, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        self.block = nn.Sequential(*layers)
        self.use_residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_residual else out


class CompoundEncoder(nn.Module):
    """Inverted-residual encoder family scaled in width and depth together."""

    def __init__(self, variant: str, in_channels: int = 3):
        super().__init__()
        width, depth = COMPOUND_COEFFS[variant]
        self.variant = variant

        stem_ch = round_channels(_BASE_STEM * width)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, stem_ch, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem_ch),
            nn.SiLU(inplace=True),
        )

        groups = []
        channels = stem_ch
        feature_channels = []
        for gi, (expand, base_ch, base_repeats, kernel, stride) in enumerate(_BASE_BLOCKS):
            out_ch = round_channels(base_ch * width)
            blocks = []
            for r in range(round_repeats(base_repeats, depth)):
                blocks.append(InvertedResidual(channels, out_ch, stride if r == 0 else 1, expand, kernel))
                channels = out_ch
            groups.append(nn.Sequential(*blocks))
            if gi in _FEATURE_GROUPS:
                feature_channels.append(out_ch)
        self.groups = nn.ModuleList(groups)
        self.feature_channels = feature_channels

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        features = []
        for gi, group in enumerate(self.groups):
            x = group(x)
            if gi in _FEATURE_GROUPS:
                features.append(x)
        return features


class TinyEncoder(nn.Module):
    """Plain strided double-conv encoder; small enough for CPU test runs."""

    def __init__(self, in_channels: int = 3, stage_channels=TINY_STAGE_CHANNELS):
        super().__init__()
        stages = []
        channels = in_channels
        for out_ch in stage_channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(channels, out_ch, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            channels = out_ch
        self.stages = nn.ModuleList(stages)
        self.feature_channels = list(stage_channels)

    def forward(self, x) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class DecoderBlock(nn.Module):
    """Upsample x2, concatenate the encoder skip (when present), then two 3x3 convs."""

    def __init__(self, in_ch, skip_ch, out_ch, upsample_mode):
        super().__init__()
        if upsample_mode == "transposed_conv":
            self.upsample = nn.ConvTranspose2d(in_ch, in_ch, 2, stride=2)
        else:
            self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = ConvBlock(in_ch + skip_ch, out_ch)

    def forward(self, x, skip=None):
        x = self.upsample(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class SegmentationModel(nn.Module):
    """Encoder + skip-connected decoder + 1x1 conv with sigmoid head.

    forward: (B, in_channels, H, W) in [0, 1] -> (B, 1, H, W) probabilities,
    H and W divisible by 32.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.encoder == "tiny":
            self.encoder = TinyEncoder(config.in_channels)
        else:
            self.encoder = CompoundEncoder(config.encoder, config.in_channels)

        enc_ch = self.encoder.feature_channels
        if len(enc_ch) != 5:
            raise ValueError(f"encoder must expose 5 feature stages, got {len(enc_ch)}")

        # Bottleneck (stride 32) flows up; stages at strides 16, 8, 4, 2 feed
        # skips; the last block upsamples to full resolution without a skip.
        skip_channels = [enc_ch[3], enc_ch[2], enc_ch[1], enc_ch[0], 0]
        blocks = []
        in_ch = enc_ch[4]
        for skip_ch, out_ch in zip(skip_channels, config.decoder_channels):
            blocks.append(DecoderBlock(in_ch, skip_ch, out_ch, config.upsample_mode))
            in_ch = out_ch
        self.decoder = nn.ModuleList(blocks)
        self.head = nn.Conv2d(config.decoder_channels[-1], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % 32 != 0 or x.shape[3] % 32 != 0:
            raise ValueError(f"input spatial size {tuple(x.shape[2:])} must be divisible by 32")
        features = self.encoder(x)
        skips = [features[3], features[2], features[1], features[0], None]
        out = features[4]
        for block, skip in zip(self.decoder, skips):
            out = block(out, skip)
        return torch.sigmoid(self.head(out))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: ModelConfig) -> SegmentationModel:
    """Construct the model; loads encoder weights when pretrained_path is set."""
    if config.resolution % 32 != 0:
        raise ValueError(f"resolution {config.resolution} is not divisible by 32")
    model = SegmentationModel(config)
    if config.pretrained_path is not None:
        path = Path(config.pretrained_path)
        if not path.exists():
            raise FileNotFoundError(
                f"pretrained encoder weights not found at {path}; "
                "drop pretrained_path (or pass --from-scratch) to train from random init"
            )
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.encoder.load_state_dict(state)
    return model
