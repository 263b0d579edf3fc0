"""Convolutional decoder: progressive upsampling with concat skip fusion.

Internal structure (U-Net style conv blocks, nearest-neighbor upsampling,
sigmoid output head) is an artifact choice fixed for reproducibility; it is
not canonical to any reference design.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import _init_module
from .errors import ConfigError


class _UpStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.fuse = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.GELU(),
        )
        self.smooth = nn.Sequential(
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.GELU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.fuse(x)
        x = F.interpolate(x, scale_factor=self.scale, mode="nearest")
        return self.smooth(x)


class ConvDecoder(nn.Module):
    """Restores a full-resolution image from the bottleneck plus 4 skips.

    Stage k fuses the matching skip by channel concatenation; every stage
    doubles resolution except the last, which upsamples by the encoder's
    stage-1 stride.  ``predict_residual`` switches the head from a direct
    sigmoid image to a correction added onto the degraded input.
    """

    def __init__(self, skip_channels: tuple[int, ...] = (32, 64, 128, 256),
                 widths: tuple[int, ...] | None = None,
                 final_scale: int = 4, predict_residual: bool = False):
        super().__init__()
        if widths is None:
            widths = tuple(max(c // 2, 8) for c in reversed(skip_channels))
        if len(widths) != len(skip_channels):
            raise ConfigError(
                f"decoder needs one width per skip: {len(skip_channels)} skips, "
                f"{len(widths)} widths"
            )
        self.skip_channels = tuple(skip_channels)
        self.widths = tuple(widths)
        self.predict_residual = predict_residual
        stages = []
        prev = skip_channels[-1]
        for stage_idx, width in enumerate(widths):
            skip_ch = skip_channels[len(skip_channels) - 1 - stage_idx]
            scale = final_scale if stage_idx == len(widths) - 1 else 2
            stages.append(_UpStage(prev + skip_ch, width, scale))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(prev, 3, 3, padding=1)
        self.apply(_init_module)
        if predict_residual:
            # Start from the identity mapping: the first corrections are learned.
            self.head.weight.data.zero_()
            self.head.bias.data.zero_()

    def _check_pyramid(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> None:
        if len(skips) != len(self.stages):
            raise ConfigError(f"expected {len(self.stages)} skips, got {len(skips)}")
        if bottleneck.shape[-2:] != skips[-1].shape[-2:]:
            raise ConfigError("bottleneck resolution must match the deepest skip")
        for shallow, deep in zip(skips, skips[1:]):
            if shallow.shape[-2] != 2 * deep.shape[-2] or shallow.shape[-1] != 2 * deep.shape[-1]:
                raise ConfigError(
                    "skip resolutions must halve stage to stage, got "
                    f"{[tuple(s.shape[-2:]) for s in skips]}"
                )
        for skip, ch in zip(skips, self.skip_channels):
            if skip.shape[1] != ch:
                raise ConfigError(
                    f"skip channels {[s.shape[1] for s in skips]} do not match "
                    f"configured {self.skip_channels}"
                )

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor],
                base: torch.Tensor | None = None) -> torch.Tensor:
        self._check_pyramid(bottleneck, skips)
        x = bottleneck
        for stage_idx, stage in enumerate(self.stages):
            skip = skips[len(skips) - 1 - stage_idx]
            x = stage(torch.cat([x, skip], dim=1))
        out = self.head(x)
        if self.predict_residual:
            if base is None:
                raise ConfigError("residual prediction needs the degraded input as base")
            return torch.clamp(base + out, 0.0, 1.0)
        return torch.sigmoid(out)
