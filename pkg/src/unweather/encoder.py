"""Hierarchical restoration encoder with per-pixel mixed depthwise kernels.

Four transformer stages connected by strided conv downsampling.  Each block
pairs spatially-reduced self-attention with a feed-forward network whose
second branch convolves with a *location-dependent* kernel: a small bank of
depthwise 3x3 kernels is blended per pixel by predicted sigmoid weights.
That branch's output (the degradation residual map) is surfaced so a
distillation loss can supervise it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass
class EncoderConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks: tuple[int, ...] = (3, 3, 3, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    num_kernels: int = 3
    ffn_expansion: int = 4

    def __post_init__(self):
        m = len(self.channels)
        for name in ("blocks", "heads", "sr_ratios", "strides"):
            if len(getattr(self, name)) != m:
                raise ConfigError(f"encoder {name} must have {m} entries, got {getattr(self, name)}")
        if any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"encoder channels must be strictly increasing, got {self.channels}")
        if self.num_kernels < 1:
            raise ConfigError("num_kernels must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)


@dataclass
class EncoderOutput:
    skips: list[torch.Tensor]               # one (B, C_j, H_j, W_j) map per stage
    bottleneck: torch.Tensor                # deepest stage output
    residuals: list[list[torch.Tensor]]     # per stage, per block mixed-kernel branch outputs


def _init_module(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.zeros_(m.bias)
        nn.init.ones_(m.weight)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        m.weight.data.normal_(0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            m.bias.data.zero_()


def tokens_to_grid(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = x.shape
    if n != h * w:
        raise ConfigError(f"token count {n} does not form an {h}x{w} grid")
    return x.transpose(1, 2).reshape(b, c, h, w)


def grid_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def mixed_depthwise_conv(features: torch.Tensor, bank: torch.Tensor,
                         weights: torch.Tensor) -> torch.Tensor:
    """Depthwise conv with a per-location kernel blended from a bank.

    The effective kernel at (x, y) is sum_j weights[j, y, x] * bank[j]; by
    linearity this equals mixing the outputs of the individual depthwise
    convolutions, which is how it is computed.  No bias, zero padding 1, so
    output shape equals input shape.
    """
    b, c, h, w = features.shape
    n_k = bank.shape[0]
    if bank.shape[1] != c:
        raise ConfigError(f"kernel bank has {bank.shape[1]} channels, features have {c}")
    if weights.shape != (b, n_k, h, w):
        raise ConfigError(
            f"weights map shape {tuple(weights.shape)} does not match "
            f"{n_k} kernels over a {h}x{w} grid"
        )
    # (N, C, 3, 3) -> (C, N, 3, 3) -> (C*N, 1, 3, 3): group c yields N stacked outputs.
    kernels = bank.permute(1, 0, 2, 3).reshape(c * n_k, 1, 3, 3)
    per_kernel = F.conv2d(features, kernels, padding=1, groups=c).view(b, c, n_k, h, w)
    return (per_kernel * weights.unsqueeze(1)).sum(dim=2)


class SpatialKernelMix(nn.Module):
    """Kernel bank plus the conv head predicting per-pixel mixing weights."""

    def __init__(self, channels: int, num_kernels: int = 3):
        super().__init__()
        self.num_kernels = num_kernels
        bank = torch.empty(num_kernels, channels, 3, 3)
        bank.normal_(0, math.sqrt(2.0 / 9.0))
        self.bank = nn.Parameter(bank)
        self.weight_dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.weight_pw = nn.Conv2d(channels, num_kernels, 1)

    def kernel_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Sigmoid mixing weights, shape (B, num_kernels, H, W), entries in (0, 1)."""
        return torch.sigmoid(self.weight_pw(self.weight_dw(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mixed_depthwise_conv(x, self.bank, self.kernel_weights(x))


class KernelMixFFN(nn.Module):
    """Feed-forward block whose conv path adds the mixed-kernel residual branch.

    forward returns (tokens, residual): the residual is the raw mixed-kernel
    branch output on the hidden features, kept for distillation.
    """

    def __init__(self, dim: int, expansion: int = 4, num_kernels: int = 3):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.mix = SpatialKernelMix(hidden, num_kernels)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int):
        grid = tokens_to_grid(self.fc1(x), h, w)
        residual = self.mix(grid)
        mid = self.act(self.dw(grid) + residual)
        return self.fc2(grid_to_tokens(mid)), residual


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with conv-reduced keys and values."""

    def __init__(self, dim: int, heads: int, sr_ratio: int = 1):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def _qkv(self, x: torch.Tensor, h: int, w: int):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).permute(0, 2, 1, 3)

        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ConfigError(
                    f"reduction ratio {self.sr_ratio} does not divide grid {h}x{w}"
                )
            reduced = self.sr(tokens_to_grid(x, h, w))
            kv_in = self.norm(grid_to_tokens(reduced))
        else:
            kv_in = x
        kv = self.kv(kv_in).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        return q, kv[0], kv[1]

    def attention_map(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """Softmax attention weights, shape (B, heads, L, L_kv); rows sum to 1."""
        q, k, _ = self._qkv(x, h, w)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self._qkv(x, h, w)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm block: self-attention sublayer, then the kernel-mix FFN."""

    def __init__(self, dim: int, heads: int, sr_ratio: int = 1,
                 expansion: int = 4, num_kernels: int = 3):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = KernelMixFFN(dim, expansion, num_kernels)

    def forward(self, x: torch.Tensor, h: int, w: int):
        x = self.attn(self.norm1(x), h, w) + x
        ffn_out, residual = self.ffn(self.norm2(x), h, w)
        return ffn_out + x, residual


class ConvDownsample(nn.Module):
    """Single strided conv between stages: halves (or quarters) resolution
    and widens channels; layer norm on the flattened tokens."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1
        self.in_channels = in_channels
        self.proj = nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=stride - 1)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor):
        if x.shape[1] != self.in_channels:
            raise ConfigError(
                f"downsample expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(grid_to_tokens(x)), h, w


class RestorationEncoder(nn.Module):
    """Stacked stages producing multi-scale skips and per-block residuals."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        downsamples, stages, norms = [], [], []
        in_ch = cfg.in_channels
        for j in range(cfg.num_stages):
            downsamples.append(ConvDownsample(in_ch, cfg.channels[j], cfg.strides[j]))
            stages.append(nn.ModuleList([
                EncoderBlock(cfg.channels[j], cfg.heads[j], cfg.sr_ratios[j],
                             cfg.ffn_expansion, cfg.num_kernels)
                for _ in range(cfg.blocks[j])
            ]))
            norms.append(nn.LayerNorm(cfg.channels[j]))
            in_ch = cfg.channels[j]
        self.downsamples = nn.ModuleList(downsamples)
        self.stages = nn.ModuleList(stages)
        self.norms = nn.ModuleList(norms)
        self.apply(_init_module)

    def residual_channels(self) -> list[int]:
        """Channel count of the distillation residual at each stage."""
        return [c * self.cfg.ffn_expansion for c in self.cfg.channels]

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        mult = self.cfg.total_stride
        h, w = image.shape[-2:]
        if h % mult or w % mult:
            raise ConfigError(
                f"input size {h}x{w} must be divisible by {mult} "
                f"(the encoder's cumulative stride)"
            )
        skips: list[torch.Tensor] = []
        residuals: list[list[torch.Tensor]] = []
        x = image
        for down, blocks, norm in zip(self.downsamples, self.stages, self.norms):
            tokens, sh, sw = down(x)
            stage_res = []
            for block in blocks:
                tokens, res = block(tokens, sh, sw)
                stage_res.append(res)
            grid = tokens_to_grid(norm(tokens), sh, sw)
            skips.append(grid)
            residuals.append(stage_res)
            x = grid
        return EncoderOutput(skips=skips, bottleneck=skips[-1], residuals=residuals)
