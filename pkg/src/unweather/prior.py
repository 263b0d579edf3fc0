"""Weather-prior embedding bottleneck.

A short stack of transformer blocks whose attention is *cross* attention:
queries come from the encoder bottleneck features, keys and values from a
fused prior token set.  The prior fuses a learnable per-block token matrix
with a per-sample global prior vector (scaled by a weight initialized to
zero, so priors are gated in gradually during training).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import _init_module, grid_to_tokens, tokens_to_grid
from .errors import ConfigError

PRIOR_SOURCES = ("teacher", "learnable", "none")


@dataclass
class PriorConfig:
    enabled: bool = True
    num_blocks: int = 3
    heads: int = 8
    num_tokens: int = 48
    source: str = "teacher"
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.source not in PRIOR_SOURCES:
            raise ConfigError(f"prior source {self.source!r} not one of {PRIOR_SOURCES}")
        if self.num_blocks < 1 or self.num_tokens < 1:
            raise ConfigError("prior num_blocks and num_tokens must be >= 1")


class GlobalPriorProjection(nn.Module):
    """Two trainable linear layers mapping a frozen teacher embedding to the
    bottleneck channel width.  The intermediate (first-layer) feature lives in
    the teacher's embedding space and doubles as the classification feature
    compared against text class anchors."""

    def __init__(self, teacher_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(teacher_dim, teacher_dim)
        self.fc2 = nn.Linear(teacher_dim, out_dim)
        self.apply(_init_module)

    def class_feature(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.fc1(embedding)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.fc1(embedding))


class LearnablePriorEncoder(nn.Module):
    """Small trainable conv encoder producing a prior embedding directly from
    the degraded image (the no-pretrained-teacher ablation)."""

    def __init__(self, embed_dim: int, widths=(16, 32, 64)):
        super().__init__()
        layers = []
        in_ch = 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.GELU()]
            in_ch = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, embed_dim)
        self.apply(_init_module)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        pooled = self.features(image).mean(dim=(2, 3))
        return self.head(pooled)


class PriorCrossAttention(nn.Module):
    """Cross attention from feature tokens onto fused prior tokens."""

    def __init__(self, dim: int, heads: int, num_tokens: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.num_tokens = num_tokens
        self.scale = (dim // heads) ** -0.5
        self.learned_tokens = nn.Parameter(torch.empty(num_tokens, dim))
        nn.init.trunc_normal_(self.learned_tokens, std=0.02)
        self.fusion_weight = nn.Parameter(torch.zeros(()))
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def fuse_tokens(self, prior_vec: torch.Tensor | None, batch: int) -> torch.Tensor:
        """Learnable tokens plus the scaled global prior, broadcast to every row."""
        tokens = self.learned_tokens.unsqueeze(0).expand(batch, -1, -1)
        if prior_vec is None:
            return tokens
        if prior_vec.dim() == 1:
            prior_vec = prior_vec.unsqueeze(0).expand(batch, -1)
        return tokens + self.fusion_weight * prior_vec.unsqueeze(1)

    def fused_kv(self, prior_vec: torch.Tensor | None, batch: int):
        kv = self.kv(self.fuse_tokens(prior_vec, batch))
        return kv[..., : self.dim], kv[..., self.dim:]

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).permute(0, 2, 1, 3)

    def attention_map(self, x: torch.Tensor, prior_vec: torch.Tensor | None = None) -> torch.Tensor:
        k, _ = self.fused_kv(prior_vec, x.shape[0])
        q = self._split_heads(self.q(x))
        k = self._split_heads(k)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def forward(self, x: torch.Tensor, prior_vec: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        k, v = self.fused_kv(prior_vec, b)
        q = self._split_heads(self.q(x))
        k = self._split_heads(k)
        v = self._split_heads(v)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).permute(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


class FeedForward(nn.Module):
    """Plain transformer FFN (no kernel mixing here)."""

    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class PriorBlock(nn.Module):
    """Pre-norm block: prior cross-attention sublayer, then a classical FFN."""

    def __init__(self, dim: int, heads: int, num_tokens: int, expansion: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = PriorCrossAttention(dim, heads, num_tokens)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)

    def forward(self, x: torch.Tensor, prior_vec: torch.Tensor | None = None) -> torch.Tensor:
        x = self.attn(self.norm1(x), prior_vec) + x
        return self.ffn(self.norm2(x)) + x


class PriorBottleneck(nn.Module):
    """Sequential prior blocks applied to the encoder bottleneck grid."""

    def __init__(self, dim: int, cfg: PriorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PriorConfig()
        self.blocks = nn.ModuleList([
            PriorBlock(dim, cfg.heads, cfg.num_tokens, cfg.ffn_expansion)
            for _ in range(cfg.num_blocks)
        ])
        self.apply(_init_module)
        # apply() re-zeros biases but must not disturb the zero-initialized
        # fusion gates; re-assert them for clarity.
        for block in self.blocks:
            block.attn.fusion_weight.data.zero_()

    def forward(self, grid: torch.Tensor, prior_vec: torch.Tensor | None = None) -> torch.Tensor:
        h, w = grid.shape[-2:]
        tokens = grid_to_tokens(grid)
        for block in self.blocks:
            tokens = block(tokens, prior_vec)
        return tokens_to_grid(tokens, h, w)
