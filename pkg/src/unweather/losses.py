"""Training losses and evaluation metrics.

Reconstruction (smooth L1), perceptual feature distance, SSIM and PSNR
losses, the text-anchored weather classification loss, and the weighted
combination used as the training objective.  PSNR is capped at 100 dB so the
normalized PSNR loss stays finite on identical images.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PSNR_CAP_DB = 100.0


@dataclass
class LossWeights:
    perceptual: float = 0.04
    ssim: float = 0.1
    psnr: float = 0.02
    text: float = 0.08
    distill: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


def smooth_l1(output: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    return F.smooth_l1_loss(output, target, beta=beta)


class StubPerceptualExtractor(nn.Module):
    """Frozen random conv pyramid used when no pretrained backbone is local.

    Parameters are seeded and never trained, but the module stays
    differentiable with respect to its input.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for w in widths:
            conv = nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            conv.weight.data.normal_(0.0, (2.0 / (9 * in_ch)) ** 0.5, generator=gen)
            conv.bias.data.zero_()
            layers.append(conv)
            in_ch = w
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.gelu(conv(x))
            feats.append(x)
        return feats


def build_perceptual_extractor(kind: str = "stub", seed: int = 0) -> nn.Module:
    """'vgg16' needs locally available torchvision weights; otherwise falls
    back to the stub extractor with a warning."""
    if kind == "stub":
        return StubPerceptualExtractor(seed=seed)
    if kind == "vgg16":
        try:
            from torchvision.models import VGG16_Weights, vgg16

            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features[:16]
            for p in net.parameters():
                p.requires_grad_(False)
            net.eval()
            return net
        except Exception as exc:
            warnings.warn(f"vgg16 perceptual extractor unavailable ({exc}); using stub")
            return StubPerceptualExtractor(seed=seed)
    raise ValueError(f"unknown perceptual extractor {kind!r}")


def perceptual_loss(output: torch.Tensor, target: torch.Tensor, extractor: nn.Module,
                    layers: tuple[int, ...] | None = None) -> torch.Tensor:
    """Sum of per-layer MSE distances between frozen-extractor features."""
    feats_out = extractor(output)
    with torch.no_grad():
        feats_tgt = extractor(target)
    if not isinstance(feats_out, (list, tuple)):
        feats_out, feats_tgt = [feats_out], [feats_tgt]
    if layers is not None:
        feats_out = [feats_out[i] for i in layers]
        feats_tgt = [feats_tgt[i] for i in layers]
    return sum(F.mse_loss(a, b) for a, b in zip(feats_out, feats_tgt))


def _gaussian_window(window_size: int, sigma: float, dtype, device) -> torch.Tensor:
    half = (window_size - 1) / 2.0
    coords = torch.arange(window_size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return g.outer(g)


def ssim(output: torch.Tensor, target: torch.Tensor, window_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> torch.Tensor:
    """Channel-averaged windowed SSIM over valid (fully covered) windows."""
    if output.dim() == 3:
        output, target = output.unsqueeze(0), target.unsqueeze(0)
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(output.shape)} vs {tuple(target.shape)}")
    h, w = output.shape[-2:]
    if window_size > min(h, w):
        raise ValueError(
            f"window {window_size} exceeds image {h}x{w}; pass a smaller window_size"
        )
    c = output.shape[1]
    window = _gaussian_window(window_size, sigma, output.dtype, output.device)
    kernel = window.expand(c, 1, window_size, window_size)

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    mu_x = filt(output)
    mu_y = filt(target)
    sigma_x = filt(output * output) - mu_x * mu_x
    sigma_y = filt(target * target) - mu_y * mu_y
    sigma_xy = filt(output * target) - mu_x * mu_y

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean()


def ssim_loss(output: torch.Tensor, target: torch.Tensor, **kwargs) -> torch.Tensor:
    return 1.0 - ssim(output, target, **kwargs)


def psnr(output: torch.Tensor, target: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """PSNR in dB for range-1 images, capped at 100 dB (identical inputs)."""
    mse = F.mse_loss(output, target)
    value = 10.0 * torch.log10(data_range ** 2 / mse) if mse > 0 else mse.new_tensor(math.inf)
    return torch.clamp(value, max=PSNR_CAP_DB)


def psnr_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1.0 - psnr(output, target) / PSNR_CAP_DB


def text_classification_loss(image_features: torch.Tensor, text_embeddings: torch.Tensor,
                             labels: torch.Tensor, temperature: float = 100.0) -> torch.Tensor:
    """Cross entropy of cosine-similarity logits against (soft) class labels."""
    logits = cosine_logits(image_features, text_embeddings, temperature)
    if labels.dim() == 1:
        labels = labels.unsqueeze(0)
    log_probs = F.log_softmax(logits, dim=-1)
    return -(labels * log_probs).sum(dim=-1).mean()


def cosine_logits(image_features: torch.Tensor, text_embeddings: torch.Tensor,
                  temperature: float = 100.0) -> torch.Tensor:
    if image_features.dim() == 1:
        image_features = image_features.unsqueeze(0)
    img = F.normalize(image_features, dim=-1)
    txt = F.normalize(text_embeddings, dim=-1)
    return temperature * img @ txt.T


def total_loss(terms: dict, weights: LossWeights, distill_on: bool):
    """Weighted objective; the distillation term only counts when active."""
    loss = (
        terms["reconstruction"]
        + weights.perceptual * terms["perceptual"]
        + weights.ssim * terms["ssim"]
        + weights.psnr * terms["psnr"]
        + weights.text * terms["text"]
    )
    if distill_on:
        loss = loss + weights.distill * terms["distill"]
    return loss


def pair_metrics(output: torch.Tensor, target: torch.Tensor,
                 quantize: bool = False) -> tuple[float, float]:
    """(PSNR dB, SSIM) for one image pair; optionally through 8-bit values."""
    if quantize:
        output = torch.round(output * 255.0) / 255.0
        target = torch.round(target * 255.0) / 255.0
    return float(psnr(output, target)), float(ssim(output, target))


def batch_metrics(outputs, targets, quantize: bool = False) -> dict:
    """Per-image PSNR/SSIM lists plus their means."""
    scores = [pair_metrics(o, t, quantize=quantize) for o, t in zip(outputs, targets)]
    psnrs = [s[0] for s in scores]
    ssims = [s[1] for s in scores]
    return {
        "psnr": psnrs,
        "ssim": ssims,
        "mean_psnr": sum(psnrs) / len(psnrs),
        "mean_ssim": sum(ssims) / len(ssims),
    }
