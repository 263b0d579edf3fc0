"""Full restoration network: encoder -> prior bottleneck -> decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .decoder import ConvDecoder
from .encoder import EncoderConfig, RestorationEncoder
from .errors import ConfigError
from .prior import (
    GlobalPriorProjection,
    LearnablePriorEncoder,
    PriorBottleneck,
    PriorConfig,
)


@dataclass
class ModelOutput:
    restored: torch.Tensor
    residuals: list[list[torch.Tensor]]
    skips: list[torch.Tensor]
    prior_vector: torch.Tensor | None


class RestorationModel(nn.Module):
    """Composes the encoder, the prior-embedding bottleneck, and the decoder.

    The frozen teacher lives outside this module; its global embedding is
    passed into ``forward`` when the prior source is "teacher".  With source
    "learnable" a small trainable encoder produces the embedding instead,
    and with "none" (or the bottleneck disabled) no global prior is used.
    """

    def __init__(self, encoder_cfg: EncoderConfig | None = None,
                 prior_cfg: PriorConfig | None = None,
                 teacher_embed_dim: int = 512,
                 decoder_widths: tuple[int, ...] | None = None,
                 predict_residual: bool = False):
        super().__init__()
        self.encoder = RestorationEncoder(encoder_cfg)
        cfg = self.encoder.cfg
        self.prior_cfg = prior_cfg = prior_cfg or PriorConfig()
        dim = cfg.channels[-1]
        self.bottleneck = PriorBottleneck(dim, prior_cfg) if prior_cfg.enabled else None

        self.prior_encoder = None
        self.prior_projection = None
        if prior_cfg.source != "none":
            self.prior_projection = GlobalPriorProjection(teacher_embed_dim, dim)
            if prior_cfg.source == "learnable":
                self.prior_encoder = LearnablePriorEncoder(teacher_embed_dim)

        self.decoder = ConvDecoder(
            skip_channels=cfg.channels,
            widths=decoder_widths,
            final_scale=cfg.strides[0],
            predict_residual=predict_residual,
        )

    def embedding(self, weather: torch.Tensor,
                  teacher_embedding: torch.Tensor | None) -> torch.Tensor | None:
        """The raw prior embedding in teacher space, per configured source."""
        source = self.prior_cfg.source
        if source == "none":
            return None
        if source == "learnable":
            return self.prior_encoder(weather)
        if teacher_embedding is None:
            raise ConfigError("prior source 'teacher' needs a teacher embedding")
        return teacher_embedding.detach()

    def class_feature(self, weather: torch.Tensor,
                      teacher_embedding: torch.Tensor | None) -> torch.Tensor | None:
        """Trainable feature compared against text class anchors."""
        emb = self.embedding(weather, teacher_embedding)
        if emb is None:
            return None
        return self.prior_projection.class_feature(emb)

    def forward(self, weather: torch.Tensor,
                teacher_embedding: torch.Tensor | None = None) -> ModelOutput:
        enc = self.encoder(weather)
        prior_vec = None
        x = enc.bottleneck
        if self.bottleneck is not None:
            emb = self.embedding(weather, teacher_embedding)
            if emb is not None:
                prior_vec = self.prior_projection(emb)
            x = self.bottleneck(x, prior_vec)
        restored = self.decoder(x, enc.skips, base=weather)
        return ModelOutput(restored=restored, residuals=enc.residuals,
                           skips=enc.skips, prior_vector=prior_vec)
