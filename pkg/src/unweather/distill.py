"""Soft residual distillation from a frozen teacher.

The target for a student stage is the *difference* between the teacher's
features on the clean and on the degraded image — the teacher's view of what
the weather changed — standardized per channel.  Student mixed-kernel
residual maps are pulled toward that target with a mean-reduced L1 distance.
All shape matching (bilinear resize, channel pooling) is applied on the
frozen teacher side so the student's geometry is never constrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .teacher import channel_match, resize_match


@dataclass
class DistillConfig:
    start_epoch: int = 200
    match_all_blocks: bool = True
    normalize: bool = True
    per_stage_blocks: bool = True   # False: constant block-count prefactor instead

    def __post_init__(self):
        if self.start_epoch < 0:
            raise ValueError("start_epoch must be >= 0")


def standardize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-channel standardization over spatial dims (zero mean, unit variance)."""
    if x.dim() == 3:
        dims = (1, 2)
    elif x.dim() == 4:
        dims = (2, 3)
    else:
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def residual_target(clean_feat: torch.Tensor, weather_feat: torch.Tensor,
                    normalize: bool = True) -> torch.Tensor:
    """Standardized clean-minus-weather teacher feature difference."""
    if clean_feat.shape != weather_feat.shape:
        raise ValueError(
            f"teacher feature shapes differ: {tuple(clean_feat.shape)} vs "
            f"{tuple(weather_feat.shape)}"
        )
    diff = clean_feat - weather_feat
    return standardize(diff) if normalize else diff


def stage_distill_loss(student_residuals: list[torch.Tensor], target: torch.Tensor,
                       normalize: bool = True) -> torch.Tensor:
    """Sum of mean-reduced L1 distances from each residual map to the target."""
    if not student_residuals:
        raise ValueError("stage has no residual maps to distill")
    total = None
    for res in student_residuals:
        if res.shape != target.shape:
            raise ValueError(
                f"residual shape {tuple(res.shape)} does not match target "
                f"{tuple(target.shape)}; match channels/size first"
            )
        res = standardize(res) if normalize else res
        term = (res - target).abs().mean()
        total = term if total is None else total + term
    return total


def total_distill_loss(per_stage_losses: list[torch.Tensor], blocks_per_stage: list[int],
                       per_stage_blocks: bool = True) -> torch.Tensor:
    """Average stage losses, dividing out each stage's residual count.

    With ``per_stage_blocks`` every stage is weighted equally regardless of
    how many blocks it has; the alternative divides by a single constant
    count (the first stage's).
    """
    m = len(per_stage_losses)
    if m != len(blocks_per_stage):
        raise ValueError("need one block count per stage loss")
    if per_stage_blocks:
        scaled = [loss / n for loss, n in zip(per_stage_losses, blocks_per_stage)]
        return sum(scaled) / m
    return sum(per_stage_losses) / (m * blocks_per_stage[0])


def distill_active(epoch: int, cfg: DistillConfig) -> bool:
    """The distillation term joins the objective once this returns true."""
    return epoch >= cfg.start_epoch


class ResidualDistiller:
    """Builds targets from a frozen teacher and scores student residuals."""

    def __init__(self, teacher, cfg: DistillConfig | None = None):
        self.teacher = teacher
        self.cfg = cfg or DistillConfig()

    def targets(self, clean: torch.Tensor, weather: torch.Tensor,
                student_residuals: list[list[torch.Tensor]]) -> list[torch.Tensor]:
        """One matched target per student stage (teacher-side resize + pool)."""
        clean_feats = self.teacher.stage_features(clean)
        weather_feats = self.teacher.stage_features(weather)
        targets = []
        for stage_idx, (cf, wf) in enumerate(zip(clean_feats, weather_feats)):
            ref = student_residuals[stage_idx][-1]
            diff = cf - wf
            diff = resize_match(diff, ref.shape[-2:])
            diff = channel_match(diff, ref.shape[-3])
            targets.append(standardize(diff) if self.cfg.normalize else diff)
        return targets

    def loss(self, clean: torch.Tensor, weather: torch.Tensor,
             student_residuals: list[list[torch.Tensor]]) -> torch.Tensor:
        targets = self.targets(clean, weather, student_residuals)
        stage_losses = []
        counts = []
        for residuals, target in zip(student_residuals, targets):
            matched = residuals if self.cfg.match_all_blocks else residuals[-1:]
            stage_losses.append(stage_distill_loss(matched, target, self.cfg.normalize))
            counts.append(len(matched))
        return total_distill_loss(stage_losses, counts, self.cfg.per_stage_blocks)
