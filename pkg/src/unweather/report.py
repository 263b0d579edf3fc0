"""Delimited metric reports and the matplotlib figures rendered beside them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .encoder import SpatialKernelMix


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_train_log(history: list[dict], out_dir) -> Path:
    """train_log.csv plus a loss-curves figure."""
    out_dir = _ensure_dir(out_dir)
    csv_path = out_dir / "train_log.csv"
    fieldnames = list(history[0].keys())
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(history)

    epochs = [row["epoch"] for row in history]
    fig, (ax_total, ax_terms) = plt.subplots(1, 2, figsize=(10, 4))
    ax_total.plot(epochs, [row["total"] for row in history], label="total")
    ax_total.set_xlabel("epoch")
    ax_total.set_ylabel("loss")
    ax_total.set_title("total training loss")
    for term in ("reconstruction", "perceptual", "ssim", "psnr", "text", "distill"):
        if term in history[0]:
            ax_terms.plot(epochs, [row[term] for row in history], label=term)
    ax_terms.set_xlabel("epoch")
    ax_terms.set_title("unweighted terms")
    ax_terms.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)
    return csv_path


def write_eval_report(report: dict, out_dir) -> Path:
    """per_image.csv, summary.csv, and per-class metric figures."""
    out_dir = _ensure_dir(out_dir)
    per_image = out_dir / "per_image.csv"
    with open(per_image, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(report["rows"][0].keys()))
        writer.writeheader()
        writer.writerows(report["rows"])

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "count", "mean_psnr", "mean_ssim",
                         "mean_degraded_psnr", "mean_degraded_ssim"])
        for cls, stats in report["per_class"].items():
            writer.writerow([cls, stats["count"], f"{stats['mean_psnr']:.4f}",
                             f"{stats['mean_ssim']:.4f}",
                             f"{stats['mean_degraded_psnr']:.4f}",
                             f"{stats['mean_degraded_ssim']:.4f}"])
        overall = report["overall"]
        writer.writerow(["mean", overall["count"], f"{overall['mean_psnr']:.4f}",
                         f"{overall['mean_ssim']:.4f}",
                         f"{overall['mean_degraded_psnr']:.4f}",
                         f"{overall['mean_degraded_ssim']:.4f}"])

    classes = list(report["per_class"].keys())
    x = np.arange(len(classes))
    fig, (ax_psnr, ax_ssim) = plt.subplots(1, 2, figsize=(10, 4))
    restored_psnr = [report["per_class"][c]["mean_psnr"] for c in classes]
    degraded_psnr = [report["per_class"][c]["mean_degraded_psnr"] for c in classes]
    ax_psnr.bar(x - 0.2, degraded_psnr, width=0.4, label="degraded")
    ax_psnr.bar(x + 0.2, restored_psnr, width=0.4, label="restored")
    ax_psnr.set_xticks(x, classes, rotation=20)
    ax_psnr.set_ylabel("PSNR (dB)")
    ax_psnr.set_title(f"PSNR by class ({report['mode']} mode)")
    ax_psnr.legend()
    restored_ssim = [report["per_class"][c]["mean_ssim"] for c in classes]
    degraded_ssim = [report["per_class"][c]["mean_degraded_ssim"] for c in classes]
    ax_ssim.bar(x - 0.2, degraded_ssim, width=0.4, label="degraded")
    ax_ssim.bar(x + 0.2, restored_ssim, width=0.4, label="restored")
    ax_ssim.set_xticks(x, classes, rotation=20)
    ax_ssim.set_ylabel("SSIM")
    ax_ssim.set_title("SSIM by class")
    ax_ssim.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "metrics_by_class.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist([row["psnr"] for row in report["rows"]], bins=20)
    ax.set_xlabel("PSNR (dB)")
    ax.set_ylabel("images")
    ax.set_title("restored PSNR distribution")
    fig.tight_layout()
    fig.savefig(out_dir / "psnr_hist.png", dpi=120)
    plt.close(fig)
    return summary_path


@torch.no_grad()
def write_inspection(trainer, weather_image: np.ndarray, out_dir) -> Path:
    """Kernel-mixing weight maps and residual heatmaps for one input image."""
    out_dir = _ensure_dir(out_dir)
    model = trainer.model
    model.eval()

    captured: list[torch.Tensor] = []
    hooks = []

    def grab(module, inputs, _output):
        captured.append(module.kernel_weights(inputs[0]).cpu())

    for module in model.modules():
        if isinstance(module, SpatialKernelMix):
            hooks.append(module.register_forward_hook(grab))
    try:
        tensor = torch.from_numpy(weather_image.astype(np.float32)).permute(2, 0, 1)
        tensor = tensor.unsqueeze(0).to(trainer.device)
        emb = trainer._teacher_embedding(tensor)
        out = model(tensor, emb)
    finally:
        for hook in hooks:
            hook.remove()

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(weather_image)
    axes[0].set_title("input")
    axes[0].axis("off")
    restored = out.restored[0].permute(1, 2, 0).cpu().numpy()
    axes[1].imshow(np.clip(restored, 0, 1))
    axes[1].set_title("restored")
    axes[1].axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "restoration.png", dpi=120)
    plt.close(fig)

    blocks_per_stage = trainer.cfg.encoder.blocks
    block_idx = 0
    for stage_idx, count in enumerate(blocks_per_stage):
        weights = captured[block_idx]  # first block of the stage
        n_k = weights.shape[1]
        fig, axes = plt.subplots(1, n_k, figsize=(3 * n_k, 3))
        axes = np.atleast_1d(axes)
        for j in range(n_k):
            im = axes[j].imshow(weights[0, j].numpy(), cmap="viridis", vmin=0, vmax=1)
            axes[j].set_title(f"stage {stage_idx + 1} kernel {j + 1}")
            axes[j].axis("off")
        fig.colorbar(im, ax=list(axes), shrink=0.8)
        fig.savefig(out_dir / f"weights_stage{stage_idx + 1}.png", dpi=120)
        plt.close(fig)
        block_idx += count

    fig, axes = plt.subplots(1, len(out.residuals), figsize=(3 * len(out.residuals), 3))
    axes = np.atleast_1d(axes)
    for stage_idx, stage in enumerate(out.residuals):
        heat = stage[-1][0].abs().mean(dim=0).cpu().numpy()
        axes[stage_idx].imshow(heat, cmap="magma")
        axes[stage_idx].set_title(f"stage {stage_idx + 1} residual")
        axes[stage_idx].axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "residual_heatmaps.png", dpi=120)
    plt.close(fig)
    return out_dir


def write_metric_table(per_class: dict) -> str:
    """Plain-text summary table (printed by the eval subcommand)."""
    lines = [f"{'dataset':<12} {'n':>5} {'PSNR':>8} {'SSIM':>8} {'degr.PSNR':>10}"]
    for cls, stats in per_class.items():
        lines.append(
            f"{cls:<12} {stats['count']:>5} {stats['mean_psnr']:>8.2f} "
            f"{stats['mean_ssim']:>8.4f} {stats['mean_degraded_psnr']:>10.2f}"
        )
    return "\n".join(lines)
