"""Training loop, checkpointing, and the evaluation harness."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict
from .data import AugmentConfig, make_batches
from .distill import ResidualDistiller, distill_active
from .errors import ConfigError, NumericError
from .losses import (
    build_perceptual_extractor,
    cosine_logits,
    pair_metrics,
    perceptual_loss,
    psnr_loss,
    smooth_l1,
    ssim_loss,
    text_classification_loss,
    total_loss,
)
from .model import RestorationModel
from .synth import save_image, load_image
from .teacher import CachedTeacher, build_teacher

def lr_schedule(epoch: int, base_lr: float, halve_every: int) -> float:
    """Base rate halved after every ``halve_every`` epochs."""
    return base_lr * (0.5 ** (epoch // halve_every))


class Trainer:
    """Owns the model, the frozen teacher, the optimizer, and the loop."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.device = torch.device(cfg.device)
        torch.manual_seed(cfg.seed)
        self.model = RestorationModel(
            encoder_cfg=cfg.encoder,
            prior_cfg=cfg.prior,
            teacher_embed_dim=cfg.teacher.embed_dim,
            decoder_widths=cfg.decoder.widths,
            predict_residual=cfg.decoder.predict_residual,
        ).to(self.device)
        self.perceptual = build_perceptual_extractor(
            cfg.loss.perceptual_extractor, seed=cfg.teacher.seed
        ).to(self.device)

        self.teacher = None
        self.distiller = None
        self.text_anchors = None
        weights = cfg.loss.weights
        needs_teacher = (
            cfg.prior.source == "teacher"
            or weights.distill > 0
            or (weights.text > 0 and cfg.prior.source != "none")
        )
        if needs_teacher:
            teacher = build_teacher(
                cfg.teacher.kind,
                seed=cfg.teacher.seed,
                input_size=cfg.teacher.input_size,
                embed_dim=cfg.teacher.embed_dim,
                stage_channels=cfg.teacher.stage_channels,
                weights_dir=cfg.teacher.weights_dir,
                weights_path=cfg.teacher.weights_path,
            )
            if cfg.teacher.cache_dir:
                teacher = CachedTeacher(teacher, cfg.teacher.cache_dir)
            self.teacher = teacher
            self.distiller = ResidualDistiller(teacher, cfg.distill)
            self.text_anchors = teacher.text_class_embeddings().to(self.device)

        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=cfg.train.lr, betas=cfg.train.betas
        )

    # ------------------------------------------------------------------ loop

    def _teacher_embedding(self, weather: torch.Tensor) -> torch.Tensor | None:
        if self.teacher is None or self.cfg.prior.source != "teacher":
            return None
        return self.teacher.global_embedding(weather)

    def _ssim_window(self) -> int:
        win = min(11, self.cfg.data.crop)
        return win if win % 2 == 1 else win - 1

    def compute_terms(self, batch: dict, epoch: int) -> tuple[dict, bool]:
        """All loss terms plus whether distillation is active this epoch."""
        cfg = self.cfg
        weather = batch["weather"].to(self.device)
        clean = batch["clean"].to(self.device)
        labels = batch["labels"].to(self.device)
        teacher_emb = self._teacher_embedding(weather)
        out = self.model(weather, teacher_emb)

        zero = weather.new_zeros(())
        terms = {
            "reconstruction": smooth_l1(out.restored, clean, beta=cfg.loss.smooth_l1_beta),
            "perceptual": perceptual_loss(out.restored, clean, self.perceptual,
                                          layers=cfg.loss.perceptual_layers),
            "ssim": ssim_loss(out.restored, clean, window_size=self._ssim_window()),
            "psnr": psnr_loss(out.restored, clean),
        }
        class_feat = None
        if cfg.loss.weights.text > 0 and self.text_anchors is not None:
            class_feat = self.model.class_feature(weather, teacher_emb)
        terms["text"] = (
            text_classification_loss(class_feat, self.text_anchors, labels,
                                     temperature=cfg.loss.temperature)
            if class_feat is not None else zero
        )
        active = (
            cfg.loss.weights.distill > 0
            and self.distiller is not None
            and distill_active(epoch, cfg.distill)
        )
        terms["distill"] = (
            self.distiller.loss(clean, weather, out.residuals) if active else zero
        )
        return terms, active

    def train_step(self, batch: dict, epoch: int) -> dict:
        """One optimizer update; returns every loss term for logging."""
        self.model.train()
        terms, active = self.compute_terms(batch, epoch)
        loss = total_loss(terms, self.cfg.loss.weights, distill_on=active)

        breakdown = {name: float(t.detach()) for name, t in terms.items()}
        breakdown["total"] = float(loss.detach())
        breakdown["distill_active"] = float(active)
        bad = [k for k, v in breakdown.items() if not np.isfinite(v)]
        if bad:
            raise NumericError(
                f"non-finite loss term(s) {bad} at epoch {epoch}; breakdown: {breakdown}"
            )

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return breakdown

    def _set_lr(self, epoch: int) -> float:
        lr = lr_schedule(epoch, self.cfg.train.lr, self.cfg.train.lr_halve_every)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def fit(self, dataset, epochs: int | None = None, start_epoch: int = 0,
            out_dir=None, log_every: int = 0) -> list[dict]:
        """Train for the configured epochs; returns per-epoch mean breakdowns."""
        cfg = self.cfg
        epochs = cfg.train.epochs if epochs is None else epochs
        aug = AugmentConfig(crop=cfg.data.crop, cutmix_prob=cfg.data.cutmix_prob,
                            cutmix_area=cfg.data.cutmix_area)
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        history = []
        for epoch in range(start_epoch, epochs):
            lr = self._set_lr(epoch)
            sums: dict[str, float] = {}
            count = 0
            for batch in make_batches(dataset, cfg.data.batch_size, aug, cfg.seed, epoch):
                breakdown = self.train_step(batch, epoch)
                for key, value in breakdown.items():
                    sums[key] = sums.get(key, 0.0) + value
                count += 1
            means = {key: value / count for key, value in sums.items()}
            means["epoch"] = epoch
            means["lr"] = lr
            history.append(means)
            if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
                print(f"epoch {epoch:4d}  lr {lr:.2e}  total {means['total']:.4f}")
            if out_dir is not None and cfg.train.checkpoint_every and (
                (epoch + 1) % cfg.train.checkpoint_every == 0
            ):
                self.save_checkpoint(out_dir / f"checkpoint_{epoch:04d}.pt", epoch)
        if out_dir is not None:
            self.save_checkpoint(out_dir / "checkpoint_final.pt", epochs - 1)
        return history

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path, epoch: int) -> None:
        torch.save({
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": epoch,
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
        }, path)

    @classmethod
    def from_checkpoint(cls, path, map_location="cpu") -> tuple["Trainer", int]:
        """Rebuild a trainer; returns (trainer, next_epoch_to_run)."""
        blob = torch.load(path, map_location=map_location, weights_only=False)
        cfg = config_from_dict(blob["config"])
        trainer = cls(cfg)
        trainer.model.load_state_dict(blob["model"])
        trainer.optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["torch_rng"])
        return trainer, blob["epoch"] + 1

    # ------------------------------------------------------------- evaluation

    @torch.no_grad()
    def restore(self, weather_image: np.ndarray) -> np.ndarray:
        """Restore one H x W x 3 image in [0, 1]."""
        self.model.eval()
        tensor = torch.from_numpy(weather_image.astype(np.float32)).permute(2, 0, 1)
        tensor = tensor.unsqueeze(0).to(self.device)
        emb = self._teacher_embedding(tensor)
        out = self.model(tensor, emb)
        return out.restored[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)

    @torch.no_grad()
    def evaluate(self, dataset, mode: str = "ablation", out_dir=None) -> dict:
        """Per-image and per-class PSNR/SSIM against the clean targets.

        "comparison" scores 8-bit quantized outputs (saved to disk when an
        output directory is given, exactly as the PNG protocol would);
        "ablation" scores the raw float outputs.
        """
        if mode not in ("ablation", "comparison"):
            raise ConfigError(f"unknown eval mode {mode!r}, expected ablation | comparison")
        self.model.eval()
        image_dir = None
        if out_dir is not None and mode == "comparison":
            image_dir = Path(out_dir) / "images"
            image_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for idx in range(len(dataset)):
            sample = dataset.sample(idx)
            restored = self.restore(sample.weather)
            if mode == "comparison" and image_dir is not None:
                path = image_dir / f"restored_{idx:05d}.png"
                save_image(path, restored)
                restored = load_image(path)
            pred = torch.from_numpy(restored).permute(2, 0, 1)
            target = torch.from_numpy(sample.clean).permute(2, 0, 1)
            degraded = torch.from_numpy(sample.weather).permute(2, 0, 1)
            quant = mode == "comparison" and image_dir is None
            p, s = pair_metrics(pred, target, quantize=quant)
            dp, ds = pair_metrics(degraded, target, quantize=quant)
            cls = dataset.classes()[idx] if hasattr(dataset, "classes") else "all"
            rows.append({"index": idx, "class": cls, "psnr": p, "ssim": s,
                         "degraded_psnr": dp, "degraded_ssim": ds})

        by_class: dict[str, list[dict]] = {}
        for row in rows:
            by_class.setdefault(row["class"], []).append(row)
        summary = {}
        for cls, items in sorted(by_class.items()):
            summary[cls] = {
                "count": len(items),
                "mean_psnr": float(np.mean([r["psnr"] for r in items])),
                "mean_ssim": float(np.mean([r["ssim"] for r in items])),
                "mean_degraded_psnr": float(np.mean([r["degraded_psnr"] for r in items])),
                "mean_degraded_ssim": float(np.mean([r["degraded_ssim"] for r in items])),
            }
        overall = {
            "count": len(rows),
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
            "mean_degraded_psnr": float(np.mean([r["degraded_psnr"] for r in rows])),
            "mean_degraded_ssim": float(np.mean([r["degraded_ssim"] for r in rows])),
        }
        return {"mode": mode, "rows": rows, "per_class": summary, "overall": overall}

    @torch.no_grad()
    def classification_accuracy(self, dataset) -> float:
        """Fraction of samples whose weather class the text head identifies."""
        if self.text_anchors is None or self.cfg.prior.source == "none":
            raise ConfigError("classification needs a prior source and text anchors")
        self.model.eval()
        correct = 0
        for idx in range(len(dataset)):
            sample = dataset.sample(idx)
            tensor = torch.from_numpy(sample.weather.astype(np.float32)).permute(2, 0, 1)
            tensor = tensor.unsqueeze(0).to(self.device)
            emb = self.teacher.global_embedding(tensor) if self.cfg.prior.source == "teacher" else None
            feat = self.model.class_feature(tensor, emb)
            logits = cosine_logits(feat, self.text_anchors, self.cfg.loss.temperature)
            if int(logits.argmax()) == int(np.argmax(sample.label)):
                correct += 1
        return correct / len(dataset)
