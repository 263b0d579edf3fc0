"""Command-line interface: synth, train, eval, infer, inspect.

Exit codes: 0 success, 2 configuration error, 3 numeric failure during
training.  Every subcommand accepts --seed, which threads through all
random number generators it touches.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .data import WeatherPairDataset
from .errors import ConfigError, NumericError, TeacherLoadError
from .report import write_eval_report, write_inspection, write_metric_table, write_train_log
from .synth import build_dataset, load_image, make_clean_images, save_image
from .train import Trainer


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unweather",
        description="Multi-weather image restoration: synthesis, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic paired weather dataset")
    p_synth.add_argument("--clean-dir", required=True, help="directory of clean images")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--per-class", type=int, required=True,
                         help="degraded images per weather class")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--generate-clean", type=int, default=0, metavar="N",
                         help="first fill --clean-dir with N procedural clean images")
    p_synth.add_argument("--size", type=int, default=96,
                         help="side length for generated clean images")

    p_train = sub.add_parser("train", help="train a restoration model")
    p_train.add_argument("--config", help="YAML config file")
    p_train.add_argument("--profile", default="desk", choices=("desk", "paper"),
                         help="base hyperparameter profile")
    p_train.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="dotted config override, repeatable")
    p_train.add_argument("--manifest", help="training manifest (overrides config)")
    p_train.add_argument("--epochs", type=int, help="override epoch count")
    p_train.add_argument("--seed", type=int, help="override seed")
    p_train.add_argument("--out", required=True, help="run directory for logs/checkpoints")
    p_train.add_argument("--log-every", type=int, default=1)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--mode", default="comparison", choices=("comparison", "ablation"))
    p_eval.add_argument("--out", required=True, help="report directory")

    p_infer = sub.add_parser("infer", help="restore a single image")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", required=True)
    p_infer.add_argument("--output", required=True)

    p_inspect = sub.add_parser("inspect", help="dump kernel weight maps and residual heatmaps")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--input", required=True)
    p_inspect.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    clean_dir = Path(args.clean_dir)
    if args.generate_clean:
        make_clean_images(clean_dir, args.generate_clean, size=args.size, seed=args.seed)
    if not clean_dir.exists():
        raise ConfigError(
            f"clean directory {clean_dir} does not exist (use --generate-clean N to create one)"
        )
    manifest = build_dataset(clean_dir, args.out, per_class=args.per_class, seed=args.seed)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.manifest:
        overrides.append(f"data.manifest={args.manifest}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    overrides.append(f"train.out_dir={args.out}")
    cfg = load_config(args.config, overrides, profile=args.profile)
    if not cfg.data.manifest:
        raise ConfigError("no training manifest: pass --manifest or set data.manifest")

    trainer = Trainer(cfg)
    dataset = WeatherPairDataset(cfg.data.manifest)
    history = trainer.fit(dataset, out_dir=args.out, log_every=args.log_every)
    write_train_log(history, args.out)
    if cfg.data.val_manifest:
        report = trainer.evaluate(WeatherPairDataset(cfg.data.val_manifest),
                                  mode="ablation", out_dir=args.out)
        write_eval_report(report, args.out)
        print(write_metric_table(report["per_class"]))
    print(f"final checkpoint: {Path(args.out) / 'checkpoint_final.pt'}")
    return 0


def cmd_eval(args) -> int:
    trainer, _ = Trainer.from_checkpoint(args.checkpoint)
    dataset = WeatherPairDataset(args.manifest)
    report = trainer.evaluate(dataset, mode=args.mode, out_dir=args.out)
    write_eval_report(report, args.out)
    print(write_metric_table(report["per_class"]))
    overall = report["overall"]
    print(f"mean: PSNR {overall['mean_psnr']:.2f} dB  SSIM {overall['mean_ssim']:.4f}")
    return 0


def cmd_infer(args) -> int:
    trainer, _ = Trainer.from_checkpoint(args.checkpoint)
    image = load_image(args.input)
    restored = trainer.restore(image)
    save_image(args.output, restored)
    print(f"wrote {args.output}")
    return 0


def cmd_inspect(args) -> int:
    trainer, _ = Trainer.from_checkpoint(args.checkpoint)
    image = load_image(args.input)
    out = write_inspection(trainer, image, args.out)
    print(f"wrote inspection figures to {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, TeacherLoadError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
