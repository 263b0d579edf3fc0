"""Acceptance suite: every release criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion.  The toy-training criteria share one session-scoped 300-image
run; the whole module completes in minutes on a CPU.
"""

import time

import numpy as np
import pytest
import torch

from fdcheck import assert_grad_matches_fd
from unweather.config import desk_config
from unweather.data import AugmentConfig, Sample, WeatherPairDataset, cutmix, make_batches
from unweather.distill import standardize
from unweather.encoder import EncoderConfig, KernelMixFFN, mixed_depthwise_conv
from unweather.losses import (
    LossWeights,
    StubPerceptualExtractor,
    perceptual_loss,
    psnr,
    psnr_loss,
    smooth_l1,
    ssim,
    ssim_loss,
    text_classification_loss,
    total_loss,
)
from unweather.model import RestorationModel
from unweather.prior import PriorConfig, PriorCrossAttention
from unweather.synth import (
    HeavyRainParams,
    RaindropParams,
    SnowParams,
    build_dataset,
    composite_heavyrain,
    composite_raindrop,
    composite_snow,
    make_clean_images,
    one_hot_label,
)
from unweather.train import Trainer

CPU_TOY_BUDGET_SECONDS = 90 * 60


def ok(message: str) -> None:
    print(f"\nACCEPTANCE PASS: {message}")


# --------------------------------------------------------------- toy fixtures

@pytest.fixture(scope="session")
def toy_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    make_clean_images(root / "clean_train", 100, size=96, seed=0)
    train_manifest = build_dataset(root / "clean_train", root / "wx_train",
                                   per_class=88, seed=1)
    make_clean_images(root / "clean_val", 12, size=96, seed=50)
    val_manifest = build_dataset(root / "clean_val", root / "wx_val",
                                 per_class=12, seed=2)
    return WeatherPairDataset(train_manifest), WeatherPairDataset(val_manifest)


def run_toy_training(train_ds):
    cfg = desk_config()
    cfg.seed = 0
    trainer = Trainer(cfg)
    start = time.monotonic()
    history = trainer.fit(train_ds, epochs=cfg.train.epochs)
    elapsed = time.monotonic() - start
    return trainer, history, elapsed


@pytest.fixture(scope="session")
def toy_run(toy_sets):
    train_ds, val_ds = toy_sets
    trainer, history, elapsed = run_toy_training(train_ds)
    report = trainer.evaluate(val_ds, mode="ablation")
    accuracy = trainer.classification_accuracy(val_ds)
    return {
        "trainer": trainer,
        "history": history,
        "elapsed": elapsed,
        "report": report,
        "accuracy": accuracy,
    }


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_mini")
    make_clean_images(root / "clean", 12, size=96, seed=7)
    manifest = build_dataset(root / "clean", root / "wx", per_class=12, seed=8)
    return WeatherPairDataset(manifest)


# ------------------------------------------------------- 1. oracle equivalence

def naive_mixed_conv(features, bank, weights):
    b, c, h, w = features.shape
    n_k = bank.shape[0]
    padded = torch.zeros(b, c, h + 2, w + 2, dtype=features.dtype)
    padded[:, :, 1:-1, 1:-1] = features
    out = torch.zeros_like(features)
    for bi in range(b):
        for y in range(h):
            for x in range(w):
                kernel = sum(weights[bi, j, y, x] * bank[j] for j in range(n_k))
                window = padded[bi, :, y:y + 3, x:x + 3]
                out[bi, :, y, x] = (kernel * window).sum(dim=(1, 2))
    return out


def test_mixed_kernel_conv_matches_oracle_100_inputs():
    gen = torch.Generator().manual_seed(0)
    start = time.monotonic()
    worst = 0.0
    for trial in range(100):
        c = int(torch.randint(1, 5, (), generator=gen))
        n_k = int(torch.randint(1, 4, (), generator=gen))
        h = int(torch.randint(3, 7, (), generator=gen))
        w = int(torch.randint(3, 7, (), generator=gen))
        feats = torch.randn(1, c, h, w, dtype=torch.float64, generator=gen)
        bank = torch.randn(n_k, c, 3, 3, dtype=torch.float64, generator=gen)
        weights = torch.rand(1, n_k, h, w, dtype=torch.float64, generator=gen)
        fast = mixed_depthwise_conv(feats, bank, weights)
        slow = naive_mixed_conv(feats, bank, weights)
        rel = ((fast - slow).norm() / slow.norm()).item()
        worst = max(worst, rel)
        assert rel < 1e-5, f"trial {trial}: relative error {rel}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"oracle sweep took {elapsed:.1f}s (budget 10s)"
    ok(f"mixed-kernel conv matches per-pixel oracle on 100 inputs "
       f"(worst rel err {worst:.2e}, {elapsed:.1f}s)")


# --------------------------------------------------------- 2. gradient checks

def test_gradient_checks_within_budget():
    start = time.monotonic()
    torch.manual_seed(0)

    ffn = KernelMixFFN(dim=2, expansion=2, num_kernels=2).double()
    assert_grad_matches_fd(lambda x: ffn(x, 4, 4)[0].sum(), torch.randn(1, 16, 2, dtype=torch.float64))

    attn = PriorCrossAttention(dim=4, heads=2, num_tokens=3).double()
    attn.fusion_weight.data.fill_(0.4)
    prior = torch.randn(2, 4, dtype=torch.float64)
    assert_grad_matches_fd(lambda x: attn(x, prior).sum(), torch.randn(2, 4, 4, dtype=torch.float64))

    tokens = attn.learned_tokens.detach().clone()

    def fuse(w):
        return attn.kv(tokens.unsqueeze(0) + w * prior.unsqueeze(1)).sum()

    assert_grad_matches_fd(fuse, torch.tensor([0.25], dtype=torch.float64))

    target = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    extractor = StubPerceptualExtractor(seed=0).double()
    anchors = torch.randn(3, 8, dtype=torch.float64)
    labels = torch.tensor([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]], dtype=torch.float64)
    loss_fns = {
        "smooth_l1": lambda x: smooth_l1(x, target),
        "perceptual": lambda x: perceptual_loss(x, target, extractor),
        "ssim": lambda x: ssim_loss(x, target, window_size=3),
        "psnr": lambda x: psnr_loss(x, target),
    }
    for name, fn in loss_fns.items():
        x0 = torch.rand(2, 3, 4, 4, dtype=torch.float64) * 0.8 + 0.1
        assert_grad_matches_fd(fn, x0)

    assert_grad_matches_fd(
        lambda f: text_classification_loss(f, anchors, labels, temperature=10.0),
        torch.randn(2, 8, dtype=torch.float64),
    )

    stage = [torch.randn(1, 2, 3, 3, dtype=torch.float64)]
    tgt = torch.randn(1, 2, 3, 3, dtype=torch.float64)

    def distill_fn(x):
        return (standardize(x) - tgt).abs().mean()

    assert_grad_matches_fd(distill_fn, stage[0])

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s (budget 60s)"
    ok(f"finite-difference gradient checks pass (rel err < 1e-4, {elapsed:.1f}s)")


# ------------------------------------------------------ 3. degradation oracles

def test_degradation_formulas_match_scalar_recomputation():
    rng = np.random.default_rng(0)
    clean = rng.uniform(size=(6, 5, 3))

    mask = rng.uniform(size=(6, 5))
    residual = mask[..., None] * rng.uniform(size=(6, 5, 3))
    out = composite_raindrop(clean, RaindropParams(mask=mask, residual=residual))
    for y in range(6):
        for x in range(5):
            for ch in range(3):
                v = (1 - mask[y, x]) * clean[y, x, ch] + residual[y, x, ch]
                assert abs(out[y, x, ch] - min(max(v, 0.0), 1.0)) < 1e-7

    t = rng.uniform(size=(6, 5))
    streaks = [rng.uniform(0, 0.3, size=(6, 5, 3)) for _ in range(2)]
    atmo = rng.uniform(0.5, 1.0, size=3)
    out = composite_heavyrain(clean, HeavyRainParams(transmission=t, streaks=streaks,
                                                     atmosphere=atmo))
    for y in range(6):
        for x in range(5):
            for ch in range(3):
                rain = clean[y, x, ch] + streaks[0][y, x, ch] + streaks[1][y, x, ch]
                v = t[y, x] * rain + (1 - t[y, x]) * atmo[ch]
                assert abs(out[y, x, ch] - min(max(v, 0.0), 1.0)) < 1e-7

    flakes = rng.uniform(size=(6, 5, 3))
    out = composite_snow(clean, SnowParams(mask=mask, flakes=flakes))
    for y in range(6):
        for x in range(5):
            for ch in range(3):
                v = (1 - mask[y, x]) * clean[y, x, ch] + mask[y, x] * flakes[y, x, ch]
                assert abs(out[y, x, ch] - min(max(v, 0.0), 1.0)) < 1e-7

    # identity cases, exact
    zero_mask = np.zeros((6, 5))
    ident = composite_raindrop(clean, RaindropParams(mask=zero_mask,
                                                     residual=np.zeros_like(clean)))
    np.testing.assert_array_equal(ident, clean)
    ident = composite_heavyrain(clean, HeavyRainParams(
        transmission=np.ones((6, 5)), streaks=[np.zeros_like(clean)],
        atmosphere=np.float64(0.5)))
    np.testing.assert_array_equal(ident, clean)
    ident = composite_snow(clean, SnowParams(mask=zero_mask, flakes=flakes))
    np.testing.assert_array_equal(ident, clean)
    ok("all three degradation composites match scalar recomputation (1e-7), identities exact")


# ----------------------------------------------------------- 4. loss identities

def test_loss_identities():
    # distillation zero identity: exact on the raw path, eps-bounded when
    # re-standardizing an already standardized target
    diff = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    from unweather.distill import stage_distill_loss, total_distill_loss
    raw = stage_distill_loss([diff], diff.clone(), normalize=False)
    assert raw.item() == 0.0
    target = standardize(diff)
    centered = diff - diff.mean(dim=(2, 3), keepdim=True)
    assert stage_distill_loss([centered], target).item() < 1e-6
    assert total_distill_loss([torch.tensor(0.0)] * 4, [3, 3, 3, 2]).item() == 0.0

    x = torch.rand(1, 3, 32, 32)
    assert ssim(x, x.clone()).item() == pytest.approx(1.0, abs=1e-6)

    assert psnr(torch.zeros(1, 3, 8, 8), torch.ones(1, 3, 8, 8)).item() == pytest.approx(0.0, abs=1e-9)

    terms = {k: torch.tensor(1.0, dtype=torch.float64)
             for k in ("reconstruction", "perceptual", "ssim", "psnr", "text", "distill")}
    total = total_loss(terms, LossWeights(), distill_on=True)
    assert abs(total.item() - 1.34) <= 1e-9
    ok("loss identities hold (distill zero, ssim(X,X)=1, psnr(0,1)=0 dB, total=1.34±1e-9)")


# ------------------------------------------------- 5. prior invariance at init

def test_prior_invariance_at_initialization():
    torch.manual_seed(0)
    model = RestorationModel(
        encoder_cfg=EncoderConfig(channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1),
                                  heads=(1, 2, 4, 8)),
        prior_cfg=PriorConfig(num_blocks=3, heads=4, num_tokens=8),
        teacher_embed_dim=64,
    )
    weather = torch.rand(2, 3, 64, 64)
    out_a = model(weather, torch.rand(2, 64)).restored
    out_b = model(weather, torch.rand(2, 64) * 1e3).restored
    diff = (out_a - out_b).abs().max().item()
    assert diff <= 1e-9
    ok(f"prior invariance at initialization (max abs diff {diff:.1e})")


# ------------------------------------------------------ 6. Cut-Mix bookkeeping

def test_cutmix_bookkeeping_over_1000_samples():
    rng = np.random.default_rng(0)
    size = 64
    classes = ("snow", "raindrop", "rain_haze")
    for trial in range(1000):
        cls_a, cls_b = rng.choice(3, size=2, replace=False)
        a = Sample(weather=rng.uniform(size=(size, size, 3)),
                   clean=rng.uniform(size=(size, size, 3)),
                   label=one_hot_label(classes[cls_a]))
        b = Sample(weather=rng.uniform(size=(size, size, 3)),
                   clean=rng.uniform(size=(size, size, 3)),
                   label=one_hot_label(classes[cls_b]))
        mixed = cutmix(a, b, rng)
        assert mixed.label.sum() == 1.0, "label sum must be exactly 1"
        pasted = int(np.sum(np.all(mixed.weather == b.weather, axis=2)
                            & ~np.all(a.weather == b.weather, axis=2)))
        assert mixed.label[cls_b] == pasted / (size * size), "label must equal pixel fraction"

    # application rate over >= 1000 pipeline elements
    samples = [Sample(weather=rng.uniform(size=(16, 16, 3)),
                      clean=rng.uniform(size=(16, 16, 3)),
                      label=one_hot_label(classes[i % 3])) for i in range(50)]

    class Wrap:
        def __len__(self):
            return len(samples)

        def sample(self, idx):
            return samples[idx]

    cfg = AugmentConfig(crop=16, cutmix_prob=0.7)
    applied = total = 0
    for epoch in range(20):
        for batch in make_batches(Wrap(), 10, cfg, seed=3, epoch=epoch):
            applied += int(batch["mixed"].sum())
            total += batch["mixed"].numel()
    rate = applied / total
    assert total >= 1000
    assert abs(rate - 0.7) <= 0.05
    ok(f"Cut-Mix bookkeeping exact over 1000 samples; application rate {rate:.3f}")


# ------------------------------------------------------------- 7. toy training

def test_toy_training_psnr_gain(toy_run):
    assert toy_run["elapsed"] < CPU_TOY_BUDGET_SECONDS
    overall = toy_run["report"]["overall"]
    gain = overall["mean_psnr"] - overall["mean_degraded_psnr"]
    assert gain >= 3.0, (
        f"restored {overall['mean_psnr']:.2f} dB vs degraded "
        f"{overall['mean_degraded_psnr']:.2f} dB (gain {gain:.2f})"
    )
    ok(f"toy training restores +{gain:.2f} dB over degraded input "
       f"({toy_run['elapsed']/60:.1f} min)")


def test_toy_training_classification_accuracy(toy_run):
    acc = toy_run["accuracy"]
    assert acc >= 0.8, f"held-out weather classification accuracy {acc:.3f}"
    ok(f"held-out weather classification accuracy {acc:.2%}")


def test_restoration_improves_raindrop_images(toy_run):
    rows = [r for r in toy_run["report"]["rows"] if r["class"] == "raindrop"]
    restored = np.mean([r["psnr"] for r in rows])
    degraded = np.mean([r["degraded_psnr"] for r in rows])
    assert restored > degraded, f"raindrop: restored {restored:.2f} vs degraded {degraded:.2f}"
    ok(f"inference on raindrop images raises PSNR ({degraded:.2f} -> {restored:.2f} dB)")


def test_distillation_changes_trajectory(toy_sets):
    train_ds, _ = toy_sets
    epochs = 6

    cfg_on = desk_config()
    cfg_on.seed = 0
    cfg_on.distill.start_epoch = 0
    hist_on = Trainer(cfg_on).fit(train_ds, epochs=epochs)

    cfg_off = desk_config()
    cfg_off.seed = 0
    cfg_off.loss.weights.distill = 0.0
    hist_off = Trainer(cfg_off).fit(train_ds, epochs=epochs)

    totals_on = [h["total"] for h in hist_on]
    totals_off = [h["total"] for h in hist_off]
    recon_on = [h["reconstruction"] for h in hist_on]
    recon_off = [h["reconstruction"] for h in hist_off]
    assert totals_on != totals_off
    assert recon_on[1:] != recon_off[1:], "parameter trajectories should diverge"
    assert all(np.isfinite(totals_on)) and all(np.isfinite(totals_off))
    assert max(totals_on) < 10 * totals_on[0] + 10
    assert max(totals_off) < 10 * totals_off[0] + 10
    ok("distillation at start epoch 0 vs disabled yields distinct, stable trajectories")


# -------------------------------------------------------------- 8. determinism

def test_full_toy_run_determinism(toy_sets, toy_run):
    train_ds, val_ds = toy_sets
    trainer_b, _, _ = run_toy_training(train_ds)
    report_b = trainer_b.evaluate(val_ds, mode="ablation")
    psnr_a = toy_run["report"]["overall"]["mean_psnr"]
    psnr_b = report_b["overall"]["mean_psnr"]
    assert abs(psnr_a - psnr_b) < 1e-5, f"{psnr_a} vs {psnr_b}"
    ok(f"two identical-seed toy runs agree on final mean PSNR "
       f"({psnr_a:.6f} vs {psnr_b:.6f})")


# ----------------------------------------------------- 9. ablation reachability

ABLATION_VARIANTS = {
    "prior_none": {"prior.enabled": False, "prior.source": "none"},
    "prior_learnable": {"prior.source": "learnable"},
    "prior_teacher_stub": {"prior.source": "teacher"},
    "distill_from_epoch_0": {"distill.start_epoch": 0},
    "distill_from_epoch_200": {"distill.start_epoch": 200},
    "distill_last_block_only": {"distill.start_epoch": 0, "distill.match_all_blocks": False},
    "distill_without_normalization": {"distill.start_epoch": 0, "distill.normalize": False},
}


@pytest.mark.parametrize("name", list(ABLATION_VARIANTS))
def test_ablation_variants_train_two_epochs(name, mini_dataset):
    cfg = desk_config()
    cfg.seed = 0
    for dotted, value in ABLATION_VARIANTS[name].items():
        section, key = dotted.split(".")
        setattr(getattr(cfg, section), key, value)
    trainer = Trainer(cfg)
    history = trainer.fit(mini_dataset, epochs=2)
    assert len(history) == 2
    assert all(np.isfinite(h["total"]) for h in history)
    ok(f"ablation variant '{name}' trains 2 epochs without error")
