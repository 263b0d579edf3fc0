"""Encoder: shape contracts, attention and mixed-kernel oracles, gradients."""

import pytest
import torch

from fdcheck import assert_grad_matches_fd
from unweather.encoder import (
    ConvDownsample,
    EfficientSelfAttention,
    EncoderBlock,
    EncoderConfig,
    KernelMixFFN,
    RestorationEncoder,
    SpatialKernelMix,
    grid_to_tokens,
    mixed_depthwise_conv,
    tokens_to_grid,
)
from unweather.errors import ConfigError

torch.manual_seed(0)


class TestConvDownsample:
    def test_stage1_stride4(self):
        down = ConvDownsample(3, 32, stride=4)
        tokens, h, w = down(torch.rand(1, 3, 64, 64))
        assert (h, w) == (16, 16)
        assert tokens.shape == (1, 256, 32)

    def test_stride2(self):
        down = ConvDownsample(32, 64, stride=2)
        tokens, h, w = down(torch.rand(2, 32, 16, 16))
        assert (h, w) == (8, 8)
        assert tokens.shape == (2, 64, 64)

    def test_channel_mismatch_is_config_error(self):
        down = ConvDownsample(32, 64, stride=2)
        with pytest.raises(ConfigError, match="32 input channels"):
            down(torch.rand(1, 64, 8, 8))


class TestEfficientSelfAttention:
    def dense_oracle(self, attn, x):
        """Hand-rolled single-head full attention from the module's weights."""
        q = x @ attn.q.weight.T + attn.q.bias
        kv = x @ attn.kv.weight.T + attn.kv.bias
        k, v = kv[..., : attn.dim], kv[..., attn.dim:]
        scores = q @ k.transpose(-2, -1) * attn.scale
        weights = torch.exp(scores)
        weights = weights / weights.sum(dim=-1, keepdim=True)
        return (weights @ v) @ attn.proj.weight.T + attn.proj.bias

    def test_r1_matches_dense_oracle(self):
        attn = EfficientSelfAttention(dim=2, heads=1, sr_ratio=1)
        x = torch.rand(1, 4, 2)
        out = attn(x, 2, 2)
        expected = self.dense_oracle(attn, x)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_r1_kv_length_equals_token_count(self):
        attn = EfficientSelfAttention(dim=8, heads=2, sr_ratio=1)
        amap = attn.attention_map(torch.rand(1, 16, 8), 4, 4)
        assert amap.shape == (1, 2, 16, 16)

    def test_r2_reduces_kv_length(self):
        attn = EfficientSelfAttention(dim=8, heads=2, sr_ratio=2)
        amap = attn.attention_map(torch.rand(1, 64, 8), 8, 8)
        assert amap.shape == (1, 2, 64, 16)

    def test_softmax_rows_sum_to_one(self):
        attn = EfficientSelfAttention(dim=8, heads=4, sr_ratio=2)
        amap = attn.attention_map(torch.rand(2, 64, 8), 8, 8)
        sums = amap.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_output_shape_preserved(self):
        attn = EfficientSelfAttention(dim=16, heads=2, sr_ratio=4)
        out = attn(torch.rand(2, 64, 16), 8, 8)
        assert out.shape == (2, 64, 16)

    def test_bad_heads_is_config_error(self):
        with pytest.raises(ConfigError, match="divisible"):
            EfficientSelfAttention(dim=6, heads=4)

    def test_nondivisible_reduction_is_config_error(self):
        attn = EfficientSelfAttention(dim=8, heads=1, sr_ratio=3)
        with pytest.raises(ConfigError, match="does not divide"):
            attn(torch.rand(1, 16, 8), 4, 4)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(9)
        attn = EfficientSelfAttention(dim=4, heads=2, sr_ratio=2).double()
        x0 = torch.randn(1, 16, 4, dtype=torch.float64)
        assert_grad_matches_fd(lambda x: attn(x, 4, 4).sum(), x0)


class TestKernelWeights:
    def test_range_and_channel_count(self):
        mix = SpatialKernelMix(channels=8, num_kernels=3)
        w = mix.kernel_weights(torch.randn(2, 8, 5, 5))
        assert w.shape == (2, 3, 5, 5)
        assert (w > 0).all() and (w < 1).all()

    def test_zero_input_gives_half(self):
        mix = SpatialKernelMix(channels=4, num_kernels=3)
        mix.weight_dw.bias.data.zero_()
        mix.weight_pw.bias.data.zero_()
        w = mix.kernel_weights(torch.zeros(1, 4, 6, 6))
        assert torch.allclose(w, torch.full_like(w, 0.5))


def naive_mixed_conv(features, bank, weights):
    """Per-pixel oracle: build the blended 3x3 kernel at every location."""
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


class TestMixedDepthwiseConv:
    def test_one_hot_weights_select_single_kernel(self):
        torch.manual_seed(1)
        feats = torch.randn(1, 4, 6, 6)
        bank = torch.randn(3, 4, 3, 3)
        weights = torch.zeros(1, 3, 6, 6)
        weights[:, 1] = 1.0
        out = mixed_depthwise_conv(feats, bank, weights)
        expected = torch.nn.functional.conv2d(
            feats, bank[1].unsqueeze(1), padding=1, groups=4
        )
        assert torch.allclose(out, expected, atol=1e-6)

    def test_zero_weights_give_zero_output(self):
        feats = torch.randn(2, 4, 5, 5)
        bank = torch.randn(3, 4, 3, 3)
        out = mixed_depthwise_conv(feats, bank, torch.zeros(2, 3, 5, 5))
        assert torch.equal(out, torch.zeros_like(out))

    def test_matches_per_pixel_oracle(self):
        torch.manual_seed(2)
        feats = torch.randn(1, 4, 5, 5, dtype=torch.float64)
        bank = torch.randn(3, 4, 3, 3, dtype=torch.float64)
        weights = torch.rand(1, 3, 5, 5, dtype=torch.float64)
        out = mixed_depthwise_conv(feats, bank, weights)
        expected = naive_mixed_conv(feats, bank, weights)
        rel = (out - expected).norm() / expected.norm()
        assert rel < 1e-5

    def test_linearity_in_features(self):
        torch.manual_seed(3)
        bank = torch.randn(3, 2, 3, 3, dtype=torch.float64)
        weights = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        y = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        a, b = 0.7, -1.3
        lhs = mixed_depthwise_conv(a * x + b * y, bank, weights)
        rhs = a * mixed_depthwise_conv(x, bank, weights) + b * mixed_depthwise_conv(y, bank, weights)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_constant_weights_equal_static_mixture(self):
        torch.manual_seed(4)
        feats = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        bank = torch.randn(2, 3, 3, 3, dtype=torch.float64)
        const = torch.tensor([0.3, 0.6], dtype=torch.float64)
        weights = const.view(1, 2, 1, 1).expand(1, 2, 6, 6)
        out = mixed_depthwise_conv(feats, bank, weights)
        static_kernel = (const.view(2, 1, 1, 1) * bank).sum(dim=0)
        expected = torch.nn.functional.conv2d(feats, static_kernel.unsqueeze(1), padding=1, groups=3)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_kernel_count_mismatch_is_config_error(self):
        with pytest.raises(ConfigError, match="kernels"):
            mixed_depthwise_conv(torch.randn(1, 2, 4, 4), torch.randn(3, 2, 3, 3),
                                 torch.rand(1, 2, 4, 4))


class TestKernelMixFFN:
    def test_token_shape_preserved(self):
        ffn = KernelMixFFN(dim=8, expansion=2, num_kernels=3)
        x = torch.rand(2, 16, 8)
        out, residual = ffn(x, 4, 4)
        assert out.shape == x.shape
        assert residual.shape == (2, 16, 4, 4)

    def test_zero_bank_reduces_to_dw_path(self):
        ffn = KernelMixFFN(dim=4, expansion=2, num_kernels=3)
        x = torch.rand(1, 16, 4)
        ffn.mix.bank.data.zero_()
        out, residual = ffn(x, 4, 4)
        assert torch.equal(residual, torch.zeros_like(residual))
        grid = tokens_to_grid(ffn.fc1(x), 4, 4)
        dw_only = ffn.fc2(grid_to_tokens(ffn.act(ffn.dw(grid))))
        assert torch.allclose(out, dw_only, atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        ffn = KernelMixFFN(dim=2, expansion=2, num_kernels=2).double()
        x0 = torch.randn(1, 16, 2, dtype=torch.float64)

        def f(x):
            out, _ = ffn(x, 4, 4)
            return out.sum()

        assert_grad_matches_fd(f, x0)


class TestEncoderBlock:
    def test_zeroed_projections_give_identity(self):
        block = EncoderBlock(dim=8, heads=2, sr_ratio=1)
        block.attn.proj.weight.data.zero_()
        block.attn.proj.bias.data.zero_()
        block.ffn.fc2.weight.data.zero_()
        block.ffn.fc2.bias.data.zero_()
        x = torch.rand(1, 16, 8)
        out, _ = block(x, 4, 4)
        assert torch.allclose(out, x, atol=1e-7)

    def test_shape_preserved(self):
        block = EncoderBlock(dim=16, heads=4, sr_ratio=2)
        out, res = block(torch.rand(2, 64, 16), 8, 8)
        assert out.shape == (2, 64, 16)
        assert res.shape == (2, 64, 8, 8)

    def test_bit_reproducible_under_fixed_seed(self):
        def run():
            torch.manual_seed(11)
            block = EncoderBlock(dim=8, heads=2, sr_ratio=2)
            torch.manual_seed(12)
            x = torch.rand(1, 16, 8)
            out, res = block(x, 4, 4)
            return out, res

        out1, res1 = run()
        out2, res2 = run()
        assert torch.equal(out1, out2)
        assert torch.equal(res1, res2)


class TestRestorationEncoder:
    def test_default_skip_pyramid_for_256(self):
        enc = RestorationEncoder()
        out = enc(torch.rand(1, 3, 256, 256))
        sizes = [tuple(s.shape[-2:]) for s in out.skips]
        assert sizes == [(64, 64), (32, 32), (16, 16), (8, 8)]
        channels = [s.shape[1] for s in out.skips]
        assert channels == [32, 64, 128, 256]
        assert torch.equal(out.bottleneck, out.skips[-1])

    def test_residual_counts_match_block_config(self):
        enc = RestorationEncoder()
        out = enc(torch.rand(1, 3, 64, 64))
        assert [len(r) for r in out.residuals] == [3, 3, 3, 2]

    def test_indivisible_input_error_names_multiple(self):
        enc = RestorationEncoder()
        with pytest.raises(ConfigError, match="divisible by 32"):
            enc(torch.rand(1, 3, 250, 250))

    def test_no_nan_or_inf_at_init(self):
        torch.manual_seed(6)
        enc = RestorationEncoder(EncoderConfig(channels=(16, 32, 64, 128), blocks=(2, 2, 2, 1)))
        out = enc(torch.rand(2, 3, 64, 64))
        for skip in out.skips:
            assert torch.isfinite(skip).all()
        for stage in out.residuals:
            for res in stage:
                assert torch.isfinite(res).all()

    def test_deterministic_forward(self):
        torch.manual_seed(7)
        enc = RestorationEncoder(EncoderConfig(channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1),
                                               heads=(1, 2, 4, 8)))
        x = torch.rand(1, 3, 32, 32)
        a = enc(x)
        b = enc(x)
        for sa, sb in zip(a.skips, b.skips):
            assert torch.equal(sa, sb)

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="strictly increasing"):
            EncoderConfig(channels=(32, 32, 64, 128))
        with pytest.raises(ConfigError, match="blocks"):
            EncoderConfig(blocks=(1, 1))
        with pytest.raises(ConfigError, match="num_kernels"):
            EncoderConfig(num_kernels=0)

    def test_residual_channels_helper(self):
        enc = RestorationEncoder()
        assert enc.residual_channels() == [128, 256, 512, 1024]
