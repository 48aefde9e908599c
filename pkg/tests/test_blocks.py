import unittest

import torch

from src.lipsync.blocks import (
    CBAM,
    FFC,
    FFCBlock,
    ResidualCBAMBlock,
    SemanticAlign,
    SpectralTransform,
    adain,
    channel_stats,
    seeded_init_,
    zero_init_,
)
from src.lipsync.exceptions import ContractError
from support import seeded


class AdainTests(unittest.TestCase):
    def test_worked_example(self):
        x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        y = torch.tensor([[[-1.0, 1.0], [1.0, -1.0]]])
        out = adain(x, y)
        expected = torch.tensor([[[-1.3416, -0.4472], [0.4472, 1.3416]]])
        torch.testing.assert_close(out, expected, atol=1e-4, rtol=0)

    def test_output_carries_the_style_statistics(self):
        g = seeded(0)
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64, generator=g) * 3 + 1
        y = torch.randn(2, 4, 5, 7, dtype=torch.float64, generator=g) * 0.5 - 2
        out = adain(x, y)
        so, sy = channel_stats(out), channel_stats(y)
        torch.testing.assert_close(so.mean, sy.mean, atol=1e-5, rtol=0)
        torch.testing.assert_close(so.std, sy.std, atol=1e-4, rtol=0)

    def test_checkerboard_is_a_fixed_point(self):
        board = (torch.arange(8).view(8, 1) + torch.arange(8).view(1, 8)) % 2
        x = board.to(torch.float64).expand(1, 3, 8, 8) * 2 - 1
        torch.testing.assert_close(adain(x, x), x, atol=2e-5, rtol=0)

    def test_constant_content_stays_finite(self):
        x = torch.full((1, 2, 4, 4), 3.0, requires_grad=True)
        y = torch.randn(1, 2, 4, 4, generator=seeded(1))
        out = adain(x, y)
        out.sum().backward()
        self.assertTrue(torch.isfinite(out).all())
        self.assertTrue(torch.isfinite(x.grad).all())

    def test_constant_style_gives_a_constant_map(self):
        x = torch.randn(1, 3, 5, 5, generator=seeded(6))
        y = torch.full((1, 3, 4, 4), -0.75)
        torch.testing.assert_close(adain(x, y), torch.full_like(x, -0.75), atol=1e-5, rtol=0)

    def test_mismatched_channels_raise(self):
        with self.assertRaises(ContractError):
            adain(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4))
        with self.assertRaises(ContractError):
            adain(torch.zeros(3, 4, 4), torch.zeros(1, 3, 4, 4))

    def test_gradcheck(self):
        g = seeded(2)
        x = torch.randn(1, 2, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
        y = torch.randn(1, 2, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(adain, (x, y)))


class FourierConvTests(unittest.TestCase):
    def test_identity_spectral_transform_reproduces_input(self):
        st = SpectralTransform(4, norm=False, activation=False).identity_()
        x = torch.randn(2, 4, 6, 7, generator=seeded(0))
        torch.testing.assert_close(st(x), x, atol=1e-5, rtol=0)

    def test_zero_input_gives_zero_output(self):
        st = SpectralTransform(4).eval()
        out = st(torch.zeros(2, 4, 6, 6))
        self.assertEqual(tuple(out.shape), (2, 4, 6, 6))
        self.assertEqual(float(out.abs().max()), 0.0)

    def test_spectral_transform_rejects_tiny_maps(self):
        with self.assertRaises(ContractError):
            SpectralTransform(2)(torch.zeros(1, 2, 1, 4))

    def test_shapes_and_branch_split(self):
        ffc = FFC(8, 6, global_ratio=0.5)
        self.assertEqual((ffc.in_l, ffc.in_g, ffc.out_l, ffc.out_g), (4, 4, 3, 3))
        out = ffc.eval()(torch.randn(2, 8, 6, 6, generator=seeded(0)))
        self.assertEqual(tuple(out.shape), (2, 6, 6, 6))

    def test_local_only_has_no_spectral_branch(self):
        ffc = FFC(4, 4, global_ratio=0.0)
        self.assertIsNone(ffc.convg2g)
        self.assertEqual(tuple(ffc(torch.zeros(1, 4, 5, 5)).shape), (1, 4, 5, 5))

    def test_local_only_matches_a_plain_convolution(self):
        ffc = FFC(4, 6, global_ratio=0.0)
        x = torch.randn(2, 4, 7, 7, generator=seeded(7))
        expected = torch.nn.functional.conv2d(x, ffc.convl2l.weight, padding=1)
        torch.testing.assert_close(ffc(x), expected)

    def test_global_branch_sees_the_whole_map(self):
        ffc = FFC(2, 2, global_ratio=1.0, spectral_norm=False, spectral_activation=False).eval()
        base = torch.zeros(1, 2, 12, 12)
        poked = base.clone()
        poked[0, :, 0, 0] = 1.0
        delta = (ffc(poked) - ffc(base)).abs()
        self.assertGreater(float(delta[0, :, 11, 11].sum()), 0.0)

    def test_wrong_channel_count_raises(self):
        with self.assertRaises(ContractError):
            FFC(8, 8)(torch.zeros(1, 6, 4, 4))

    def test_zero_block_with_zero_audio_is_identity(self):
        unit = zero_init_(SemanticAlign(8))
        x = torch.randn(2, 8, 6, 6, generator=seeded(3))
        torch.testing.assert_close(unit(x, torch.zeros_like(x)), x, atol=1e-6, rtol=0)

    def test_semantic_align_carries_audio_statistics(self):
        unit = SemanticAlign(8).eval()
        g = seeded(4)
        x = torch.randn(2, 8, 6, 6, generator=g)
        a = torch.randn(2, 8, 6, 6, generator=g) * 2 + 5
        branch = unit.branch(x, a)
        torch.testing.assert_close(channel_stats(branch).mean, channel_stats(a).mean, atol=1e-3, rtol=0)
        with self.assertRaises(ContractError):
            unit(x, a[:, :, :3])

    def test_semantic_align_gradcheck(self):
        unit = SemanticAlign(4).double().eval()
        g = seeded(8)
        x = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=g, requires_grad=True)
        a = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=g, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(unit, (x, a)))

    def test_ffc_block_gradcheck(self):
        block = FFCBlock(4, 4).double().eval()
        x = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=seeded(5), requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(block, (x,)))


class AttentionTests(unittest.TestCase):
    def test_masks_are_in_unit_interval_with_right_shapes(self):
        cbam = CBAM(16, reduction=8)
        masks = cbam.masks(torch.randn(2, 16, 12, 12, generator=seeded(0)))
        self.assertEqual(tuple(masks.channel.shape), (2, 16, 1, 1))
        self.assertEqual(tuple(masks.spatial.shape), (2, 1, 12, 12))

    def test_gating_never_amplifies_over_many_maps(self):
        torch.manual_seed(10)
        cbam = CBAM(16, reduction=8)
        g = seeded(11)
        with torch.no_grad():
            for i in range(100):
                x = torch.randn(1, 16, 8, 8, generator=g) * (1 + i % 5)
                masks = cbam.masks(x)
                for m in (masks.channel, masks.spatial):
                    self.assertTrue(((m > 0) & (m < 1)).all(), i)
                self.assertTrue((cbam(x).abs() <= x.abs()).all(), i)

    def test_saturated_gates_pass_features_through(self):
        cbam = CBAM(8, reduction=4)
        with torch.no_grad():
            zero_init_(cbam)
            cbam.mlp[-1].bias.fill_(25.0)
            cbam.spatial.bias.fill_(50.0)
        x = torch.randn(1, 8, 5, 5, generator=seeded(1))
        torch.testing.assert_close(cbam(x), x, atol=1e-5, rtol=0)

    def test_zero_weights_halve_each_gate(self):
        cbam = zero_init_(CBAM(8, reduction=4))
        x = torch.randn(2, 8, 5, 5, generator=seeded(4))
        torch.testing.assert_close(cbam(x), 0.25 * x)

    def test_reduction_must_divide_channels(self):
        with self.assertRaises(ContractError):
            CBAM(12, reduction=8)

    def test_residual_block_shape_and_zero_residual(self):
        block = zero_init_(ResidualCBAMBlock(8, reduction=4)).eval()
        x = torch.randn(2, 8, 6, 6, generator=seeded(2))
        out = block(x)
        self.assertEqual(out.shape, x.shape)
        torch.testing.assert_close(out, x)

    def test_residual_block_gradcheck(self):
        block = ResidualCBAMBlock(4, reduction=2).double().eval()
        x = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=seeded(3), requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(block, (x,)))


class InitTests(unittest.TestCase):
    def test_seeded_init_is_reproducible(self):
        a = seeded_init_(torch.nn.Conv2d(3, 4, 3), seed=7)
        b = seeded_init_(torch.nn.Conv2d(3, 4, 3), seed=7)
        c = seeded_init_(torch.nn.Conv2d(3, 4, 3), seed=8)
        self.assertTrue(torch.equal(a.weight, b.weight))
        self.assertFalse(torch.equal(a.weight, c.weight))
        self.assertEqual(float(a.bias.abs().sum()), 0.0)


if __name__ == "__main__":
    unittest.main(verbosity=2)
