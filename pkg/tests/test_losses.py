"""Loss tests. Closed-form constants are derived on paper (constant-image
SSIM, linear-ramp smoothness); everything else is checked against brute-force
per-pixel enumeration or finite differences."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxdepth.losses import (
    LossConfig,
    edge_aware_smoothness,
    masked_mean,
    min_reprojection,
    photometric_error,
    ssim,
    total_loss,
)

from conftest import assert_grad_matches_fd


def constant_image_ssim(mu_a, mu_b, cfg=LossConfig()):
    """Closed form: variances vanish, so only the luminance term survives."""
    return (2 * mu_a * mu_b + cfg.ssim_c1) / (mu_a ** 2 + mu_b ** 2 + cfg.ssim_c1)


# ----------------------------------------------------------------- ssim ----


class TestSsim:
    def test_self_similarity_is_one(self):
        x = torch.rand(3, 10, 12)
        assert (ssim(x, x) - 1.0).abs().max().item() < 1e-6

    def test_constant_images_closed_form(self):
        cfg = LossConfig()
        a = torch.full((1, 8, 8), 0.5)
        b = torch.full((1, 8, 8), 0.25)
        expected = constant_image_ssim(0.5, 0.25, cfg)
        out = ssim(a, b, cfg)
        assert (out - expected).abs().max().item() < 1e-6

    def test_symmetry_elementwise(self):
        a, b = torch.rand(3, 9, 9), torch.rand(3, 9, 9)
        assert torch.equal(ssim(a, b), ssim(b, a))

    def test_output_range(self):
        a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
        out = ssim(a, b)
        assert out.min().item() >= -1.0 - 1e-6 and out.max().item() <= 1.0 + 1e-6

    def test_shape_preserved_and_mismatch_raises(self):
        a = torch.rand(2, 3, 6, 7)
        assert ssim(a, a).shape == a.shape
        with pytest.raises(ValueError):
            ssim(a, torch.rand(2, 3, 6, 8))

    def test_wider_window_config(self):
        cfg = LossConfig(ssim_window=5)
        x = torch.rand(1, 12, 12)
        assert (ssim(x, x, cfg) - 1.0).abs().max().item() < 1e-6


# ----------------------------------------------------- photometric_error ----


class TestPhotometricError:
    def test_identical_images_zero(self):
        x = torch.rand(3, 8, 8)
        assert photometric_error(x, x).abs().max().item() == 0.0

    def test_pure_l1_branch(self):
        cfg = LossConfig(alpha=0.0)
        target = torch.full((3, 4, 4), 0.5)
        synth = torch.full((3, 4, 4), 0.25)
        out = photometric_error(target, synth, cfg)
        assert torch.allclose(out, torch.full((4, 4), 0.25))

    def test_pure_ssim_branch_constant_images(self):
        cfg = LossConfig(alpha=1.0)
        target = torch.full((1, 8, 8), 0.5)
        synth = torch.full((1, 8, 8), 0.25)
        expected = 0.5 * (1.0 - constant_image_ssim(0.5, 0.25, cfg))
        out = photometric_error(target, synth, cfg)
        assert (out - expected).abs().max().item() < 1e-6

    def test_nonnegative_and_channel_averaged_shape(self):
        target, synth = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
        out = photometric_error(target, synth)
        assert out.shape == (2, 8, 8)
        assert out.min().item() >= 0.0

    def test_zero_iff_identical(self):
        target = torch.rand(3, 8, 8)
        synth = target.clone()
        synth[0, 3, 3] += 0.2
        assert photometric_error(target, synth).sum().item() > 0.0

    def test_gradient_matches_fd(self):
        torch.manual_seed(5)
        target = torch.rand(1, 8, 8, dtype=torch.float64)
        synth0 = torch.rand(1, 8, 8, dtype=torch.float64)

        def loss(synth):
            return photometric_error(target, synth).mean()

        indices = [(0, r, c) for r, c in [(1, 1), (3, 5), (6, 2), (7, 7), (0, 0)]]
        assert_grad_matches_fd(loss, synth0, indices, step=1e-5, rel_tol=1e-2)


# ------------------------------------------------------ min_reprojection ----


class TestMinReprojection:
    def test_single_map_is_itself(self):
        err = torch.rand(6, 6)
        out = min_reprojection([err])
        assert torch.equal(out.error, err)
        assert out.valid.all()

    def test_elementwise_minimum(self):
        a = torch.tensor([[2.0, 5.0]])
        b = torch.tensor([[3.0, 1.0]])
        out = min_reprojection([a, b])
        assert torch.equal(out.error, torch.tensor([[2.0, 1.0]]))
        assert torch.equal(out.index, torch.tensor([[0, 1]]))

    def test_validity_overrides_magnitude(self):
        # pixel valid only in the second frame: its (larger) error wins
        a = torch.tensor([[0.1]])
        b = torch.tensor([[9.0]])
        out = min_reprojection([a, b], [torch.tensor([[False]]), torch.tensor([[True]])])
        assert out.error.item() == 9.0
        assert out.index.item() == 1
        assert out.valid.item()

    def test_all_invalid_pixel_flagged(self):
        a = torch.tensor([[1.0]])
        out = min_reprojection([a, a], [torch.tensor([[False]]), torch.tensor([[False]])])
        assert not out.valid.item()
        assert out.error.item() == 0.0

    def test_empty_list_raises(self):
        with pytest.raises(ValueError):
            min_reprojection([])

    def test_against_brute_force_enumeration(self):
        torch.manual_seed(13)
        errors = [torch.rand(5, 7) for _ in range(3)]
        masks = [torch.rand(5, 7) > 0.3 for _ in range(3)]
        out = min_reprojection(errors, masks)
        for v in range(5):
            for u in range(7):
                candidates = [
                    (errors[i][v, u].item(), i) for i in range(3) if masks[i][v, u]
                ]
                if not candidates:
                    assert not out.valid[v, u]
                else:
                    best_err, best_i = min(candidates)
                    assert out.error[v, u].item() == pytest.approx(best_err)
                    assert out.valid[v, u]

    @given(st.integers(1, 4), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_never_exceeds_any_input_where_valid(self, n_maps, seed):
        torch.manual_seed(seed)
        errors = [torch.rand(4, 4) for _ in range(n_maps)]
        masks = [torch.rand(4, 4) > 0.25 for _ in range(n_maps)]
        out = min_reprojection(errors, masks)
        for err, mask in zip(errors, masks):
            both = mask & out.valid
            assert (out.error[both] <= err[both] + 1e-7).all()


class TestMaskedMean:
    def test_matches_plain_mean_when_all_valid(self):
        x = torch.rand(4, 4)
        assert masked_mean(x, torch.ones(4, 4, dtype=torch.bool)).item() == pytest.approx(
            x.mean().item()
        )

    def test_ignores_masked_entries(self):
        x = torch.tensor([[1.0, 100.0]])
        mask = torch.tensor([[True, False]])
        assert masked_mean(x, mask).item() == 1.0

    def test_empty_mask_gives_zero(self):
        assert masked_mean(torch.rand(3, 3), torch.zeros(3, 3, dtype=torch.bool)).item() == 0.0


# ------------------------------------------------- edge_aware_smoothness ----


class TestEdgeAwareSmoothness:
    def test_constant_disparity_is_zero(self):
        disp = torch.full((6, 6), 0.4)
        image = torch.rand(3, 6, 6)
        assert edge_aware_smoothness(disp, image).item() == 0.0

    def test_step_under_infinite_image_gradient_vanishes(self):
        disp = torch.cat([torch.zeros(4, 2) + 0.2, torch.ones(4, 2)], dim=1)
        image = torch.cat([torch.zeros(1, 4, 2), torch.full((1, 4, 2), 1e6)], dim=2)
        # exp(-1e6) == 0, so the co-located disparity step contributes nothing
        assert edge_aware_smoothness(disp, image).item() == 0.0

    def test_linear_ramp_hand_evaluated(self):
        # disp(u, v) = s*u on 4x4, constant image.
        # mean(d) = s*(0+1+2+3)/4 = 1.5s; |dx d*| = 1/1.5 at all 4x3 forward
        # differences; |dy d*| = 0. Expected = 1/1.5.
        s = 0.37
        disp = s * torch.arange(4.0).repeat(4, 1)
        image = torch.full((3, 4, 4), 0.5)
        expected = 1.0 / 1.5
        assert edge_aware_smoothness(disp, image).item() == pytest.approx(expected, rel=1e-6)

    def test_zero_mean_disparity_raises(self):
        with pytest.raises(ValueError):
            edge_aware_smoothness(torch.zeros(4, 4), torch.rand(3, 4, 4))

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ValueError):
            edge_aware_smoothness(torch.rand(4, 4), torch.rand(3, 4, 5))

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_positive_scaling(self, scale):
        torch.manual_seed(21)
        disp = torch.rand(8, 8) * 0.9 + 0.05
        image = torch.rand(3, 8, 8)
        base = edge_aware_smoothness(disp, image).item()
        scaled = edge_aware_smoothness(disp * scale, image).item()
        assert scaled == pytest.approx(base, abs=1e-6, rel=1e-5)

    def test_gradient_matches_fd(self):
        torch.manual_seed(6)
        image = torch.rand(1, 8, 8, dtype=torch.float64)
        disp0 = torch.rand(8, 8, dtype=torch.float64) * 0.8 + 0.1

        def loss(disp):
            return edge_aware_smoothness(disp, image)

        indices = [(1, 1), (4, 4), (6, 2), (0, 7)]
        assert_grad_matches_fd(loss, disp0, indices, step=1e-6, rel_tol=1e-2)


# ----------------------------------------------------------- total_loss ----


class TestTotalLoss:
    def test_photometric_only(self):
        assert total_loss(1.0, 0.0).item() == 1.0

    def test_linear_combination(self):
        cfg = LossConfig(lambda_re=1.0, beta_smooth=1e-3)
        assert total_loss(0.5, 2.0, cfg).item() == pytest.approx(0.502)

    def test_zero_smooth_weight(self):
        cfg = LossConfig(beta_smooth=0.0)
        assert total_loss(0.7, 123.0, cfg).item() == pytest.approx(0.7)

    @given(
        st.floats(0.0, 10.0),
        st.floats(0.0, 10.0),
        st.floats(0.0, 1.0),
        st.floats(0.0, 1.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_nondecreasing(self, p, s, dp, ds):
        base = total_loss(p, s).item()
        assert total_loss(p + dp, s).item() >= base
        assert total_loss(p, s + ds).item() >= base


class TestLossConfigValidation:
    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)

    def test_even_window(self):
        with pytest.raises(ValueError):
            LossConfig(ssim_window=4)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossConfig(beta_smooth=-1.0)
