"""Geometry tests: every numeric expectation is hand-derived or computed by
an independent oracle (explicit per-pixel arithmetic, numeric Rodrigues,
array shifts), never by the code path under test."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxdepth.geometry import (
    Intrinsics,
    Pose,
    backproject,
    pixel_grid,
    pose_from_6dof,
    project,
    scale_intrinsics,
    synthesize_view,
    warp,
)

from conftest import assert_grad_matches_fd


def numpy_rodrigues(axis_angle):
    """Independent Rodrigues oracle in numpy."""
    omega = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


IDENTITY_K = Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=8, height=8)


# ---------------------------------------------------------------- pose ----


class TestPoseFrom6Dof:
    def test_zero_vector_is_identity(self):
        pose = pose_from_6dof(torch.zeros(6))
        assert torch.allclose(pose.rotation, torch.eye(3), atol=1e-7)
        assert torch.allclose(pose.translation, torch.zeros(3), atol=1e-7)

    def test_pure_translation(self):
        pose = pose_from_6dof(torch.tensor([0.0, 0.0, 0.0, 1.0, 2.0, 3.0]))
        assert torch.allclose(pose.rotation, torch.eye(3), atol=1e-7)
        assert torch.allclose(pose.translation, torch.tensor([1.0, 2.0, 3.0]))

    def test_quarter_turn_about_x_maps_y_to_z(self):
        pose = pose_from_6dof(torch.tensor([math.pi / 2, 0, 0, 0, 0, 0]))
        rotated = pose.apply(torch.tensor([0.0, 1.0, 0.0]))
        assert torch.allclose(rotated, torch.tensor([0.0, 0.0, 1.0]), atol=1e-6)

    @pytest.mark.parametrize(
        "axis_angle",
        [
            (0.3, -0.2, 0.5),
            (1.1, 0.0, 0.0),
            (0.0, 2.4, -1.3),
            (1e-5, -2e-5, 1e-5),
        ],
    )
    def test_matches_numpy_rodrigues_oracle(self, axis_angle):
        vec = torch.tensor(list(axis_angle) + [0.0, 0.0, 0.0], dtype=torch.float64)
        pose = pose_from_6dof(vec)
        expected = numpy_rodrigues(axis_angle)
        np.testing.assert_allclose(pose.rotation.numpy(), expected, atol=1e-9)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            pose_from_6dof(torch.tensor([0.0, float("nan"), 0, 0, 0, 0]))

    def test_batched_input(self):
        vecs = torch.randn(4, 6, dtype=torch.float64) * 0.5
        pose = pose_from_6dof(vecs)
        assert pose.rotation.shape == (4, 3, 3)
        for i in range(4):
            expected = numpy_rodrigues(vecs[i, :3].numpy())
            np.testing.assert_allclose(pose.rotation[i].numpy(), expected, atol=1e-9)

    def test_differentiable_at_zero(self):
        vec = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        pose = pose_from_6dof(vec)
        pose.rotation.sum().backward()
        assert torch.isfinite(vec.grad).all()

    @given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_rotation_is_orthonormal(self, values):
        pose = pose_from_6dof(torch.tensor(values, dtype=torch.float64))
        assert pose.orthonormality_error() < 1e-6
        assert abs(torch.linalg.det(pose.rotation).item() - 1.0) < 1e-6

    @given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_compose_with_inverse_is_identity(self, values):
        pose = pose_from_6dof(torch.tensor(values, dtype=torch.float64))
        round_trip = pose.compose(pose.inverse())
        assert torch.allclose(round_trip.rotation, torch.eye(3, dtype=torch.float64), atol=1e-6)
        assert torch.allclose(
            round_trip.translation, torch.zeros(3, dtype=torch.float64), atol=1e-6
        )


# --------------------------------------------------------- backproject ----


class TestBackproject:
    def test_identity_intrinsics_origin_pixel(self):
        depth = torch.full((8, 8), 2.0)
        points = backproject(depth, IDENTITY_K)
        assert torch.allclose(points[0, 0], torch.tensor([0.0, 0.0, 2.0]))

    def test_identity_intrinsics_offset_pixel_matrix_solve_oracle(self):
        depth = torch.full((8, 8), 2.0)
        points = backproject(depth, IDENTITY_K)
        # oracle: solve K @ p = d * (u, v, 1) per pixel with an explicit solve
        k = IDENTITY_K.matrix(dtype=torch.float64).numpy()
        expected = np.linalg.solve(k, 2.0 * np.array([3.0, 4.0, 1.0]))
        np.testing.assert_allclose(points[4, 3].numpy(), expected, atol=1e-6)
        assert torch.allclose(points[4, 3], torch.tensor([6.0, 8.0, 2.0]))

    def test_principal_point_ray(self):
        k = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=64, height=64)
        depth = torch.full((64, 64), 7.5)
        points = backproject(depth, k)
        assert torch.allclose(points[50, 50], torch.tensor([0.0, 0.0, 7.5]), atol=1e-6)

    def test_z_component_equals_depth(self):
        k = Intrinsics(fx=123.0, fy=77.0, cx=31.0, cy=17.0, width=32, height=16)
        depth = torch.rand(16, 32) * 10 + 0.5
        points = backproject(depth, k)
        assert torch.equal(points[..., 2], depth)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            backproject(torch.ones(8, 8), IDENTITY_K, grid=pixel_grid(4, 4))

    def test_random_pixels_against_per_pixel_solve(self):
        k = Intrinsics(fx=200.0, fy=150.0, cx=20.0, cy=12.0, width=40, height=24)
        depth = torch.rand(24, 40, dtype=torch.float64) * 5 + 1
        points = backproject(depth, k)
        kmat = k.matrix(dtype=torch.float64).numpy()
        rng = np.random.default_rng(3)
        for _ in range(10):
            v, u = rng.integers(0, 24), rng.integers(0, 40)
            expected = np.linalg.solve(kmat, depth[v, u].item() * np.array([u, v, 1.0]))
            np.testing.assert_allclose(points[v, u].numpy(), expected, atol=1e-10)


# -------------------------------------------------------------- project ----


class TestProject:
    def test_identity_pose_round_trip(self):
        k = Intrinsics(fx=80.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)
        depth = torch.rand(48, 64) * 20 + 0.5
        coords, valid = project(backproject(depth, k), Pose.identity(), k)
        expected = pixel_grid(48, 64)[..., :2]
        assert valid.all()
        assert (coords - expected).abs().max().item() < 1e-4

    def test_translation_hand_arithmetic(self):
        # point (0,0,2) translated by (1,0,0) -> (1,0,2) -> pixel x/z = 0.5
        points = torch.tensor([0.0, 0.0, 2.0]).reshape(1, 1, 3)
        pose = Pose(torch.eye(3), torch.tensor([1.0, 0.0, 0.0]))
        coords, valid = project(points, pose, IDENTITY_K)
        assert torch.allclose(coords[0, 0], torch.tensor([0.5, 0.0]))
        assert valid[0, 0]

    def test_zero_depth_masked_not_raised(self):
        points = torch.tensor([0.5, 0.5, 1.0]).reshape(1, 1, 3)
        pose = Pose(torch.eye(3), torch.tensor([0.0, 0.0, -1.0]))  # moves z to 0
        coords, valid = project(points, pose, IDENTITY_K)
        assert not valid[0, 0]
        assert torch.isfinite(coords).all()

    def test_out_of_image_masked(self):
        points = torch.tensor([100.0, 0.0, 1.0]).reshape(1, 1, 3)
        coords, valid = project(points, Pose.identity(), IDENTITY_K)
        assert not valid[0, 0]

    def test_nonfinite_points_rejected(self):
        points = torch.full((2, 2, 3), float("inf"))
        with pytest.raises(ValueError):
            project(points, Pose.identity(), IDENTITY_K)


# ----------------------------------------------------------------- warp ----


class TestWarp:
    def test_identity_coords_returns_source_exactly(self):
        image = torch.rand(3, 12, 16)
        coords = pixel_grid(12, 16)[..., :2]
        assert torch.equal(warp(image, coords), image)

    def test_unit_shift_on_ramp_matches_array_shift(self):
        # ramp I(u, v) = u; sampling at u+1 must give u+1 for interior pixels
        ramp = pixel_grid(6, 10)[..., 0].unsqueeze(0)
        coords = pixel_grid(6, 10)[..., :2].clone()
        coords[..., 0] += 1.0
        warped = warp(ramp, coords)
        expected = torch.roll(ramp, shifts=-1, dims=-1)  # independent oracle
        assert torch.allclose(warped[..., :, :-1], expected[..., :, :-1], atol=1e-6)

    def test_all_outside_coords_give_border_fill(self):
        image = torch.rand(1, 5, 5)
        coords = torch.full((5, 5, 2), 100.0)
        warped = warp(image, coords)
        # clamp-to-edge: everything reads the bottom-right pixel
        assert torch.allclose(warped, image[..., -1:, -1:].expand_as(warped), atol=1e-6)

    def test_channel_count_preserved_and_batched(self):
        image = torch.rand(2, 4, 6, 8)
        coords = pixel_grid(6, 8)[..., :2].expand(2, 6, 8, 2)
        assert warp(image, coords).shape == (2, 4, 6, 8)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            warp(torch.rand(1, 5, 5), torch.zeros(4, 4, 2))

    def test_fractional_shift_bilinear_hand_value(self):
        # 1x2 image [0, 1]; sampling at u=0.25 must give 0.25
        image = torch.tensor([[[0.0, 1.0]]])
        coords = torch.tensor([[[0.25, 0.0], [1.0, 0.0]]])
        warped = warp(image, coords)
        assert abs(warped[0, 0, 0].item() - 0.25) < 1e-6


# ----------------------------------------------------- scale_intrinsics ----


class TestScaleIntrinsics:
    def test_factor_one_unchanged(self):
        k = Intrinsics(fx=100.0, fy=90.0, cx=50.0, cy=40.0, width=640, height=192)
        assert scale_intrinsics(k, 1) == k

    def test_half_scale(self):
        k = Intrinsics(fx=100.0, fy=90.0, cx=50.0, cy=40.0, width=640, height=192)
        half = scale_intrinsics(k, 0.5)
        assert half == Intrinsics(fx=50.0, fy=45.0, cx=25.0, cy=20.0, width=320, height=96)

    def test_non_integral_result_raises(self):
        k = Intrinsics(fx=100.0, fy=90.0, cx=50.0, cy=40.0, width=640, height=192)
        with pytest.raises(ValueError):
            scale_intrinsics(k, 1.0 / 3.0)

    def test_negative_factor_raises(self):
        k = Intrinsics(fx=100.0, fy=90.0, cx=50.0, cy=40.0, width=640, height=192)
        with pytest.raises(ValueError):
            scale_intrinsics(k, -0.5)

    @given(st.sampled_from([1, 2, 4, 8]))
    @settings(max_examples=10, deadline=None)
    def test_up_then_down_round_trips(self, factor):
        k = Intrinsics(fx=100.0, fy=90.0, cx=50.0, cy=40.0, width=64, height=32)
        assert scale_intrinsics(scale_intrinsics(k, factor), 1.0 / factor) == k


# ----------------------------------------------------------- invariants ----


class TestGeometryInvariants:
    def test_identity_round_trip_within_1e5_px(self):
        k = Intrinsics(fx=70.0, fy=70.0, cx=31.5, cy=31.5, width=64, height=64)
        depth = torch.rand(64, 64, dtype=torch.float64) * 50 + 0.1
        coords, valid = project(backproject(depth, k), Pose.identity(dtype=torch.float64), k)
        expected = pixel_grid(64, 64, dtype=torch.float64)[..., :2]
        assert valid.all()
        assert (coords - expected).abs().max().item() < 1e-5

    def test_pose_composition_analytic(self):
        # forward by T, then by T^-1 with the exact intermediate depth,
        # returns the original grid
        k = Intrinsics(fx=60.0, fy=60.0, cx=15.5, cy=15.5, width=32, height=32)
        depth = torch.full((32, 32), 5.0, dtype=torch.float64)
        pose = pose_from_6dof(torch.tensor([0.02, -0.01, 0.03, 0.2, -0.1, 0.05], dtype=torch.float64))
        moved = pose.apply(backproject(depth, k))
        recovered = pose.inverse().apply(moved)
        coords, valid = project(recovered, Pose.identity(dtype=torch.float64), k)
        expected = pixel_grid(32, 32, dtype=torch.float64)[..., :2]
        assert (coords[valid] - expected[valid]).abs().max().item() < 1e-8

    def test_double_warp_translation_round_trip(self):
        # constant-depth plane, pure x translation: warp there and back on a
        # smooth image reproduces the interior within interpolation noise
        k = Intrinsics(fx=50.0, fy=50.0, cx=15.5, cy=15.5, width=32, height=32)
        depth = torch.full((32, 32), 10.0)
        # band-limited texture: bilinear interpolation error ~ a*w^2/8 < 1e-3
        vs, us = torch.meshgrid(torch.arange(32.0), torch.arange(32.0), indexing="ij")
        image = (0.5 + 0.4 * torch.sin(us * 0.1) * torch.cos(vs * 0.08)).unsqueeze(0)

        fwd = Pose(torch.eye(3), torch.tensor([0.5, 0.0, 0.0]))
        warped, _ = synthesize_view(image, depth, fwd, k)
        back, valid = synthesize_view(warped, depth, fwd.inverse(), k)
        interior = valid.clone()
        interior[:4] = interior[-4:] = False
        interior[:, :4] = interior[:, -4:] = False
        assert (back - image)[0][interior].abs().mean().item() < 1e-3

    def test_warp_gradient_wrt_coords_matches_fd(self):
        torch.manual_seed(7)
        image = torch.rand(1, 16, 16, dtype=torch.float64)
        base = pixel_grid(16, 16, dtype=torch.float64)[..., :2] + 0.3  # off-lattice

        def loss(coords):
            return warp(image, coords).sum()

        rng = np.random.default_rng(11)
        indices = [
            (int(rng.integers(2, 14)), int(rng.integers(2, 14)), int(rng.integers(0, 2)))
            for _ in range(20)
        ]
        assert_grad_matches_fd(loss, base, indices, step=1e-3, rel_tol=1e-2)

    def test_project_gradient_wrt_depth_matches_fd(self):
        torch.manual_seed(8)
        k = Intrinsics(fx=40.0, fy=40.0, cx=7.5, cy=7.5, width=16, height=16)
        pose = pose_from_6dof(torch.tensor([0.01, 0.02, -0.01, 0.1, 0.05, -0.02], dtype=torch.float64))
        depth0 = torch.rand(16, 16, dtype=torch.float64) * 2 + 1

        def loss(depth):
            coords, _ = project(backproject(depth, k), pose, k)
            return coords.sum()

        rng = np.random.default_rng(12)
        indices = [(int(rng.integers(2, 14)), int(rng.integers(2, 14))) for _ in range(20)]
        assert_grad_matches_fd(loss, depth0, indices, step=1e-3, rel_tol=1e-2)

    def test_determinism_bit_identical(self):
        k = Intrinsics(fx=80.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)
        depth = torch.rand(48, 64) * 20 + 0.5
        image = torch.rand(3, 48, 64)
        pose = pose_from_6dof(torch.tensor([0.01, 0.0, 0.0, 0.1, 0.0, 0.0]))
        out1, mask1 = synthesize_view(image, depth, pose, k)
        out2, mask2 = synthesize_view(image, depth, pose, k)
        assert torch.equal(out1, out2) and torch.equal(mask1, mask2)
        assert torch.equal(pixel_grid(48, 64), pixel_grid(48, 64))
