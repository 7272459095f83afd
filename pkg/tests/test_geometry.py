import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import RBFInterpolator

from histreg import grids
from histreg.geometry import (
    BSplineTransform,
    CompositeTransform,
    Image2D,
    ParameterShapeError,
    ThetaVector,
    TPSSolveError,
    TPSTransform,
    WarpError,
    affine_from_theta,
    compose,
    deformed_grid_image,
    grid_pattern,
    identity_transform,
    pixel_centers,
    solve_tps,
    tps_control_points,
    tps_from_theta,
    transform_from_json,
    warp_image,
)


def probe(n=100):
    return pixel_centers((n, n)).reshape(-1, 2)


def random_affine(rng):
    return affine_from_theta(ThetaVector(rng.uniform(-1, 1, 6), "affine"))


def random_tps(rng, amp=0.5):
    return tps_from_theta(ThetaVector(rng.uniform(-amp, amp, 72), "tps"))


class TestAffineFromTheta:
    def test_zero_theta_is_identity(self):
        phi = affine_from_theta(ThetaVector.zeros("affine"))
        pts = probe()
        assert np.max(np.abs(phi(pts) - pts)) <= 1e-9

    def test_translation(self):
        phi = affine_from_theta(ThetaVector([0, 0, 1, 0, 0, 0], "affine", 0.1))
        out = phi(np.array([[0.3, -0.2], [-1.0, 1.0]]))
        np.testing.assert_allclose(out, [[0.4, -0.2], [-0.9, 1.0]], atol=1e-15)

    def test_isotropic_scale(self):
        phi = affine_from_theta(ThetaVector([1, 0, 0, 0, 1, 0], "affine", 0.1))
        np.testing.assert_allclose(phi(np.array([0.5, 0.5])), [0.55, 0.55], atol=1e-15)

    def test_matrix_layout(self):
        theta = ThetaVector([1, 2, 3, 4, 5, 6], "affine", 0.5)
        phi = affine_from_theta(theta)
        np.testing.assert_allclose(phi.matrix, [[1.5, 1.0], [2.0, 3.5]])
        np.testing.assert_allclose(phi.offset, [1.5, 3.0])

    @pytest.mark.parametrize("n", [0, 5, 7, 72])
    def test_wrong_length(self, n):
        with pytest.raises(ParameterShapeError):
            ThetaVector(np.zeros(n), "affine")

    def test_rejects_tps_theta(self):
        with pytest.raises(ParameterShapeError):
            affine_from_theta(ThetaVector.zeros("tps"))


class TestTPS:
    def test_zero_theta_is_identity(self):
        phi = tps_from_theta(ThetaVector.zeros("tps"))
        pts = probe()
        assert np.max(np.abs(phi(pts) - pts)) <= 1e-9

    def test_single_point_move(self):
        # the 6x6 lattice has no node at the origin; move the node closest to
        # it and check the lattice is interpolated exactly
        cp = tps_control_points()
        k = int(np.argmin(np.sum(cp**2, axis=1)))
        values = np.zeros(72)
        values[k] = 0.05
        phi = tps_from_theta(ThetaVector(values, "tps", alpha=1.0))
        out = phi(cp)
        expected = cp.copy()
        expected[k, 0] += 0.05
        assert np.max(np.abs(out - expected)) <= 1e-9

    def test_interpolation_at_origin_control_point(self):
        # odd lattice containing (0, 0), as in the documented example
        cp = tps_control_points(5)
        k = int(np.argmin(np.sum(cp**2, axis=1)))
        assert np.allclose(cp[k], 0)
        targets = cp.copy()
        targets[k, 0] += 0.05
        phi = TPSTransform(cp, targets)
        np.testing.assert_allclose(phi(np.array([0.0, 0.0])), [0.05, 0.0], atol=1e-12)
        others = np.delete(np.arange(25), k)
        assert np.max(np.abs(phi(cp[others]) - cp[others])) <= 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_random_theta_interpolates(self, seed):
        rng = np.random.default_rng(seed)
        theta = ThetaVector(rng.uniform(-0.5, 0.5, 72), "tps", 0.1)
        phi = tps_from_theta(theta)
        cp = tps_control_points()
        targets = cp + 0.1 * np.stack([theta.values[:36], theta.values[36:]], -1)
        assert np.max(np.abs(phi(cp) - targets)) <= 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scipy_thin_plate_rbf(self, seed):
        # r^2 log r and r^2 log r^2 differ by a constant factor, so the
        # interpolants with a linear polynomial tail coincide
        rng = np.random.default_rng(seed)
        phi = random_tps(rng)
        cp = phi.control_points
        oracle = RBFInterpolator(cp, phi.targets, kernel="thin_plate_spline", degree=1)
        pts = rng.uniform(-1, 1, (500, 2))
        np.testing.assert_allclose(phi(pts), oracle(pts), atol=1e-9)

    def test_coincident_points_raise(self):
        cp = np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
        with pytest.raises(TPSSolveError):
            solve_tps(cp, cp)


class TestCompose:
    def test_identity_identity(self):
        phi = compose(identity_transform(), tps_from_theta(ThetaVector.zeros("tps")))
        pts = probe()
        assert np.max(np.abs(phi(pts) - pts)) <= 1e-9

    def test_affine_with_identity_tps(self):
        rng = np.random.default_rng(0)
        A = random_affine(rng)
        phi = compose(A, tps_from_theta(ThetaVector.zeros("tps")))
        pts = probe()
        assert np.max(np.abs(phi(pts) - A(pts))) <= 1e-9

    def test_matches_sequential_application(self):
        rng = np.random.default_rng(1)
        A, T = random_affine(rng), random_tps(rng)
        pts = rng.uniform(-1, 1, (1000, 2))
        expected = np.empty_like(pts)
        for i, p in enumerate(pts):
            q = T(p[None])[0]
            expected[i] = A.matrix @ q + A.offset
        assert np.max(np.abs(compose(A, T)(pts) - expected)) <= 1e-9


def shift_oracle(img, dc):
    out = np.zeros_like(img)
    if dc >= 0:
        out[:, : img.shape[1] - dc] = img[:, dc:]
    else:
        out[:, -dc:] = img[:, :dc]
    return out


class TestWarp:
    def test_identity_exact(self):
        img = np.random.default_rng(0).random((17, 23))
        out = warp_image(Image2D(img), identity_transform(), img.shape)
        assert np.max(np.abs(out.pixels - img)) == 0.0

    @pytest.mark.parametrize("dc", [1, -1])
    def test_one_pixel_translation(self, dc):
        img = np.random.default_rng(1).random((16, 16))
        theta = ThetaVector([0, 0, dc * (2 / 16) / 0.1, 0, 0, 0], "affine")
        out = warp_image(Image2D(img), affine_from_theta(theta), (16, 16))
        assert np.max(np.abs(out.pixels - shift_oracle(img, dc))) <= 1e-6

    def test_constant_image(self):
        img = np.full((20, 20), 3.5)
        theta = ThetaVector([-1.5, 0.3, 0.2, -0.1, -1.0, -0.2], "affine")
        phi = affine_from_theta(theta)
        pts = phi(pixel_centers((20, 20)))
        assert np.all(np.abs(pts) < 1 - 1 / 20)
        out = warp_image(Image2D(img), phi, (20, 20))
        np.testing.assert_allclose(out.pixels, 3.5, atol=1e-12)

    def test_multichannel(self):
        rng = np.random.default_rng(2)
        img = rng.random((12, 10, 3))
        phi = random_affine(rng)
        out = warp_image(Image2D(img), phi, (8, 9))
        for c in range(3):
            single = warp_image(Image2D(img[..., c]), phi, (8, 9))
            np.testing.assert_array_equal(out.pixels[..., c], single.pixels)

    def test_out_of_domain_is_zero(self):
        theta = ThetaVector([0, 0, 30, 0, 0, 0], "affine")
        out = warp_image(Image2D(np.ones((8, 8))), affine_from_theta(theta), (8, 8))
        assert np.all(out.pixels == 0)

    def test_nonfinite_transform(self):
        theta = ThetaVector([np.inf, 0, 0, 0, 0, 0], "affine")
        with pytest.raises(WarpError):
            warp_image(Image2D(np.ones((4, 4))), affine_from_theta(theta), (4, 4))

    def test_bad_shape(self):
        with pytest.raises(WarpError):
            warp_image(Image2D(np.ones((4, 4))), identity_transform(), (0, 4))

    @settings(max_examples=30, deadline=None)
    @given(
        a=st.floats(-3, 3),
        b=st.floats(-3, 3),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        I, J = rng.random((9, 11)), rng.random((9, 11))
        phi = compose(random_affine(rng), random_tps(rng))
        lhs = warp_image(Image2D(a * I + b * J), phi, (9, 11)).pixels
        rhs = a * warp_image(Image2D(I), phi, (9, 11)).pixels + b * warp_image(Image2D(J), phi, (9, 11)).pixels
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_nearest_keeps_labels(self):
        rng = np.random.default_rng(3)
        lab = (rng.random((30, 30)) > 0.5).astype(np.uint8)
        out = warp_image(Image2D(lab), random_affine(rng), (41, 37), order="nearest")
        assert set(np.unique(out.pixels)) <= {0, 1}


class TestTorchGrids:
    def test_affine_grid_matches_numpy(self):
        rng = np.random.default_rng(4)
        theta = rng.uniform(-1, 1, (3, 6))
        g = grids.affine_grid(torch.tensor(theta), 0.1, (7, 9)).numpy()
        for b in range(3):
            phi = affine_from_theta(ThetaVector(theta[b], "affine"))
            np.testing.assert_allclose(g[b], phi(pixel_centers((7, 9))), atol=1e-12)

    def test_tps_grid_matches_numpy(self):
        rng = np.random.default_rng(5)
        theta = rng.uniform(-0.5, 0.5, (2, 72))
        g = grids.tps_grid(torch.tensor(theta), 0.1, (13, 11)).numpy()
        for b in range(2):
            phi = tps_from_theta(ThetaVector(theta[b], "tps"))
            np.testing.assert_allclose(g[b], phi(pixel_centers((13, 11))), atol=1e-9)

    def test_warp_matches_numpy(self):
        rng = np.random.default_rng(6)
        img = rng.random((15, 12))
        phi = compose(random_affine(rng), random_tps(rng))
        grid = torch.tensor(phi(pixel_centers((10, 14))))[None]
        out = grids.warp(torch.tensor(img)[None, None], grid)[0, 0].numpy()
        ref = warp_image(Image2D(img), phi, (10, 14)).pixels
        np.testing.assert_allclose(out, ref, atol=1e-9)


class TestSerialization:
    @pytest.mark.parametrize("seed", range(3))
    def test_round_trip_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        bs = BSplineTransform(rng.normal(0, 0.01, (5, 5, 2)))
        phi = CompositeTransform([random_affine(rng), random_tps(rng), bs])
        text = phi.to_json()
        back = transform_from_json(text)
        assert back.to_json() == text
        pts = rng.uniform(-1, 1, (50, 2))
        np.testing.assert_array_equal(back(pts), phi(pts))

    def test_document_fields(self):
        doc = json.loads(compose(identity_transform(), tps_from_theta(ThetaVector.zeros("tps"))).to_json())
        assert doc["kind"] == "composite"
        aff, tps = doc["stages"]
        assert aff["kind"] == "affine" and aff["alpha"] == 0.1 and len(aff["theta"]) == 6
        assert tps["kind"] == "tps" and len(tps["theta"]) == 72 and len(tps["control_points"]) == 36


class TestGridImage:
    def test_identity(self):
        rep = deformed_grid_image(identity_transform(), 8, shape=(64, 64))
        assert abs(rep.min_jacobian_det - 1.0) <= 1e-3
        np.testing.assert_array_equal(rep.image.pixels, grid_pattern((64, 64), 8))

    def test_scale(self):
        phi = affine_from_theta(ThetaVector([1, 0, 0, 0, 1, 0], "affine", 0.1))
        rep = deformed_grid_image(phi, 8, shape=(32, 32))
        assert abs(rep.min_jacobian_det - 1.21) <= 1e-3

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            deformed_grid_image(identity_transform(), 1)


class TestBSpline:
    def test_zero_coefficients_identity(self):
        phi = BSplineTransform(np.zeros((8, 8, 2)))
        pts = probe(30)
        np.testing.assert_allclose(phi(pts), pts, atol=1e-15)

    def test_partition_of_unity(self):
        # constant coefficients give a constant displacement inside the knot span
        phi = BSplineTransform(np.ones((8, 8, 2)) * 0.02)
        pts = probe(30) * 0.7
        np.testing.assert_allclose(phi(pts) - pts, 0.02, atol=1e-12)
