"""Warp model: flow construction, resampling, and the composition algebra.

Bilinear interpolation reproduces affine images exactly, so image-space
checks of the algebra run on ramps at near machine precision; the algebra
itself is checked point-wise on the flow fields.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focuslab.basis import (
    ALPHA_BOUND,
    BasisCoefficients,
    basis_flow,
    compose_coefficients,
    invert_coefficients,
    mean_endpoint_error,
    warp_basis,
)
from focuslab.validation import DataError

# |alpha| <= 0.09 keeps pairwise compositions inside the 0.2 sanity bound
coeff_strategy = st.builds(
    BasisCoefficients,
    alpha=st.floats(-0.09, 0.09),
    beta=st.floats(-3.0, 3.0),
    gamma=st.floats(-3.0, 3.0),
)


def ramp(height, width):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return 0.25 + 0.5 * xs / width + 0.2 * ys / height


class TestCoefficients:
    def test_defaults_are_identity(self):
        c = BasisCoefficients()
        assert c.as_tuple() == (0.0, 0.0, 0.0)

    def test_coerces_to_python_floats(self):
        c = BasisCoefficients(np.float64(0.01), np.float32(1.0), np.int64(2))
        assert all(type(v) is float for v in c.as_tuple())

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            BasisCoefficients(np.nan, 0.0, 0.0)
        with pytest.raises(DataError):
            BasisCoefficients(0.0, np.inf, 0.0)

    def test_rejects_alpha_at_bound(self):
        with pytest.raises(DataError):
            BasisCoefficients(ALPHA_BOUND, 0.0, 0.0)
        with pytest.raises(DataError):
            BasisCoefficients(-ALPHA_BOUND, 0.0, 0.0)
        BasisCoefficients(ALPHA_BOUND - 1e-9, 0.0, 0.0)


class TestFlow:
    def test_hand_values(self):
        dx, dy = basis_flow((4, 5), BasisCoefficients(0.1, 1.0, -2.0), (2.0, 1.5))
        assert dx.shape == (4, 5) and dy.shape == (4, 5)
        # x = 0: 0.1 * (0 - 2) + 1 = 0.8; x = 4: 0.1 * 2 + 1 = 1.2
        assert dx[0, 0] == pytest.approx(0.8)
        assert dx[3, 4] == pytest.approx(1.2)
        # y = 0: 0.1 * (0 - 1.5) - 2 = -2.15; y = 3: 0.1 * 1.5 - 2 = -1.85
        assert dy[0, 0] == pytest.approx(-2.15)
        assert dy[3, 0] == pytest.approx(-1.85)

    def test_zero_at_center_for_pure_zoom(self):
        dx, dy = basis_flow((9, 9), BasisCoefficients(0.05, 0.0, 0.0), (4.0, 4.0))
        assert dx[4, 4] == 0.0 and dy[4, 4] == 0.0

    def test_accepts_plain_tuple(self):
        a = basis_flow((3, 3), (0.02, 0.5, -0.5), (1.0, 1.0))
        b = basis_flow((3, 3), BasisCoefficients(0.02, 0.5, -0.5), (1.0, 1.0))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestWarp:
    def test_identity_warp_is_exact(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(17, 13))
        warped, valid = warp_basis(img, BasisCoefficients(), (6.0, 8.0))
        assert np.array_equal(warped, img)
        assert valid.all()

    def test_integer_translation_shifts_content(self):
        img = np.zeros((10, 10))
        img[4, 5] = 1.0
        # output samples input at x + 2: the bright pixel appears 2 to the left
        warped, valid = warp_basis(img, BasisCoefficients(0.0, 2.0, 0.0), (4.5, 4.5))
        assert warped[4, 3] == 1.0
        assert warped[4, 5] == 0.0
        assert not valid[:, -2:].any() and valid[:, :-2].all()

    def test_ramp_translation_is_exact(self):
        img = ramp(24, 24)
        coeffs = BasisCoefficients(0.0, 0.7, -1.3)
        warped, valid = warp_basis(img, coeffs, (11.5, 11.5))
        ys, xs = np.mgrid[0:24, 0:24].astype(np.float64)
        expected = 0.25 + 0.5 * (xs + 0.7) / 24 + 0.2 * (ys - 1.3) / 24
        assert np.abs((warped - expected)[valid]).max() < 1e-12

    def test_zoom_warp_validity_frame(self):
        img = np.ones((21, 21))
        # positive alpha samples outside the frame at the borders
        warped, valid = warp_basis(img, BasisCoefficients(0.1, 0.0, 0.0), (10.0, 10.0))
        assert valid[10, 10]
        assert not valid[0, 0] and not valid[-1, -1]
        assert warped[0, 0] == 0.0

    def test_mask_propagates_through_sampling(self):
        img = np.ones((16, 16))
        mask = np.ones((16, 16), dtype=bool)
        mask[:, :4] = False
        warped, valid = warp_basis(
            img, BasisCoefficients(0.0, -2.0, 0.0), (7.5, 7.5), mask=mask
        )
        # sampling at x - 2 pulls masked columns 2 to the right
        assert not valid[:, :6].any()
        assert valid[:, 6:-1].all()

    def test_color_image_warps_per_channel(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(12, 12, 3))
        coeffs = BasisCoefficients(0.03, 0.4, -0.2)
        warped, valid = warp_basis(img, coeffs, (5.5, 5.5))
        for c in range(3):
            single, _ = warp_basis(img[..., c], coeffs, (5.5, 5.5))
            assert np.array_equal(warped[..., c], single)

    def test_rejects_bad_rank(self):
        with pytest.raises(DataError):
            warp_basis(np.zeros(5), BasisCoefficients(), (2.0, 2.0))


class TestAlgebra:
    @given(a=coeff_strategy, b=coeff_strategy)
    @settings(max_examples=60, deadline=None)
    def test_compose_matches_pointwise_flow(self, a, b):
        # applying a then b: net displacement D(g) = D_b(g) + D_a(g + D_b(g))
        shape, center = (12, 14), (6.5, 5.5)
        dbx, dby = basis_flow(shape, b, center)
        ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        px, py = xs + dbx, ys + dby
        net_x = dbx + a.alpha * (px - center[0]) + a.beta
        net_y = dby + a.alpha * (py - center[1]) + a.gamma
        dcx, dcy = basis_flow(shape, compose_coefficients(a, b), center)
        assert np.abs(net_x - dcx).max() < 1e-9
        assert np.abs(net_y - dcy).max() < 1e-9

    @given(c=coeff_strategy)
    @settings(max_examples=60, deadline=None)
    def test_invert_composes_to_identity(self, c):
        left = compose_coefficients(c, invert_coefficients(c))
        right = compose_coefficients(invert_coefficients(c), c)
        for got in (left, right):
            assert abs(got.alpha) < 1e-12
            assert abs(got.beta) < 1e-9
            assert abs(got.gamma) < 1e-9

    def test_compose_on_ramp_image(self):
        img = ramp(30, 30)
        a = BasisCoefficients(0.02, 0.7, -0.4)
        b = BasisCoefficients(-0.015, -0.3, 0.5)
        two_step, _ = warp_basis(
            warp_basis(img, a, (14.5, 14.5))[0], b, (14.5, 14.5)
        )
        one_step, _ = warp_basis(img, compose_coefficients(a, b), (14.5, 14.5))
        inner = slice(5, -5)
        assert np.abs((two_step - one_step)[inner, inner]).max() < 1e-12

    def test_invert_on_ramp_image(self):
        img = ramp(30, 30)
        c = BasisCoefficients(0.04, 1.1, -0.9)
        warped, _ = warp_basis(img, c, (14.5, 14.5))
        back, valid = warp_basis(warped, invert_coefficients(c), (14.5, 14.5))
        inner = np.zeros_like(valid)
        inner[6:-6, 6:-6] = True
        assert np.abs((back - img))[inner & valid].max() < 1e-12


class TestMeanEndpointError:
    def test_pure_translation(self):
        c = BasisCoefficients(0.0, 3.0, 4.0)
        assert mean_endpoint_error(c, (8, 8), (3.5, 3.5)) == pytest.approx(5.0)

    def test_identity_against_reference_is_symmetric(self):
        c = BasisCoefficients(0.01, -0.5, 0.25)
        shape, center = (16, 16), (7.5, 7.5)
        forward = mean_endpoint_error(c, shape, center, reference=BasisCoefficients())
        backward = mean_endpoint_error(BasisCoefficients(), shape, center, reference=c)
        assert forward == pytest.approx(backward)
        assert mean_endpoint_error(c, shape, center, reference=c) == 0.0
