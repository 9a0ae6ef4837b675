"""Illumination/reflectance decomposition and recombination."""

import numpy as np
import pytest

from hdrsr.errors import RangeError
from hdrsr.retinex import (
    ILLUMINATION_FLOOR,
    bound_reflectance,
    compute_reflectance,
    decompose,
    enhance_illumination,
    estimate_illumination,
    recombine,
    unbound_reflectance,
)


class TestDecompose:
    def test_round_trip_recovers_floored_luminance(self):
        rng = np.random.default_rng(40)
        worst = 0.0
        for _ in range(25):
            y = rng.uniform(0, 1, size=(12, 12)) ** 2.2
            result = decompose(y)
            back = recombine(result.illumination, result.reflectance)
            worst = max(
                worst, float(np.abs(back - np.maximum(y, ILLUMINATION_FLOOR)).max())
            )
        assert worst <= 1e-6

    def test_illumination_respects_floor_and_ceiling(self):
        rng = np.random.default_rng(41)
        y = rng.uniform(0, 1, size=(16, 16)) ** 2.2
        y[0, :4] = 0.0
        illum = estimate_illumination(y)
        assert illum.min() >= ILLUMINATION_FLOOR
        assert illum.max() <= 1.0 + 1e-9

    def test_black_input_decomposes_to_floor(self):
        result = decompose(np.zeros((6, 6)))
        np.testing.assert_allclose(result.illumination, ILLUMINATION_FLOOR, atol=1e-12)
        np.testing.assert_allclose(result.reflectance, 0.0, atol=1e-9)

    def test_constant_input_gives_zero_reflectance(self):
        # smoothing preserves constants, so log ratio vanishes
        result = decompose(np.full((8, 8), 0.3))
        np.testing.assert_allclose(result.illumination, 0.3, atol=1e-7)
        np.testing.assert_allclose(result.reflectance, 0.0, atol=1e-5)

    def test_input_range_enforced(self):
        with pytest.raises(RangeError):
            estimate_illumination(np.full((3, 3), -0.1))
        with pytest.raises(RangeError):
            estimate_illumination(np.full((3, 3), 1.5))

    def test_reflectance_formula(self):
        rng = np.random.default_rng(42)
        y = rng.uniform(0, 1, size=(10, 10))
        illum = np.clip(rng.uniform(0, 1, size=(10, 10)), ILLUMINATION_FLOOR, 1.0)
        r = compute_reflectance(y, illum)
        expect = np.log(np.maximum(y, ILLUMINATION_FLOOR)) - np.log(illum)
        np.testing.assert_allclose(r, expect, atol=1e-12)

    def test_reflectance_rejects_subfloor_illumination(self):
        with pytest.raises(RangeError):
            compute_reflectance(np.full((2, 2), 0.5), np.full((2, 2), 1e-5))


class TestBounding:
    def test_tanh_pair_inverts(self):
        rng = np.random.default_rng(43)
        r = rng.uniform(-4, 4, size=(32, 32))
        back = unbound_reflectance(bound_reflectance(r))
        np.testing.assert_allclose(back, r, atol=1e-6)

    def test_bounded_strict_over_reachable_range(self):
        # |log(Y/I)| is capped by -log(floor) = 9.21 for in-range planes
        r = np.array([[-np.log(1.0 / ILLUMINATION_FLOOR), 0.0, np.log(1.0 / ILLUMINATION_FLOOR)]])
        b = bound_reflectance(r)
        assert np.all(np.abs(b) < 1.0)
        assert np.all(np.isfinite(unbound_reflectance(b)))

    def test_unbound_clamps_boundary_values(self):
        # exactly +-1 would be infinite; the clamp keeps it finite
        out = unbound_reflectance(np.array([[1.0, -1.0]]))
        assert np.all(np.isfinite(out))


class TestEnhanceIllumination:
    def test_constant_plane_maps_through_gamma(self):
        import math

        out = enhance_illumination(np.full((6, 6), 0.5), 2.0)
        assert out.shape == (12, 12)
        np.testing.assert_allclose(
            out, math.exp(math.log(0.5) / 2.2), atol=1e-12
        )

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(44)
        illum = np.clip(rng.uniform(0, 1, size=(9, 9)), ILLUMINATION_FLOOR, 1.0)
        out = enhance_illumination(illum, 2.0)
        assert out.min() >= 0.0
        assert out.max() <= 1.0

    def test_overshoot_is_clamped_before_gamma(self):
        # bicubic can overshoot step edges past 1; the result must stay <= 1
        illum = np.full((8, 8), ILLUMINATION_FLOOR)
        illum[:, 4:] = 1.0
        out = enhance_illumination(illum, 2.0)
        assert out.max() <= 1.0

    def test_range_validation(self):
        with pytest.raises(RangeError):
            enhance_illumination(np.full((4, 4), 1e-5), 2.0)
        with pytest.raises(RangeError):
            enhance_illumination(np.full((4, 4), 1.1), 2.0)


class TestRecombine:
    def test_exponential_formula(self):
        rng = np.random.default_rng(45)
        illum = rng.uniform(0.1, 1.0, size=(7, 7))
        r = rng.uniform(-2, 2, size=(7, 7))
        np.testing.assert_allclose(
            recombine(illum, r), illum * np.exp(r), atol=1e-12
        )

    def test_zero_reflectance_returns_illumination(self):
        illum = np.linspace(0.2, 0.9, 16).reshape(4, 4)
        np.testing.assert_array_equal(recombine(illum, np.zeros((4, 4))), illum)

    def test_dynamic_range_expansion(self):
        # positive reflectance lifts output above the illumination ceiling
        illum = np.full((3, 3), 1.0)
        out = recombine(illum, np.full((3, 3), 3.0))
        assert out.max() > 10.0
