"""Retinex decomposition of linear luminance into illumination and reflectance.

Illumination is the edge-preserving WLS smoothing of linear luminance,
floored so that logarithms stay defined; reflectance is the log-domain
residual R = ln(Y) - ln(I). The reflectance path is squashed through tanh
before entering the network and unsquashed afterwards; the enhanced
illumination and predicted reflectance recombine as I * exp(R).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RangeError, ShapeError
from .image import Plane, as_plane, bicubic_resize, gamma_map
from .wls import WlsParams, solve_wls

ILLUMINATION_FLOOR = 1e-4
_ATANH_CLAMP = 1.0 - 1e-6


@dataclass(frozen=True)
class DecompositionResult:
    illumination: Plane
    reflectance: Plane


def estimate_illumination(y_linear: Plane, params: WlsParams = WlsParams()) -> Plane:
    """Smooth linear luminance into an illumination map in [1e-4, ~1].

    The guidance is the luminance offset by the floor so that its log is
    finite on black pixels; the smoothed result is floored at 1e-4.
    """
    y = as_plane(y_linear)
    if y.min() < 0.0 or y.max() > 1.0:
        raise RangeError(
            f"linear luminance must lie in [0, 1], got [{y.min():g}, {y.max():g}]"
        )
    guidance = y + ILLUMINATION_FLOOR
    smoothed = solve_wls(y, guidance, params)
    return np.maximum(smoothed, ILLUMINATION_FLOOR)


def compute_reflectance(y_linear: Plane, illumination: Plane) -> Plane:
    """Log-domain residual R = ln(max(Y, 1e-4)) - ln(I).

    Luminance is floored the same way as the illumination so that a black
    pixel under floor illumination has exactly zero reflectance.
    """
    y = as_plane(y_linear)
    illum = as_plane(illumination)
    if y.shape != illum.shape:
        raise ShapeError(f"shapes differ: luminance {y.shape}, illumination {illum.shape}")
    if y.min() < 0.0:
        raise RangeError("linear luminance must be nonnegative")
    if illum.min() < ILLUMINATION_FLOOR * (1.0 - 1e-9):
        raise RangeError(
            f"illumination must be floored at {ILLUMINATION_FLOOR:g}, "
            f"got min {illum.min():g}"
        )
    return np.log(np.maximum(y, ILLUMINATION_FLOOR)) - np.log(illum)


def decompose(y_linear: Plane, params: WlsParams = WlsParams()) -> DecompositionResult:
    """Estimate illumination and the matching reflectance in one call."""
    illumination = estimate_illumination(y_linear, params)
    reflectance = compute_reflectance(y_linear, illumination)
    return DecompositionResult(illumination, reflectance)


def bound_reflectance(reflectance: Plane) -> Plane:
    """Squash reflectance into (-1, 1) with tanh."""
    return np.tanh(as_plane(reflectance))


def unbound_reflectance(bounded: Plane) -> Plane:
    """Invert :func:`bound_reflectance`.

    Inputs are clamped to +/-(1 - 1e-6) first, so saturated network outputs
    map to a finite reflectance of about +/-7.25 rather than infinity.
    """
    arr = np.clip(as_plane(bounded), -_ATANH_CLAMP, _ATANH_CLAMP)
    return np.arctanh(arr)


def enhance_illumination(
    illumination: Plane, scale: float, exponent: float = 1.0 / 2.2
) -> Plane:
    """Upsample illumination bicubically, clamp to [1e-4, 1], brighten by gamma.

    The gamma exponent below 1 lifts mid illumination levels, which is what
    turns the recombined luminance into a higher dynamic range estimate.
    """
    illum = as_plane(illumination)
    if not (math.isfinite(scale) and scale > 0):
        raise ParameterError(f"scale must be finite and positive, got {scale}")
    # Tolerate solver-level slack around the nominal [1e-4, 1] range.
    if illum.min() < ILLUMINATION_FLOOR * (1.0 - 1e-9) or illum.max() > 1.0 + 1e-3:
        raise RangeError(
            f"illumination must lie in [{ILLUMINATION_FLOOR:g}, 1], "
            f"got [{illum.min():g}, {illum.max():g}]"
        )
    up = bicubic_resize(illum, scale)
    up = np.clip(up, ILLUMINATION_FLOOR, 1.0)
    return gamma_map(up, exponent)


def recombine(illumination: Plane, reflectance: Plane) -> Plane:
    """Luminance from the two parts: Y = I * exp(R)."""
    illum = as_plane(illumination)
    refl = as_plane(reflectance)
    if illum.shape != refl.shape:
        raise ShapeError(
            f"shapes differ: illumination {illum.shape}, reflectance {refl.shape}"
        )
    if illum.min() <= 0.0:
        raise RangeError("illumination must be strictly positive")
    return illum * np.exp(refl)
