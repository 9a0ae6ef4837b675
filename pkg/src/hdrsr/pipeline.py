"""End-to-end inference: decompose, super-resolve reflectance, enhance
illumination, recombine into an HDR irradiance estimate, tonemap for display.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, ParameterError, RangeError, ShapeError
from .image import (
    Plane,
    RasterImage,
    as_image,
    bicubic_resize,
    gamma_map,
    luminance,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)
from .nn import Network
from .refnet import refnet_forward
from .retinex import (
    bound_reflectance,
    compute_reflectance,
    enhance_illumination,
    estimate_illumination,
    recombine,
    unbound_reflectance,
)
from .wls import WlsParams

_F32_BOUND = np.float32(1.0 - 1e-6)


@dataclass(frozen=True)
class PipelineConfig:
    scale: int = 2
    wls: WlsParams = field(default_factory=WlsParams)
    gamma_linearize: float = 2.2
    gamma_illum: float = 1.0 / 2.2
    gamma_final: float = 2.2
    tonemap_key: float = 0.18
    weights_path: str | None = None

    def __post_init__(self):
        if self.scale != 2:
            raise ParameterError(f"only scale 2 is supported, got {self.scale}")
        for label, value in (
            ("gamma_linearize", self.gamma_linearize),
            ("gamma_illum", self.gamma_illum),
            ("gamma_final", self.gamma_final),
            ("tonemap_key", self.tonemap_key),
        ):
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{label} must be finite and > 0, got {value}")


_CONFIG_FLOAT_KEYS = {
    "wls_lambda",
    "wls_alpha",
    "wls_epsilon",
    "gamma_linearize",
    "gamma_illum",
    "gamma_final",
    "tonemap_key",
}


def load_pipeline_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a key=value UTF-8 config file over ``base`` (or the defaults).

    Blank lines and lines starting with ``#`` are ignored. Unknown keys and
    unparsable values raise :class:`DataError`.
    """
    cfg = base if base is not None else PipelineConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "scale":
                cfg = replace(cfg, scale=int(value))
            elif key == "weights_path":
                cfg = replace(cfg, weights_path=value)
            elif key in _CONFIG_FLOAT_KEYS:
                num = float(value)
                if key == "wls_lambda":
                    cfg = replace(cfg, wls=replace(cfg.wls, lam=num))
                elif key == "wls_alpha":
                    cfg = replace(cfg, wls=replace(cfg.wls, alpha=num))
                elif key == "wls_epsilon":
                    cfg = replace(cfg, wls=replace(cfg.wls, epsilon=num))
                else:
                    cfg = replace(cfg, **{key: num})
            else:
                raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
        except ParameterError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# tonemapping


def reinhard_tonemap(hdr: RasterImage, key: float = 0.18) -> RasterImage:
    """Global photographic tonemapping with white-point burn, gamma-encoded.

    Luminance maps through L_d = L_m (1 + L_m / L_white^2) / (1 + L_m) where
    L_m is the key-scaled luminance and L_white its maximum; channels follow
    by the luminance ratio, then x^(1/2.2) encoding clamped to [0, 1].
    """
    arr = as_image(hdr)
    if not (math.isfinite(key) and key > 0):
        raise ParameterError(f"key must be finite and > 0, got {key}")
    if arr.min() < 0.0:
        raise RangeError("tonemapping expects nonnegative irradiance")
    lum = luminance(arr)
    log_avg = math.exp(float(np.mean(np.log(lum + 1e-6))))
    lm = (key / log_avg) * lum
    lwhite = float(lm.max())
    if lwhite <= 0.0:
        return np.zeros_like(arr)
    ld = lm * (1.0 + lm / (lwhite * lwhite)) / (1.0 + lm)
    safe = np.where(lum > 0.0, lum, 1.0)
    ratio = np.where(lum > 0.0, ld / safe, 0.0)
    out = arr * ratio[..., None]
    return np.clip(np.power(np.maximum(out, 0.0), 1.0 / 2.2), 0.0, 1.0)


def linear_stretch(hdr: RasterImage, display_peak: float = 1.0) -> RasterImage:
    """Scale irradiance so the maximum luminance hits ``display_peak``."""
    arr = as_image(hdr)
    if not (math.isfinite(display_peak) and display_peak > 0):
        raise ParameterError(f"display_peak must be finite and > 0, got {display_peak}")
    if arr.min() < 0.0:
        raise RangeError("stretch expects nonnegative irradiance")
    peak = float(luminance(arr).max())
    if peak == 0.0:
        return arr.copy()
    return arr * (display_peak / peak)


# ---------------------------------------------------------------------------
# inference


def _pad_to_multiple(plane: Plane, multiple: int) -> tuple[Plane, tuple[int, int]]:
    h, w = plane.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        if h < 2 or w < 2:
            raise ShapeError(f"plane {plane.shape} too small to reflect-pad")
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="reflect")
    return plane, (h, w)


def super_resolve_reflectance(net: Network, reflectance: Plane) -> Plane:
    """Run one reflectance plane through the network at x2.

    The bounded plane is reflect-padded up to the U-Net stride multiple,
    squeezed inside the open interval as float32, batched, and the output is
    cropped back to exactly twice the input size before unbounding.
    """
    bounded = bound_reflectance(reflectance)
    multiple = 1 << net.meta.get("unet_depth", 3)
    padded, (h, w) = _pad_to_multiple(bounded, multiple)
    x = np.clip(padded.astype(np.float32), -_F32_BOUND, _F32_BOUND)[None, :, :, None]
    out = refnet_forward(net, x)[0, :, :, 0].astype(np.float64)
    return unbound_reflectance(out[: 2 * h, : 2 * w])


def infer(
    image: RasterImage, net: Network, config: PipelineConfig = PipelineConfig()
) -> tuple[RasterImage, RasterImage]:
    """LDR RGB in [0, 1] -> (HDR irradiance at x2, tonemapped LDR preview).

    Stages: BT.601 split; luma linearized by gamma 2.2; WLS illumination and
    log reflectance; reflectance super-resolved by the network; illumination
    bicubically upsampled and gamma-brightened; recombined into luminance;
    chroma upsampled bicubically; RGB reassembled, floored at zero, and
    decoded to linear irradiance by gamma 2.2.
    """
    arr = as_image(image, channels=(3,))
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError("LDR input must lie in [0, 1]")
    y, cb, cr = rgb_to_ycbcr(arr)
    y_lin = gamma_map(y, config.gamma_linearize)
    illum = estimate_illumination(y_lin, config.wls)
    refl = compute_reflectance(y_lin, illum)
    refl_hi = super_resolve_reflectance(net, refl)
    illum_hi = enhance_illumination(illum, config.scale, config.gamma_illum)
    y_hi = recombine(illum_hi, refl_hi)
    cb_hi = bicubic_resize(cb, config.scale)
    cr_hi = bicubic_resize(cr, config.scale)
    rgb = ycbcr_to_rgb(y_hi, cb_hi, cr_hi)
    hdr = np.power(np.maximum(rgb, 0.0), config.gamma_final)
    ldr = reinhard_tonemap(hdr, config.tonemap_key)
    return hdr, ldr


def decompose_for_display(
    image: RasterImage, config: PipelineConfig = PipelineConfig()
) -> tuple[Plane, Plane]:
    """Illumination and reflectance visualizations in [0, 1].

    Illumination is gamma-encoded for display; bounded reflectance is mapped
    affinely from (-1, 1) to (0, 1).
    """
    arr = as_image(image, channels=(3,))
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError("LDR input must lie in [0, 1]")
    y, _, _ = rgb_to_ycbcr(arr)
    y_lin = gamma_map(y, config.gamma_linearize)
    illum = estimate_illumination(y_lin, config.wls)
    refl = compute_reflectance(y_lin, illum)
    illum_vis = np.power(np.clip(illum, 0.0, 1.0), 1.0 / 2.2)
    refl_vis = (bound_reflectance(refl) + 1.0) / 2.0
    return illum_vis, refl_vis
