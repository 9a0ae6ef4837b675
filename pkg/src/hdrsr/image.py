"""Image containers, color transforms, resampling, and file I/O.

Arrays are float64 throughout this module. A ``RasterImage`` is shaped
(H, W, C) with C in {1, 3}; a ``Plane`` is a single (H, W) channel.
LDR data lives in [0, 1]; HDR data is any finite nonnegative value.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image as _PILImage

from .errors import DecodeError, ParameterError, RangeError, ShapeError, WriteError

RasterImage = np.ndarray
Plane = np.ndarray

# Full-range BT.601 analog coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114
_CB_SCALE = 0.564
_CR_SCALE = 0.713

_RADIANCE_MAGIC = b"#?RADIANCE"
_RADIANCE_FORMAT = b"FORMAT=32-bit_rle_rgbe"


def as_image(data, channels: tuple[int, ...] = (1, 3)) -> RasterImage:
    """Validate and return ``data`` as a float64 (H, W, C) image."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in channels:
        raise ShapeError(
            f"expected an (H, W, C) image with C in {channels}, got shape {arr.shape}"
        )
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RangeError("image contains non-finite samples")
    return arr


def as_plane(data) -> Plane:
    """Validate and return ``data`` as a float64 (H, W) plane."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected an (H, W) plane, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"plane has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RangeError("plane contains non-finite samples")
    return arr


# ---------------------------------------------------------------------------
# color


def rgb_to_ycbcr(image: RasterImage) -> tuple[Plane, Plane, Plane]:
    """Split an RGB image into full-range BT.601 Y, Cb, Cr planes.

    Y = 0.299 R + 0.587 G + 0.114 B; chroma is centered on 0.5 with analog
    scale factors 0.564 (Cb) and 0.713 (Cr). For inputs in [0, 1] the luma
    is a convex combination and stays in [0, 1].
    """
    arr = as_image(image, channels=(3,))
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = 0.5 + (b - y) * _CB_SCALE
    cr = 0.5 + (r - y) * _CR_SCALE
    return y, cb, cr


def ycbcr_to_rgb(y: Plane, cb: Plane, cr: Plane) -> RasterImage:
    """Invert :func:`rgb_to_ycbcr`. Out-of-gamut results are not clamped."""
    y = as_plane(y)
    cb = as_plane(cb)
    cr = as_plane(cr)
    if y.shape != cb.shape or y.shape != cr.shape:
        raise ShapeError(
            f"plane shapes differ: Y {y.shape}, Cb {cb.shape}, Cr {cr.shape}"
        )
    r = y + (cr - 0.5) / _CR_SCALE
    b = y + (cb - 0.5) / _CB_SCALE
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def luminance(image: RasterImage) -> Plane:
    """BT.601 luma of an RGB image; a single-channel image returns its plane."""
    arr = as_image(image)
    if arr.shape[2] == 1:
        return arr[..., 0]
    return _KR * arr[..., 0] + _KG * arr[..., 1] + _KB * arr[..., 2]


def gamma_map(plane: Plane, exponent: float) -> Plane:
    """Pointwise power map ``x ** exponent`` for nonnegative samples."""
    arr = as_plane(plane)
    if not (math.isfinite(exponent) and exponent > 0):
        raise ParameterError(f"gamma exponent must be finite and positive, got {exponent}")
    if arr.min() < 0.0:
        raise RangeError("gamma_map requires nonnegative samples")
    return np.power(arr, exponent)


# ---------------------------------------------------------------------------
# resampling


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Keys cubic with a = -0.5 (the classic bicubic kernel).
    at = np.abs(t)
    inner = (1.5 * at - 2.5) * at * at + 1.0
    outer = ((-0.5 * at + 2.5) * at - 4.0) * at + 2.0
    return np.where(at <= 1.0, inner, np.where(at < 2.0, outer, 0.0))


def _resample_axis(plane: np.ndarray, out_n: int, scale: float, axis: int) -> np.ndarray:
    in_n = plane.shape[axis]
    dst = np.arange(out_n, dtype=np.float64)
    # Half-pixel center alignment: src = (dst + 0.5) / scale - 0.5.
    src = (dst + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    idx = np.stack([np.clip(base + k, 0, in_n - 1) for k in (-1, 0, 1, 2)])
    wts = np.stack(
        [
            _cubic_kernel(frac + 1.0),
            _cubic_kernel(frac),
            _cubic_kernel(1.0 - frac),
            _cubic_kernel(2.0 - frac),
        ]
    )
    # Anchored evaluation t1 + sum w_k (t_k - t1) keeps constant inputs
    # bit-exact regardless of how the weights round.
    if axis == 0:
        taps = plane[idx, :]
        anchor = taps[1]
        return anchor + np.einsum("ko,kow->ow", wts, taps - anchor[None])
    taps = plane[:, idx]
    anchor = taps[:, 1]
    return anchor + np.einsum("ko,hko->ho", wts, taps - anchor[:, None])


def bicubic_resize(plane: Plane, scale: float) -> Plane:
    """Separable bicubic resampling by ``scale`` along both axes.

    Uses the Keys kernel (a = -0.5) with half-pixel center alignment and
    edge-clamped taps. Output dimensions are floor(scale * dim + 0.5).
    """
    arr = as_plane(plane)
    if not (math.isfinite(scale) and scale > 0):
        raise ParameterError(f"scale must be finite and positive, got {scale}")
    out_h = int(math.floor(arr.shape[0] * scale + 0.5))
    out_w = int(math.floor(arr.shape[1] * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise ParameterError(
            f"scale {scale} collapses {arr.shape} to {(out_h, out_w)}"
        )
    out = _resample_axis(arr, out_h, scale, axis=0)
    return _resample_axis(out, out_w, scale, axis=1)


def bicubic_resize_image(image: RasterImage, scale: float) -> RasterImage:
    """Channel-wise :func:`bicubic_resize` of an (H, W, C) image."""
    arr = as_image(image)
    planes = [bicubic_resize(arr[..., c], scale) for c in range(arr.shape[2])]
    return np.stack(planes, axis=-1)


# ---------------------------------------------------------------------------
# LDR files (PNG / binary PPM)


def read_ldr_image(path) -> RasterImage:
    """Read an 8-bit PNG or binary PPM (P6) and scale codes to [0, 1].

    Grayscale files come back as (H, W, 1), color as (H, W, 3). Code value
    v maps to v / 255. Unsupported formats and bit depths raise
    :class:`DecodeError`.
    """
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    if head.startswith(b"\x89PNG\r\n\x1a\n"):
        return _read_png(path)
    if head.startswith(b"P6"):
        return _read_ppm(path)
    raise DecodeError(f"{path}: not a PNG or binary PPM (P6) file")


def _read_png(path) -> RasterImage:
    try:
        with _PILImage.open(path) as img:
            img.load()
            mode = img.mode
            if mode.startswith("I") or mode == "F":
                raise DecodeError(f"{path}: only 8-bit PNG is supported (mode {mode})")
            if mode in ("P", "RGBA"):
                img = img.convert("RGB")
            elif mode == "LA":
                img = img.convert("L")
            elif mode not in ("L", "RGB", "1"):
                raise DecodeError(f"{path}: unsupported PNG mode {mode}")
            if img.mode == "1":
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: PNG decode failed: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _read_ppm(path) -> RasterImage:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(buf):
            raise DecodeError(f"{path}: truncated PPM header")
        c = buf[i : i + 1]
        if c == b"#":
            nl = buf.find(b"\n", i)
            if nl < 0:
                raise DecodeError(f"{path}: truncated PPM header")
            i = nl + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    if tokens[0] != b"P6":
        raise DecodeError(f"{path}: only binary PPM (P6) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DecodeError(f"{path}: malformed PPM header") from exc
    if width < 1 or height < 1:
        raise DecodeError(f"{path}: bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    i += 1  # exactly one whitespace byte separates the header from the raster
    need = 3 * width * height
    raster = buf[i : i + need]
    if len(raster) < need:
        raise DecodeError(f"{path}: truncated PPM pixel data")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def write_ldr_image(image: RasterImage, path) -> None:
    """Write an LDR image in [0, 1] as an 8-bit PNG.

    Quantization is round-half-up: code = floor(x * 255 + 0.5).
    """
    arr = as_image(image)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError(
            f"LDR samples must lie in [0, 1], got [{arr.min():g}, {arr.max():g}]"
        )
    codes = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if codes.shape[2] == 1:
        pil = _PILImage.fromarray(codes[:, :, 0], mode="L")
    else:
        pil = _PILImage.fromarray(codes, mode="RGB")
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def quantize_codes(image: RasterImage) -> np.ndarray:
    """Round-half-up 8-bit quantization, exposed for tests and tooling."""
    arr = as_image(image)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError("samples must lie in [0, 1] before quantization")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# HDR files (Radiance RGBE, uncompressed scanlines)


def encode_rgbe(image: RasterImage) -> np.ndarray:
    """Encode a nonnegative RGB image as (H, W, 4) RGBE bytes.

    Each pixel shares one exponent chosen from its largest component:
    with max = m * 2**e (m in [0.5, 1)), the exponent byte is e + 128 and
    each mantissa byte is round(c / 2**e * 256) clipped to 255. An all-zero
    pixel encodes as (0, 0, 0, 0).
    """
    arr = as_image(image, channels=(3,))
    if arr.min() < 0.0:
        raise RangeError("RGBE encoding requires nonnegative samples")
    maxc = arr.max(axis=2)
    _, exp = np.frexp(maxc)
    if np.any(exp > 127):
        raise RangeError("sample magnitude exceeds the RGBE exponent range")
    live = (maxc > 0.0) & (exp >= -127)
    scale = np.ldexp(1.0, -exp) * 256.0
    mant = np.floor(arr * scale[:, :, None] + 0.5)
    np.clip(mant, 0.0, 255.0, out=mant)
    out = np.zeros(arr.shape[:2] + (4,), dtype=np.uint8)
    out[..., :3] = np.where(live[..., None], mant, 0.0).astype(np.uint8)
    out[..., 3] = np.where(live, exp + 128, 0).astype(np.uint8)
    return out


def decode_rgbe(rgbe: np.ndarray) -> RasterImage:
    """Decode (H, W, 4) RGBE bytes to linear RGB: c = byte / 256 * 2**(e - 128)."""
    arr = np.asarray(rgbe)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ShapeError(f"expected (H, W, 4) RGBE bytes, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ShapeError(f"RGBE bytes must be uint8, got {arr.dtype}")
    exp = arr[..., 3].astype(np.int32)
    scale = np.ldexp(1.0, exp - 136)  # 2**(e - 128) / 256
    rgb = arr[..., :3].astype(np.float64) * scale[..., None]
    return np.where(exp[..., None] == 0, 0.0, rgb)


def write_hdr_image(image: RasterImage, path) -> None:
    """Write a linear RGB image as an uncompressed Radiance RGBE (.hdr) file."""
    rgbe = encode_rgbe(image)
    h, w = rgbe.shape[:2]
    header = (
        _RADIANCE_MAGIC
        + b"\n"
        + _RADIANCE_FORMAT
        + b"\n\n"
        + f"-Y {h} +X {w}\n".encode("ascii")
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rgbe.tobytes())
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_hdr_image(path) -> RasterImage:
    """Read an uncompressed Radiance RGBE (.hdr) file to linear RGB.

    Run-length encoded scanlines are out of scope and raise
    :class:`DecodeError`.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    if not buf.startswith(_RADIANCE_MAGIC):
        raise DecodeError(f"{path}: missing Radiance signature")
    pos = 0
    fmt_seen = False
    dims = None
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise DecodeError(f"{path}: truncated Radiance header")
        line = buf[pos:nl]
        pos = nl + 1
        if line.startswith(_RADIANCE_MAGIC) or line.startswith(b"#"):
            continue
        if line == b"":
            # blank line terminates the variable block; next line holds dims
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise DecodeError(f"{path}: missing resolution line")
            dims = buf[pos:nl]
            pos = nl + 1
            break
        if line.startswith(b"FORMAT="):
            if line != _RADIANCE_FORMAT:
                raise DecodeError(f"{path}: unsupported format {line!r}")
            fmt_seen = True
        # other header variables (EXPOSURE, ...) are accepted and ignored
    if not fmt_seen:
        raise DecodeError(f"{path}: header does not declare 32-bit_rle_rgbe")
    parts = dims.split()
    if len(parts) != 4 or parts[0] != b"-Y" or parts[2] != b"+X":
        raise DecodeError(f"{path}: unsupported resolution line {dims!r}")
    try:
        h, w = int(parts[1]), int(parts[3])
    except ValueError as exc:
        raise DecodeError(f"{path}: bad resolution line {dims!r}") from exc
    if h < 1 or w < 1:
        raise DecodeError(f"{path}: bad dimensions {h}x{w}")
    raster = buf[pos:]
    need = h * w * 4
    if (
        len(raster) >= 4
        and raster[0] == 2
        and raster[1] == 2
        and (raster[2] << 8 | raster[3]) == w
        and w >= 8
    ):
        # new-style scanline marker: 0x2 0x2 plus the width in big-endian
        raise DecodeError(f"{path}: RLE scanlines are not supported")
    if len(raster) < need:
        raise DecodeError(f"{path}: truncated pixel data")
    rgbe = np.frombuffer(raster[:need], dtype=np.uint8).reshape(h, w, 4)
    return decode_rgbe(rgbe)
