"""Reflectance super-resolution network and its adversarial critic.

The generator is a stem convolution feeding two stacked U-Net hourglasses;
the two hourglass outputs are fused by concatenation, projected to four
channels, rearranged by a x2 sub-pixel shuffle, and finished by a single
convolution plus tanh. The critic is a plain stride-2 downsampling stack
ending in global average pooling and one dense logit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, RangeError, ShapeError
from .nn import (
    Concat,
    Conv2d,
    Dense,
    GlobalAvgPool,
    LeakyReLU,
    Network,
    Node,
    PixelShuffle,
    ReLU,
    Tanh,
    TransposedConv2d,
)

WEIGHT_MAGIC = b"HSRW"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class RefNetConfig:
    """Generator shape knobs.

    ``param_budget`` (with ``budget_tolerance``) guards the default
    architecture against accidental size regressions; pass ``None`` to build
    deliberately small or large variants.
    """

    base_channels: int = 36
    unet_depth: int = 3
    scale: int = 2
    param_budget: int | None = 8_000_000
    budget_tolerance: float = 0.10

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.unet_depth < 1:
            raise ConfigError(f"unet_depth must be >= 1, got {self.unet_depth}")
        if self.scale != 2:
            raise ConfigError(f"only scale 2 is supported, got {self.scale}")


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[Node] = []
        self._last = Network.INPUT

    def add(self, name: str, layer, *inputs: str) -> str:
        self.nodes.append(Node(name, layer, inputs or (self._last,)))
        self._last = name
        return name

    def conv_relu(self, name: str, cin: int, cout: int, src: str, stride: int = 1) -> str:
        self.add(name, Conv2d(cin, cout, stride, rng=self.rng), src)
        return self.add(name + ".relu", ReLU())

    def double_conv(self, name: str, cin: int, cout: int, src: str) -> str:
        cur = self.conv_relu(name + ".c1", cin, cout, src)
        return self.conv_relu(name + ".c2", cout, cout, cur)


def _hourglass(b: _Builder, prefix: str, src: str, base: int, depth: int) -> str:
    widths = [base << lvl for lvl in range(depth + 1)]
    cur = src
    taps: list[str] = []
    for lvl in range(depth):
        cur = b.double_conv(f"{prefix}.enc{lvl}", widths[lvl], widths[lvl], cur)
        taps.append(cur)
        cur = b.conv_relu(f"{prefix}.down{lvl}", widths[lvl], widths[lvl + 1], cur, stride=2)
    cur = b.double_conv(f"{prefix}.mid", widths[depth], widths[depth], cur)
    for lvl in reversed(range(depth)):
        b.add(f"{prefix}.up{lvl}", TransposedConv2d(widths[lvl + 1], widths[lvl], rng=b.rng), cur)
        cur = b.add(f"{prefix}.up{lvl}.relu", ReLU())
        cur = b.add(f"{prefix}.skip{lvl}", Concat(), cur, taps[lvl])
        cur = b.double_conv(f"{prefix}.dec{lvl}", 2 * widths[lvl], widths[lvl], cur)
    return cur


def build_refnet(
    config: RefNetConfig = RefNetConfig(), rng: np.random.Generator | None = None
) -> Network:
    """Construct the generator with He-initialized weights."""
    rng = rng if rng is not None else np.random.default_rng(0)
    base, depth = config.base_channels, config.unet_depth
    b = _Builder(rng)
    stem = b.conv_relu("stem", 1, base, Network.INPUT)
    t1 = _hourglass(b, "u1", stem, base, depth)
    t2 = _hourglass(b, "u2", t1, base, depth)
    fused = b.add("fuse.cat", Concat(), t1, t2)
    fused = b.conv_relu("fuse.c1", 2 * base, base, fused)
    b.add("fuse.c2", Conv2d(base, config.scale * config.scale, rng=rng), fused)
    b.add("shuffle", PixelShuffle(config.scale))
    b.add("head", Conv2d(1, 1, rng=rng))
    b.add("out", Tanh())
    net = Network(
        b.nodes,
        meta={
            "kind": "refnet",
            "base_channels": base,
            "unet_depth": depth,
            "scale": config.scale,
        },
    )
    if config.param_budget is not None:
        lo = config.param_budget * (1.0 - config.budget_tolerance)
        hi = config.param_budget * (1.0 + config.budget_tolerance)
        count = net.parameter_count
        if not lo <= count <= hi:
            raise ConfigError(
                f"parameter count {count:,} falls outside "
                f"[{lo:,.0f}, {hi:,.0f}]; adjust base_channels/unet_depth "
                f"or disable the budget"
            )
    return net


def refnet_forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Run the generator on bounded reflectance batches.

    Input is (N, H, W, 1) strictly inside (-1, 1) with H and W divisible by
    2**unet_depth; output is (N, 2H, 2W, 1) in (-1, 1).
    """
    arr = np.asarray(x)
    if arr.ndim != 4 or arr.shape[3] != 1:
        raise ShapeError(f"expected (N, H, W, 1) input, got {arr.shape}")
    if arr.shape[0] < 1:
        raise ShapeError("empty batch")
    if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) >= 1.0):
        raise RangeError("bounded reflectance must lie strictly inside (-1, 1)")
    multiple = 1 << net.meta.get("unet_depth", 3)
    if arr.shape[1] % multiple or arr.shape[2] % multiple:
        raise ShapeError(
            f"spatial dims {arr.shape[1:3]} must be divisible by {multiple}"
        )
    return net.forward(arr.astype(np.float32, copy=False))


def build_discriminator(
    base_channels: int = 64, rng: np.random.Generator | None = None
) -> Network:
    """Construct the critic: logits of shape (N, 1) from (N, H, W, 1) patches."""
    if base_channels < 1:
        raise ConfigError(f"base_channels must be >= 1, got {base_channels}")
    rng = rng if rng is not None else np.random.default_rng(0)
    b = _Builder(rng)
    widths = [base_channels * m for m in (1, 1, 2, 2, 4, 4, 8, 8)]
    cin = 1
    cur = Network.INPUT
    for i, cout in enumerate(widths):
        stride = 1 if i % 2 == 0 else 2
        cur = b.add(f"d{i}", Conv2d(cin, cout, stride, rng=rng), cur)
        cur = b.add(f"d{i}.act", LeakyReLU(0.2))
        cin = cout
    cur = b.add("pool", GlobalAvgPool(), cur)
    b.add("logit", Dense(cin, 1, rng=rng), cur)
    return Network(b.nodes, meta={"kind": "discriminator", "base_channels": base_channels})


# ---------------------------------------------------------------------------
# weight files


def save_weights(net: Network, path) -> None:
    """Serialize named parameters: magic, version, count, then per tensor the
    name, rank, dims, and float32 little-endian data."""
    params = net.parameters()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(params)))
        for name, arr in params.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.label}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path) -> dict[str, np.ndarray]:
    """Parse a weight file back into name -> float32 array."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read weights {path}: {exc}") from exc
    rd = _Reader(buf, str(path))
    if rd.take(4) != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a weight file")
    version = rd.u32()
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = rd.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        if rank > 8:
            raise FormatError(f"{path}: implausible rank {rank} for {name!r}")
        dims = tuple(rd.u32() for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(rd.take(4 * size), dtype="<f4")
        if name in out:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        out[name] = data.reshape(dims).astype(np.float32)
    if rd.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - rd.pos} trailing bytes")
    return out


def apply_weights(net: Network, weights: dict[str, np.ndarray]) -> None:
    """Copy loaded tensors into a built network, validating names and shapes."""
    params = net.parameters()
    for name in params:
        if name not in weights:
            raise FormatError(f"weight file is missing tensor {name!r}")
    for name in weights:
        if name not in params:
            raise FormatError(f"weight file has unexpected tensor {name!r}")
    for name, arr in params.items():
        src = weights[name]
        if src.shape != arr.shape:
            raise FormatError(
                f"tensor {name!r} has shape {src.shape}, expected {arr.shape}"
            )
        arr[...] = src


def config_from_weights(weights: dict[str, np.ndarray]) -> RefNetConfig:
    """Recover generator shape from tensor names and the stem kernel."""
    stem = weights.get("stem/w")
    if stem is None or stem.ndim != 4:
        raise FormatError("weight file lacks a stem/w kernel; not a generator")
    base = int(stem.shape[3])
    depth = 0
    prefix = "u1.down"
    for name in weights:
        if name.startswith(prefix):
            try:
                lvl = int(name[len(prefix) :].split("/")[0].split(".")[0])
            except ValueError:
                continue
            depth = max(depth, lvl + 1)
    if depth == 0:
        raise FormatError("weight file has no downsampling stages; not a generator")
    return RefNetConfig(base_channels=base, unet_depth=depth, param_budget=None)
