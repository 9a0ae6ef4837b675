"""Dataset preparation and the reflectance network training loops.

Training pairs are bounded reflectance patches: 48x48 crops cut from the
decomposed low-resolution plane matched with 96x96 crops from the decomposed
high-resolution plane, each replicated under the eight dihedral flips and
rotations. The basic loop minimizes mean absolute error; the complex loop
adds a relativistic average GAN term with one critic step per generator step.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    FormatError,
    ParameterError,
    RangeError,
    ShapeError,
    TrainingError,
)
from .image import Plane, bicubic_resize, gamma_map, luminance, read_hdr_image, read_ldr_image
from .nn import Adam, Network, mae_loss
from .refnet import RefNetConfig, build_discriminator, build_refnet, save_weights
from .retinex import bound_reflectance, decompose
from .wls import WlsParams

log = logging.getLogger(__name__)

PATCH_MAGIC = b"HSRP"
PATCH_VERSION = 1
LR_PATCH = 48
HR_PATCH = 96
PATCH_STRIDE = 24

_LDR_SUFFIXES = (".png", ".ppm")
_HDR_SUFFIXES = (".png", ".ppm", ".hdr")


# ---------------------------------------------------------------------------
# dihedral augmentations


def apply_dihedral(patch: np.ndarray, aug_id: int) -> np.ndarray:
    """Apply dihedral transform 0-7: rotations by 90*k for 0-3, the same
    rotations after a left-right flip for 4-7."""
    if not 0 <= aug_id < 8:
        raise ParameterError(f"aug_id must be in [0, 8), got {aug_id}")
    arr = np.asarray(patch)
    if arr.ndim != 2:
        raise ShapeError(f"patches are 2D planes, got shape {arr.shape}")
    if aug_id >= 4:
        arr = np.fliplr(arr)
    return np.ascontiguousarray(np.rot90(arr, aug_id % 4))


def invert_dihedral(aug_id: int) -> int:
    """Index of the inverse transform: rotations invert to 4 - k mod 4,
    flip-then-rotate elements are involutions."""
    if not 0 <= aug_id < 8:
        raise ParameterError(f"aug_id must be in [0, 8), got {aug_id}")
    return (4 - aug_id) % 4 if aug_id < 4 else aug_id


# ---------------------------------------------------------------------------
# patch store


@dataclass
class PatchStore:
    """In-memory training set: bounded reflectance pairs plus provenance ids."""

    lr: np.ndarray  # (n, 48, 48) float32
    hr: np.ndarray  # (n, 96, 96) float32
    source_ids: np.ndarray  # (n,) uint32
    aug_ids: np.ndarray  # (n,) uint32

    def __len__(self) -> int:
        return self.lr.shape[0]

    def batch(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.lr[indices][:, :, :, None]
        y = self.hr[indices][:, :, :, None]
        return x, y


def write_patch_store(path, store: PatchStore) -> None:
    """Serialize a patch store.

    Layout (all little-endian): magic, version u32, count u32, lr_size u32,
    hr_size u32, then count (source_id, aug_id) u32 pairs, then count
    interleaved float32 patch pairs (48x48 followed by 96x96). The fixed
    record size keeps the payload memory-mappable.
    """
    n = len(store)
    if store.lr.shape != (n, LR_PATCH, LR_PATCH) or store.hr.shape != (n, HR_PATCH, HR_PATCH):
        raise ShapeError(
            f"store shapes {store.lr.shape} / {store.hr.shape} do not match "
            f"({n}, {LR_PATCH}, {LR_PATCH}) / ({n}, {HR_PATCH}, {HR_PATCH})"
        )
    if n and (
        not np.all(np.abs(store.lr) < 1.0) or not np.all(np.abs(store.hr) < 1.0)
    ):
        raise RangeError("bounded reflectance patches must lie strictly inside (-1, 1)")
    ids = np.empty((n, 2), dtype="<u4")
    ids[:, 0] = store.source_ids
    ids[:, 1] = store.aug_ids
    flat = np.empty((n, LR_PATCH * LR_PATCH + HR_PATCH * HR_PATCH), dtype="<f4")
    flat[:, : LR_PATCH * LR_PATCH] = store.lr.reshape(n, -1)
    flat[:, LR_PATCH * LR_PATCH :] = store.hr.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC)
        fh.write(struct.pack("<IIII", PATCH_VERSION, n, LR_PATCH, HR_PATCH))
        fh.write(ids.tobytes())
        fh.write(flat.tobytes())


def load_patch_store(path) -> PatchStore:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read patch store {path}: {exc}") from exc
    head = 4 + 16
    if len(buf) < head or buf[:4] != PATCH_MAGIC:
        raise FormatError(f"{path}: not a patch store")
    version, n, lr_size, hr_size = struct.unpack("<IIII", buf[4:head])
    if version != PATCH_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if (lr_size, hr_size) != (LR_PATCH, HR_PATCH):
        raise FormatError(
            f"{path}: patch geometry {lr_size}/{hr_size} unsupported "
            f"(expected {LR_PATCH}/{HR_PATCH})"
        )
    ids_bytes = 8 * n
    pair_floats = lr_size * lr_size + hr_size * hr_size
    need = head + ids_bytes + 4 * pair_floats * n
    if len(buf) != need:
        raise FormatError(f"{path}: size {len(buf)} does not match header ({need})")
    ids = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=head).reshape(n, 2)
    flat = np.frombuffer(buf, dtype="<f4", count=pair_floats * n, offset=head + ids_bytes)
    flat = flat.reshape(n, pair_floats)
    lr = flat[:, : lr_size * lr_size].reshape(n, lr_size, lr_size).astype(np.float32)
    hr = flat[:, lr_size * lr_size :].reshape(n, hr_size, hr_size).astype(np.float32)
    return PatchStore(lr, hr, ids[:, 0].copy(), ids[:, 1].copy())


# ---------------------------------------------------------------------------
# dataset preparation


_STORE_BOUND = 1.0 - 1e-6


def _bounded_reflectance(y_display: Plane, wls: WlsParams) -> Plane:
    # Clip resampling overshoot before linearizing; gamma rejects negatives.
    y_lin = gamma_map(np.clip(y_display, 0.0, 1.0), 2.2)
    r = bound_reflectance(decompose(y_lin, wls).reflectance)
    # extreme log ratios saturate tanh once cast to float32; keep the stored
    # samples strictly inside (-1, 1)
    return np.clip(r, -_STORE_BOUND, _STORE_BOUND)


def _grid_positions(size: int, patch: int, stride: int) -> list[int]:
    return list(range(0, size - patch + 1, stride))


def _read_display_image(path: Path):
    if path.suffix.lower() == ".hdr":
        from .pipeline import reinhard_tonemap

        log.warning("%s: linear HDR input, tonemapping for reflectance extraction", path)
        return reinhard_tonemap(read_hdr_image(path))
    return read_ldr_image(path)


def prepare_dataset(
    lr_dir,
    hr_dir,
    out_path,
    wls: WlsParams = WlsParams(),
    stride: int = PATCH_STRIDE,
) -> int:
    """Decompose paired images and write the training patch store.

    Pairs are matched by file stem between the two directories; the
    high-resolution image must be exactly twice the low-resolution size.
    Unpaired or undersized images are skipped with a warning. Returns the
    number of patch pairs written.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    lr_dir, hr_dir = Path(lr_dir), Path(hr_dir)
    lr_files = _scan(lr_dir, _LDR_SUFFIXES)
    hr_files = _scan(hr_dir, _HDR_SUFFIXES)
    stems = sorted(set(lr_files) & set(hr_files))
    for stem in sorted(set(lr_files) ^ set(hr_files)):
        log.warning("%s: unpaired, skipped", stem)
    if not stems:
        raise DataError(f"no paired images between {lr_dir} and {hr_dir}")
    lr_patches: list[np.ndarray] = []
    hr_patches: list[np.ndarray] = []
    source_ids: list[int] = []
    aug_ids: list[int] = []
    for source_id, stem in enumerate(stems):
        lr_img = read_ldr_image(lr_files[stem])
        hr_img = _read_display_image(hr_files[stem])
        if lr_img.shape[:2] != hr_img.shape[:2]:
            raise DataError(
                f"{stem}: pair sizes {lr_img.shape[:2]} and {hr_img.shape[:2]} differ"
            )
        # the standard-exposed image is halved to form the coarse domain;
        # with odd inputs the half-round grid bound keeps 2x crops in frame
        y_lr = bicubic_resize(luminance(lr_img), 0.5)
        rows = _grid_positions(
            min(y_lr.shape[0], hr_img.shape[0] // 2), LR_PATCH, stride
        )
        cols = _grid_positions(
            min(y_lr.shape[1], hr_img.shape[1] // 2), LR_PATCH, stride
        )
        if not rows or not cols:
            log.warning(
                "%s: below the %dx%d patch footprint, skipped",
                stem,
                2 * LR_PATCH,
                2 * LR_PATCH,
            )
            continue
        r_lr = _bounded_reflectance(y_lr, wls)
        r_hr = _bounded_reflectance(luminance(hr_img), wls)
        for top in rows:
            for left in cols:
                base_lr = r_lr[top : top + LR_PATCH, left : left + LR_PATCH]
                base_hr = r_hr[
                    2 * top : 2 * top + HR_PATCH, 2 * left : 2 * left + HR_PATCH
                ]
                for aug in range(8):
                    lr_patches.append(
                        apply_dihedral(base_lr, aug).astype(np.float32)
                    )
                    hr_patches.append(
                        apply_dihedral(base_hr, aug).astype(np.float32)
                    )
                    source_ids.append(source_id)
                    aug_ids.append(aug)
    if not lr_patches:
        raise DataError("no usable patches: every pair was undersized")
    store = PatchStore(
        np.stack(lr_patches),
        np.stack(hr_patches),
        np.asarray(source_ids, dtype=np.uint32),
        np.asarray(aug_ids, dtype=np.uint32),
    )
    write_patch_store(out_path, store)
    return len(store)


def _scan(directory: Path, suffixes: tuple[str, ...]) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    out: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in suffixes and path.is_file():
            if path.stem in out:
                raise DataError(f"{directory}: duplicate stem {path.stem!r}")
            out[path.stem] = path
    return out


# ---------------------------------------------------------------------------
# relativistic average GAN losses


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _ragan_core(
    logits_a: np.ndarray, logits_b: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """loss = mean softplus(-(a - mean b)) + mean softplus(b - mean a).

    Returns the loss and its gradients with respect to a and b, computed in
    float64 via logaddexp so large logits cannot overflow.
    """
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ParameterError("logit batches must be non-empty")
    af, bf = a.reshape(-1), b.reshape(-1)
    za = af - bf.mean()
    zb = bf - af.mean()
    loss = float(np.mean(np.logaddexp(0.0, -za)) + np.mean(np.logaddexp(0.0, zb)))
    sa = _sigmoid64(za)
    sb = _sigmoid64(zb)
    grad_a = ((sa - 1.0) - sb.mean()) / af.size
    grad_b = (sb + (1.0 - sa).mean()) / bf.size
    return loss, grad_a.reshape(a.shape), grad_b.reshape(b.shape)


def ragan_generator_loss(
    logits_real: np.ndarray, logits_fake: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Relativistic average generator loss.

    With sigma the logistic function and mean taken over the opposite batch:
    -mean log sigma(C_real - mean C_fake) - mean log(1 - sigma(C_fake -
    mean C_real)). Returns (loss, grad_real, grad_fake).
    """
    return _ragan_core(logits_real, logits_fake)


def ragan_discriminator_loss(
    logits_real: np.ndarray, logits_fake: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Critic loss: the generator form with the real/fake roles swapped."""
    loss, grad_fake, grad_real = _ragan_core(logits_fake, logits_real)
    return loss, grad_real, grad_fake


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    mode: str = "basic"
    batch_size: int = 32
    lr_initial: float = 2e-4
    lr_after_halving: float = 1e-4
    halving_point: float = 0.5
    mu: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0  # 0 disables intermediate checkpoints
    net: RefNetConfig = field(default_factory=RefNetConfig)
    disc_base_channels: int = 64

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.mode not in ("basic", "complex"):
            raise ParameterError(f"mode must be 'basic' or 'complex', got {self.mode!r}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        for label, value in (
            ("lr_initial", self.lr_initial),
            ("lr_after_halving", self.lr_after_halving),
        ):
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{label} must be finite and > 0, got {value}")
        if not 0.0 < self.halving_point <= 1.0:
            raise ParameterError(
                f"halving_point must lie in (0, 1], got {self.halving_point}"
            )
        if not (math.isfinite(self.mu) and self.mu >= 0.0):
            raise ParameterError(f"mu must be finite and >= 0, got {self.mu}")
        if self.checkpoint_interval < 0:
            raise ParameterError(
                f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}"
            )


@dataclass
class TrainingReport:
    """Per-step scalars collected during a run."""

    steps: list[int] = field(default_factory=list)
    loss_recon: list[float] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, step, recon, g, d, lr):
        self.steps.append(step)
        self.loss_recon.append(recon)
        self.loss_g.append(g)
        self.loss_d.append(d)
        self.lr.append(lr)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss_recon,loss_G,loss_D,lr\n")
            for i, step in enumerate(self.steps):
                fh.write(
                    f"{step},{self.loss_recon[i]!r},{self.loss_g[i]!r},"
                    f"{self.loss_d[i]!r},{self.lr[i]!r}\n"
                )


def _index_stream(rng: np.random.Generator, n: int, batch: int):
    """Endless deterministic batches: reshuffle the full index set per epoch."""
    pool: list[int] = []
    while True:
        while len(pool) < batch:
            pool.extend(rng.permutation(n).tolist())
        yield np.asarray(pool[:batch])
        del pool[:batch]


def train(config: TrainConfig, store: PatchStore, out_weights) -> TrainingReport:
    """Run the configured loop and write final weights to ``out_weights``.

    Learning rate is ``lr_initial`` for the first floor(halving_point *
    total_steps) steps and ``lr_after_halving`` afterwards. In complex mode
    each iteration performs one critic update and one generator update on the
    same batch; ``mu == 0`` skips the adversarial term entirely, making the
    generator trajectory bit-identical to basic mode. Non-finite losses abort
    with :class:`TrainingError`.
    """
    if len(store) == 0:
        raise DataError("patch store is empty")
    batch_rng = np.random.default_rng([config.seed, 0])
    gen = build_refnet(config.net, rng=np.random.default_rng([config.seed, 1]))
    adam_g = Adam()
    disc: Network | None = None
    adam_d: Adam | None = None
    if config.mode == "complex":
        disc = build_discriminator(
            config.disc_base_channels, rng=np.random.default_rng([config.seed, 2])
        )
        adam_d = Adam()
    batches = _index_stream(batch_rng, len(store), config.batch_size)
    halve_after = int(math.floor(config.halving_point * config.total_steps))
    report = TrainingReport()
    last_checkpoint = None
    for step in range(1, config.total_steps + 1):
        lr = config.lr_initial if step <= halve_after else config.lr_after_halving
        idx = next(batches)
        x, y = store.batch(idx)
        n = x.shape[0]
        loss_d = 0.0
        loss_g = 0.0
        if disc is not None:
            # critic phase: one combined forward so a single layer cache
            # serves the backward pass over both halves
            fake = gen.forward(x)
            logits = disc.forward(np.concatenate([y, fake], axis=0))
            loss_d, g_real, g_fake = ragan_discriminator_loss(logits[:n], logits[n:])
            disc.zero_gradients()
            disc.backward(
                np.concatenate([g_real, g_fake], axis=0).astype(np.float32)
            )
            adam_d.step(disc.parameters(), disc.gradients(), lr)
        pred = gen.forward(x)
        loss_recon, grad_pred = mae_loss(pred, y)
        if disc is not None and config.mu > 0.0:
            logits = disc.forward(np.concatenate([y, pred], axis=0))
            loss_g, g_real, g_fake = ragan_generator_loss(logits[:n], logits[n:])
            disc.zero_gradients()
            g_input = disc.backward(
                np.concatenate([g_real, g_fake], axis=0).astype(np.float32)
            )
            disc.zero_gradients()  # discard critic grads from the generator pass
            grad_pred = grad_pred + np.float32(config.mu) * g_input[n:]
        gen.zero_gradients()
        gen.backward(grad_pred)
        adam_g.step(gen.parameters(), gen.gradients(), lr)
        report.append(step, loss_recon, loss_g, loss_d, lr)
        if not (
            math.isfinite(loss_recon) and math.isfinite(loss_g) and math.isfinite(loss_d)
        ):
            hint = f"; last checkpoint: {last_checkpoint}" if last_checkpoint else ""
            raise TrainingError(f"non-finite loss at step {step}{hint}")
        if config.checkpoint_interval and step % config.checkpoint_interval == 0:
            last_checkpoint = f"{out_weights}.step{step}"
            save_weights(gen, last_checkpoint)
    save_weights(gen, out_weights)
    return report
