"""Command-line interface.

Subcommands: ``infer`` (LDR in, HDR plus tonemapped preview out),
``decompose`` (dump illumination/reflectance visualizations), ``prepare-data``
(build a patch store from paired directories), ``train`` (either loop), and
``gradcheck`` (finite-difference self-test). Exit codes: 0 success, 1 usage,
2 bad data or formats, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .errors import HdrsrError, SolverError, TrainingError
from .image import read_ldr_image, write_hdr_image, write_ldr_image
from .nn import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    LeakyReLU,
    Network,
    Node,
    PixelShuffle,
    ReLU,
    Sigmoid,
    Tanh,
    TransposedConv2d,
    gradient_check,
    mae_loss,
)
from .pipeline import (
    PipelineConfig,
    decompose_for_display,
    infer,
    load_pipeline_config,
)
from .refnet import (
    RefNetConfig,
    apply_weights,
    build_discriminator,
    build_refnet,
    config_from_weights,
    load_weights,
)
from .training import (
    TrainConfig,
    load_patch_store,
    prepare_dataset,
    ragan_discriminator_loss,
    ragan_generator_loss,
    train,
)
from .wls import WlsParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _CliParser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems instead of argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="hdrsr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"hdrsr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_CliParser)

    p = sub.add_parser("infer", help="super-resolve an LDR image into an HDR map")
    p.add_argument("--input", required=True, help="LDR image (PNG or binary PPM)")
    p.add_argument("--weights", help="generator weight file")
    p.add_argument("--out-hdr", required=True, help="output Radiance .hdr path")
    p.add_argument("--out-ldr", required=True, help="output tonemapped PNG path")
    p.add_argument("--config", help="key=value pipeline config file")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("decompose", help="write illumination/reflectance previews")
    p.add_argument("--input", required=True, help="LDR image (PNG or binary PPM)")
    p.add_argument("--out-illum", required=True, help="illumination PNG path")
    p.add_argument("--out-refl", required=True, help="reflectance PNG path")
    p.add_argument("--config", help="key=value pipeline config file")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("prepare-data", help="decompose image pairs into a patch store")
    p.add_argument("--ldr-dir", required=True, help="low-resolution LDR directory")
    p.add_argument("--hdr-dir", required=True, help="2x high-resolution directory")
    p.add_argument("--out", required=True, help="output patch store path")
    p.add_argument("--stride", type=int, default=24, help="patch grid stride (default 24)")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train the reflectance network")
    p.add_argument("--data", required=True, help="patch store path")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--mode", choices=["basic", "complex"], default="basic")
    p.add_argument("--steps", type=int, required=True, help="total optimizer steps")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mu", type=float, default=1e-3, help="adversarial weight (complex mode)")
    p.add_argument("--lr", type=float, default=2e-4, help="initial learning rate")
    p.add_argument("--halving-point", type=float, default=0.5,
                   help="fraction of steps before the rate halves")
    p.add_argument("--base-channels", type=int, default=None,
                   help="generator width override (disables the size budget)")
    p.add_argument("--depth", type=int, default=None,
                   help="U-Net depth override (disables the size budget)")
    p.add_argument("--disc-base-channels", type=int, default=64)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--report", help="optional CSV report path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check on tiny networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_pipeline_config(args.config, cfg)
    return cfg


def _cmd_infer(args) -> int:
    config = _load_config(args)
    weights_path = args.weights or config.weights_path
    if not weights_path:
        print("hdrsr infer: --weights or a weights_path config entry is required",
              file=sys.stderr)
        return EXIT_USAGE
    weights = load_weights(weights_path)
    net = build_refnet(config_from_weights(weights), rng=np.random.default_rng(0))
    apply_weights(net, weights)
    image = read_ldr_image(args.input)
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    hdr, ldr = infer(image, net, config)
    write_hdr_image(hdr, args.out_hdr)
    write_ldr_image(ldr, args.out_ldr)
    h, w = hdr.shape[:2]
    print(f"wrote {args.out_hdr} and {args.out_ldr} ({w}x{h}, "
          f"peak {hdr.max():.4g})")
    return EXIT_OK


def _cmd_decompose(args) -> int:
    config = _load_config(args)
    image = read_ldr_image(args.input)
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    illum_vis, refl_vis = decompose_for_display(image, config)
    write_ldr_image(illum_vis[:, :, None], args.out_illum)
    write_ldr_image(refl_vis[:, :, None], args.out_refl)
    print(f"wrote {args.out_illum} and {args.out_refl}")
    return EXIT_OK


def _cmd_prepare(args) -> int:
    count = prepare_dataset(args.ldr_dir, args.hdr_dir, args.out, stride=args.stride)
    print(f"wrote {count} patch pairs to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    if args.base_channels is not None or args.depth is not None:
        net_cfg = RefNetConfig(
            base_channels=args.base_channels or 36,
            unet_depth=args.depth or 3,
            param_budget=None,
        )
    else:
        net_cfg = RefNetConfig()
    config = TrainConfig(
        total_steps=args.steps,
        mode=args.mode,
        batch_size=args.batch_size,
        lr_initial=args.lr,
        lr_after_halving=args.lr / 2.0,
        halving_point=args.halving_point,
        mu=args.mu,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        net=net_cfg,
        disc_base_channels=args.disc_base_channels,
    )
    store = load_patch_store(args.data)
    report = train(config, store, args.out)
    if args.report:
        report.write(args.report)
    print(f"trained {config.total_steps} steps on {len(store)} pairs; "
          f"final loss {report.loss_recon[-1]:.6f}; wrote {args.out}")
    return EXIT_OK


def _projection_loss(rng, shape):
    proj = rng.choice([-1.0, 1.0], size=shape).astype(np.float32)

    def loss(out):
        return float(np.sum(out.astype(np.float64) * proj)), proj

    return loss


def _kink_margin(x, lo, hi, rng):
    """Uniform draw over +/-[lo, hi]: keeps rectifier inputs away from the
    fold so +/-step perturbations stay on one linear branch."""
    mag = rng.uniform(lo, hi, size=x)
    return (mag * rng.choice([-1.0, 1.0], size=x)).astype(np.float32)


def _shift_rectifiers(net, shift=1.0, scale=0.25):
    # push every pre-activation well inside one branch so the whole-graph
    # check sees a locally smooth function; wiring errors still surface
    for name, arr in net.parameters().items():
        if name.endswith("/w"):
            arr *= np.float32(scale)
        elif name.endswith("/b"):
            arr += np.float32(shift)


def _loss_fd_error(fn, args_list, grads, rng, step=1e-3, n=100):
    """Central differences straight on a loss callable over float vectors."""
    worst = 0.0
    total = sum(a.size for a in args_list)
    picks = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum([a.size for a in args_list])
    for gidx in np.sort(picks):
        t = int(np.searchsorted(bounds, gidx, side="right"))
        off = int(gidx - (bounds[t - 1] if t > 0 else 0))
        flat = args_list[t].reshape(-1)
        old = flat[off]
        flat[off] = old + step
        plus = fn(*args_list)[0]
        flat[off] = old - step
        minus = fn(*args_list)[0]
        flat[off] = old
        numeric = (plus - minus) / (2.0 * step)
        ana = float(grads[t].reshape(-1)[off])
        worst = max(worst, abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0))
    return worst


def _gradcheck_cases(seed: int):
    """Per-layer finite-difference checks plus whole-graph wiring checks.

    Single layers are checked on their own: the linear ones are exact under
    central differences and the activations get inputs held away from their
    folds. The stacked networks are checked with rectifier inputs shifted
    positive; depth otherwise makes step-crossing noise swamp the comparison.
    Yields (name, max_error) pairs.
    """
    rng = np.random.default_rng(seed)

    def net_err(name, net, x, loss, include_input=False):
        err = gradient_check(net, _f(x), loss, rng=rng, include_input=include_input)
        return name, err

    def single(name, layer, x, out_shape, include_input=True):
        net = Network([Node("l", layer)])
        loss = _projection_loss(rng, out_shape)
        return net_err(name, net, x, loss, include_input=include_input)

    _f = lambda a: np.asarray(a, dtype=np.float32)
    mk = np.random.default_rng([seed, 1])

    yield single("conv3x3", Conv2d(3, 4, rng=mk), rng.uniform(-1, 1, (2, 8, 8, 3)),
                 (2, 8, 8, 4))
    yield single("conv3x3_s2", Conv2d(3, 4, stride=2, rng=mk),
                 rng.uniform(-1, 1, (2, 9, 9, 3)), (2, 5, 5, 4))
    yield single("tconv4x4", TransposedConv2d(3, 4, rng=mk),
                 rng.uniform(-1, 1, (2, 5, 5, 3)), (2, 10, 10, 4))
    yield single("pixel_shuffle", PixelShuffle(2),
                 rng.uniform(-1, 1, (2, 4, 4, 8)), (2, 8, 8, 2))
    yield single("relu", ReLU(), _kink_margin((2, 6, 6, 3), 0.1, 0.9, rng),
                 (2, 6, 6, 3))
    yield single("leaky_relu", LeakyReLU(0.2), _kink_margin((2, 6, 6, 3), 0.1, 0.9, rng),
                 (2, 6, 6, 3))
    yield single("tanh", Tanh(), rng.uniform(-2, 2, (2, 6, 6, 3)), (2, 6, 6, 3))
    yield single("sigmoid", Sigmoid(), rng.uniform(-3, 3, (2, 6, 6, 3)), (2, 6, 6, 3))
    yield single("global_avg_pool", GlobalAvgPool(),
                 rng.uniform(-1, 1, (2, 6, 5, 4)), (2, 1, 1, 4))
    yield single("dense", Dense(12, 3, rng=mk), rng.uniform(-1, 1, (2, 1, 1, 12)),
                 (2, 3))

    # MAE: targets offset so no residual changes sign under the probe step
    pred = rng.uniform(-1, 1, (2, 8, 8, 1)).astype(np.float32)
    target = pred + _kink_margin(pred.shape, 0.2, 0.6, rng)
    loss, grad = mae_loss(pred, target)
    yield "mae", _loss_fd_error(lambda p: mae_loss(p, target), [pred], [grad], rng)

    la = rng.uniform(-2, 2, 16)
    lb = rng.uniform(-2, 2, 16)
    for name, fn in (("ragan_generator", ragan_generator_loss),
                     ("ragan_discriminator", ragan_discriminator_loss)):
        _, ga, gb = fn(la, lb)
        yield name, _loss_fd_error(fn, [la, lb], [ga, gb], rng)

    gen = build_refnet(
        RefNetConfig(base_channels=4, unet_depth=2, param_budget=None),
        rng=np.random.default_rng([seed, 2]),
    )
    _shift_rectifiers(gen)
    x = rng.uniform(-0.4, 0.4, size=(1, 8, 8, 1)).astype(np.float32)
    # constant target outside tanh range: |residual| >= 1, MAE stays one-sided
    target = np.full((1, 16, 16, 1), 2.0, dtype=np.float32)
    yield net_err("generator_graph", gen, x, lambda out: mae_loss(out, target))

    disc = build_discriminator(4, rng=np.random.default_rng([seed, 3]))
    _shift_rectifiers(disc)
    xd = rng.uniform(-0.4, 0.4, size=(2, 16, 16, 1)).astype(np.float32)
    yield net_err("discriminator_graph", disc, xd, _projection_loss(rng, (2, 1)))


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in _gradcheck_cases(args.seed):
        print(f"{name:<20s} max gradient error: {err:.3e}")
        worst = max(worst, err)
    if worst > args.tolerance:
        print(f"FAIL: {worst:.3e} exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"OK: worst error {worst:.3e} within {args.tolerance:g}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return EXIT_OK if code in (None, 0) else int(code)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SolverError, TrainingError, FloatingPointError) as exc:
        print(f"hdrsr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HdrsrError, FileNotFoundError) as exc:
        print(f"hdrsr: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
