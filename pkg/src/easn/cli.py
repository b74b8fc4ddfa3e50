"""Command-line entry point.

Subcommands: train, compress, decompress, eval, gradcheck, ablate,
visualize.  Configuration is an INI file with [model], [train], [paths] and
optional [analysis] sections; unknown sections or keys are rejected so a
typo cannot silently fall back to a default.  Exit codes: 0 success,
2 usage or configuration error, 3 runtime or numeric failure.  All outputs
are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    RDPoint,
    bpp,
    capture_scaling_features,
    flat_region_stat,
    high_freq_map,
    log_gradient_map,
    mean_rd_point,
    psnr,
    write_pgm,
    write_rd_csv,
)
from .codec import (
    CompressionModel,
    ModelConfig,
    ModelMismatchError,
    TrainConfig,
    TrainingDiverged,
    compress,
    decompress,
    model_from_bytes,
    rd_loss,
    train,
    weights_to_bytes,
)
from .entropy import DecodeError, FactorizedPrior, add_uniform_noise
from .fileio import atomic_save_image, atomic_write_bytes, atomic_write_text
from .images import load_image
from .layers import (
    ALL_VARIANTS,
    EASN,
    GDN,
    fd_margin,
    init_conv,
    make_fused_stage,
    uses_fused_resample,
)
from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    grad_check,
    mul,
    tsum,
)

GRADCHECK_TOLERANCE = 1e-4
# A difference step of 1e-4 moves any pre-activation by at most a few 1e-4
# (fan-in-scaled weights keep layer gains near one), so these margins keep
# every kink several steps away from the probe point.  The model margin is
# looser because a deep-gated model has hundreds of kink sites and the
# strict margin would reject almost every draw.
_FD_MARGIN = 1e-2
_FD_MODEL_MARGIN = 2e-3
_REDRAW_LIMIT = 200
IMAGE_SUFFIXES = (".png", ".ppm")


class ConfigError(ValueError):
    """Anything wrong with flags, config files, or input paths."""


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig | None
    dataset_dir: str | None
    output_dir: str | None
    flat_rect: tuple[int, int, int, int] | None


_MODEL_KEYS = {"stages", "base_channels", "latent_channels", "variant",
               "kernel_sizes", "seed"}
_TRAIN_KEYS = {"lambda", "lr_init", "batch", "crop", "plateau_patience_epochs",
               "lr_factor", "max_lr_drops", "max_steps", "seed"}
_PATH_KEYS = {"dataset", "output"}
_ANALYSIS_KEYS = {"flat_rect"}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "paths": _PATH_KEYS,
             "analysis": _ANALYSIS_KEYS}


def _typed(section: str, key: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid "
                          f"{kind.__name__}") from None


def parse_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as handle:
            cp.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    model_kw = {}
    if cp.has_section("model"):
        sec = cp["model"]
        for key in ("stages", "base_channels", "latent_channels", "seed"):
            if key in sec:
                model_kw[key] = _typed("model", key, sec[key], int)
        if "variant" in sec:
            model_kw["variant"] = sec["variant"]
        if "kernel_sizes" in sec:
            model_kw["kernel_sizes"] = tuple(
                _typed("model", "kernel_sizes", part.strip(), int)
                for part in sec["kernel_sizes"].split(","))

    train_cfg = None
    if cp.has_section("train"):
        sec = cp["train"]
        if "lambda" not in sec:
            raise ConfigError("[train] section needs a lambda value")
        train_kw = {"lam": _typed("train", "lambda", sec["lambda"], float)}
        for key, kind in (("lr_init", float), ("batch", int), ("crop", int),
                          ("plateau_patience_epochs", int), ("lr_factor", float),
                          ("max_lr_drops", int), ("max_steps", int), ("seed", int)):
            if key in sec:
                train_kw[key] = _typed("train", key, sec[key], kind)
        try:
            train_cfg = TrainConfig(**train_kw)
        except DomainError as exc:
            raise ConfigError(f"invalid [train] settings: {exc}") from None

    flat_rect = None
    if cp.has_option("analysis", "flat_rect"):
        parts = cp["analysis"]["flat_rect"].split(",")
        if len(parts) != 4:
            raise ConfigError("flat_rect needs four integers: top,left,height,width")
        flat_rect = tuple(_typed("analysis", "flat_rect", p.strip(), int)
                          for p in parts)

    try:
        model_cfg = ModelConfig(**model_kw)
    except DomainError as exc:
        raise ConfigError(f"invalid [model] settings: {exc}") from None

    return RunConfig(model=model_cfg, train=train_cfg,
                     dataset_dir=cp.get("paths", "dataset", fallback=None),
                     output_dir=cp.get("paths", "output", fallback=None),
                     flat_rect=flat_rect)


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    if getattr(args, "variant", None):
        try:
            rc.model = replace(rc.model, variant=args.variant)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "seed", None) is not None:
        rc.model = replace(rc.model, seed=args.seed)
        if rc.train is not None:
            rc.train = replace(rc.train, seed=args.seed)
    return rc


def _load_dataset(directory: str | None) -> list[np.ndarray]:
    if not directory:
        raise ConfigError("config has no [paths] dataset directory")
    if not os.path.isdir(directory):
        raise ConfigError(f"dataset directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise ConfigError(f"no .png/.ppm images in {directory}")
    return [load_image(os.path.join(directory, n)) for n in names]


def _load_model(path: str | None) -> CompressionModel:
    if not path:
        raise ConfigError("--weights is required for this command")
    if not os.path.isfile(path):
        raise ConfigError(f"weights file not found: {path}")
    with open(path, "rb") as handle:
        return model_from_bytes(handle.read())


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("EASN_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"EASN_THREADS={raw!r} is not an integer") from None
    if workers < 1:
        raise ConfigError("EASN_THREADS must be at least 1")
    return min(workers, max(n_jobs, 1))


def _write_train_log(path: str, log) -> None:
    lines = ["epoch,train_loss,val_loss,lr"]
    for e in log.epochs:
        lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.lr!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _rd_point_for(model: CompressionModel, img: np.ndarray, lam: float,
                  blob: bytes | None = None) -> tuple[RDPoint, bytes]:
    if blob is None:
        blob = compress(model, img)
    recon = decompress(model, blob)
    point = RDPoint(model=model.config.variant, lam=lam,
                    bpp=bpp(len(blob), img.shape[1], img.shape[0]),
                    psnr_db=psnr(img.astype(np.float64),
                                 recon.astype(np.float64)))
    return point, blob


def cmd_train(args) -> int:
    rc = _apply_overrides(parse_config(args.config), args)
    if rc.train is None:
        raise ConfigError("training needs a [train] section")
    out_dir = args.out or rc.output_dir
    if not out_dir:
        raise ConfigError("no output directory (set [paths] output or --out)")
    dataset = _load_dataset(rc.dataset_dir)
    os.makedirs(out_dir, exist_ok=True)

    model, log = train(dataset, rc.model, rc.train)
    atomic_write_bytes(os.path.join(out_dir, "weights.bin"),
                       weights_to_bytes(model))
    _write_train_log(os.path.join(out_dir, "train_log.csv"), log)

    n_val = max(1, len(dataset) // 8)
    points = []
    for img in dataset[-n_val:]:
        point, _ = _rd_point_for(model, img, rc.train.lam)
        points.append(point)
    points.append(mean_rd_point(points))
    write_rd_csv(os.path.join(out_dir, "val_rd.csv"), points)
    print(f"trained {rc.model.variant} for {len(log.steps)} steps; "
          f"val loss {log.epochs[-1].val_loss!r}")
    return 0


def cmd_compress(args) -> int:
    model = _load_model(args.weights)
    if not os.path.isfile(args.image):
        raise ConfigError(f"image not found: {args.image}")
    img = load_image(args.image)
    blob = compress(model, img)
    atomic_write_bytes(args.out, blob)
    size = os.path.getsize(args.out)
    print(f"bpp {bpp(size, img.shape[1], img.shape[0])!r}")
    return 0


def cmd_decompress(args) -> int:
    model = _load_model(args.weights)
    if not os.path.isfile(args.stream):
        raise ConfigError(f"bitstream not found: {args.stream}")
    with open(args.stream, "rb") as handle:
        img = decompress(model, handle.read())
    atomic_save_image(args.out, img)
    print(f"wrote {img.shape[1]}x{img.shape[0]} image to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.weights)
    if not os.path.isdir(args.images):
        raise ConfigError(f"image directory not found: {args.images}")
    names = sorted(n for n in os.listdir(args.images)
                   if n.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise ConfigError(f"no .png/.ppm images in {args.images}")
    images = [load_image(os.path.join(args.images, n)) for n in names]

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=_worker_count(len(images))) as pool:
        blobs = list(pool.map(lambda img: compress(model, img), images))

    points = []
    for name, img, blob in zip(names, images, blobs):
        stream_path = os.path.join(out_dir, os.path.splitext(name)[0] + ".bin")
        atomic_write_bytes(stream_path, blob)
        physical = os.path.getsize(stream_path)
        point, _ = _rd_point_for(model, img, args.lam, blob)
        point = replace(point, bpp=bpp(physical, img.shape[1], img.shape[0]))
        points.append(point)
    points.append(mean_rd_point(points))
    write_rd_csv(args.out, points)
    mean = points[-1]
    print(f"{len(images)} images: mean bpp {mean.bpp!r}, "
          f"mean psnr {mean.psnr_db!r} dB")
    return 0


def _normalized(loss_fn, magnitude: float):
    """Scale an audit total by an exact power of two down to about 1/16.

    A central difference resolves a derivative only down to the rounding
    noise of the total, which grows with its magnitude; parameters whose
    true gradient is smaller than that noise would compare garbage against
    the analytic value.  Holding the total near 1/16 pushes the noise below
    what the check metric's absolute floor forgives, so even near-zero
    gradient elements audit cleanly.  The scale is a power of two (exact in
    binary floating point) and a constant, so it exercises no extra rules
    and a corrupted backward still fails: relative error is scale-invariant.
    """
    scale = 2.0 ** (math.ceil(math.log2(max(magnitude, 1e-30))) + 4)
    return lambda: mul(loss_fn(), 1.0 / scale)


def _generic_draw(params, rng: np.random.Generator) -> None:
    """Redraw parameters at generic, audit-friendly magnitudes.

    Conv weights get a fan-in-scaled range so activations stay O(1) through
    chains of any depth: saturated sigmoids would leave gradients too small
    for a finite difference to resolve against the loss magnitude.
    """
    for _, p in params:
        if p.data.shape[0] == 1:
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
        else:
            bound = math.sqrt(3.0 / float(np.prod(p.data.shape[1:])))
            p.data[...] = rng.uniform(-bound, bound, p.shape)


def _model_margin(model: CompressionModel, x: Tensor, noise_seed: int) -> float:
    """Smallest kink distance across every norm layer in a full forward."""
    worst = math.inf
    t = x
    for stage in model.encoder:
        u = t if stage.conv is None else stage.conv(t)
        worst = min(worst, fd_margin(stage.norm, u))
        t = stage.norm(u)
    t = add_uniform_noise(t, seed=noise_seed)
    for stage in model.decoder:
        u = t if stage.conv is None else stage.conv(t)
        worst = min(worst, fd_margin(stage.norm, u))
        t = stage.norm(u)
    return worst


def _gradcheck_groups(variant: str, seed: int):
    """(name, callable) pairs covering every differentiable piece.

    Probe points are drawn at generic magnitudes (weights well above their
    tiny training init, so no gradient hides below the difference noise
    floor) and re-drawn until the function is locally smooth around them.
    """
    rng = np.random.default_rng(seed)
    groups = []

    conv = init_conv(3, 4, 3, rng)
    x1 = Tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True)
    groups.append(("conv2d",
                   _normalized(lambda: tsum(conv(x1)),
                               float(np.abs(conv(x1).data).sum())),
                   [x1, conv.weight, conv.bias]))

    deconv = init_conv(4, 3, 3, rng, stride=2, transposed=True, output_pad=1)
    x2 = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    groups.append(("conv_transpose2d",
                   _normalized(lambda: tsum(deconv(x2)),
                               float(np.abs(deconv(x2).data).sum())),
                   [x2, deconv.weight, deconv.bias]))

    if variant == "GDN":
        layer = GDN(4)
    elif uses_fused_resample(variant):
        layer = make_fused_stage(variant, 4, 4, rng)
    else:
        layer = EASN(4, variant, rng)
    layer_params = [p for _, p in layer.named_params("layer")]
    for _ in range(_REDRAW_LIMIT):
        for p in layer_params:
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
        x3 = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
        if fd_margin(layer, x3) > _FD_MARGIN:
            break
    else:
        raise RuntimeError("no smooth probe point found for the layer audit")
    groups.append((variant,
                   _normalized(lambda: tsum(layer(x3)),
                               float(np.abs(layer(x3).data).sum())),
                   [x3] + layer_params))

    # The bin mass has zero derivative where a symbol sits exactly on the
    # distribution's centre, so keep every |v - loc| away from zero: a true
    # zero gradient is pure difference noise to the audit.
    prior = FactorizedPrior(4)
    prior.loc.data[...] = (rng.uniform(0.05, 0.45, prior.loc.shape)
                           * rng.choice((-1.0, 1.0), prior.loc.shape))
    prior.raw_scale.data[...] += rng.uniform(-0.25, 0.25, prior.raw_scale.shape)
    v = Tensor(rng.integers(-3, 4, size=(1, 4, 4, 4)).astype(np.float64),
               requires_grad=True)
    groups.append(("prior-likelihood",
                   _normalized(lambda: tsum(prior.likelihood(v)),
                               tsum(prior.likelihood(v)).item()),
                   [v, prior.loc, prior.raw_scale]))

    mc = ModelConfig(stages=1, base_channels=4, latent_channels=6,
                     variant=variant, kernel_sizes=(3,), seed=seed)
    model = CompressionModel(mc)
    x4 = Tensor(rng.uniform(0.2, 0.8, (1, 3, 4, 4)))

    def full_loss():
        y = model.analysis(x4)
        y_noisy = add_uniform_noise(y, seed=2 * seed + 1)
        p = model.prior.likelihood(y_noisy)
        x_hat = model.synthesis(y_noisy)
        # lambda = 1/255^2 keeps the distortion term at its natural [0,1]
        # image scale, so the total stays small enough that a central
        # difference can resolve every parameter's contribution.
        total, _, _ = rd_loss(x4, x_hat, p, lam=1.0 / 65025.0, pixel_count=16)
        return total

    for _ in range(_REDRAW_LIMIT):
        _generic_draw(model.named_params(), rng)
        if _model_margin(model, x4, noise_seed=2 * seed + 1) > _FD_MODEL_MARGIN:
            break
    else:
        raise RuntimeError("no smooth probe point found for the model audit")

    scaled_loss = _normalized(full_loss, full_loss().item())
    for name, p in model.named_params():
        groups.append((f"rd-loss/{name}", scaled_loss, [p]))
    return groups


def cmd_gradcheck(args) -> int:
    variant = args.variant or "EASN-C"
    if variant not in ALL_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from "
                          f"{', '.join(ALL_VARIANTS)}")
    seed = args.seed if args.seed is not None else 0
    worst = 0.0
    for name, loss, params in _gradcheck_groups(variant, seed):
        err = grad_check(loss, params)
        worst = max(worst, err)
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:32s} {err:12.3e}  {status}")
    print(f"worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if worst <= GRADCHECK_TOLERANCE else 3


def cmd_ablate(args) -> int:
    rc = _apply_overrides(parse_config(args.config), args)
    if rc.train is None:
        raise ConfigError("ablation needs a [train] section")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("no variants requested")
    for v in variants:
        if v not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from "
                              f"{', '.join(ALL_VARIANTS)}")
    dataset = _load_dataset(rc.dataset_dir)

    lines = ["variant,final_train_loss,final_val_loss,param_count"]
    for v in variants:
        mc = replace(rc.model, variant=v)
        model, log = train(dataset, mc, rc.train)
        last = log.epochs[-1]
        lines.append(f"{v},{last.train_loss!r},{last.val_loss!r},"
                     f"{model.param_count()}")
        print(lines[-1])
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_visualize(args) -> int:
    model = _load_model(args.weights)
    if not os.path.isfile(args.image):
        raise ConfigError(f"image not found: {args.image}")
    img = load_image(args.image)
    os.makedirs(args.out, exist_ok=True)

    if args.tap:
        if args.tap not in model.tap_names():
            raise ConfigError(f"unknown tap {args.tap!r}; valid taps: "
                              f"{', '.join(model.tap_names())}")
        taps = [args.tap]
    else:
        taps = model.encoder[0].tap_names()

    rect = None
    if args.flat_rect:
        parts = args.flat_rect.split(",")
        if len(parts) != 4:
            raise ConfigError("--flat-rect needs top,left,height,width")
        try:
            rect = tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"bad --flat-rect {args.flat_rect!r}") from None

    for tap in taps:
        feat = capture_scaling_features(model, img, tap)
        hf = high_freq_map(feat, source=tap)
        write_pgm(os.path.join(args.out, f"hf_{tap}.pgm"), hf)
        h, w = hf.data.shape
        region = rect or (h // 4, w // 4, max(1, h // 2), max(1, w // 2))
        try:
            stat = flat_region_stat(hf, region)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
        print(f"{tap} flat_stat {stat!r}")
    if args.gradient:
        write_pgm(os.path.join(args.out, "gradient.pgm"), log_gradient_map(img))
        print("gradient map written")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="easn",
        description="Learned image compression with adaptive scaling "
                    "normalization layers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides [paths] output)")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="image file -> bitstream")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="bitstream -> image file")
    p.add_argument("stream")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="rate-distortion CSV over an image dir")
    p.add_argument("images")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=float("nan"),
                   help="lambda recorded in the CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train several variants, compare")
    p.add_argument("variants", help="comma-separated variant names")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="high-frequency feature-map PGMs")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tap", help="layer tap name (default: first encoder stage)")
    p.add_argument("--flat-rect", help="top,left,height,width probe region")
    p.add_argument("--gradient", action="store_true",
                   help="also write a log-gradient map of the input image")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, DecodeError, ModelMismatchError, DomainError,
            ShapeError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
