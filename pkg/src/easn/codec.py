"""End-to-end image codec: transforms, rate-distortion loss, training, files.

The analysis transform stacks stride-2 resampling stages (conv + adaptive
normalization, or a fused resampling layer for the variants that absorb the
conv); the synthesis transform mirrors it with transposed convolutions.  A
factorized logistic prior prices the rounded latents, and the training loop
optimizes rate + lambda * 255^2 * MSE with adaptive moments and a
reduce-on-plateau schedule.  Everything is deterministic given the seeds.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy import (
    BitstreamHeader,
    DecodeError,
    FactorizedPrior,
    add_uniform_noise,
    build_symbol_tables,
    pack_bitstream,
    quantize_round,
    range_decode,
    range_encode,
    rate_bits,
    table_for_range,
    unpack_bitstream,
)
from .images import crop_to, replicate_pad, to_float, to_uint8
from .layers import (
    ALL_VARIANTS,
    init_conv,
    make_fused_stage,
    make_stage_norm,
    uses_fused_resample,
)
from .tensor import (
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    mul,
    sub,
    tmean,
)

# Rate-distortion grid and model sizes used by the full-scale experiments
# this desk-scale codebase is shaped after.  The defaults below stay small
# on purpose; these constants document the reference operating points.
STANDARD_LAMBDA_GRID = (0.005, 0.010, 0.020, 0.035, 0.080, 0.180)
REFERENCE_CHANNELS_LOW_RATE = (128, 192)    # (N, M) for the two smallest lambdas
REFERENCE_CHANNELS_HIGH_RATE = (192, 320)   # (N, M) for the rest
REFERENCE_BATCH = 16
REFERENCE_CROP = 256

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

WEIGHTS_MAGIC = b"EASNWT"
WEIGHTS_VERSION = 1


class TrainingDiverged(ArithmeticError):
    """Training hit a non-finite loss; the message names the step."""


class ModelMismatchError(ValueError):
    """A bitstream was produced by different weights than the ones loaded."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; `seed` fixes every parameter init."""

    stages: int = 3
    base_channels: int = 8
    latent_channels: int = 16
    variant: str = "EASN-C"
    kernel_sizes: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stages < 1:
            raise DomainError(f"need at least one stage, got {self.stages}")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise DomainError("channel counts must be positive")
        if self.variant not in ALL_VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; "
                              f"choose from {', '.join(ALL_VARIANTS)}")
        if self.kernel_sizes is None:
            object.__setattr__(self, "kernel_sizes", (5,) * self.stages)
        else:
            object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if len(self.kernel_sizes) != self.stages:
            raise DomainError(f"need {self.stages} kernel sizes, got {len(self.kernel_sizes)}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise DomainError("resampling kernels must be odd and positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must fit an unsigned 64-bit integer")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.stages


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings (the config-file key for `lam` is "lambda")."""

    lam: float
    lr_init: float = 1e-4
    batch: int = 8
    crop: int = 32
    plateau_patience_epochs: int = 10
    lr_factor: float = 0.5
    max_lr_drops: int = 4
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0.0:
            raise DomainError(f"lambda must be non-negative, got {self.lam}")
        if self.lr_init <= 0.0:
            raise DomainError("initial learning rate must be positive")
        if self.batch < 1 or self.crop < 1:
            raise DomainError("batch and crop must be positive")
        if self.plateau_patience_epochs < 1:
            raise DomainError("plateau patience must be at least one epoch")
        if not 0.0 < self.lr_factor < 1.0:
            raise DomainError("lr factor must lie in (0, 1)")
        if self.max_lr_drops < 0:
            raise DomainError("max lr drops must be non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise DomainError("max_steps must be positive when set")


class _Stage:
    """One resampling step: a plain conv followed by a normalization layer,
    or a single fused layer that resamples internally."""

    def __init__(self, name, conv, norm):
        self.name = name
        self.conv = conv
        self.norm = norm

    def __call__(self, x: Tensor, taps=None) -> Tensor:
        if self.conv is not None:
            x = self.conv(x)
        return self.norm(x, taps=taps, tap=self.name)

    def named_params(self):
        out = []
        if self.conv is not None:
            out.extend(self.conv.named_params(f"{self.name}.conv"))
        out.extend(self.norm.named_params(f"{self.name}.norm"))
        return out

    def clamp_raw(self):
        self.norm.clamp_raw()

    def tap_names(self):
        return self.norm.tap_names(self.name)


class CompressionModel:
    """Analysis/synthesis transform pair plus the latent prior."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        n, m, s = config.base_channels, config.latent_channels, config.stages
        enc_in, enc_out = [3] + [n] * (s - 1), [n] * (s - 1) + [m]
        dec_in, dec_out = [m] + [n] * (s - 1), [n] * (s - 1) + [3]
        self.encoder = [self._build_stage(f"enc{i}", enc_in[i], enc_out[i],
                                          config.kernel_sizes[i], rng, decoder=False)
                        for i in range(s)]
        self.decoder = [self._build_stage(f"dec{i}", dec_in[i], dec_out[i],
                                          config.kernel_sizes[i], rng, decoder=True)
                        for i in range(s)]
        self.prior = FactorizedPrior(m)

    def _build_stage(self, name, in_ch, out_ch, kernel, rng, decoder):
        if uses_fused_resample(self.config.variant):
            fused = make_fused_stage(self.config.variant, in_ch, out_ch, rng,
                                     decoder=decoder, resample_kernel=kernel)
            return _Stage(name, None, fused)
        if decoder:
            conv = init_conv(in_ch, out_ch, kernel, rng, stride=2,
                             transposed=True, output_pad=1)
        else:
            conv = init_conv(in_ch, out_ch, kernel, rng, stride=2)
        norm = make_stage_norm(self.config.variant, out_ch, rng, decoder=decoder)
        return _Stage(name, conv, norm)

    def analysis(self, x: Tensor, taps=None) -> Tensor:
        factor = self.config.downsample_factor
        _, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"expected 3 input channels, got {c}")
        if h % factor or w % factor:
            raise ShapeError(f"{h}x{w} input needs replicate padding to a "
                             f"multiple of {factor} before analysis")
        for stage in self.encoder:
            x = stage(x, taps)
        return x

    def synthesis(self, y: Tensor, taps=None, clamp: bool = False) -> Tensor:
        if y.shape[1] != self.config.latent_channels:
            raise ShapeError(f"expected {self.config.latent_channels} latent "
                             f"channels, got {y.shape[1]}")
        for stage in self.decoder:
            y = stage(y, taps)
        if clamp:
            return Tensor(np.clip(y.data, 0.0, 1.0))
        return y

    def named_params(self):
        out = []
        for stage in self.encoder + self.decoder:
            out.extend(stage.named_params())
        out.extend(self.prior.named_params("prior"))
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def clamp_raw(self):
        for stage in self.encoder + self.decoder:
            stage.clamp_raw()

    def tap_names(self):
        names = []
        for stage in self.encoder + self.decoder:
            names.extend(stage.tap_names())
        return names

    def model_id(self) -> bytes:
        return hashlib.sha256(serialize_weights(self)).digest()[:8]


def rd_loss(x: Tensor, x_hat: Tensor, p: Tensor, lam: float,
            pixel_count: int) -> tuple[Tensor, float, float]:
    """total = bits/pixel + lam * 255^2 * MSE; returns (total, bpp, distortion)."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    if lam < 0.0:
        raise DomainError("lambda must be non-negative")
    if pixel_count < 1:
        raise DomainError("pixel count must be positive")
    rate = mul(rate_bits(p), 1.0 / pixel_count)
    diff = sub(x, x_hat)
    mse = tmean(mul(diff, diff))
    total = add(rate, mul(mse, lam * 255.0 ** 2))
    return total, rate.item(), 255.0 ** 2 * mse.item()


class Adam:
    """Adaptive-moment SGD with bias correction; `lr` may be changed between
    steps (the plateau schedule does)."""

    def __init__(self, named_params, lr: float):
        self.params = list(named_params)
        if len({name for name, _ in self.params}) != len(self.params):
            raise DomainError("duplicate parameter names")
        self.lr = float(lr)
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}
        self._t = 0

    def step(self):
        self._t += 1
        c1 = 1.0 - ADAM_BETA1 ** self._t
        c2 = 1.0 - ADAM_BETA2 ** self._t
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * p.grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


class PlateauSchedule:
    """Halve (by `factor`) when validation stalls for `patience` epochs;
    request a stop after `max_drops` reductions have been spent."""

    def __init__(self, lr_init: float, factor: float, patience: int, max_drops: int):
        self.lr = lr_init
        self.factor = factor
        self.patience = patience
        self.max_drops = max_drops
        self.stopped = False
        self._best = math.inf
        self._bad_epochs = 0
        self._drops = 0

    def update(self, val_loss: float) -> None:
        if val_loss < self._best:
            self._best = val_loss
            self._bad_epochs = 0
            return
        self._bad_epochs += 1
        if self._bad_epochs >= self.patience:
            if self._drops >= self.max_drops:
                self.stopped = True
            else:
                self.lr *= self.factor
                self._drops += 1
                self._bad_epochs = 0


@dataclass
class StepLog:
    step: int
    epoch: int
    total: float
    rate_bpp: float
    distortion: float
    lr: float


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainLog:
    steps: list[StepLog] = field(default_factory=list)
    epochs: list[EpochLog] = field(default_factory=list)


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def validation_loss(model: CompressionModel, val_tensors, lam: float) -> float:
    """Deterministic held-out loss: rounded latents, clamped reconstruction."""
    total = 0.0
    for x in val_tensors:
        y_hat = quantize_round(model.analysis(x))
        p = model.prior.likelihood(y_hat)
        x_hat = model.synthesis(y_hat, clamp=True)
        n, _, h, w = x.shape
        loss, _, _ = rd_loss(x, x_hat, p, lam, pixel_count=n * h * w)
        total += loss.item()
    return total / len(val_tensors)


def train(dataset, mc: ModelConfig, tc: TrainConfig) -> tuple[CompressionModel, TrainLog]:
    """Optimize a fresh model on uint8 RGB images; fully seed-deterministic.

    The last eighth of `dataset` (at least one image) is held out and scored
    each epoch on fixed center crops to drive the plateau schedule.
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("training needs at least one image")
    if tc.crop % mc.downsample_factor:
        raise DomainError(f"crop {tc.crop} must be a multiple of "
                          f"{mc.downsample_factor} for {mc.stages} stages")
    for img in dataset:
        if img.shape[0] < tc.crop or img.shape[1] < tc.crop:
            raise DomainError(f"image {img.shape[:2]} is smaller than the "
                              f"{tc.crop} crop")

    n_val = max(1, len(dataset) // 8)
    train_imgs = dataset[:-n_val] if len(dataset) > 1 else dataset
    val_imgs = dataset[-n_val:]
    val_tensors = [to_float(_center_crop(img, tc.crop)) for img in val_imgs]

    model = CompressionModel(mc)
    opt = Adam(model.named_params(), tc.lr_init)
    schedule = PlateauSchedule(tc.lr_init, tc.lr_factor,
                               tc.plateau_patience_epochs, tc.max_lr_drops)
    rng = np.random.default_rng(tc.seed)
    log = TrainLog()
    steps_per_epoch = max(1, len(train_imgs) // tc.batch)
    pixel_count = tc.batch * tc.crop * tc.crop

    step = 0
    epoch = 0
    out_of_steps = False
    while not (schedule.stopped or out_of_steps):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = np.empty((tc.batch, 3, tc.crop, tc.crop))
            for b in range(tc.batch):
                img = train_imgs[int(rng.integers(0, len(train_imgs)))]
                top = int(rng.integers(0, img.shape[0] - tc.crop + 1))
                left = int(rng.integers(0, img.shape[1] - tc.crop + 1))
                patch = img[top:top + tc.crop, left:left + tc.crop]
                if rng.random() < 0.5:
                    patch = patch[:, ::-1]
                batch[b] = patch.transpose(2, 0, 1) / 255.0
            noise_seed = int(rng.integers(0, 2**63))

            xb = Tensor(batch)
            opt.zero_grad()
            with Tape() as tape:
                y = model.analysis(xb)
                y_noisy = add_uniform_noise(y, noise_seed)
                p = model.prior.likelihood(y_noisy)
                x_hat = model.synthesis(y_noisy)
                total, bpp, dist = rd_loss(xb, x_hat, p, tc.lam, pixel_count)
                loss_val = total.item()
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(f"non-finite loss {loss_val} at "
                                           f"step {step} (epoch {epoch})")
                backward(tape, total)
            opt.lr = schedule.lr
            opt.step()
            model.clamp_raw()

            log.steps.append(StepLog(step, epoch, loss_val, bpp, dist, schedule.lr))
            epoch_losses.append(loss_val)
            step += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                out_of_steps = True
                break

        val = validation_loss(model, val_tensors, tc.lam)
        log.epochs.append(EpochLog(epoch, float(np.mean(epoch_losses)), val,
                                   schedule.lr))
        schedule.update(val)
        epoch += 1
    return model, log


# --- weights serialization ---------------------------------------------------

def _config_block(c: ModelConfig) -> bytes:
    variant = c.variant.encode("ascii")
    parts = [struct.pack("<BHHQ", c.stages, c.base_channels, c.latent_channels,
                         int(c.seed)),
             struct.pack("<B", len(variant)), variant,
             struct.pack(f"<{c.stages}B", *c.kernel_sizes)]
    return b"".join(parts)


def serialize_weights(model: CompressionModel) -> bytes:
    """Config block + every named parameter in construction order."""
    params = model.named_params()
    parts = [_config_block(model.config), struct.pack("<I", len(params))]
    for name, p in params:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<4I", *p.shape))
        parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


def weights_to_bytes(model: CompressionModel) -> bytes:
    payload = serialize_weights(model)
    model_id = hashlib.sha256(payload).digest()[:8]
    return WEIGHTS_MAGIC + struct.pack("<B", WEIGHTS_VERSION) + model_id + payload


class _Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self._pos + n > len(self._blob):
            raise DecodeError(f"truncated weights file while reading {what}")
        piece = self._blob[self._pos:self._pos + n]
        self._pos += n
        return piece

    def done(self) -> bool:
        return self._pos == len(self._blob)


def model_from_bytes(blob: bytes) -> CompressionModel:
    """Rebuild a model, verifying the stored 8-byte id over the payload."""
    r = _Reader(blob)
    if r.take(6, "magic") != WEIGHTS_MAGIC:
        raise DecodeError("not a weights file")
    version = r.take(1, "version")[0]
    if version != WEIGHTS_VERSION:
        raise DecodeError(f"unsupported weights version {version}")
    stored_id = r.take(8, "model id")
    payload = blob[r._pos:]
    if hashlib.sha256(payload).digest()[:8] != stored_id:
        raise DecodeError("weights payload does not match its stored id")

    stages, n, m, seed = struct.unpack("<BHHQ", r.take(13, "config"))
    vlen = r.take(1, "variant length")[0]
    variant = r.take(vlen, "variant").decode("ascii")
    kernels = struct.unpack(f"<{stages}B", r.take(stages, "kernels"))
    config = ModelConfig(stages=stages, base_channels=n, latent_channels=m,
                         variant=variant, kernel_sizes=kernels, seed=seed)
    model = CompressionModel(config)

    (count,) = struct.unpack("<I", r.take(4, "parameter count"))
    params = model.named_params()
    if count != len(params):
        raise DecodeError(f"weights hold {count} parameters, model "
                          f"expects {len(params)}")
    for name, p in params:
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        stored_name = r.take(nlen, "name").decode("utf-8")
        if stored_name != name:
            raise DecodeError(f"parameter order mismatch: {stored_name} vs {name}")
        shape = struct.unpack("<4I", r.take(16, "shape"))
        if shape != p.shape:
            raise DecodeError(f"{name}: stored shape {shape} != {p.shape}")
        raw = r.take(8 * p.size, f"data of {name}")
        p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if not r.done():
        raise DecodeError("trailing bytes after the last parameter")
    return model


# --- compression pipeline ----------------------------------------------------

def compress(model: CompressionModel, image: np.ndarray) -> bytes:
    """uint8 RGB image -> framed bitstream (header + range-coded latents)."""
    x = to_float(image)
    padded, orig_h, orig_w = replicate_pad(x, model.config.downsample_factor)
    y_hat = quantize_round(model.analysis(padded))
    tables = build_symbol_tables(model.prior, y_hat)
    _, m, lh, lw = y_hat.shape
    per_channel = lh * lw
    syms = y_hat.data.astype(np.int64).ravel()
    per_symbol_tables = [tables[i // per_channel] for i in range(syms.size)]
    payload = range_encode(syms, per_symbol_tables)
    header = BitstreamHeader(model.model_id(), orig_h, orig_w, m,
                             tuple((t.symbol_min, t.symbol_max) for t in tables))
    return pack_bitstream(header, payload)


def decompress(model: CompressionModel, blob: bytes) -> np.ndarray:
    """Framed bitstream -> uint8 RGB image at the original size."""
    header, payload = unpack_bitstream(blob)
    if header.model_id != model.model_id():
        raise ModelMismatchError("bitstream was produced by different weights "
                                 "(model id mismatch)")
    m = model.config.latent_channels
    if header.channels != m:
        raise DecodeError(f"header says {header.channels} latent channels, "
                          f"model has {m}")
    factor = model.config.downsample_factor
    lh = -(-header.height // factor)
    lw = -(-header.width // factor)
    per_channel = lh * lw
    count = m * per_channel
    tables = [table_for_range(model.prior, c, lo, hi)
              for c, (lo, hi) in enumerate(header.symbol_ranges)]
    per_symbol_tables = [tables[i // per_channel] for i in range(count)]
    syms = range_decode(payload, per_symbol_tables, count)
    y_hat = Tensor(syms.astype(np.float64).reshape(1, m, lh, lw))
    x_hat = model.synthesis(y_hat, clamp=True)
    return to_uint8(crop_to(x_hat, header.height, header.width))
