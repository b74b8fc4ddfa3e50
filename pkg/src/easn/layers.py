"""Normalization layers for the compression transforms.

Two families live here: classic divisive normalization (GDN, plus its
multiplicative inverse for the synthesis path) and the swish-like gated
rescaling family (EASN) where a small convolutional branch drives a
per-element sigmoid gate,

    out = m(x) * sigmoid(-beta - F(x)) [+ offset(x)] + x.

Variants differ only in the branch kernel sizes; the fused variants
(EASN-F, EASN-G, EASN-DEEP) absorb the stage's stride-2 resampling so their
branches read the pre-resampling feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    add,
    clamp_min,
    conv2d,
    conv_transpose2d,
    div,
    leaky_relu,
    mul,
    neg,
    sigmoid,
    sqrt,
)

LEAKY_SLOPE = 0.01
GDN_BETA_FLOOR = 1e-6
GDN_GAMMA_INIT = 0.1
BRANCH_INIT_SCALE = 0.1


@dataclass
class Conv:
    """A convolution's parameters plus its fixed geometry."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0
    transposed: bool = False
    output_pad: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv_transpose2d(x, self.weight, self.bias, self.stride,
                                    self.pad, self.output_pad)
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def init_conv(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
              stride: int = 1, transposed: bool = False, output_pad: int = 0,
              scale: float = 1.0) -> Conv:
    """Uniform fan-in initialisation, optionally damped for branch convs."""
    fan_in = in_ch * kernel * kernel
    bound = scale / math.sqrt(fan_in)
    shape = (in_ch, out_ch, kernel, kernel) if transposed else (out_ch, in_ch, kernel, kernel)
    weight = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    bias = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True)
    return Conv(weight, bias, stride=stride, pad=kernel // 2,
                transposed=transposed, output_pad=output_pad)


@dataclass(frozen=True)
class VariantSpec:
    """Branch structure of one EASN variant.

    gate_kernels feed the sigmoid gate F(x) (activation between convs),
    map_kernels build the mapping path m(x) (None keeps the identity), and
    offset_kernel, when set, adds an extra learned branch to the output.
    Fused variants place the stage's stride-2 resampling on the main path
    and stride their first branch convs to match.
    """

    gate_kernels: tuple[int, ...]
    map_kernels: tuple[int, ...] | None
    offset_kernel: int | None = None
    fused_resample: bool = False


EASN_VARIANTS: dict[str, VariantSpec] = {
    "EASN-A": VariantSpec((1, 1), None),
    "EASN-B": VariantSpec((1, 1), (1,)),
    "EASN-C": VariantSpec((3, 3), (1,)),
    "EASN-D": VariantSpec((3, 3), (1,), offset_kernel=1),
    "EASN-E": VariantSpec((3, 3), (5,)),
    "EASN-F": VariantSpec((5, 1), (5,), fused_resample=True),
    "EASN-G": VariantSpec((5, 3, 3, 1), (5, 5), fused_resample=True),
}

ALL_VARIANTS: tuple[str, ...] = ("GDN",) + tuple(EASN_VARIANTS) + ("EASN-DEEP",)


def _tap(taps, name, x: Tensor) -> None:
    if taps is not None and name is not None:
        taps[name] = x.data.copy()


class GDN:
    """Divisive normalization: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2).

    The inverse form multiplies by the square root instead, undoing the
    normalization on the synthesis side.  Raw parameters are unconstrained;
    the forward pass clamps them to their floors (beta >= 1e-6, gamma >= 0)
    and the optimizer re-clamps raw storage after each step.
    """

    def __init__(self, channels: int, inverse: bool = False) -> None:
        self.channels = channels
        self.inverse = inverse
        self.beta = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True)
        gamma = GDN_GAMMA_INIT * np.eye(channels)
        self.gamma = Tensor(gamma.reshape(channels, channels, 1, 1), requires_grad=True)

    def effective_beta(self) -> Tensor:
        return clamp_min(self.beta, GDN_BETA_FLOOR)

    def effective_gamma(self) -> Tensor:
        return clamp_min(self.gamma, 0.0)

    def _root(self, x: Tensor) -> Tensor:
        norm = conv2d(mul(x, x), self.effective_gamma(), self.effective_beta())
        return sqrt(norm)

    def scaling_factor(self, x: Tensor) -> Tensor:
        """The even-symmetric multiplier 1 / sqrt(beta + gamma @ x^2)."""
        return div(1.0, self._root(x))

    def __call__(self, x: Tensor, taps=None, tap: str | None = None) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"layer built for {self.channels} channels, got {x.shape[1]}")
        _tap(taps, tap, x)
        root = self._root(x)
        return mul(x, root) if self.inverse else div(x, root)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.beta", self.beta), (f"{prefix}.gamma", self.gamma)]

    def clamp_raw(self) -> None:
        np.maximum(self.beta.data, GDN_BETA_FLOOR, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)

    def tap_names(self, base: str) -> list[str]:
        return [base]


def scalar_gdn(x: float, a: float, b: float) -> float:
    """Single-channel divisive response x / sqrt(a + b x^2)."""
    if a <= 0.0 or b < 0.0:
        raise DomainError(f"need a > 0 and b >= 0, got a={a}, b={b}")
    return x / math.sqrt(a + b * x * x)


def factorize_gdn(layer: GDN) -> tuple[np.ndarray, np.ndarray]:
    """Split the GDN multiplier into a per-channel scale and a unit-bias form.

    Returns (delta, channel_scale) with delta_ij = gamma_ij / beta_i and
    channel_scale_i = beta_i ** -0.5, so that
    1/sqrt(beta_i + sum_j gamma_ij x_j^2)
        == channel_scale_i / sqrt(1 + sum_j delta_ij x_j^2).
    """
    beta = np.maximum(layer.beta.data.reshape(-1), GDN_BETA_FLOOR)
    gamma = np.maximum(layer.gamma.data.reshape(layer.channels, layer.channels), 0.0)
    return gamma / beta[:, None], 1.0 / np.sqrt(beta)


def _chain(convs: list[Conv], x: Tensor) -> Tensor:
    t = x
    for i, cv in enumerate(convs):
        if i:
            t = leaky_relu(t, LEAKY_SLOPE)
        t = cv(t)
    return t


class EASN:
    """Gated rescaler at a fixed resolution: m(x)*s(x) [+ offset(x)] + x."""

    def __init__(self, channels: int, variant: str, rng: np.random.Generator) -> None:
        spec = EASN_VARIANTS[variant]
        if spec.fused_resample:
            raise ValueError(f"{variant} carries its own resampling; use EASNResample")
        self.channels = channels
        self.variant = variant
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.gate = [init_conv(channels, channels, k, rng, scale=BRANCH_INIT_SCALE)
                     for k in spec.gate_kernels]
        self.mapping = (None if spec.map_kernels is None else
                        [init_conv(channels, channels, k, rng, scale=BRANCH_INIT_SCALE)
                         for k in spec.map_kernels])
        self.offset = (None if spec.offset_kernel is None else
                       init_conv(channels, channels, spec.offset_kernel, rng,
                                 scale=BRANCH_INIT_SCALE))

    def scaling_factor(self, x: Tensor) -> Tensor:
        return sigmoid(neg(add(_chain(self.gate, x), self.beta)))

    def __call__(self, x: Tensor, taps=None, tap: str | None = None) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"layer built for {self.channels} channels, got {x.shape[1]}")
        _tap(taps, tap, x)
        s = self.scaling_factor(x)
        m = x if self.mapping is None else _chain(self.mapping, x)
        out = mul(m, s)
        if self.offset is not None:
            out = add(out, self.offset(x))
        return add(out, x)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.beta", self.beta)]
        for i, cv in enumerate(self.gate):
            out += cv.named_params(f"{prefix}.gate{i}")
        if self.mapping is not None:
            for i, cv in enumerate(self.mapping):
                out += cv.named_params(f"{prefix}.map{i}")
        if self.offset is not None:
            out += self.offset.named_params(f"{prefix}.offset")
        return out

    def clamp_raw(self) -> None:
        pass

    def tap_names(self, base: str) -> list[str]:
        return [base]


class EASNResample:
    """Gated rescaler fused with the stage's stride-2 resampling.

    The main path is the plain resampling convolution (transposed on the
    synthesis side); the gate and mapping branches read the pre-resampling
    feature and carry the stride in their first convolution, keeping the
    composite receptive field at 5x5 including the resampler.
    """

    def __init__(self, in_ch: int, out_ch: int, variant: str,
                 rng: np.random.Generator, upsample: bool = False,
                 resample_kernel: int = 5, stride: int = 2) -> None:
        spec = EASN_VARIANTS[variant]
        if not spec.fused_resample:
            raise ValueError(f"{variant} does not fuse resampling; use EASN")
        opad = stride - 1 if upsample else 0
        if upsample and opad > resample_kernel // 2:
            raise DomainError("resample kernel too small for the requested stride")
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.variant = variant
        self.beta = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True)
        self.main = init_conv(in_ch, out_ch, resample_kernel, rng, stride=stride,
                              transposed=upsample, output_pad=opad)

        def branch(kernels):
            convs = [init_conv(in_ch, out_ch, kernels[0], rng, stride=stride,
                               transposed=upsample, output_pad=opad,
                               scale=BRANCH_INIT_SCALE)]
            convs += [init_conv(out_ch, out_ch, k, rng, scale=BRANCH_INIT_SCALE)
                      for k in kernels[1:]]
            return convs

        self.gate = branch(spec.gate_kernels)
        self.mapping = branch(spec.map_kernels)

    def resample(self, u: Tensor) -> Tensor:
        return self.main(u)

    def scaling_factor(self, u: Tensor) -> Tensor:
        return sigmoid(neg(add(_chain(self.gate, u), self.beta)))

    def __call__(self, u: Tensor, taps=None, tap: str | None = None) -> Tensor:
        if u.shape[1] != self.in_channels:
            raise ShapeError(f"layer built for {self.in_channels} channels, got {u.shape[1]}")
        _tap(taps, tap, u)
        x = self.main(u)
        s = self.scaling_factor(u)
        m = _chain(self.mapping, u)
        return add(mul(m, s), x)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.beta", self.beta)]
        out += self.main.named_params(f"{prefix}.main")
        for i, cv in enumerate(self.gate):
            out += cv.named_params(f"{prefix}.gate{i}")
        for i, cv in enumerate(self.mapping):
            out += cv.named_params(f"{prefix}.map{i}")
        return out

    def clamp_raw(self) -> None:
        pass

    def tap_names(self, base: str) -> list[str]:
        return [base]


class EASNDeep:
    """Two-step fused layer: EASN-F around the resampling, EASN-E after it.

    Exposes two capture points: ``<base>.front`` (pre-resampling input of
    the fused gate) and ``<base>.back`` (input of the follow-up gate).
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 upsample: bool = False, resample_kernel: int = 5,
                 stride: int = 2) -> None:
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.variant = "EASN-DEEP"
        self.front = EASNResample(in_ch, out_ch, "EASN-F", rng, upsample=upsample,
                                  resample_kernel=resample_kernel, stride=stride)
        self.back = EASN(out_ch, "EASN-E", rng)

    def __call__(self, u: Tensor, taps=None, tap: str | None = None) -> Tensor:
        front_tap = None if tap is None else f"{tap}.front"
        back_tap = None if tap is None else f"{tap}.back"
        x = self.front(u, taps, front_tap)
        return self.back(x, taps, back_tap)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return (self.front.named_params(f"{prefix}.front")
                + self.back.named_params(f"{prefix}.back"))

    def clamp_raw(self) -> None:
        pass

    def tap_names(self, base: str) -> list[str]:
        return [f"{base}.front", f"{base}.back"]


def param_count(layer) -> int:
    return sum(t.size for _, t in layer.named_params("x"))


def fd_margin(layer, x: Tensor) -> float:
    """Distance from the probe point (params, x) to the layer's nearest kink.

    The leaky-relu activations inside branch chains and the parameter floors
    of GDN are non-differentiable surfaces.  A finite-difference gradient
    audit is only meaningful where the function is locally smooth, so callers
    re-draw their random probe point until this margin comfortably exceeds
    the difference step.
    """
    def chain_margin(convs: list[Conv], t: Tensor) -> float:
        worst = math.inf
        for i, cv in enumerate(convs):
            if i:
                worst = min(worst, float(np.min(np.abs(t.data))))
                t = leaky_relu(t, LEAKY_SLOPE)
            t = cv(t)
        return worst

    if isinstance(layer, GDN):
        norm = conv2d(mul(x, x), layer.effective_gamma(),
                      layer.effective_beta())
        # The inverse-sqrt curvature explodes as the normalizer approaches
        # zero, inflating difference truncation error; the quarter weight
        # maps the caller's step-distance threshold onto the normalizer
        # scale that keeps truncation below the audit tolerance.
        return min(float(np.min(np.abs(layer.beta.data - GDN_BETA_FLOOR))),
                   float(np.min(np.abs(layer.gamma.data))),
                   0.25 * float(np.min(norm.data)))
    if isinstance(layer, EASNDeep):
        return min(fd_margin(layer.front, x),
                   fd_margin(layer.back, layer.front(x)))
    chains = [layer.gate]
    if layer.mapping is not None:
        chains.append(layer.mapping)
    return min(chain_margin(c, x) for c in chains)


def uses_fused_resample(variant: str) -> bool:
    if variant == "EASN-DEEP":
        return True
    spec = EASN_VARIANTS.get(variant)
    return spec is not None and spec.fused_resample


def make_stage_norm(variant: str, channels: int, rng: np.random.Generator,
                    decoder: bool = False):
    """Fixed-resolution norm layer for stages whose resampling stays outside."""
    if variant == "GDN":
        return GDN(channels, inverse=decoder)
    return EASN(channels, variant, rng)


def make_fused_stage(variant: str, in_ch: int, out_ch: int,
                     rng: np.random.Generator, decoder: bool = False,
                     resample_kernel: int = 5):
    """Resampling norm layer for the fused variants."""
    if variant == "EASN-DEEP":
        return EASNDeep(in_ch, out_ch, rng, upsample=decoder,
                        resample_kernel=resample_kernel)
    return EASNResample(in_ch, out_ch, variant, rng, upsample=decoder,
                        resample_kernel=resample_kernel)
