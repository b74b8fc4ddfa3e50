"""Entropy modelling and coding for quantized latents.

A factorized logistic prior supplies per-channel likelihoods (trained with
an additive-uniform-noise surrogate, evaluated on rounded symbols), gets
integerized into 16-bit CDF tables, and drives a byte-renormalised 32-bit
range coder.  The bitstream container framed here is little-endian:

    magic "EASN" | version u8 | model-id 8B | H u16 | W u16 | M u16
    | per-channel (min i16, max i16) | payload length u32 | payload

Out-of-range symbols are coded through a reserved escape slot followed by a
fixed-width 32-bit raw integer.  Header corruption is detected outright;
corruption inside the payload is only detected probabilistically (the coder
desynchronises), which is the usual limit of an unchecksummed stream.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    LN2,
    DomainError,
    ShapeError,
    Tensor,
    _sigmoid,
    add,
    clamp_min,
    div,
    log,
    mul,
    sigmoid,
    softplus,
    sub,
    tsum,
)

LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 1e-6
CDF_TOTAL = 1 << 16
INT_SYMBOL_LIMIT = 2**31 - 1
RAW_SCALE_INIT = math.log(math.e - 1.0)  # softplus(raw) == 1

HEADER_MAGIC = b"EASN"
BITSTREAM_VERSION = 1


class DecodeError(ValueError):
    """The bitstream is truncated, malformed, or fails a header check."""


class FactorizedPrior:
    """Independent logistic distribution per latent channel.

    The cumulative distribution is sigmoid((t - loc) / scale) with
    scale = softplus(raw_scale) + 1e-6, so both parameters are free to move
    during training while the scale stays positive.
    """

    def __init__(self, channels: int) -> None:
        if channels < 1:
            raise DomainError(f"channels must be positive, got {channels}")
        self.channels = channels
        self.loc = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.raw_scale = Tensor(np.full((1, channels, 1, 1), RAW_SCALE_INIT),
                                requires_grad=True)

    def likelihood(self, v: Tensor) -> Tensor:
        """P(round(value) == v) under the noisy surrogate, floored at 1e-9.

        Differentiable in v, loc and raw_scale.
        """
        if v.shape[1] != self.channels:
            raise ShapeError(f"prior has {self.channels} channels, got {v.shape[1]}")
        scale = add(softplus(self.raw_scale), SCALE_FLOOR)
        upper = sigmoid(div(sub(add(v, 0.5), self.loc), scale))
        lower = sigmoid(div(sub(sub(v, 0.5), self.loc), scale))
        return clamp_min(sub(upper, lower), LIKELIHOOD_FLOOR)

    def pmf(self, channel: int, lo: int, hi: int) -> np.ndarray:
        """Unfloored integer-bin probabilities for one channel on [lo, hi]."""
        if not 0 <= channel < self.channels:
            raise DomainError(f"channel {channel} out of range")
        if lo > hi:
            raise DomainError(f"empty symbol range [{lo}, {hi}]")
        mu = float(self.loc.data[0, channel, 0, 0])
        s = float(np.logaddexp(0.0, self.raw_scale.data[0, channel, 0, 0])) + SCALE_FLOOR
        grid = np.arange(lo, hi + 1, dtype=np.float64)
        return _sigmoid((grid + 0.5 - mu) / s) - _sigmoid((grid - 0.5 - mu) / s)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.loc", self.loc), (f"{prefix}.raw_scale", self.raw_scale)]


def add_uniform_noise(y: Tensor, seed: int) -> Tensor:
    """Training surrogate for rounding: y + U(-0.5, 0.5), seeded."""
    if not isinstance(seed, (int, np.integer)):
        raise DomainError("noise seed must be an integer")
    noise = np.random.default_rng(int(seed)).uniform(-0.5, 0.5, size=y.shape)
    return add(y, Tensor(noise))


def quantize_round(y: Tensor) -> Tensor:
    """Round half away from zero to integer-valued float64."""
    if not y.is_finite():
        raise DomainError("cannot quantize non-finite values")
    if (np.abs(y.data) > INT_SYMBOL_LIMIT).any():
        raise DomainError("quantized magnitude exceeds the symbol range")
    return Tensor(np.sign(y.data) * np.floor(np.abs(y.data) + 0.5))


def rate_bits(p: Tensor) -> Tensor:
    """Total information content -sum(log2 p) of a likelihood tensor."""
    if (p.data > 1.0).any():
        raise DomainError("likelihoods above 1")
    return mul(tsum(log(p)), -1.0 / LN2)


def quantize_pmf(pmf: np.ndarray, total: int = CDF_TOTAL) -> np.ndarray:
    """Integer frequencies that sum to ``total`` with every slot >= 1.

    Proportional allocation with largest-remainder rounding; when the
    minimum-frequency bumps overshoot, mass is taken back from the largest
    slots.  Deterministic, index-stable tie-breaking.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n < 1 or n > total:
        raise DomainError(f"need 1..{total} slots, got {n}")
    if not np.isfinite(pmf).all() or (pmf < 0.0).any():
        raise DomainError("pmf entries must be finite and non-negative")
    mass = pmf.sum()
    scaled = np.full(n, total / n) if mass <= 0.0 else pmf * (total / mass)
    base = np.floor(scaled)
    freqs = np.maximum(base, 1.0).astype(np.int64)
    diff = total - int(freqs.sum())
    if diff > 0:
        order = np.lexsort((np.arange(n), -(scaled - base)))
        for i in range(diff):
            freqs[order[i % n]] += 1
    while diff < 0:
        i = int(np.argmax(freqs))
        freqs[i] -= 1
        diff += 1
    return freqs


@dataclass
class SymbolTable:
    """Integer CDF for one channel over [symbol_min, symbol_max] + escape.

    ``cdf`` has one boundary per slot plus one: cdf[0] == 0,
    cdf[-1] == 65536, strictly increasing.  The final slot is the escape
    used for symbols outside the covered range.
    """

    channel: int
    symbol_min: int
    symbol_max: int
    cdf: np.ndarray

    def __post_init__(self) -> None:
        n = self.symbol_max - self.symbol_min + 2  # in-range slots + escape
        if self.cdf.shape != (n + 1,):
            raise DomainError(f"cdf must have {n + 1} boundaries, got {self.cdf.shape}")
        if self.cdf[0] != 0 or self.cdf[-1] != CDF_TOTAL:
            raise DomainError("cdf must span exactly [0, 65536]")
        if (np.diff(self.cdf) < 1).any():
            raise DomainError("cdf must be strictly increasing")

    @property
    def n_symbols(self) -> int:
        return self.symbol_max - self.symbol_min + 1

    @property
    def escape_slot(self) -> int:
        return self.n_symbols


def table_for_range(prior: FactorizedPrior, channel: int, lo: int, hi: int) -> SymbolTable:
    """Integerize the prior over [lo, hi], reserving the escape slot."""
    pmf = prior.pmf(channel, lo, hi)
    escape_mass = max(1.0 - float(pmf.sum()), 0.0)
    freqs = quantize_pmf(np.append(pmf, escape_mass))
    cdf = np.concatenate(([0], np.cumsum(freqs)))
    return SymbolTable(channel, lo, hi, cdf)


def build_symbol_tables(prior: FactorizedPrior, y_hat) -> list[SymbolTable]:
    """One table per channel spanning the observed values plus a margin of 1."""
    data = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    if data.ndim != 4 or data.shape[1] != prior.channels:
        raise ShapeError(f"expected (N, {prior.channels}, h, w) latents, got {data.shape}")
    tables = []
    for c in range(prior.channels):
        lo = int(data[:, c].min()) - 1
        hi = int(data[:, c].max()) + 1
        tables.append(table_for_range(prior, c, lo, hi))
    return tables


_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_BYTE_CDF = np.arange(257, dtype=np.int64) * 256  # uniform byte table for escapes


class RangeEncoder:
    """Carry-propagating 32-bit range coder, one byte per renormalisation."""

    def __init__(self) -> None:
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def encode(self, cum_lo: int, cum_hi: int, total: int) -> None:
        if not 0 <= cum_lo < cum_hi <= total or total > CDF_TOTAL:
            raise DomainError(f"bad coding interval [{cum_lo}, {cum_hi}) / {total}")
        r = self._range // total
        self._low += r * cum_lo
        if cum_hi == total:
            self._range -= r * cum_lo
        else:
            self._range = r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._shift_low()
            self._range = (self._range << 8) & _MASK32

    def _shift_low(self) -> None:
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            c = self._cache
            while True:
                self._out.append((c + carry) & 0xFF)
                c = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self._low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (self._low << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder; raises DecodeError on truncated input."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        if self._next() != 0:
            raise DecodeError("stream does not start with the priming zero byte")
        self._range = _MASK32
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 8) | self._next()
        self._r = 1

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def freq(self, total: int) -> int:
        self._r = self._range // total
        v = self._code // self._r
        return total - 1 if v >= total else v

    def update(self, cum_lo: int, cum_hi: int, total: int) -> None:
        self._code -= self._r * cum_lo
        if cum_hi == total:
            self._range -= self._r * cum_lo
        else:
            self._range = self._r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next()) & _MASK32
            self._range = (self._range << 8) & _MASK32


def _encode_raw32(enc: RangeEncoder, value: int) -> None:
    if not -(2**31) <= value < 2**31:
        raise DomainError(f"escape value {value} exceeds 32-bit range")
    u = value + 2**31
    for shift in (24, 16, 8, 0):
        b = (u >> shift) & 0xFF
        enc.encode(int(_BYTE_CDF[b]), int(_BYTE_CDF[b + 1]), CDF_TOTAL)


def _decode_raw32(dec: RangeDecoder) -> int:
    u = 0
    for _ in range(4):
        b = dec.freq(CDF_TOTAL) >> 8
        dec.update(int(_BYTE_CDF[b]), int(_BYTE_CDF[b + 1]), CDF_TOTAL)
        u = (u << 8) | b
    return u - 2**31


def range_encode(symbols, tables) -> bytes:
    """Encode integer ``symbols`` against per-position ``tables``."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim != 1 or len(tables) != symbols.size:
        raise ShapeError("need one table per symbol")
    enc = RangeEncoder()
    for sym, table in zip(symbols.tolist(), tables):
        idx = sym - table.symbol_min
        cdf = table.cdf
        if 0 <= idx < table.n_symbols:
            enc.encode(int(cdf[idx]), int(cdf[idx + 1]), CDF_TOTAL)
        else:
            esc = table.escape_slot
            enc.encode(int(cdf[esc]), int(cdf[esc + 1]), CDF_TOTAL)
            _encode_raw32(enc, sym)
    return enc.finish()


def range_decode(payload: bytes, tables, count: int) -> np.ndarray:
    """Inverse of range_encode for ``count`` symbols; exact round trip."""
    if count != len(tables):
        raise ShapeError("need one table per symbol")
    dec = RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        table = tables[i]
        cdf = table.cdf
        v = dec.freq(CDF_TOTAL)
        slot = int(np.searchsorted(cdf, v, side="right")) - 1
        dec.update(int(cdf[slot]), int(cdf[slot + 1]), CDF_TOTAL)
        if slot == table.escape_slot:
            out[i] = _decode_raw32(dec)
        else:
            out[i] = table.symbol_min + slot
    return out


def ideal_code_length_bits(symbols, tables) -> float:
    """Codelength of the integer PMF itself: sum of -log2(freq / total).

    Escaped symbols cost their escape-slot bits plus 32 raw bits.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    bits = 0.0
    for sym, table in zip(symbols.tolist(), tables):
        idx = sym - table.symbol_min
        slot = idx if 0 <= idx < table.n_symbols else table.escape_slot
        f = int(table.cdf[slot + 1] - table.cdf[slot])
        bits += -math.log2(f / CDF_TOTAL)
        if slot == table.escape_slot:
            bits += 32.0
    return bits


@dataclass(frozen=True)
class BitstreamHeader:
    """Everything the decoder needs besides the model weights."""

    model_id: bytes
    height: int
    width: int
    channels: int
    symbol_ranges: tuple[tuple[int, int], ...]


def pack_bitstream(header: BitstreamHeader, payload: bytes) -> bytes:
    if len(header.model_id) != 8:
        raise DomainError("model id must be 8 bytes")
    if not (1 <= header.height <= 0xFFFF and 1 <= header.width <= 0xFFFF):
        raise DomainError(f"image size {header.height}x{header.width} exceeds u16")
    if not 1 <= header.channels <= 0xFFFF:
        raise DomainError("channel count exceeds u16")
    if len(header.symbol_ranges) != header.channels:
        raise DomainError("one symbol range per channel required")
    parts = [HEADER_MAGIC, struct.pack("<B", BITSTREAM_VERSION), header.model_id,
             struct.pack("<HHH", header.height, header.width, header.channels)]
    for lo, hi in header.symbol_ranges:
        if not (-(2**15) <= lo <= hi < 2**15):
            raise DomainError(f"symbol range [{lo}, {hi}] exceeds i16")
        parts.append(struct.pack("<hh", lo, hi))
    parts.append(struct.pack("<I", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def unpack_bitstream(blob: bytes) -> tuple[BitstreamHeader, bytes]:
    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DecodeError(f"truncated bitstream while reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    pos = 0
    if take(4, "magic") != HEADER_MAGIC:
        raise DecodeError("bad magic; not one of our bitstreams")
    version = take(1, "version")[0]
    if version != BITSTREAM_VERSION:
        raise DecodeError(f"unsupported bitstream version {version}")
    model_id = take(8, "model id")
    height, width, channels = struct.unpack("<HHH", take(6, "dimensions"))
    if height < 1 or width < 1 or channels < 1:
        raise DecodeError("degenerate dimensions in header")
    ranges = []
    for _ in range(channels):
        lo, hi = struct.unpack("<hh", take(4, "symbol ranges"))
        if lo > hi:
            raise DecodeError("inverted symbol range in header")
        ranges.append((lo, hi))
    (payload_len,) = struct.unpack("<I", take(4, "payload length"))
    payload = take(payload_len, "payload")
    if pos != len(blob):
        raise DecodeError(f"{len(blob) - pos} trailing bytes after payload")
    header = BitstreamHeader(model_id, height, width, channels, tuple(ranges))
    return header, payload
