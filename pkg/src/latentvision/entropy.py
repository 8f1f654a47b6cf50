"""Entropy coding of quantized latents and the ``.lvc`` container.

The range coder is a carry-less (Subbotin-style) coder with a 32-bit state and
16-bit probability precision.  Every coded segment ends with a fixed 16-bit
end marker so that corrupted or truncated payloads are detected on decode
instead of silently producing wrong symbols.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import BitstreamError, ConfigError, DecodeError, EncodeError

PRECISION = 16
TOTAL = 1 << PRECISION
SCALE_MIN = 0.11
TAIL_MULTIPLE = 12

_MASK = (1 << 32) - 1
_TOP = 1 << 24
_BOT = 1 << 16
_END_MARKER = 0xA5C3

MAGIC = b"LVC1"
VERSION = 1
_HEADER = struct.Struct("<4sBBHHI")


@dataclass(frozen=True)
class PmfTable:
    """Quantized pmf over the integer range ``[support_min, support_max]``.

    ``freqs`` sum to exactly ``TOTAL`` and every entry is at least 1, so any
    in-support symbol is decodable.  ``probabilities`` keeps the real-valued
    pmf the frequencies were derived from, when known.
    """

    support_min: int
    support_max: int
    freqs: tuple[int, ...]
    probabilities: tuple[float, ...] | None = None

    def __post_init__(self):
        n = self.support_max - self.support_min + 1
        if n != len(self.freqs):
            raise ValueError("support size does not match frequency count")
        if min(self.freqs) < 1 or sum(self.freqs) != TOTAL:
            raise ValueError(f"frequencies must be >= 1 and sum to {TOTAL}")
        cdf = [0]
        for f in self.freqs:
            cdf.append(cdf[-1] + f)
        object.__setattr__(self, "_cdf", tuple(cdf))

    @property
    def total(self) -> int:
        return TOTAL

    @property
    def cdf(self) -> tuple[int, ...]:
        return self._cdf

    def __len__(self) -> int:
        return len(self.freqs)

    def bits(self, symbol: int) -> float:
        return -math.log2(self.freqs[symbol - self.support_min] / TOTAL)

    @classmethod
    def from_probabilities(cls, support_min: int, probs: np.ndarray) -> "PmfTable":
        probs = np.asarray(probs, dtype=np.float64)
        freqs = quantize_probabilities(probs[None, :], np.array([len(probs)]))[0]
        return cls(
            support_min,
            support_min + len(probs) - 1,
            tuple(int(f) for f in freqs),
            tuple(float(p) for p in probs),
        )


def quantize_probabilities(probs: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Row-wise quantization of pmfs to integer frequencies summing to TOTAL.

    Row ``i`` uses its first ``sizes[i]`` columns; the rest must be zero and
    stay zero.  Each used entry receives ``floor(p * (TOTAL - n)) + 1`` and the
    leftover counts go to the entries with the largest fractional parts
    (ties broken by lower column index).
    """
    probs = np.asarray(probs, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.int64)
    rows, cols = probs.shape
    if np.any(sizes > TOTAL) or np.any(sizes < 1):
        raise ConfigError(f"pmf support size must lie in [1, {TOTAL}]")
    used = np.arange(cols)[None, :] < sizes[:, None]
    p = np.where(used, probs, 0.0)
    p = p / p.sum(axis=1, keepdims=True)
    scaled = p * (TOTAL - sizes)[:, None]
    base = np.floor(scaled)
    frac = np.where(used, scaled - base, -1.0)
    freqs = np.where(used, base.astype(np.int64) + 1, 0)
    remainder = TOTAL - freqs.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(cols)[None, :].repeat(rows, 0), axis=1)
    freqs += (rank < remainder[:, None]) & used
    return freqs


def gaussian_support(scales: np.ndarray) -> np.ndarray:
    """Half-width ``ceil(12 * scale)`` of the truncated Gaussian support."""
    return np.ceil(TAIL_MULTIPLE * np.asarray(scales, dtype=np.float64)).astype(np.int64)


def _gaussian_probabilities(scales: np.ndarray, half: np.ndarray) -> np.ndarray:
    width = int(2 * half.max() + 1)
    k = np.arange(width)[None, :] - half[:, None]
    a = np.abs(k).astype(np.float64)
    s = scales[:, None]
    probs = ndtr((0.5 - a) / s) - ndtr((-0.5 - a) / s)
    return np.where(np.arange(width)[None, :] < (2 * half + 1)[:, None], probs, 0.0)


def _check_scales(scales: np.ndarray) -> np.ndarray:
    scales = np.asarray(scales, dtype=np.float64)
    if scales.size and not np.all(np.isfinite(scales)):
        raise ConfigError("scales must be finite")
    # float32 scales clamped to the floor land a hair below 0.11 in float64
    if scales.size and scales.min() < float(np.float32(SCALE_MIN)):
        raise ConfigError(f"scale {scales.min()} below minimum {SCALE_MIN}")
    if scales.size and 2 * gaussian_support(scales).max() + 1 > TOTAL:
        raise ConfigError(f"scale {scales.max()} too large for {PRECISION}-bit tables")
    return scales


@lru_cache(maxsize=4096)
def gaussian_pmf(scale: float) -> PmfTable:
    """Quantized zero-mean Gaussian pmf with standard deviation ``scale``."""
    scales = _check_scales(np.array([float(scale)]))
    half = gaussian_support(scales)
    probs = _gaussian_probabilities(scales, half)[0]
    return PmfTable.from_probabilities(-int(half[0]), probs)


class GaussianTables:
    """Frequency tables for a batch of scales, for vectorized symbol lookup.

    Row ``i`` is bit-identical to ``gaussian_pmf(scales[i]).freqs``.
    """

    def __init__(self, scales: np.ndarray):
        scales = _check_scales(np.asarray(scales, dtype=np.float64).ravel())
        self.half = gaussian_support(scales)
        if scales.size == 0:
            self.cdf = np.zeros((0, 2), dtype=np.int64)
            return
        probs = _gaussian_probabilities(scales, self.half)
        freqs = quantize_probabilities(probs, 2 * self.half + 1)
        self.cdf = np.concatenate(
            [np.zeros((len(scales), 1), dtype=np.int64), np.cumsum(freqs, axis=1)], axis=1
        )

    def __len__(self) -> int:
        return len(self.half)

    def lookup(self, symbols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (cumulative, frequency) arrays for ``symbols``; raise if any is out of support."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        if symbols.shape[0] != len(self):
            raise EncodeError("symbol count does not match table count")
        bad = np.abs(symbols) > self.half
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise EncodeError(
                f"symbol {symbols[i]} at position {i} outside support "
                f"[-{self.half[i]}, {self.half[i]}]"
            )
        idx = symbols + self.half
        rows = np.arange(len(symbols))
        low = self.cdf[rows, idx]
        return low, self.cdf[rows, idx + 1] - low


class RangeEncoder:
    """Single-use carry-less range encoder; call :meth:`finish` exactly once."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()
        self._done = False

    def encode(self, cum: int, freq: int) -> None:
        r = self._range // TOTAL
        low = self._low + cum * r
        rng = r * freq
        out = self._out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            out.append(low >> 24)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        if self._done:
            raise RuntimeError("encoder already finished")
        self.encode(_END_MARKER, 1)
        self._done = True
        low, rng = self._low, self._range
        # shortest byte string whose zero-extension lies in [low, low + range)
        for k in range(5):
            unit = 1 << (32 - 8 * k)
            v = -(-low // unit) * unit
            if v < low + rng and v <= _MASK:
                self._out.extend(v.to_bytes(4, "big")[:k])
                break
        return bytes(self._out)


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; reads past the end as zero bytes."""

    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0
        self._low = 0
        self._range = _MASK
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 8) | self._next()

    def _next(self) -> int:
        pos = self._pos
        self._pos += 1
        return self._data[pos] if pos < len(self._data) else 0

    def target(self) -> int:
        self._r = self._range // TOTAL
        value = ((self._code - self._low) & _MASK) // self._r
        if value >= TOTAL:
            raise DecodeError("corrupt stream: decoder state out of range")
        return value

    def advance(self, cum: int, freq: int) -> None:
        low = self._low + cum * self._r
        rng = self._r * freq
        code = self._code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._next()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self._low, self._range, self._code = low, rng, code

    def finish(self) -> None:
        if self.target() != _END_MARKER:
            raise DecodeError("corrupt stream: end marker mismatch")
        self.advance(_END_MARKER, 1)
        emitted = self._pos - 4
        if not emitted <= len(self._data) <= emitted + 4:
            raise DecodeError(
                f"corrupt stream: {len(self._data)} bytes present, coder consumed {emitted}"
            )


def range_encode(symbols: Iterable[int], pmfs: Sequence[PmfTable]) -> bytes:
    symbols = list(symbols)
    if len(symbols) != len(pmfs):
        raise EncodeError("need exactly one pmf per symbol")
    enc = RangeEncoder()
    for s, pmf in zip(symbols, pmfs):
        i = s - pmf.support_min
        if not 0 <= i < len(pmf.freqs):
            raise EncodeError(f"symbol {s} outside support [{pmf.support_min}, {pmf.support_max}]")
        enc.encode(pmf.cdf[i], pmf.freqs[i])
    return enc.finish()


def range_decode(data: bytes, pmfs: Sequence[PmfTable], count: int) -> list[int]:
    if count > len(pmfs):
        raise DecodeError("fewer pmfs than symbols requested")
    dec = RangeDecoder(data)
    out = []
    for pmf in pmfs[:count]:
        cdf = pmf.cdf
        i = bisect.bisect_right(cdf, dec.target()) - 1
        dec.advance(cdf[i], pmf.freqs[i])
        out.append(pmf.support_min + i)
    dec.finish()
    return out


def encode_gaussian(symbols: np.ndarray, scales: np.ndarray) -> bytes:
    """Encode integer latents under zero-mean Gaussian pmfs, one scale per element."""
    symbols = np.asarray(symbols).ravel()
    if symbols.size != np.asarray(scales).size:
        raise EncodeError("symbols and scales must have the same number of elements")
    cum, freq = GaussianTables(scales).lookup(symbols)
    enc = RangeEncoder()
    for c, f in zip(cum.tolist(), freq.tolist()):
        enc.encode(c, f)
    return enc.finish()


def decode_gaussian(data: bytes, scales: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_gaussian`; output has the shape of ``scales``."""
    scales = np.asarray(scales)
    tables = GaussianTables(scales)
    dec = RangeDecoder(data)
    out = np.empty(len(tables), dtype=np.int64)
    for i in range(len(tables)):
        row = tables.cdf[i]
        j = int(np.searchsorted(row, dec.target(), side="right")) - 1
        dec.advance(int(row[j]), int(row[j + 1] - row[j]))
        out[i] = j - tables.half[i]
    dec.finish()
    return out.reshape(scales.shape)


def _channel_tables(model) -> Sequence[PmfTable]:
    return model.prior_tables() if hasattr(model, "prior_tables") else model


def encode_factorized(z_hat: np.ndarray, model) -> bytes:
    """Encode a ``[N, h, w]`` hyper-latent with one pmf table per channel."""
    z_hat = np.asarray(z_hat)
    tables = _channel_tables(model)
    if z_hat.ndim != 3 or z_hat.shape[0] != len(tables):
        raise EncodeError(f"expected [{len(tables)}, h, w] hyper-latent, got {z_hat.shape}")
    enc = RangeEncoder()
    for c, pmf in enumerate(tables):
        cdf, freqs, lo = pmf.cdf, pmf.freqs, pmf.support_min
        for s in z_hat[c].ravel().tolist():
            i = int(s) - lo
            if not 0 <= i < len(freqs):
                raise EncodeError(
                    f"hyper-latent symbol {s} outside channel {c} support "
                    f"[{pmf.support_min}, {pmf.support_max}]"
                )
            enc.encode(cdf[i], freqs[i])
    return enc.finish()


def decode_factorized(data: bytes, model, shape: tuple[int, int, int]) -> np.ndarray:
    tables = _channel_tables(model)
    if shape[0] != len(tables):
        raise ConfigError(f"shape {shape} does not match {len(tables)} prior channels")
    dec = RangeDecoder(data)
    out = np.empty(shape, dtype=np.int64)
    per_channel = shape[1] * shape[2]
    for c, pmf in enumerate(tables):
        cdf = pmf.cdf
        flat = out[c].reshape(-1)
        for i in range(per_channel):
            j = bisect.bisect_right(cdf, dec.target()) - 1
            dec.advance(cdf[j], pmf.freqs[j])
            flat[i] = pmf.support_min + j
    dec.finish()
    return out


@dataclass(frozen=True)
class Bitstream:
    quality_index: int
    image_h: int
    image_w: int
    z_bytes: bytes
    y_bytes: bytes
    version: int = VERSION

    @property
    def z_len(self) -> int:
        return len(self.z_bytes)

    @property
    def y_len(self) -> int:
        return len(self.y_bytes)

    def to_bytes(self) -> bytes:
        return serialize(self.quality_index, self.image_h, self.image_w, self.z_bytes, self.y_bytes)

    def bpp(self) -> float:
        return 8 * len(self.to_bytes()) / (self.image_h * self.image_w)


def serialize(quality_index: int, image_h: int, image_w: int, z_bytes: bytes, y_bytes: bytes) -> bytes:
    if not (0 <= quality_index < 256 and 0 < image_h < 65536 and 0 < image_w < 65536):
        raise ConfigError("header field out of range")
    head = _HEADER.pack(MAGIC, VERSION, quality_index, image_h, image_w, len(z_bytes))
    return b"".join([head, z_bytes, struct.pack("<I", len(y_bytes)), y_bytes])


def parse(data: bytes) -> Bitstream:
    data = bytes(data)
    if data[:4] != MAGIC:
        raise BitstreamError("not a latentvision stream")
    if len(data) < _HEADER.size:
        raise BitstreamError("truncated stream")
    _, version, quality, h, w, z_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    pos = _HEADER.size
    if pos + z_len + 4 > len(data):
        raise BitstreamError("truncated stream")
    z_bytes = data[pos:pos + z_len]
    pos += z_len
    (y_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + y_len != len(data):
        raise BitstreamError("truncated stream")
    return Bitstream(quality, h, w, z_bytes, data[pos:], version)


def partial_decode(data: bytes, codec):
    """Recover the classifier inputs (y_hat, sigma_hat) without pixel synthesis.

    Decodes the hyper-latent, runs the hyper-synthesis transform to obtain the
    scales, then decodes y_hat under the scale-conditioned Gaussian pmfs.
    """
    from .codec import LatentCode

    stream = parse(data)
    q = codec.config
    if stream.quality_index != q.quality_index:
        raise ConfigError(
            f"stream quality {stream.quality_index} does not match codec quality {q.quality_index}"
        )
    if stream.image_h % 64 or stream.image_w % 64:
        raise BitstreamError("image dimensions in header are not multiples of 64")
    z_shape = (q.hyper_channels, stream.image_h // 64, stream.image_w // 64)
    z_hat = decode_factorized(stream.z_bytes, codec, z_shape)
    sigma = codec.scales_from_hyper(z_hat)
    y_hat = decode_gaussian(stream.y_bytes, sigma.astype(np.float64))
    return LatentCode(y_hat.astype(np.int64), sigma, q.quality_index)
