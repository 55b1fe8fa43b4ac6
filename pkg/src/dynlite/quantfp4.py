"""4-bit group quantization: E0M4 floating point and an INT4 affine baseline.

E0M4 maps every group into the binade [2^n, 2^(n+1)) with an affine transform,
so all reconstructed halves share sign and exponent. Only the top four
fraction bits are stored; dequantization rebuilds the half with one shift and
one OR, then undoes the affine transform.

binary16 conversion is done bit-by-bit here rather than through numpy so that
the rounding rule is explicit and testable on its own.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from dynlite.errors import (
    BadMagic,
    NonFinite,
    OddPackingError,
    QuantError,
    SchemeUnsupported,
    TruncatedStream,
)

SCHEMES = ("e0m4", "int4")
FRACTION_BITS = 10
CODE_BITS = 4
CODE_SHIFT = FRACTION_BITS - CODE_BITS  # 6
CODE_MAX = (1 << CODE_BITS) - 1


# -- binary16 ---------------------------------------------------------------------------------


def float_to_half_bits(x) -> np.ndarray:
    """Narrow float32 values to binary16 bit patterns, round-to-nearest-even."""
    f = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    b = f.view(np.uint32).astype(np.uint64)
    sign = (b >> 16) & 0x8000
    exp = ((b >> 23) & 0xFF).astype(np.int64)
    mant = b & 0x7FFFFF

    out = np.zeros(b.shape, dtype=np.uint64)

    # normal halves; the rounding carry may legitimately ripple into the exponent
    e = exp - 127
    he = np.clip(e + 15, 0, 31).astype(np.uint64)
    val = (he << 10) | (mant >> 13)
    rem = mant & 0x1FFF
    up = (rem > 0x1000) | ((rem == 0x1000) & ((val & 1) == 1))
    normal = val + up
    out = np.where((e >= -14) & (e <= 15), normal, out)

    # subnormal halves: value = hm * 2^-24
    full = mant | 0x800000
    shift = np.clip(-e - 1, 14, 25).astype(np.uint64)
    hm = full >> shift
    rem = full & ((np.uint64(1) << shift) - np.uint64(1))
    half = np.uint64(1) << (shift - np.uint64(1))
    up = (rem > half) | ((rem == half) & ((hm & 1) == 1))
    sub = hm + up
    out = np.where((e < -14) & (exp > 0), sub, out)

    out = np.where((e > 15) & (exp < 255), 0x7C00, out)  # overflow
    nan_mant = mant >> 13
    nan_mant = np.where(nan_mant == 0, 0x200, nan_mant)
    out = np.where(exp == 255, np.where(mant == 0, 0x7C00, 0x7C00 | nan_mant), out)
    return (out | sign).astype(np.uint16)


def half_bits_to_float(h) -> np.ndarray:
    """Widen binary16 bit patterns to float32 (exact)."""
    h = np.asarray(h, dtype=np.uint16).astype(np.uint32)
    sign = (h & 0x8000) << 16
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    normal = sign | ((exp + 112) << 23) | (mant << 13)
    special = sign | 0x7F800000 | (mant << 13)
    bits = np.where(exp == 31, special, normal)
    bits = np.where(exp == 0, sign, bits)  # zero; subnormals patched below
    out = bits.astype(np.uint32).view(np.float32).copy()
    subnormal = (exp == 0) & (mant != 0)
    if np.any(subnormal):
        mag = mant.astype(np.float32) * np.float32(2.0 ** -24)
        out = np.where(subnormal, np.where(sign != 0, -mag, mag), out).astype(np.float32)
    return out


@dataclass(frozen=True)
class Half:
    bits: int

    @classmethod
    def from_float(cls, x) -> "Half":
        return cls(int(float_to_half_bits(np.float32(x)).reshape(-1)[0]))

    def to_float(self) -> float:
        return float(half_bits_to_float(np.uint16(self.bits)))

    @property
    def sign(self):
        return self.bits >> 15

    @property
    def exponent(self):
        return (self.bits >> 10) & 0x1F

    @property
    def fraction(self):
        return self.bits & 0x3FF

    def __repr__(self):
        return f"Half(0x{self.bits:04X})"


def f32_to_f16(x) -> Half:
    return Half.from_float(x)


def f16_to_f32(h) -> float:
    return (h if isinstance(h, Half) else Half(int(h))).to_float()


# -- E0M4 --------------------------------------------------------------------------------------


def e0m4_range(n: int):
    """(low, high, eps) of the target binade; eps is one binary16 ULP there."""
    eps = 2.0 ** (n - FRACTION_BITS)
    return 2.0 ** n, 2.0 ** (n + 1) - eps, eps


def e0m4_half_bits(codes, n: int) -> np.ndarray:
    """The dequant bit trick: shared exponent OR'd with the shifted code."""
    exp_part = np.uint16((n + 15) << FRACTION_BITS)
    return exp_part | (np.asarray(codes).astype(np.uint16) << np.uint16(CODE_SHIFT))


def _check_n(n):
    if n not in (1, 2):
        raise QuantError(f"n must be 1 or 2, got {n}")


def _check_finite(w):
    if not np.all(np.isfinite(w)):
        raise NonFinite("weights contain NaN or infinity")


def e0m4_encode(w0, scale, bias_bits, n: int) -> np.ndarray:
    """Codes for w0 under given group parameters (broadcast along the last axis)."""
    lo, hi, _ = e0m4_range(n)
    b = half_bits_to_float(bias_bits)[..., None]
    w1 = np.asarray(w0, dtype=np.float32) * np.asarray(scale, dtype=np.float32)[..., None] + b
    w1 = np.clip(w1, np.float32(lo), np.float32(hi))
    f = float_to_half_bits(w1) & 0x3FF
    y1 = f >> CODE_SHIFT
    y2 = (f >> (CODE_SHIFT - 1)) & 1
    return np.minimum(y1 + y2, CODE_MAX).astype(np.uint8)


def _e0m4_params(w0: np.ndarray, n: int):
    """Per-group (scale, bias_bits) for groups along the last axis."""
    lo, hi, _ = e0m4_range(n)
    m = w0.min(axis=-1)
    M = w0.max(axis=-1)
    flat = M == m
    span = np.where(flat, np.float32(1), M - m)
    scale = np.where(flat, np.float32(1), np.float32(hi - lo) / span).astype(np.float32)
    bias = (np.float32(lo) - m * scale).astype(np.float32)
    bias_bits = float_to_half_bits(bias)
    straddles = (m <= 0) & (M >= 0)
    bias_bits = np.where(straddles, bias_bits & np.uint16(0xFFC0), bias_bits).astype(np.uint16)
    return scale, bias_bits


def _quantize_e0m4_groups(w0: np.ndarray, n: int):
    scale, bias_bits = _e0m4_params(w0, n)
    codes = e0m4_encode(w0, scale, bias_bits, n)
    flat = w0.max(axis=-1) == w0.min(axis=-1)
    codes = np.where(flat[..., None], np.uint8(0), codes).astype(np.uint8)
    return codes, scale, bias_bits


def _dequantize_e0m4_groups(codes, scale, bias_bits, n):
    w1 = e0m4_half_bits(codes, n).view(np.float16).astype(np.float32)
    b = half_bits_to_float(bias_bits)[..., None]
    return ((w1 - b) / np.asarray(scale, dtype=np.float32)[..., None]).astype(np.float32)


@dataclass
class QuantGroupE0M4:
    codes: np.ndarray  # uint8, one code per element
    scale: np.float32
    bias: Half
    n: int

    @property
    def group_size(self):
        return len(self.codes)

    def packed(self) -> bytes:
        return pack_codes(self.codes).tobytes()


def quantize_e0m4(w0, n: int = 1) -> QuantGroupE0M4:
    _check_n(n)
    w0 = np.asarray(w0, dtype=np.float32).reshape(-1)
    if w0.size == 0:
        raise QuantError("empty group")
    _check_finite(w0)
    codes, scale, bias_bits = _quantize_e0m4_groups(w0, n)
    return QuantGroupE0M4(codes.reshape(-1), np.float32(np.reshape(scale, -1)[0]), Half(int(np.reshape(bias_bits, -1)[0])), n)


def dequantize_e0m4(g: QuantGroupE0M4) -> np.ndarray:
    return _dequantize_e0m4_groups(g.codes, np.float32(g.scale), np.uint16(g.bias.bits), g.n).reshape(-1)


# -- INT4 ---------------------------------------------------------------------------------------


def _quantize_int4_groups(w0: np.ndarray):
    m = w0.min(axis=-1)
    M = w0.max(axis=-1)
    step = np.where(M == m, np.float32(1), (M - m) / np.float32(CODE_MAX)).astype(np.float32)
    q = np.rint((w0 - m[..., None]) / step[..., None])
    return np.clip(q, 0, CODE_MAX).astype(np.uint8), m.astype(np.float32), step


def _dequantize_int4_groups(codes, mins, steps):
    mins = np.asarray(mins, dtype=np.float32)[..., None]
    steps = np.asarray(steps, dtype=np.float32)[..., None]
    return (mins + codes.astype(np.float32) * steps).astype(np.float32)


@dataclass
class QuantGroupINT4:
    codes: np.ndarray
    min: np.float32
    step: np.float32

    @property
    def group_size(self):
        return len(self.codes)


def quantize_int4(w0) -> QuantGroupINT4:
    w0 = np.asarray(w0, dtype=np.float32).reshape(-1)
    if w0.size == 0:
        raise QuantError("empty group")
    _check_finite(w0)
    codes, m, step = _quantize_int4_groups(w0)
    return QuantGroupINT4(codes.reshape(-1), np.float32(m), np.float32(step))


def dequantize_int4(g: QuantGroupINT4) -> np.ndarray:
    return _dequantize_int4_groups(g.codes, np.float32(g.min), np.float32(g.step)).reshape(-1)


# -- whole weights --------------------------------------------------------------------------------


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Two codes per byte along the last axis, low nibble first; odd tails pad with 0."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.shape[-1] % 2:
        pad = [(0, 0)] * (codes.ndim - 1) + [(0, 1)]
        codes = np.pad(codes, pad)
    return (codes[..., 0::2] & 0xF) | ((codes[..., 1::2] & 0xF) << 4)


def unpack_codes(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.shape[:-1] + (packed.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = packed & 0xF
    out[..., 1::2] = packed >> 4
    return out[..., :count]


@dataclass
class QuantizedWeight:
    """A [K, N] weight quantized in groups of ``group_size`` along K.

    ``packed`` has shape [groups, N, ceil(group_size/2)]. When K is not a
    multiple of group_size the final group is shorter and its tail nibbles
    are zero padding.
    """

    scheme: str
    shape: tuple
    group_size: int
    n: int
    packed: np.ndarray
    p0: np.ndarray  # e0m4: scale f32; int4: min f32
    p1: np.ndarray  # e0m4: bias bits u16; int4: step f32

    @property
    def K(self):
        return self.shape[0]

    @property
    def N(self):
        return self.shape[1]

    @property
    def num_groups(self):
        return -(-self.K // self.group_size)

    def group_len(self, kg: int) -> int:
        return min(self.group_size, self.K - kg * self.group_size)

    @property
    def short_tail(self) -> int:
        """Length of the final group when it is short, else 0."""
        rem = self.K % self.group_size
        return rem

    def codes(self, kg: int) -> np.ndarray:
        """Unpacked codes of group row ``kg`` as [N, len]."""
        return unpack_codes(self.packed[kg], self.group_len(kg))

    def dequantize_block(self, kg: int) -> np.ndarray:
        """Dequantized rows [kg*gs, kg*gs+len) as an F32 [len, N] block."""
        codes = self.codes(kg)
        if self.scheme == "e0m4":
            vals = _dequantize_e0m4_groups(codes, self.p0[kg], self.p1[kg], self.n)
        else:
            vals = _dequantize_int4_groups(codes, self.p0[kg], self.p1[kg])
        return np.ascontiguousarray(vals.T)

    def dequantize(self) -> np.ndarray:
        return np.concatenate([self.dequantize_block(kg) for kg in range(self.num_groups)], axis=0)

    def nbytes(self) -> int:
        return self.packed.nbytes + self.p0.nbytes + self.p1.nbytes

    def __eq__(self, other):
        if not isinstance(other, QuantizedWeight):
            return NotImplemented
        return (
            (self.scheme, tuple(self.shape), self.group_size, self.n)
            == (other.scheme, tuple(other.shape), other.group_size, other.n)
            and np.array_equal(self.packed, other.packed)
            and np.array_equal(self.p0.view(np.uint8), other.p0.view(np.uint8))
            and np.array_equal(self.p1.view(np.uint8), other.p1.view(np.uint8))
        )


def _quantize_block(block: np.ndarray, scheme: str, n: int):
    # block: [N, len] groups along the last axis
    if scheme == "e0m4":
        return _quantize_e0m4_groups(block, n)
    return _quantize_int4_groups(block)


def quantize_weight(w, scheme: str = "e0m4", group_size: int = 128, n: int = 1) -> QuantizedWeight:
    if scheme not in SCHEMES:
        raise SchemeUnsupported(f"unknown scheme {scheme!r}")
    if scheme == "e0m4":
        _check_n(n)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise QuantError(f"expected a 2-D [K, N] weight, got shape {w.shape}")
    if group_size < 2 or group_size % 2:
        raise OddPackingError(f"group_size must be even and >= 2, got {group_size}")
    if w.size == 0:
        raise QuantError("empty weight")
    _check_finite(w)
    K, N = w.shape
    full = K // group_size
    nbytes = group_size // 2
    groups = -(-K // group_size)
    packed = np.zeros((groups, N, nbytes), dtype=np.uint8)
    p0 = np.empty((groups, N), dtype=np.float32)
    p1 = np.empty((groups, N), dtype=np.uint16 if scheme == "e0m4" else np.float32)
    if full:
        blocks = w[: full * group_size].reshape(full, group_size, N).transpose(0, 2, 1)
        codes, a, b = _quantize_block(blocks, scheme, n)
        packed[:full] = pack_codes(codes)
        p0[:full], p1[:full] = a, b
    if groups > full:
        tail = np.ascontiguousarray(w[full * group_size:].T)
        codes, a, b = _quantize_block(tail, scheme, n)
        pc = pack_codes(codes)
        packed[full, :, : pc.shape[-1]] = pc
        p0[full], p1[full] = a, b
    return QuantizedWeight(scheme, (K, N), group_size, n, packed, p0, p1)


def dequantize_weight(qw: QuantizedWeight) -> np.ndarray:
    return qw.dequantize()


# -- file format ------------------------------------------------------------------------------------

QUANT_MAGIC = b"LGQ1"
_HEADER = struct.Struct("<BBHII")
_SCHEME_CODE = {"e0m4": 0, "int4": 1}


def _record_dtype(scheme, nb):
    if scheme == "e0m4":
        return np.dtype([("codes", "u1", (nb,)), ("p0", "<f4"), ("p1", "<u2")])
    return np.dtype([("codes", "u1", (nb,)), ("p0", "<f4"), ("p1", "<f4")])


def pack_weight(qw: QuantizedWeight) -> bytes:
    K, N = qw.shape
    parts = [QUANT_MAGIC, _HEADER.pack(_SCHEME_CODE[qw.scheme], qw.n, qw.group_size, K, N)]
    for kg in range(qw.num_groups):
        nb = -(-qw.group_len(kg) // 2)
        rec = np.zeros(N, dtype=_record_dtype(qw.scheme, nb))
        rec["codes"] = qw.packed[kg, :, :nb]
        rec["p0"] = qw.p0[kg]
        rec["p1"] = qw.p1[kg]
        parts.append(rec.tobytes())
    return b"".join(parts)


def unpack_weight(data: bytes) -> QuantizedWeight:
    data = bytes(data)
    if data[:4] != QUANT_MAGIC:
        raise BadMagic(f"expected {QUANT_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 4 + _HEADER.size:
        raise TruncatedStream("header cut short")
    code, n, group_size, K, N = _HEADER.unpack_from(data, 4)
    schemes = {v: k for k, v in _SCHEME_CODE.items()}
    if code not in schemes:
        raise SchemeUnsupported(f"unknown scheme code {code}")
    scheme = schemes[code]
    if group_size < 2 or group_size % 2:
        raise OddPackingError(f"group_size {group_size} cannot be nibble-packed")
    if K < 1 or N < 1:
        raise QuantError(f"bad weight shape [{K}, {N}]")
    groups = -(-K // group_size)
    packed = np.zeros((groups, N, group_size // 2), dtype=np.uint8)
    p0 = np.empty((groups, N), dtype=np.float32)
    p1 = np.empty((groups, N), dtype=np.uint16 if scheme == "e0m4" else np.float32)
    pos = 4 + _HEADER.size
    for kg in range(groups):
        nb = -(-min(group_size, K - kg * group_size) // 2)
        dt = _record_dtype(scheme, nb)
        need = dt.itemsize * N
        if pos + need > len(data):
            raise TruncatedStream(f"group {kg} needs {need} bytes, {len(data) - pos} left")
        rec = np.frombuffer(data, dtype=dt, count=N, offset=pos)
        packed[kg, :, :nb] = rec["codes"]
        p0[kg] = rec["p0"]
        p1[kg] = rec["p1"]
        pos += need
    if pos != len(data):
        raise QuantError(f"{len(data) - pos} trailing bytes after the last group")
    return QuantizedWeight(scheme, (K, N), group_size, n, packed, p0, p1)


# -- error comparison ------------------------------------------------------------------------------


@dataclass
class MaeReport:
    mae_fp4: float
    mae_int4: float
    ratio: float | None
    short_tail: int = 0

    def to_json(self):
        out = {"mae_fp4": self.mae_fp4, "mae_int4": self.mae_int4}
        if self.ratio is not None:
            out["ratio"] = self.ratio
        if self.short_tail:
            out["short_group"] = self.short_tail
        return out


def mae_compare(w, group_size: int = 128, n: int = 1) -> MaeReport:
    w = np.asarray(w, dtype=np.float32)
    fp4 = quantize_weight(w, "e0m4", group_size, n)
    int4 = quantize_weight(w, "int4", group_size, n)
    mae_fp4 = float(np.mean(np.abs(fp4.dequantize().astype(np.float64) - w)))
    mae_int4 = float(np.mean(np.abs(int4.dequantize().astype(np.float64) - w)))
    ratio = mae_fp4 / mae_int4 if mae_int4 > 0 else None
    return MaeReport(mae_fp4, mae_int4, ratio, fp4.short_tail)


def mean_ratio(reports) -> float:
    ratios = [r.ratio for r in reports if r.ratio is not None]
    return math.fsum(ratios) / len(ratios) if ratios else float("nan")
