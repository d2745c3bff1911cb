"""Fixed-rate scalar quantization of factor loadings and bit-exact blobs.

The quantizer is uniform over a range fixed per loading kind — ``[-1, 1]``
for PCA, ``[0, 1]`` for NMF — which unit-norm columns guarantee, so no side
information travels with the payload. ``b`` bits give ``2^b - 1`` steps with
both endpoints representable.

Blob layout (little-endian): magic ``QFL1``, u8 kind (0=PCA, 1=NMF), u8 b,
u16 T, u16 k, f32 lo, f32 hi, u16 id length + UTF-8 image id, then
``ceil(T*k*b/8)`` bytes of levels packed column-major, LSB-first within each
byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .factorization import KIND_NMF, KIND_PCA, FactorLoadings

BLOB_MAGIC = b"QFL1"
_KIND_CODE = {KIND_PCA: 0, KIND_NMF: 1}
_CODE_KIND = {0: KIND_PCA, 1: KIND_NMF}
RANGE_SLACK = 1e-9


class CodecError(ValueError):
    """Raised when a quantized-loadings blob cannot be decoded."""


def kind_range(kind: str) -> tuple[float, float]:
    if kind == KIND_PCA:
        return -1.0, 1.0
    if kind == KIND_NMF:
        return 0.0, 1.0
    raise ValueError(f"unknown loadings kind {kind!r}")


@dataclass(frozen=True)
class QuantizedLoadings:
    """Bit-packed uniform quantization of one loading matrix."""

    image_id: str
    kind: str
    T: int
    k: int
    bits: int
    lo: float
    hi: float
    levels: np.ndarray = field(repr=False)  # T x k unsigned levels

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unknown loadings kind {self.kind!r}")
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must lie in 1..16, got {self.bits}")
        if self.T < 1 or self.k < 1:
            raise ValueError(f"empty loadings shape {self.T}x{self.k}")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if (self.lo, self.hi) != kind_range(self.kind):
            raise ValueError(
                f"{self.kind} quantizer range must be {kind_range(self.kind)}, "
                f"got [{self.lo}, {self.hi}]"
            )
        # canonical C layout: summation order in downstream reductions must
        # not depend on whether levels came from quantize() or decode()
        levels = np.array(self.levels, dtype=np.uint32, order="C")
        if levels.shape != (self.T, self.k):
            raise ValueError(f"levels shape {levels.shape} != ({self.T}, {self.k})")
        if levels.size and int(levels.max()) >= (1 << self.bits):
            raise ValueError(f"level {int(levels.max())} does not fit in {self.bits} bits")
        object.__setattr__(self, "levels", levels)
        levels.setflags(write=False)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / ((1 << self.bits) - 1)

    def payload_bytes(self) -> int:
        return (self.T * self.k * self.bits + 7) // 8

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedLoadings):
            return NotImplemented
        return (
            (self.image_id, self.kind, self.T, self.k, self.bits, self.lo, self.hi)
            == (other.image_id, other.kind, other.T, other.k, other.bits, other.lo, other.hi)
            and bool(np.array_equal(self.levels, other.levels))
        )


def quantize(f: FactorLoadings, bits: int) -> QuantizedLoadings:
    """Uniform-quantize a loading matrix at ``bits`` bits per entry.

    Rounds half away from zero; entries may exceed the nominal range by at
    most ``RANGE_SLACK`` (rounding headroom), anything worse is an error.
    """
    lo, hi = kind_range(f.kind)
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in 1..16, got {bits}")
    x = f.columns
    if float(x.min()) < lo - RANGE_SLACK or float(x.max()) > hi + RANGE_SLACK:
        raise ValueError(
            f"{f.kind} loading entries outside [{lo}, {hi}]: "
            f"range [{float(x.min())}, {float(x.max())}]"
        )
    step = (hi - lo) / ((1 << bits) - 1)
    # (x - lo) / step is non-negative, so half-away-from-zero == floor(v + 0.5)
    levels = np.floor((np.clip(x, lo, hi) - lo) / step + 0.5).astype(np.uint32)
    levels = np.minimum(levels, (1 << bits) - 1)
    return QuantizedLoadings(
        image_id=f.image_id, kind=f.kind, T=f.T, k=f.k,
        bits=bits, lo=lo, hi=hi, levels=levels,
    )


def lattice_values(q: QuantizedLoadings) -> np.ndarray:
    """Raw reconstruction ``lo + level * step`` (no renormalization)."""
    return q.lo + q.levels.astype(np.float64) * q.step


def dequantize(q: QuantizedLoadings, renormalize: bool = True) -> FactorLoadings:
    """Reconstruct loadings from levels.

    By default columns are rescaled back to unit norm (downstream metrics
    assume it). An all-zero column (possible for coarse NMF quantization)
    has no norm to restore and is left as zeros; the matcher flags it when
    the loadings are actually used. With ``renormalize=False`` the exact
    lattice values are returned, for which ``quantize`` is the exact inverse.
    """
    x = lattice_values(q)
    if renormalize:
        norms = np.linalg.norm(x, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        x = x / safe
    return FactorLoadings(image_id=q.image_id, kind=q.kind, columns=x)


def encode(q: QuantizedLoadings) -> bytes:
    """Serialize to the QFL1 blob format (bit-exact inverse of :func:`decode`)."""
    image_id = q.image_id.encode("utf-8")
    if len(image_id) > 0xFFFF:
        raise ValueError("image id too long to encode")
    header = BLOB_MAGIC + struct.pack(
        "<BBHHffH",
        _KIND_CODE[q.kind], q.bits, q.T, q.k, q.lo, q.hi, len(image_id),
    ) + image_id
    # column-major level stream, each level contributing `bits` bits LSB-first
    flat = q.levels.flatten(order="F").astype(np.uint32)
    bit_matrix = ((flat[:, None] >> np.arange(q.bits)) & 1).astype(np.uint8)
    packed = np.packbits(bit_matrix.ravel(), bitorder="little")
    return header + packed.tobytes()


def decode(data: bytes) -> QuantizedLoadings:
    """Parse a QFL1 blob back into :class:`QuantizedLoadings`."""
    if len(data) < 4 or data[:4] != BLOB_MAGIC:
        raise CodecError(f"bad magic {data[:4]!r}, expected {BLOB_MAGIC!r}")
    header_fmt = "<BBHHffH"
    header_end = 4 + struct.calcsize(header_fmt)
    if len(data) < header_end:
        raise CodecError("truncated blob header")
    kind_code, bits, T, k, lo, hi, id_len = struct.unpack(
        header_fmt, data[4:header_end]
    )
    if kind_code not in _CODE_KIND:
        raise CodecError(f"unknown kind code {kind_code}")
    if not 1 <= bits <= 16:
        raise CodecError(f"bits out of range: {bits}")
    if T < 1 or k < 1:
        raise CodecError(f"invalid shape {T}x{k}")
    id_end = header_end + id_len
    body_len = (T * k * bits + 7) // 8
    if len(data) < id_end + body_len:
        raise CodecError(
            f"truncated blob: need {id_end + body_len} bytes, have {len(data)}"
        )
    image_id = data[header_end:id_end].decode("utf-8")
    body = np.frombuffer(data[id_end:id_end + body_len], dtype=np.uint8)
    bit_stream = np.unpackbits(body, bitorder="little")[: T * k * bits]
    bit_matrix = bit_stream.reshape(T * k, bits).astype(np.uint32)
    flat = (bit_matrix << np.arange(bits, dtype=np.uint32)).sum(axis=1, dtype=np.uint32)
    levels = flat.reshape((T, k), order="F")
    return QuantizedLoadings(
        image_id=image_id, kind=_CODE_KIND[kind_code], T=T, k=k,
        bits=bits, lo=float(lo), hi=float(hi), levels=levels,
    )


def blob_header_bytes(image_id: str) -> int:
    """Size of everything before the packed levels in a QFL1 blob."""
    return 4 + struct.calcsize("<BBHHffH") + len(image_id.encode("utf-8"))
