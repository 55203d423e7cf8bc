"""Dense tensor container and the quantization primitives everything else uses.

Conventions fixed here and relied on by the rest of the toolkit:

* rounding is half-away-from-zero (``round_half_away``), so +/-0.5 steps
  always move outward and the int8 range stays symmetric;
* int8 codes are clamped to [-127, 127], never -128;
* int8 dot products accumulate in 32-bit signed integers and overflow is a
  checked error;
* norm checks use epsilon 1e-12 on the double-precision reference path.

The on-disk tensor format ("TVT1") stores f32 little-endian or i8 payloads
bit-exactly and ends with a CRC32 so any single corrupted byte is caught.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    AccumulatorOverflow,
    AllZeroVector,
    BadMagic,
    ChecksumMismatch,
    ShapeMismatch,
    TruncatedFile,
    ZeroNorm,
)

NORM_EPS = 1e-12
INT32_MAX = 2**31 - 1

_MAGIC = b"TVT1"
_DTYPE_TAGS = {"f32": 0, "i8": 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("int8")}


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer with halves going away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point pair for a symmetric quantization scheme.

    ``axis`` is None for per-tensor parameters or the axis index when the
    scale array runs along one dimension (per-channel).
    """

    scale: float | np.ndarray
    zero_point: int = 0
    axis: int | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("quantization scale must be positive")
        if self.zero_point != 0:
            raise ValueError("symmetric scheme requires zero_point == 0")


def quantize_symmetric(v: np.ndarray, qmax: int = 127) -> tuple[np.ndarray, QuantParams]:
    """Quantize a real vector to signed integers in [-qmax, qmax].

    The scale is max|v| / qmax, so the largest-magnitude element always maps
    to +/-qmax (maximal range use). Raises AllZeroVector when max|v| == 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise AllZeroVector("cannot quantize an empty vector")
    peak = float(np.max(np.abs(v)))
    if peak == 0.0:
        raise AllZeroVector("all-zero vector has no quantization scale")
    scale = peak / qmax
    q = round_half_away(v / peak * qmax)
    q = np.clip(q, -qmax, qmax)
    return q.astype(np.int8), QuantParams(scale=scale)


def dequantize(q: np.ndarray, params: QuantParams) -> np.ndarray:
    """Map integer codes back to reals: out[i] = q[i] * scale."""
    return np.asarray(q, dtype=np.float64) * params.scale


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized dot product of two vectors, in [-1, 1].

    Raises ZeroNorm when either norm falls below 1e-12.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine inputs have lengths {a.size} and {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_EPS or nb < NORM_EPS:
        raise ZeroNorm("cosine similarity of a (near-)zero vector")
    return float(np.dot(a, b) / (na * nb))


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale rows (along ``axis``) to unit L2 norm. Raises ZeroNorm on degenerate rows."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise ZeroNorm("cannot normalize a (near-)zero vector")
    return v / norms


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; rows sum to 1 and constant shifts cancel."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def int8_matmul(a: np.ndarray, b: np.ndarray, check_overflow: bool = True) -> np.ndarray:
    """Integer matrix product of int8 operands with int32 accumulation.

    Accumulates in int64 internally and verifies the result fits a 32-bit
    signed accumulator, mirroring the deployed arithmetic.
    """
    if a.dtype != np.int8 or b.dtype != np.int8:
        raise ShapeMismatch("int8_matmul expects int8 operands")
    acc = np.matmul(a.astype(np.int64), b.astype(np.int64))
    if check_overflow and acc.size and np.max(np.abs(acc)) > INT32_MAX:
        raise AccumulatorOverflow("int8 dot product exceeded 32-bit accumulator range")
    return acc.astype(np.int32)


# -- container --------------------------------------------------------------

@dataclass(frozen=True)
class Tensor:
    """Immutable dense N-d array tagged f32 or i8, row-major.

    The tag matches the on-disk dtype: float data is held as float32 so a
    save/load round trip is bit-exact.
    """

    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype not in (np.dtype("float32"), np.dtype("int8")):
            raise ValueError(f"unsupported tensor dtype {self.data.dtype}")
        arr = np.ascontiguousarray(self.data)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype_tag(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "i8"

    @classmethod
    def from_array(cls, values, dtype_tag: str = "f32") -> "Tensor":
        if dtype_tag == "f32":
            return cls(np.asarray(values, dtype=np.float32))
        if dtype_tag == "i8":
            return cls(np.asarray(values, dtype=np.int8))
        raise ValueError(f"unknown dtype tag {dtype_tag!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype_tag == other.dtype_tag
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def pack_tensor(t: Tensor) -> bytes:
    """Serialize to the TVT1 wire format (trailing CRC32 over all prior bytes)."""
    shape = t.shape
    if len(shape) > 255:
        raise ValueError("tensor rank exceeds format limit")
    if any(ext <= 0 for ext in shape):
        raise ValueError("tensor extents must be positive")
    head = _MAGIC + struct.pack("<BB", _DTYPE_TAGS[t.dtype_tag], len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    if t.dtype_tag == "f32":
        payload = t.data.astype("<f4", copy=False).tobytes()
    else:
        payload = t.data.tobytes()
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_tensor(blob: bytes) -> Tensor:
    """Parse a TVT1 blob; the blob must be exactly one tensor record."""
    t, consumed = _read_tensor_record(blob, 0)
    if consumed != len(blob):
        raise TruncatedFile("trailing bytes after TVT1 record")
    return t


def _read_tensor_record(buf: bytes, offset: int) -> tuple[Tensor, int]:
    """Read one TVT1 record starting at ``offset``; returns (tensor, end offset)."""
    if len(buf) - offset < 6:
        raise TruncatedFile("TVT1 header truncated")
    if buf[offset : offset + 4] != _MAGIC:
        raise BadMagic("not a TVT1 tensor record")
    tag, rank = struct.unpack_from("<BB", buf, offset + 4)
    if tag not in _TAG_DTYPES:
        raise BadMagic(f"unknown TVT1 dtype tag {tag}")
    shape_off = offset + 6
    if len(buf) - shape_off < 4 * rank:
        raise TruncatedFile("TVT1 shape truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, shape_off)
    if any(ext == 0 for ext in shape):
        raise TruncatedFile("TVT1 extent of zero")
    count = 1
    for ext in shape:
        count *= ext
    dtype = _TAG_DTYPES[tag]
    data_off = shape_off + 4 * rank
    nbytes = count * dtype.itemsize
    end = data_off + nbytes + 4
    if len(buf) < end:
        raise TruncatedFile("TVT1 payload truncated")
    (stored_crc,) = struct.unpack_from("<I", buf, data_off + nbytes)
    if zlib.crc32(buf[offset : data_off + nbytes]) != stored_crc:
        raise ChecksumMismatch("TVT1 checksum mismatch")
    arr = np.frombuffer(buf[data_off : data_off + nbytes], dtype=dtype).reshape(shape)
    if dtype == np.dtype("<f4"):
        arr = arr.astype(np.float32)
    return Tensor(arr.copy()), end


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return unpack_tensor(fh.read())
