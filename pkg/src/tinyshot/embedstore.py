"""Class-prototype table: build, quantize, truncate, pack, load, query support.

A table is the flash-resident "text side" of the decoupled deployment: each
class keeps one prompt-averaged, L2-normalized prototype stored at one of
four precisions. Integer tags (i8/i4) hold symmetric codes plus a per-class
scale; float tags (f32/f16) hold the values themselves with scale 1, so the
dequantized-row accessor is uniform across tags.

On disk the table is a "TVE1" container: seekable, little-endian, CRC32
checksummed, with nibble packing for the i4 tag (high nibble first).
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    DimensionTooLarge,
    EmptyTemplates,
    NoFeasibleDimension,
    TruncatedFile,
    UnsupportedVersion,
)
from .tensor import dequantize, l2_normalize, quantize_symmetric, QuantParams

_MAGIC = b"TVE1"
_VERSION = 1

PRECISION_TAGS = ("f32", "f16", "i8", "i4")
_TAG_IDS = {tag: i for i, tag in enumerate(PRECISION_TAGS)}

# bytes per stored value; i4 is handled as a half byte in payload_bytes
_VALUE_BYTES = {"f32": 4, "f16": 2, "i8": 1, "i4": 1}

# integer code range per integer tag
_QMAX = {"i8": 127, "i4": 7}


def payload_bytes(n_classes: int, dim: int, precision: str) -> int:
    """Exact code-payload size in bytes for a K x d table at one precision."""
    if precision not in PRECISION_TAGS:
        raise ValueError(f"unknown precision tag {precision!r}")
    if precision == "i4":
        return (n_classes * dim + 1) // 2
    return n_classes * dim * _VALUE_BYTES[precision]


@dataclass(frozen=True)
class PromptedClass:
    """One class with the text embeddings of each of its prompt templates."""

    class_name: str
    template_embeddings: list[np.ndarray] = field(default_factory=list)


def average_templates(pc: PromptedClass) -> np.ndarray:
    """L2-normalized arithmetic mean of a class's template embeddings."""
    if not pc.template_embeddings:
        raise EmptyTemplates(f"class {pc.class_name!r} has no template embeddings")
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in pc.template_embeddings]
    dim = vecs[0].size
    for v in vecs[1:]:
        if v.size != dim:
            raise DimensionMismatch(
                f"class {pc.class_name!r} mixes template dimensions {dim} and {v.size}"
            )
    return l2_normalize(np.mean(vecs, axis=0))


def select_dim(n_classes: int, budget_bytes: int, bytes_per_value: int, ladder) -> int:
    """Largest ladder dimension whose K x d x b payload fits the budget."""
    ladder = list(ladder)
    if not ladder:
        raise ValueError("dimension ladder is empty")
    if sorted(ladder) != ladder:
        raise ValueError("dimension ladder must be sorted ascending")
    if n_classes < 1 or bytes_per_value < 1:
        raise ValueError("class count and bytes-per-value must be >= 1")
    feasible = [d for d in ladder if n_classes * d * bytes_per_value <= budget_bytes]
    if not feasible:
        raise NoFeasibleDimension(
            f"{n_classes} classes at {bytes_per_value} B/value exceed "
            f"{budget_bytes} B even at dimension {ladder[0]}"
        )
    return feasible[-1]


@dataclass(frozen=True)
class EmbeddingTable:
    """K class prototypes stored quantized, with one scale per class row.

    ``codes`` is int8 for integer tags (values within +/-127 for i8, +/-7
    for i4) and float32 for float tags (f16 values are rounded through IEEE
    half precision but held widened). ``scales`` is 1.0 for float tags.
    """

    class_names: tuple[str, ...]
    codes: np.ndarray
    scales: np.ndarray
    precision_tag: str

    def __post_init__(self):
        if self.precision_tag not in PRECISION_TAGS:
            raise ValueError(f"unknown precision tag {self.precision_tag!r}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        if any(not name for name in self.class_names):
            raise ValueError("class names must be non-empty")
        if self.codes.ndim != 2 or self.codes.shape[0] != len(self.class_names):
            raise ValueError("codes must be a K x d matrix")
        if self.scales.shape != (len(self.class_names),):
            raise ValueError("need exactly one scale per class")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        self.codes.setflags(write=False)
        self.scales.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def d_max(self) -> int:
        return int(self.codes.shape[1])

    def payload_bytes(self) -> int:
        return payload_bytes(self.n_classes, self.d_max, self.precision_tag)

    def row(self, k: int, d: int | None = None) -> np.ndarray:
        """Dequantized prototype ``k``, optionally truncated to ``d`` dims."""
        d = self.d_max if d is None else d
        if d > self.d_max:
            raise DimensionTooLarge(f"prefix {d} exceeds stored dimension {self.d_max}")
        return np.asarray(self.codes[k, :d], dtype=np.float64) * float(self.scales[k])

    def rows(self, d: int | None = None) -> np.ndarray:
        """All prototypes dequantized, as a K x d float matrix."""
        d = self.d_max if d is None else d
        if d > self.d_max:
            raise DimensionTooLarge(f"prefix {d} exceeds stored dimension {self.d_max}")
        return np.asarray(self.codes[:, :d], dtype=np.float64) * self.scales[:, None]

    def row_noise_bound(self, d: int | None = None) -> np.ndarray:
        """Per-class L2 bound on |stored - exact| over the first ``d`` dims.

        Integer tags: each code is within half a step of the exact value, so
        the row error is at most sqrt(d) * scale / 2. The f16 tag rounds
        normalized values (elements <= 1) with absolute error at most 2^-11;
        f32 storage is treated as exact on this reference path.
        """
        d = self.d_max if d is None else d
        if self.precision_tag in _QMAX:
            return np.sqrt(d) * self.scales / 2.0
        if self.precision_tag == "f16":
            return np.sqrt(d) * np.full(self.n_classes, 2.0**-11)
        return np.zeros(self.n_classes)


def _encode_prototype(proto: np.ndarray, precision: str) -> tuple[np.ndarray, float]:
    if precision in _QMAX:
        codes, params = quantize_symmetric(proto, qmax=_QMAX[precision])
        return codes, float(np.asarray(params.scale))
    if precision == "f16":
        return proto.astype(np.float16).astype(np.float32), 1.0
    return proto.astype(np.float32), 1.0


def build_table(classes: list[PromptedClass], precision: str = "i8") -> EmbeddingTable:
    """Average, normalize, and quantize each class into a prototype table."""
    if not classes:
        raise ValueError("cannot build a table from zero classes")
    if precision not in PRECISION_TAGS:
        raise ValueError(f"unknown precision tag {precision!r}")
    names = [pc.class_name for pc in classes]
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    protos = [average_templates(pc) for pc in classes]
    dim = protos[0].size
    for name, p in zip(names, protos):
        if p.size != dim:
            raise DimensionMismatch(f"class {name!r} has dimension {p.size}, expected {dim}")
    code_rows, scales = [], []
    for p in protos:
        codes, scale = _encode_prototype(p, precision)
        code_rows.append(codes)
        scales.append(scale)
    return EmbeddingTable(
        class_names=tuple(names),
        codes=np.stack(code_rows),
        scales=np.asarray(scales, dtype=np.float64),
        precision_tag=precision,
    )


def truncate_table(t: EmbeddingTable, d: int) -> EmbeddingTable:
    """Keep each prototype's first ``d`` values, re-quantized from the prefix.

    Re-quantization restores maximal range use for integer tags (the prefix
    max maps back to +/-qmax). At d == d_max the table is returned unchanged.
    """
    if d > t.d_max:
        raise DimensionTooLarge(f"prefix {d} exceeds stored dimension {t.d_max}")
    if d < 1:
        raise ValueError("prefix dimension must be >= 1")
    if d == t.d_max:
        return t
    code_rows, scales = [], []
    for k in range(t.n_classes):
        codes, scale = _encode_prototype(t.row(k, d), t.precision_tag)
        code_rows.append(codes)
        scales.append(scale)
    return EmbeddingTable(
        class_names=t.class_names,
        codes=np.stack(code_rows),
        scales=np.asarray(scales, dtype=np.float64),
        precision_tag=t.precision_tag,
    )


# -- TVE1 container ---------------------------------------------------------

def _pack_codes(codes: np.ndarray, precision: str) -> bytes:
    if precision == "f32":
        return codes.astype("<f4", copy=False).tobytes()
    if precision == "f16":
        return codes.astype("<f2").tobytes()
    if precision == "i8":
        return codes.astype(np.int8, copy=False).tobytes()
    # i4: two signed codes per byte, first of each pair in the high nibble
    flat = codes.astype(np.int8).ravel()
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.int8)])
    high = (flat[0::2].astype(np.uint8) & 0x0F) << 4
    low = flat[1::2].astype(np.uint8) & 0x0F
    return (high | low).astype(np.uint8).tobytes()


def _unpack_codes(raw: bytes, n_classes: int, d_max: int, precision: str) -> np.ndarray:
    count = n_classes * d_max
    if precision == "f32":
        return np.frombuffer(raw, dtype="<f4", count=count).reshape(n_classes, d_max).astype(np.float32)
    if precision == "f16":
        arr = np.frombuffer(raw, dtype="<f2", count=count)
        return arr.astype(np.float32).reshape(n_classes, d_max)
    if precision == "i8":
        return np.frombuffer(raw, dtype=np.int8, count=count).reshape(n_classes, d_max).copy()
    packed = np.frombuffer(raw, dtype=np.uint8, count=(count + 1) // 2)
    nibbles = np.empty(packed.size * 2, dtype=np.uint8)
    nibbles[0::2] = packed >> 4
    nibbles[1::2] = packed & 0x0F
    signed = nibbles.astype(np.int8)
    signed[signed >= 8] -= 16  # sign-extend 4-bit two's complement
    return signed[:count].reshape(n_classes, d_max).copy()


def pack_table(t: EmbeddingTable) -> bytes:
    """Serialize to the TVE1 wire format."""
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HIHB", _VERSION, t.n_classes, t.d_max, _TAG_IDS[t.precision_tag])
    for name in t.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"class name too long: {name[:32]!r}...")
        out += struct.pack("<H", len(raw)) + raw
    out += t.scales.astype("<f4").tobytes()
    out += _pack_codes(t.codes, t.precision_tag)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def unpack_table(blob: bytes) -> EmbeddingTable:
    """Parse a TVE1 blob, verifying structure and checksum."""
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagic("not a TVE1 prototype table")
    if len(blob) < 13 + 4:
        raise TruncatedFile("TVE1 header truncated")
    version, n_classes, d_max, tag_id = struct.unpack_from("<HIHB", blob, 4)
    if version != _VERSION:
        raise UnsupportedVersion(f"TVE1 version {version} not supported")
    if tag_id >= len(PRECISION_TAGS):
        raise TruncatedFile(f"unknown precision tag id {tag_id}")
    precision = PRECISION_TAGS[tag_id]
    if n_classes == 0 or d_max == 0:
        raise TruncatedFile("TVE1 with zero classes or zero dimension")
    off = 13
    names = []
    for _ in range(n_classes):
        if len(blob) < off + 2:
            raise TruncatedFile("TVE1 name table truncated")
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + ln:
            raise TruncatedFile("TVE1 name truncated")
        try:
            names.append(blob[off : off + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ChecksumMismatch("TVE1 name is not valid UTF-8") from exc
        off += ln
    scale_bytes = 4 * n_classes
    code_bytes = payload_bytes(n_classes, d_max, precision)
    expected = off + scale_bytes + code_bytes + 4
    if len(blob) < expected:
        raise TruncatedFile("TVE1 payload truncated")
    if len(blob) > expected:
        raise TruncatedFile("trailing bytes after TVE1 record")
    (stored_crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != stored_crc:
        raise ChecksumMismatch("TVE1 checksum mismatch")
    scales = np.frombuffer(blob, dtype="<f4", count=n_classes, offset=off).astype(np.float64)
    off += scale_bytes
    codes = _unpack_codes(blob[off : off + code_bytes], n_classes, d_max, precision)
    return EmbeddingTable(
        class_names=tuple(names),
        codes=codes,
        scales=scales,
        precision_tag=precision,
    )


def save_table(t: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_table(t))


def load_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        return unpack_table(fh.read())


# -- CSV ingest -------------------------------------------------------------

def read_template_csv(path) -> list[PromptedClass]:
    """Read template embeddings from CSV with header class,template,e0..e{d-1}.

    Each data row is one template embedding; rows are grouped by class in
    order of first appearance.
    """
    grouped: dict[str, list[np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[0] != "class" or header[1] != "template":
            raise ValueError("expected CSV header: class,template,e0..e{d-1}")
        dim = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ValueError(f"line {lineno}: expected {dim + 2} columns, got {len(row)}")
            name = row[0]
            vec = np.array([float(x) for x in row[2:]], dtype=np.float64)
            grouped.setdefault(name, []).append(vec)
    return [PromptedClass(name, vecs) for name, vecs in grouped.items()]
