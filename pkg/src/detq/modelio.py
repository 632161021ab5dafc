"""Byte-exact model container, INT8 quantization and toy-model generation.

File layout (all integers little-endian)::

    "DIM1" | u32 version
    config: u32 n_layers, d_model, n_heads, d_ffn, vocab, max_ctx | f64 rope_theta
    directory: u32 count, then per tensor
        u16 name_len | name | u32 rows | u32 cols | u8 kind (0 int8-quant, 1 q16-dense)
    payloads in directory order:
        int8-quant: rows x i64 scale, then rows*cols int8 row-major
        q16-dense:  rows*cols i64 row-major
"""
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .hashing import ChaChaStream, digest
from .qarith import ONE, q16_from_ratio, round_half_away

MAGIC = b"DIM1"
VERSION = 1
MAX_D_MODEL = 8192

KIND_QUANT = 0
KIND_DENSE = 1

_CONFIG = struct.Struct("<6Id")
_DIR_ENTRY = struct.Struct("<IIB")


class ModelFormatError(ValueError):
    """Base class for container decoding failures."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class InvalidModelError(ModelFormatError):
    """The bytes decode but violate a structural invariant."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab: int
    max_ctx: int
    rope_theta: float = 10000.0

    def __post_init__(self):
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.d_model < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a positive multiple of n_heads")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary embeddings")
        if self.d_model > MAX_D_MODEL:
            raise ValueError(f"d_model above {MAX_D_MODEL} breaks the accumulator envelope")
        if self.d_ffn < 1:
            raise ValueError("d_ffn must be >= 1")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.max_ctx < 1:
            raise ValueError("max_ctx must be >= 1")
        if not math.isfinite(self.rope_theta) or self.rope_theta <= 0:
            raise ValueError("rope_theta must be positive and finite")

    def tensor_shapes(self) -> list:
        """Canonical (name, rows, cols, kind) sequence of the container."""
        d, f = self.d_model, self.d_ffn
        shapes = [("tok_embd", self.vocab, d, KIND_QUANT)]
        for i in range(self.n_layers):
            p = f"blk.{i}."
            shapes += [
                (p + "attn_norm", 1, d, KIND_DENSE),
                (p + "attn_q", d, d, KIND_QUANT),
                (p + "attn_k", d, d, KIND_QUANT),
                (p + "attn_v", d, d, KIND_QUANT),
                (p + "attn_o", d, d, KIND_QUANT),
                (p + "ffn_norm", 1, d, KIND_DENSE),
                (p + "ffn_gate", f, d, KIND_QUANT),
                (p + "ffn_up", f, d, KIND_QUANT),
                (p + "ffn_down", d, f, KIND_QUANT),
            ]
        shapes += [("output_norm", 1, d, KIND_DENSE), ("output", self.vocab, d, KIND_QUANT)]
        return shapes


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """INT8 matrix with one positive Q16 scale per row."""

    data: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.int8 or self.data.ndim != 2:
            raise InvalidModelError("quantized data must be a 2-D int8 array")
        if self.scales.dtype != np.int64 or self.scales.shape != (self.data.shape[0],):
            raise InvalidModelError("scales must be an int64 vector with one entry per row")
        if self.data.size and self.data.min() < -127:
            raise InvalidModelError("quantized value -128 is not allowed")
        if self.scales.size and self.scales.min() <= 0:
            raise InvalidModelError("row scales must be positive")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @cached_property
    def wide(self) -> np.ndarray:
        """int64 copy of the weights for accumulation."""
        w = self.data.astype(np.int64)
        w.flags.writeable = False
        return w

    @cached_property
    def scale_bound(self) -> int:
        return int(self.scales.max()) if self.scales.size else 0

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * (self.scales[:, None] / ONE)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return np.array_equal(self.data, other.data) and np.array_equal(self.scales, other.scales)


def quantize_row(row):
    """Quantize one row of reals to (Q16 scale, int8 values).

    The scale is max|row|/127 rounded to Q16; values are row/(max|row|/127)
    rounded half away from zero, evaluated in exact rationals.
    """
    vals = [Fraction(float(v)) for v in row]
    if not vals:
        raise ValueError("cannot quantize an empty row")
    peak = max(abs(v) for v in vals)
    if peak == 0:
        return ONE, np.zeros(len(vals), dtype=np.int8)
    scale = round_half_away(peak * ONE / 127)
    q = [max(-127, min(127, round_half_away(v * 127 / peak))) for v in vals]
    return scale, np.array(q, dtype=np.int8)


def quantize_matrix(w) -> QuantTensor:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("expected a 2-D weight matrix")
    scales, rows = zip(*(quantize_row(r) for r in w))
    return QuantTensor(np.stack(rows), np.array(scales, dtype=np.int64))


class ModelFile:
    """Immutable toy transformer: config plus named tensors in canonical order.

    Quantized tensors are :class:`QuantTensor`; RMSNorm gains are int64 Q16
    vectors.
    """

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        expected = config.tensor_shapes()
        if list(tensors) != [name for name, *_ in expected]:
            raise InvalidModelError("tensor set or order does not match the config")
        for name, rows, cols, kind in expected:
            t = tensors[name]
            if kind == KIND_QUANT:
                ok = isinstance(t, QuantTensor) and t.data.shape == (rows, cols)
            else:
                ok = isinstance(t, np.ndarray) and t.dtype == np.int64 and t.shape == (cols,)
            if not ok:
                raise InvalidModelError(f"tensor {name!r} has the wrong type or shape")
        self.tensors = dict(tensors)
        for t in self.tensors.values():
            for arr in (t.data, t.scales) if isinstance(t, QuantTensor) else (t,):
                arr.flags.writeable = False

    def __getitem__(self, name):
        return self.tensors[name]

    def layer(self, i: int) -> dict:
        p = f"blk.{i}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    @cached_property
    def raw(self) -> bytes:
        return serialize(self)

    @cached_property
    def weight_hash(self) -> bytes:
        return weight_hash(self.raw)

    def __eq__(self, other):
        if not isinstance(other, ModelFile):
            return NotImplemented
        return self.raw == other.raw

    def __repr__(self):
        return f"ModelFile({self.config}, hash={self.weight_hash.hex()[:16]})"


def weight_hash(model_bytes: bytes) -> bytes:
    """256-bit BLAKE3 digest of the exact container bytes."""
    return digest(model_bytes)


def serialize(model: ModelFile) -> bytes:
    c = model.config
    parts = [MAGIC, struct.pack("<I", VERSION),
             _CONFIG.pack(c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab, c.max_ctx,
                          float(c.rope_theta))]
    shapes = c.tensor_shapes()
    parts.append(struct.pack("<I", len(shapes)))
    for name, rows, cols, kind in shapes:
        nb = name.encode("ascii")
        parts += [struct.pack("<H", len(nb)), nb, _DIR_ENTRY.pack(rows, cols, kind)]
    for name, _, _, kind in shapes:
        t = model.tensors[name]
        if kind == KIND_QUANT:
            parts += [t.scales.astype("<i8").tobytes(), t.data.tobytes()]
        else:
            parts.append(t.astype("<i8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated while reading {what} at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def deserialize(data: bytes) -> ModelFile:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise BadMagicError("not a DIM1 model container")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    fields = r.unpack(_CONFIG, "config block")
    try:
        config = ModelConfig(*fields)
    except ValueError as exc:
        raise InvalidModelError(f"invalid config: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    directory = []
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        try:
            name = bytes(r.take(n, "tensor name")).decode("ascii")
        except UnicodeDecodeError as exc:
            raise InvalidModelError("tensor name is not ASCII") from exc
        rows, cols, kind = r.unpack(_DIR_ENTRY, "tensor directory entry")
        directory.append((name, rows, cols, kind))
    if directory != config.tensor_shapes():
        raise InvalidModelError("tensor directory does not match the config")
    tensors = {}
    for name, rows, cols, kind in directory:
        if kind == KIND_QUANT:
            scales = np.frombuffer(r.take(8 * rows, name), dtype="<i8").astype(np.int64)
            q = np.frombuffer(r.take(rows * cols, name), dtype=np.int8).reshape(rows, cols).copy()
            tensors[name] = QuantTensor(q, scales)
        else:
            tensors[name] = np.frombuffer(r.take(8 * cols, name), dtype="<i8").astype(np.int64)
    if r.pos != len(r.data):
        raise InvalidModelError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    model = ModelFile(config, tensors)
    model.__dict__["raw"] = bytes(data)
    return model


def toy_scale(d_in: int, gain: int = 1) -> int:
    """Q16 scale gain/(127*floor(sqrt(d_in))) used by generated models."""
    return q16_from_ratio(gain, 127 * math.isqrt(d_in))


def gen_toy_model(seed: int, config: ModelConfig, gain: int = 1) -> ModelFile:
    """Random INT8 model from a ChaCha20 stream keyed by ``seed``.

    Weights are uniform on [-127, 127] in canonical tensor order, every row
    scale is :func:`toy_scale` of the input width and all norm gains are ONE.
    With the default ``gain`` of 1 each dense layer maps unit-RMS inputs to
    roughly unit outputs; larger gains give expansive, chaotic sub-layers.
    """
    if not 0 <= int(seed) < 1 << 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    if int(gain) < 1:
        raise ValueError("gain must be a positive integer")
    config.validate()
    stream = ChaChaStream.from_seed(seed)
    tensors = {}
    for name, rows, cols, kind in config.tensor_shapes():
        if kind == KIND_DENSE:
            tensors[name] = np.full(cols, ONE, dtype=np.int64)
        else:
            data = stream.int8_symmetric(rows * cols).reshape(rows, cols)
            tensors[name] = QuantTensor(data, np.full(rows, toy_scale(cols, gain), dtype=np.int64))
    return ModelFile(config, tensors)
