"""Named numeric arrays and their canonical binary encoding.

A Weights value is an ordered list of named tensors and is the unit of
exchange between server and clients. The byte layout is a public wire
format, fixed as:

    count: u32 BE
    per tensor:
        name length: u16 BE, then UTF-8 name bytes
        dtype tag:   u8 (0 = F32, 1 = F64)
        rank:        u8
        extents:     rank * u32 BE, each >= 1
        data:        raw element bytes, little-endian, row-major

Header integers are big-endian (network order); element data stays
little-endian so the dominant hardware never swaps per element. Decoding
is bit-exact: NaN payloads survive a round-trip untouched.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAX_RANK = 255
MAX_NUMPY_RANK = 64  # ndarray ceiling; the wire field itself allows 255
MAX_NAME_BYTES = 0xFFFF
MAX_EXTENT = 0xFFFFFFFF


class DType(enum.IntEnum):
    F32 = 0
    F64 = 1

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 8

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")


_NUMPY_TO_DTYPE = {"f4": DType.F32, "f8": DType.F64}


class EncodeError(ValueError):
    """Weights value violates a layout limit and cannot be encoded."""


class DecodeError(ValueError):
    """Malformed buffer. ``offset`` is the byte position of the fault."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"at byte {offset}: {message}")
        self.offset = offset


@dataclass
class Tensor:
    """One named array. dtype and shape are carried by the numpy array."""

    name: str
    array: np.ndarray

    def __post_init__(self) -> None:
        code = self.array.dtype.str.lstrip("<>=|")
        if code not in _NUMPY_TO_DTYPE:
            raise TypeError(f"unsupported dtype {self.array.dtype} for tensor {self.name!r}")

    @property
    def dtype(self) -> DType:
        return _NUMPY_TO_DTYPE[self.array.dtype.str.lstrip("<>=|")]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    def __eq__(self, other: object) -> bool:
        # Bit-exact: two NaNs with equal payloads compare equal, 0.0 != -0.0.
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype == other.dtype
            and self.shape == other.shape
            and np.ascontiguousarray(self.array, dtype=self.dtype.numpy).tobytes()
            == np.ascontiguousarray(other.array, dtype=other.dtype.numpy).tobytes()
        )


@dataclass
class Weights:
    """Ordered list of tensors with pairwise-distinct names."""

    tensors: list[Tensor] = field(default_factory=list)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def arrays(self) -> list[np.ndarray]:
        return [t.array for t in self.tensors]

    def num_elements(self) -> int:
        return sum(t.array.size for t in self.tensors)

    def replace_arrays(self, arrays: list[np.ndarray]) -> "Weights":
        """Same names, new values. Each array is cast to the slot's dtype."""
        if len(arrays) != len(self.tensors):
            raise ValueError("array count mismatch")
        out = []
        for t, a in zip(self.tensors, arrays):
            out.append(Tensor(t.name, np.asarray(a, dtype=t.array.dtype).reshape(t.shape)))
        return Weights(out)


def _append_le_bytes(out: bytearray, array: np.ndarray, dtype: DType) -> None:
    # Append straight from the array's buffer; tobytes() would copy twice.
    contiguous = np.ascontiguousarray(array, dtype=dtype.numpy)
    out += contiguous.data


def _validate(w: Weights) -> None:
    seen: set[str] = set()
    for t in w.tensors:
        if t.name in seen:
            raise EncodeError(f"duplicate tensor name {t.name!r}")
        seen.add(t.name)
        if len(t.name.encode("utf-8")) > MAX_NAME_BYTES:
            raise EncodeError(f"tensor name too long ({t.name[:32]!r}...)")
        if t.array.ndim > MAX_RANK:
            raise EncodeError(f"tensor {t.name!r} rank {t.array.ndim} exceeds {MAX_RANK}")
        for extent in t.array.shape:
            if extent < 1:
                raise EncodeError(f"tensor {t.name!r} has zero extent")
            if extent > MAX_EXTENT:
                raise EncodeError(f"tensor {t.name!r} extent {extent} exceeds u32")


def encode_weights_into(out: bytearray, w: Weights) -> None:
    """Append the encoding of ``w`` to ``out``."""
    _validate(w)
    out += struct.pack("!I", len(w.tensors))
    for t in w.tensors:
        name = t.name.encode("utf-8")
        out += struct.pack("!H", len(name))
        out += name
        out += struct.pack("!BB", int(t.dtype), t.array.ndim)
        for extent in t.array.shape:
            out += struct.pack("!I", extent)
        _append_le_bytes(out, t.array, t.dtype)


def encode_weights(w: Weights) -> bytes:
    out = bytearray()
    encode_weights_into(out, w)
    return bytes(out)


def decode_weights_from(buf: bytes, offset: int = 0) -> tuple[Weights, int]:
    """Decode one Weights value starting at ``offset``.

    Returns the value and the offset one past its last byte. Raises
    DecodeError (carrying the fault offset) on malformed input.
    """

    def need(n: int, what: str) -> None:
        if offset + n > len(buf):
            raise DecodeError(offset, f"truncated: expected {what}")

    need(4, "tensor count")
    (count,) = struct.unpack_from("!I", buf, offset)
    offset += 4
    tensors: list[Tensor] = []
    seen: set[str] = set()
    for _ in range(count):
        need(2, "name length")
        (name_len,) = struct.unpack_from("!H", buf, offset)
        offset += 2
        need(name_len, "name bytes")
        try:
            name = bytes(buf[offset : offset + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError(offset, "tensor name is not valid UTF-8") from None
        if name in seen:
            raise DecodeError(offset, f"duplicate tensor name {name!r}")
        seen.add(name)
        offset += name_len
        need(1, "dtype tag")
        tag = buf[offset]
        if tag not in (0, 1):
            raise DecodeError(offset, f"unknown dtype tag {tag}")
        dtype = DType(tag)
        offset += 1
        need(1, "rank")
        rank = buf[offset]
        if rank > MAX_NUMPY_RANK:
            # Wire-legal (u8 allows 255) but not representable here.
            raise DecodeError(offset, f"rank {rank} exceeds supported {MAX_NUMPY_RANK}")
        offset += 1
        shape = []
        for _ in range(rank):
            need(4, "extent")
            (extent,) = struct.unpack_from("!I", buf, offset)
            if extent < 1:
                raise DecodeError(offset, f"zero extent in tensor {name!r}")
            shape.append(extent)
            offset += 4
        n_elements = 1
        for extent in shape:
            n_elements *= extent
        n_bytes = n_elements * dtype.itemsize
        need(n_bytes, f"{n_bytes} element bytes of tensor {name!r}")
        raw = memoryview(buf)[offset : offset + n_bytes]
        offset += n_bytes
        array = np.frombuffer(raw, dtype=dtype.numpy).reshape(shape)
        # Native byte order internally; same-width cast preserves NaN
        # bits. copy=True also detaches the array from the input buffer.
        array = array.astype(array.dtype.newbyteorder("="), copy=True)
        tensors.append(Tensor(name, array))
    return Weights(tensors), offset


def decode_weights(buf: bytes) -> Weights:
    """Decode a complete buffer; trailing bytes are an error."""
    w, end = decode_weights_from(buf, 0)
    if end != len(buf):
        raise DecodeError(end, f"{len(buf) - end} trailing bytes after weights")
    return w


def weights_byte_size(w: Weights) -> int:
    """Length encode_weights(w) would produce, without materializing it."""
    _validate(w)
    total = 4
    for t in w.tensors:
        total += 2 + len(t.name.encode("utf-8")) + 1 + 1
        total += 4 * t.array.ndim
        total += t.array.size * t.dtype.itemsize
    return total
