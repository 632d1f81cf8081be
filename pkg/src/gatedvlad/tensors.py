"""Named dense tensors with an explicit storage precision, plus a byte-exact
bundle file format used for checkpoints and ensemble members.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

BUNDLE_MAGIC = b"TBND"
BUNDLE_VERSION = 1

HALF_MAX = 65504.0


class Precision(Enum):
    """Storage precision of a tensor's payload."""

    SINGLE = "single"
    HALF = "half"

    @property
    def bytes_per_element(self) -> int:
        return 4 if self is Precision.SINGLE else 2

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is Precision.SINGLE else np.dtype("<f2")

    @property
    def wire_code(self) -> int:
        return 0 if self is Precision.SINGLE else 1

    @staticmethod
    def from_wire_code(code: int) -> "Precision":
        if code == 0:
            return Precision.SINGLE
        if code == 1:
            return Precision.HALF
        raise CorruptionError(f"unknown precision code {code}")


@dataclass(frozen=True)
class Tensor:
    """Immutable named array.  NaN payloads are rejected; infinities are
    allowed because an overflowing down-cast legitimately produces them.
    """

    name: str
    values: np.ndarray
    precision: Precision = Precision.SINGLE

    def __post_init__(self):
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        arr = np.array(self.values, dtype=self.precision.numpy_dtype, order="C", copy=True)
        if arr.ndim < 1:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ValidationError(f"tensor {self.name!r} has a zero-sized dimension {arr.shape}")
        if np.isnan(arr).any():
            raise ValidationError(f"tensor {self.name!r} contains NaN")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def param_count(self) -> int:
        return int(self.values.size)

    @property
    def size_bytes(self) -> int:
        return self.param_count * self.precision.bytes_per_element

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.precision == other.precision
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.name, self.precision, self.shape))


def cast_precision(t: Tensor, target: Precision) -> tuple[Tensor, int]:
    """Convert a tensor to the target precision with round-to-nearest-even.

    Returns the converted tensor and the number of finite elements that
    overflowed to infinity (possible only for SINGLE -> HALF, where the
    largest representable magnitude is 65504).  Casting to the current
    precision is the identity.  Subnormal halves are kept, not flushed.
    """
    if t.precision is target:
        return t, 0
    with np.errstate(over="ignore"):
        out = t.values.astype(target.numpy_dtype)
    overflows = int(np.count_nonzero(np.isinf(out) & np.isfinite(t.values)))
    return Tensor(t.name, out, target), overflows


class TensorBundle:
    """Ordered map of uniquely named tensors plus string metadata.

    Iteration order is lexicographic by tensor name so that serialization
    and hashing are deterministic.
    """

    def __init__(self, tensors: Iterable[Tensor] = (), metadata: Mapping[str, str] | None = None):
        entries: dict[str, Tensor] = {}
        for t in tensors:
            if t.name in entries:
                raise ValidationError(f"duplicate tensor name {t.name!r}")
            entries[t.name] = t
        meta: dict[str, str] = {}
        for k, v in (metadata or {}).items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError("bundle metadata keys and values must be strings")
            meta[k] = v
        self._entries = entries
        self._metadata = meta

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._entries))

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self._metadata)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no tensor named {name!r} in bundle") from None

    def get(self, name: str) -> Tensor | None:
        return self._entries.get(name)

    def __iter__(self) -> Iterator[Tensor]:
        for name in self.names:
            yield self._entries[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        return self._metadata == other._metadata and list(self) == list(other)

    def replace_tensors(self, replacements: Mapping[str, Tensor]) -> "TensorBundle":
        """New bundle with the given tensors swapped in (names must exist)."""
        for name in replacements:
            if name not in self._entries:
                raise ValidationError(f"cannot replace unknown tensor {name!r}")
        merged = dict(self._entries)
        merged.update(replacements)
        return TensorBundle(merged.values(), self._metadata)

    def arrays(self, dtype=np.float64) -> dict[str, np.ndarray]:
        """The payloads widened to a compute dtype, keyed by name."""
        return {name: self._entries[name].values.astype(dtype) for name in self.names}


def bundle_size_bytes(bundle: TensorBundle) -> int:
    """Payload bytes only; the container header and metadata do not count."""
    return sum(t.size_bytes for t in bundle)


def _write_str(out: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def write_bundle(bundle: TensorBundle, destination: str | Path | BinaryIO) -> None:
    """Serialize a bundle.

    Layout (all integers little-endian): magic "TBND", u16 version, u32
    metadata count then length-prefixed UTF-8 key/value pairs sorted by key,
    u32 tensor count then per tensor (in name order): length-prefixed name,
    u8 precision (0 single, 1 half), u8 rank, rank u64 dims, raw row-major
    payload.
    """
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            write_bundle(bundle, fh)
        return
    out = destination
    out.write(BUNDLE_MAGIC)
    out.write(struct.pack("<H", BUNDLE_VERSION))
    meta = bundle.metadata
    out.write(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        _write_str(out, key)
        _write_str(out, meta[key])
    out.write(struct.pack("<I", len(bundle)))
    for t in bundle:
        _write_str(out, t.name)
        rank = len(t.shape)
        if rank > 255:
            raise ValidationError(f"tensor {t.name!r} rank {rank} exceeds the format limit")
        out.write(struct.pack("<BB", t.precision.wire_code, rank))
        for dim in t.shape:
            out.write(struct.pack("<Q", dim))
        out.write(np.ascontiguousarray(t.values, dtype=t.precision.numpy_dtype).tobytes())


def bundle_to_bytes(bundle: TensorBundle) -> bytes:
    buf = io.BytesIO()
    write_bundle(bundle, buf)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("bundle stream is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError("bundle string is not valid UTF-8") from exc

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def read_bundle(source: str | Path | BinaryIO | bytes) -> TensorBundle:
    """Parse a bundle stream written by :func:`write_bundle`.

    Raises FormatError for a bad magic or version, CorruptionError for
    truncated or trailing bytes, ValidationError for duplicate names.
    """
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    r = _Reader(data)
    if r.take(4) != BUNDLE_MAGIC:
        raise FormatError("not a tensor bundle (bad magic)")
    version = r.u16()
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    metadata: dict[str, str] = {}
    for _ in range(r.u32()):
        key = r.string()
        value = r.string()
        if key in metadata:
            raise ValidationError(f"duplicate metadata key {key!r}")
        metadata[key] = value
    tensors: list[Tensor] = []
    seen: set[str] = set()
    for _ in range(r.u32()):
        name = r.string()
        if name in seen:
            raise ValidationError(f"duplicate tensor name {name!r}")
        seen.add(name)
        precision = Precision.from_wire_code(r.u8())
        rank = r.u8()
        if rank < 1:
            raise CorruptionError(f"tensor {name!r} has rank 0")
        shape = tuple(r.u64() for _ in range(rank))
        count = 1
        for dim in shape:
            if dim < 1:
                raise CorruptionError(f"tensor {name!r} has a zero dimension")
            count *= dim
        payload = r.take(count * precision.bytes_per_element)
        arr = np.frombuffer(payload, dtype=precision.numpy_dtype).reshape(shape)
        tensors.append(Tensor(name, arr, precision))
    if not r.exhausted:
        raise CorruptionError("trailing bytes after the last tensor record")
    return TensorBundle(tensors, metadata)
