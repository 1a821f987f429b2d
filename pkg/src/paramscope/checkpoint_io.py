"""Reader for single-file tensor containers (the safetensors layout).

Layout: an unsigned little-endian u64 ``L``, then ``L`` bytes of JSON mapping
tensor names to ``{"dtype", "shape", "data_offsets"}`` (offsets relative to
byte ``8 + L``), then the raw little-endian payloads. An optional
``"__metadata__"`` entry of string pairs is carried through untouched.

Only the header is read on open. Every :func:`load_matrix` call opens its own
file object, so one handle can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .classify import DEFAULT_RULESET, GROUP_ORDER, ComponentGroup, Ruleset, classify_layer
from .errors import MalformedHeader, NonFiniteValues, OutOfBounds, UnknownTensor, UnsupportedDtype

# Decodable float dtypes and their byte widths.
FLOAT_DTYPES = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}

# Other dtypes real checkpoints carry (buffers, quantized blobs). They are
# validated for size and kept in the header but never decoded.
OPAQUE_DTYPES = {
    "I64": 8, "U64": 8, "I32": 4, "U32": 4, "I16": 2, "U16": 2,
    "I8": 1, "U8": 1, "BOOL": 1, "F8_E4M3": 1, "F8_E5M2": 1,
}

# Refuse absurd header sizes before allocating.
MAX_HEADER_BYTES = 100 * 1024 * 1024


@dataclass(frozen=True)
class TensorInfo:
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def nbytes(self) -> int:
        return self.end - self.begin


@dataclass(frozen=True)
class ContainerHandle:
    path: Path
    header: Mapping[str, TensorInfo]
    payload_offset: int
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.header

    @property
    def names(self) -> list[str]:
        return list(self.header)


@dataclass(frozen=True)
class LayerMeta:
    tensor_name: str
    rows: int
    cols: int
    dtype: str
    layer_index: int | None
    component_group: ComponentGroup

    def sort_key(self):
        depth = -1 if self.layer_index is None else self.layer_index
        return (depth, GROUP_ORDER[self.component_group], self.tensor_name)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    meta: LayerMeta
    data: np.ndarray  # float64, C-contiguous, shape (rows, cols)

    @property
    def name(self) -> str:
        return self.meta.tensor_name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise MalformedHeader(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def open_container(path: str | os.PathLike) -> ContainerHandle:
    """Parse and validate the header of a container file; payloads stay on disk."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise MalformedHeader(f"{path}: file shorter than the 8-byte length prefix")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len == 0 or header_len > MAX_HEADER_BYTES or 8 + header_len > file_size:
            raise MalformedHeader(f"{path}: header length {header_len} inconsistent with file size {file_size}")
        raw = fh.read(header_len)
    try:
        doc = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except MalformedHeader:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedHeader(f"{path}: header is not a JSON object")

    payload_offset = 8 + header_len
    payload_size = file_size - payload_offset
    metadata = doc.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise MalformedHeader(f"{path}: __metadata__ must be an object")

    header: dict[str, TensorInfo] = {}
    for name, entry in doc.items():
        header[name] = _parse_entry(path, name, entry, payload_size)

    spans = sorted((t.begin, t.end, n) for n, t in header.items() if t.end > t.begin)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise MalformedHeader(f"{path}: tensors {n0!r} and {n1!r} overlap")
    return ContainerHandle(path=path, header=header, payload_offset=payload_offset, metadata=dict(metadata))


def _parse_entry(path: Path, name: str, entry, payload_size: int) -> TensorInfo:
    if not isinstance(entry, dict):
        raise MalformedHeader(f"{path}: entry {name!r} is not an object")
    try:
        dtype = entry["dtype"]
        shape = tuple(entry["shape"])
        begin, end = entry["data_offsets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: entry {name!r} lacks dtype/shape/data_offsets") from exc
    if not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
        raise MalformedHeader(f"{path}: entry {name!r} has invalid shape {shape}")
    if not all(isinstance(o, int) and not isinstance(o, bool) for o in (begin, end)) or not 0 <= begin <= end:
        raise MalformedHeader(f"{path}: entry {name!r} has invalid offsets {[begin, end]}")
    width = FLOAT_DTYPES.get(dtype) or OPAQUE_DTYPES.get(dtype)
    if width is None:
        raise UnsupportedDtype(f"{path}: entry {name!r} has unsupported dtype {dtype!r}")
    if end > payload_size:
        raise OutOfBounds(f"{path}: entry {name!r} range [{begin}, {end}) exceeds payload size {payload_size}")
    if end - begin != math.prod(shape) * width:
        raise MalformedHeader(
            f"{path}: entry {name!r} declares {end - begin} bytes, shape {list(shape)} x {dtype} needs "
            f"{math.prod(shape) * width}"
        )
    return TensorInfo(dtype=dtype, shape=shape, begin=begin, end=end)


def layer_meta(name: str, info: TensorInfo, ruleset: Ruleset = DEFAULT_RULESET) -> LayerMeta:
    index, group = classify_layer(name, ruleset)
    rows, cols = info.shape
    return LayerMeta(name, rows, cols, info.dtype, index, group)


def list_matrices(handle: ContainerHandle, min_dim: int = 1, ruleset: Ruleset = DEFAULT_RULESET) -> list[LayerMeta]:
    """2-D float tensors with ``min(rows, cols) >= min_dim``, in depth order."""
    if min_dim < 1:
        raise ValueError("min_dim must be >= 1")
    out = [
        layer_meta(name, info, ruleset)
        for name, info in handle.header.items()
        if info.dtype in FLOAT_DTYPES and len(info.shape) == 2 and min(info.shape) >= min_dim
    ]
    out.sort(key=LayerMeta.sort_key)
    return out


# ---------------------------------------------------------------------------
# half-precision decoding


def _build_f16_table() -> np.ndarray:
    bits = np.arange(1 << 16, dtype=np.int64)
    sign = np.where(bits >> 15, -1.0, 1.0)
    exp = (bits >> 10) & 0x1F
    frac = (bits & 0x3FF).astype(np.float64)
    table = np.where(
        exp == 0,
        np.ldexp(frac, -24),  # subnormal: frac * 2^-14 / 2^10
        np.ldexp(1.0 + frac / 1024.0, (exp - 15).astype(np.int32)),
    )
    table = np.where(exp == 0x1F, np.where(frac == 0, np.inf, np.nan), table)
    return sign * table


F16_TABLE = _build_f16_table()


def decode_f16(raw: np.ndarray) -> np.ndarray:
    """IEEE binary16 bit patterns (uint16) to float64 via lookup."""
    return F16_TABLE[raw.astype(np.intp)]


def decode_bf16(raw: np.ndarray) -> np.ndarray:
    """bfloat16 bit patterns (uint16): the high half of a float32."""
    return (raw.astype("<u4") << 16).view("<f4").astype(np.float64)


def decode_payload(buf: bytes, dtype: str) -> np.ndarray:
    if dtype == "F64":
        return np.frombuffer(buf, dtype="<f8").astype(np.float64)
    if dtype == "F32":
        return np.frombuffer(buf, dtype="<f4").astype(np.float64)
    if dtype == "F16":
        return decode_f16(np.frombuffer(buf, dtype="<u2"))
    if dtype == "BF16":
        return decode_bf16(np.frombuffer(buf, dtype="<u2"))
    raise UnsupportedDtype(f"cannot decode dtype {dtype!r} as floating point")


def read_tensor(handle: ContainerHandle, name: str) -> np.ndarray:
    """Decode any float tensor (any rank) to a float64 array."""
    try:
        info = handle.header[name]
    except KeyError:
        raise UnknownTensor(f"{handle.path}: no tensor named {name!r}") from None
    with open(handle.path, "rb") as fh:
        fh.seek(handle.payload_offset + info.begin)
        buf = fh.read(info.nbytes)
    if len(buf) != info.nbytes:
        raise OutOfBounds(f"{handle.path}: short read for {name!r}")
    return decode_payload(buf, info.dtype).reshape(info.shape)


def load_matrix(handle: ContainerHandle, name: str, ruleset: Ruleset = DEFAULT_RULESET) -> WeightMatrix:
    info = handle.header.get(name)
    if info is None:
        raise UnknownTensor(f"{handle.path}: no tensor named {name!r}")
    if len(info.shape) != 2:
        raise ValueError(f"{name!r} has shape {list(info.shape)}, expected a matrix")
    data = np.ascontiguousarray(read_tensor(handle, name))
    if not np.isfinite(data).all():
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteValues(f"{name!r}: {bad} non-finite entries")
    return WeightMatrix(layer_meta(name, info, ruleset), data)


def as_weight_matrix(data, name: str = "w", ruleset: Ruleset = DEFAULT_RULESET) -> WeightMatrix:
    """Wrap an in-memory 2-D array as a float64 WeightMatrix."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValues(f"{name!r}: non-finite entries")
    index, group = classify_layer(name, ruleset)
    return WeightMatrix(LayerMeta(name, arr.shape[0], arr.shape[1], "F64", index, group), arr)
