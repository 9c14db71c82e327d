"""Safetensors-compatible checkpoint IO and linear expert merging.

File layout: an unsigned 64-bit little-endian header length ``N``, ``N``
bytes of UTF-8 JSON mapping tensor names to ``dtype``/``shape``/
``data_offsets`` (plus an optional ``__metadata__`` string map), then the
raw little-endian payload.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from forgeline import kernels
from forgeline.errors import (
    DTypeMismatch,
    DuplicateName,
    MalformedHeader,
    NameSetMismatch,
    NonFiniteResult,
    OverlappingTensors,
    ShapeMismatch,
    TrailingBytes,
    ValidationError,
)

METADATA_KEY = "__metadata__"


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def byte_width(self) -> int:
        return 4 if self is DType.F32 else 2

    @property
    def storage(self) -> np.dtype:
        return {
            DType.F32: np.dtype("<f4"),
            DType.F16: np.dtype("<f2"),
            DType.BF16: np.dtype("<u2"),
        }[self]


@dataclass(frozen=True)
class TensorView:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 0 for s in self.shape):
            raise ValidationError(f"negative dimension in {self.name!r}")
        if math.prod(self.shape) * self.dtype.byte_width != len(self.data):
            raise ValidationError(
                f"tensor {self.name!r}: {len(self.data)} bytes does not match "
                f"shape {list(self.shape)} of {self.dtype.value}"
            )

    @classmethod
    def from_array(cls, name: str, array: np.ndarray, dtype: DType = DType.F32) -> "TensorView":
        """Encode an array; float64 input is rounded once to ``dtype``."""
        array = np.asarray(array)
        return cls(name, dtype, array.shape, encode(array, dtype).tobytes())

    def to_array(self) -> np.ndarray:
        """Decode to float32 (every supported dtype widens exactly)."""
        raw = np.frombuffer(self.data, dtype=self.dtype.storage)
        if self.dtype is DType.BF16:
            out = kernels.bf16_to_f32(raw)
        else:
            out = raw.astype(np.float32)
        return out.reshape(self.shape)


def encode(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round values (any float width) to the storage representation of dtype."""
    values = np.asarray(values)
    if dtype is DType.BF16:
        if values.dtype == np.uint16:
            return values
        return kernels.f64_to_bf16(values.astype(np.float64).reshape(-1))
    with np.errstate(over="ignore"):
        return np.ascontiguousarray(values.reshape(-1), dtype=np.float64).astype(dtype.storage)


@dataclass(frozen=True)
class ManifestEntry:
    dtype: DType
    shape: tuple[int, ...]
    offsets: tuple[int, int]


@dataclass(frozen=True)
class CheckpointManifest:
    path: Path
    header_bytes: int
    entries: dict[str, ManifestEntry]
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def payload_start(self) -> int:
        return 8 + self.header_bytes

    def logical(self) -> tuple:
        """Order-independent view used for equality between manifests."""
        return (
            tuple(sorted((k, v.dtype.value, v.shape, v.offsets) for k, v in self.entries.items())),
            tuple(sorted(self.metadata.items())),
        )


def _parse_entry(name: str, raw) -> ManifestEntry:
    try:
        dtype = DType(raw["dtype"])
        shape = tuple(int(s) for s in raw["shape"])
        begin, end = (int(o) for o in raw["data_offsets"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"bad header entry for {name!r}: {exc}") from exc
    if any(s < 0 for s in shape) or begin < 0 or end < begin:
        raise MalformedHeader(f"bad shape or offsets for {name!r}")
    if end - begin != math.prod(shape) * dtype.byte_width:
        raise MalformedHeader(f"offsets of {name!r} disagree with shape and dtype")
    return ManifestEntry(dtype, shape, (begin, end))


def _unique_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DuplicateName(f"duplicate header key {k!r}")
        out[k] = v
    return out


def read_manifest(path: str | os.PathLike) -> CheckpointManifest:
    path = Path(path)
    size = path.stat().st_size
    if size < 9:
        raise MalformedHeader(f"{path}: file of {size} bytes is below the minimum size")
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        if 8 + n > size:
            raise MalformedHeader(f"{path}: header length {n} exceeds file size {size}")
        head = fh.read(n)
    try:
        obj = json.loads(head.decode("utf-8"), object_pairs_hook=_unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedHeader(f"{path}: header is not a JSON object")

    metadata = obj.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader(f"{path}: __metadata__ must map strings to strings")
    entries = {name: _parse_entry(name, raw) for name, raw in obj.items()}

    payload = size - 8 - n
    cursor = 0
    for name, entry in sorted(entries.items(), key=lambda kv: kv[1].offsets):
        begin, end = entry.offsets
        if begin < cursor:
            raise OverlappingTensors(f"{path}: tensor {name!r} overlaps its predecessor")
        if begin > cursor:
            raise TrailingBytes(f"{path}: bytes {cursor}..{begin} not covered by any tensor")
        cursor = end
    if cursor > payload:
        raise MalformedHeader(f"{path}: tensor data runs past end of file")
    if cursor < payload:
        raise TrailingBytes(f"{path}: {payload - cursor} payload bytes not covered by any tensor")
    return CheckpointManifest(path, n, entries, dict(metadata))


def write_checkpoint(
    path: str | os.PathLike,
    tensors: Sequence[TensorView],
    metadata: Mapping[str, str] | None = None,
) -> Path:
    path = Path(path)
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for t in tensors:
        if t.name in header or t.name == METADATA_KEY:
            raise DuplicateName(f"duplicate tensor name {t.name!r}")
        header[t.name] = {
            "dtype": t.dtype.value,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(t.data)],
        }
        offset += len(t.data)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad with spaces to 8-byte alignment like the reference writer
    head += b" " * (-len(head) % 8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for t in tensors:
            fh.write(t.data)
    os.replace(tmp, path)
    return path


def read_tensor(manifest: CheckpointManifest, name: str) -> TensorView:
    entry = manifest.entries[name]
    begin, end = entry.offsets
    with open(manifest.path, "rb") as fh:
        fh.seek(manifest.payload_start + begin)
        data = fh.read(end - begin)
    return TensorView(name, entry.dtype, entry.shape, data)


def read_checkpoint(path: str | os.PathLike) -> tuple[list[TensorView], dict[str, str]]:
    """All tensors in on-disk order, plus metadata."""
    manifest = read_manifest(path)
    blob = Path(path).read_bytes()[manifest.payload_start :]
    ordered = sorted(manifest.entries.items(), key=lambda kv: kv[1].offsets)
    tensors = [
        TensorView(name, e.dtype, e.shape, blob[e.offsets[0] : e.offsets[1]]) for name, e in ordered
    ]
    return tensors, manifest.metadata


def validate_compatibility(manifests: Sequence[CheckpointManifest]) -> None:
    if not manifests:
        raise ValidationError("at least one manifest is required")
    first = manifests[0]
    names = set(first.entries)
    for other in manifests[1:]:
        diff = names ^ set(other.entries)
        if diff:
            raise NameSetMismatch(diff)
    for name in sorted(names):
        ref = first.entries[name]
        for other in manifests[1:]:
            entry = other.entries[name]
            if entry.shape != ref.shape:
                raise ShapeMismatch(name)
            if entry.dtype != ref.dtype:
                raise DTypeMismatch(name)


@dataclass(frozen=True)
class MergeRecipe:
    inputs: tuple[tuple[Path, float], ...]
    output_dtype: DType | None = None  # None keeps the inputs' dtype per tensor

    def __post_init__(self):
        inputs = tuple((Path(p), float(w)) for p, w in self.inputs)
        object.__setattr__(self, "inputs", inputs)
        if len(inputs) < 2:
            raise ValidationError("a merge needs at least 2 inputs")
        weights = [w for _, w in inputs]
        if not all(math.isfinite(w) for w in weights):
            raise ValidationError("merge weights must be finite")
        if abs(math.fsum(weights) - 1.0) > 1e-9:
            raise ValidationError(f"merge weights sum to {math.fsum(weights)!r}, expected 1")

    @classmethod
    def equal(cls, paths: Iterable[str | os.PathLike], output_dtype: DType | None = None) -> "MergeRecipe":
        paths = list(paths)
        return cls(tuple((p, 1.0 / len(paths)) for p in paths), output_dtype)

    @classmethod
    def proportional(
        cls, paths: Iterable[str | os.PathLike], counts: Sequence[float], output_dtype: DType | None = None
    ) -> "MergeRecipe":
        """Weights proportional to e.g. each expert's training-set size."""
        paths = list(paths)
        if len(counts) != len(paths) or any(c < 0 for c in counts) or sum(counts) <= 0:
            raise ValidationError("proportional weights need one non-negative count per input")
        total = math.fsum(counts)
        return cls(tuple((p, c / total) for p, c in zip(paths, counts)), output_dtype)


def parse_weights(spec: str, paths: Sequence[str | os.PathLike]) -> MergeRecipe:
    """Parse ``equal``, ``proportional:<c1,c2,...>`` or ``w1,w2,...``."""
    if spec == "equal":
        return MergeRecipe.equal(paths)
    if spec.startswith("proportional:"):
        counts = [float(c) for c in spec.split(":", 1)[1].split(",")]
        return MergeRecipe.proportional(paths, counts)
    try:
        weights = [float(w) for w in spec.split(",")]
    except ValueError as exc:
        raise ValidationError(f"cannot parse weights {spec!r}") from exc
    if len(weights) != len(paths):
        raise ValidationError(f"{len(weights)} weights given for {len(paths)} inputs")
    return MergeRecipe(tuple(zip(paths, weights)))


@dataclass
class MergeReport:
    output: str
    tensor_count: int
    dtype_counts: dict[str, int]
    max_abs_delta_vs_first: float
    backend: str

    def to_dict(self) -> dict:
        return {
            "output": self.output,
            "tensor_count": self.tensor_count,
            "dtype_counts": dict(sorted(self.dtype_counts.items())),
            "max_abs_delta_vs_first": self.max_abs_delta_vs_first,
            "backend": self.backend,
        }


def _merge_one(name, ordered, out_dtype):
    """Weighted sum of one tensor across inputs, rounded once to out_dtype."""
    first_entry = ordered[0][0].entries[name]
    n = math.prod(first_entry.shape)
    acc = np.zeros(n, dtype=np.float64)
    for manifest, weight in ordered:
        src = np.ascontiguousarray(read_tensor(manifest, name).to_array().reshape(-1))
        kernels.accumulate(acc, src, weight)
    bad = np.flatnonzero(~np.isfinite(acc))
    if bad.size:
        raise NonFiniteResult(name, int(bad[0]))
    dtype = out_dtype or first_entry.dtype
    data = encode(acc, dtype)
    if dtype is not DType.BF16 and not np.all(np.isfinite(data)):
        raise NonFiniteResult(name, int(np.flatnonzero(~np.isfinite(data))[0]))
    return TensorView(name, dtype, first_entry.shape, data.tobytes())


def merge_linear(
    recipe: MergeRecipe,
    out: str | os.PathLike,
    metadata: Mapping[str, str] | None = None,
    workers: int = 1,
) -> MergeReport:
    """Parameter-wise linear interpolation of compatible checkpoints.

    Inputs are summed in path order so permuting the recipe does not change
    the output bytes. Accumulation runs in float64 and each element is
    rounded once to the output dtype.
    """
    manifests = {p: read_manifest(p) for p, _ in recipe.inputs}
    validate_compatibility(list(manifests.values()))
    ordered = sorted(((manifests[p], w) for p, w in recipe.inputs), key=lambda mw: str(mw[0].path))
    first = manifests[recipe.inputs[0][0]]
    names = [n for n, _ in sorted(first.entries.items(), key=lambda kv: kv[1].offsets)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            merged = list(pool.map(lambda n: _merge_one(n, ordered, recipe.output_dtype), names))
    else:
        merged = [_merge_one(n, ordered, recipe.output_dtype) for n in names]

    meta = dict(first.metadata)
    meta.update(metadata or {})
    meta["merge_weights"] = json.dumps([[Path(p).name, w] for p, w in recipe.inputs])
    write_checkpoint(out, merged, meta)

    delta = 0.0
    dtype_counts: dict[str, int] = {}
    for t in merged:
        dtype_counts[t.dtype.value] = dtype_counts.get(t.dtype.value, 0) + 1
        base = read_tensor(first, t.name).to_array().astype(np.float64)
        if base.size:
            delta = max(delta, float(np.max(np.abs(t.to_array().astype(np.float64) - base))))
    return MergeReport(str(out), len(merged), dtype_counts, delta, kernels.BACKEND)
