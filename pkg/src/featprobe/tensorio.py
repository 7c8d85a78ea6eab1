"""Tensor bundles (FTB files), dataset manifests and feature matrices.

FTB layout, all integers little-endian::

    b"FTB1" | u32 count | count x (u32 name_len | utf-8 name | u8 dtype |
                                   u32 ndim | ndim x u64 dims | f32 payload)

Only dtype code 1 (float32) exists. Bundle metadata does not fit in the
byte layout, so it is written next to the bundle as ``<path>.meta.json``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"FTB1"
DTYPE_F32 = 1
SPLITS = ("train", "test")
TASK_KINDS = ("classification", "regression")


class FTBError(Exception):
    """Base class for FTB read/write failures."""


class BadMagicError(FTBError):
    pass


class TruncatedFileError(FTBError):
    pass


class UnknownDtypeError(FTBError):
    pass


class ShapeMismatchError(FTBError, ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Tensor:
    name: str
    dims: tuple[int, ...]
    data: np.ndarray  # flat float32, row-major

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        data = np.ascontiguousarray(np.asarray(self.data, dtype="<f4").reshape(-1))
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        _check_tensor(self)

    @classmethod
    def from_array(cls, name: str, array) -> "Tensor":
        array = np.asarray(array)
        dims = array.shape if array.ndim else (1,)
        return cls(name, dims, array.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _check_tensor(t: Tensor) -> None:
    if not t.dims or any(d < 1 for d in t.dims):
        raise ShapeMismatchError(f"tensor {t.name!r}: dims must be non-empty and >= 1, got {t.dims}")
    if t.data.size != math.prod(t.dims):
        raise ShapeMismatchError(
            f"tensor {t.name!r}: data length {t.data.size} != product of dims {t.dims}"
        )


@dataclass
class TensorBundle:
    entries: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None):
        return cls({k: Tensor.from_array(k, v) for k, v in arrays.items()}, dict(meta or {}))

    def add(self, tensor: Tensor) -> None:
        if tensor.name in self.entries:
            raise ValueError(f"duplicate tensor name {tensor.name!r}")
        self.entries[tensor.name] = tensor

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].array

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)


def encode_bundle(bundle: TensorBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(bundle.entries)))
    for key, t in bundle.entries.items():
        if key != t.name:
            raise ValueError(f"entry key {key!r} does not match tensor name {t.name!r}")
        _check_tensor(t)
        name = t.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BI", DTYPE_F32, len(t.dims)))
        buf.write(struct.pack(f"<{len(t.dims)}Q", *t.dims))
        buf.write(t.data.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def decode_bundle(raw: bytes) -> TensorBundle:
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"need {n} bytes at offset {pos}, file has {len(raw)}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    bundle = TensorBundle()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype, ndim = struct.unpack("<BI", take(5))
        if dtype != DTYPE_F32:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        payload = take(4 * math.prod(dims))
        bundle.add(Tensor(name, dims, np.frombuffer(payload, dtype="<f4")))
    return bundle


def write_bundle(bundle: TensorBundle, path) -> None:
    path = Path(path)
    raw = encode_bundle(bundle)
    path.write_bytes(raw)
    meta_path = Path(str(path) + ".meta.json")
    if bundle.meta:
        meta_path.write_text(json.dumps(bundle.meta, sort_keys=True, indent=1) + "\n")
    elif meta_path.exists():
        meta_path.unlink()


def read_bundle(path) -> TensorBundle:
    path = Path(path)
    bundle = decode_bundle(path.read_bytes())
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        bundle.meta = {str(k): str(v) for k, v in json.loads(meta_path.read_text()).items()}
    return bundle


# --------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class Record:
    path: Path
    split: str
    labels: dict[str, float]


@dataclass
class DatasetManifest:
    records: list[Record]
    sample_rate: int
    clip_seconds: float
    tasks: dict[str, str]
    source: Path | None = None

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=int)

    def split_counts(self) -> dict[str, int]:
        counts = Counter(r.split for r in self.records)
        return {s: counts.get(s, 0) for s in SPLITS}

    def labels(self, task: str) -> np.ndarray:
        values = [r.labels[task] for r in self.records]
        if self.tasks[task] == "classification":
            return np.asarray(values, dtype=int)
        return np.asarray(values, dtype=float)

    def order_hash(self) -> str:
        """Digest of record order; feature files carry it so mixed orders are caught."""
        import hashlib

        h = hashlib.sha256()
        for r in self.records:
            ref = os.path.relpath(r.path, self.source.parent) if self.source else str(r.path)
            h.update(ref.encode() + b"\0" + r.split.encode() + b"\n")
        return h.hexdigest()[:16]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    for key in ("sampleRate", "clipSeconds", "tasks"):
        if key not in header:
            raise ManifestError(f"{path}: header missing {key!r}")
    tasks = dict(header["tasks"])
    for name, kind in tasks.items():
        if kind not in TASK_KINDS:
            raise ManifestError(f"task {name!r}: unknown kind {kind!r}")

    records = []
    for idx, line in enumerate(lines[1:]):
        obj = json.loads(line)
        split = obj.get("split")
        if split not in SPLITS:
            raise ManifestError(f"record {idx}: unknown split {split!r}")
        labels = obj.get("labels", {})
        for task, kind in tasks.items():
            if task not in labels:
                raise ManifestError(f"record {idx}: missing label for task {task!r}")
            if kind == "classification" and float(labels[task]) != int(labels[task]):
                raise ManifestError(f"record {idx}: class label for {task!r} is not an integer")
        rec_path = Path(obj["path"])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        records.append(Record(rec_path, split, {t: labels[t] for t in tasks}))
    return DatasetManifest(
        records, int(header["sampleRate"]), float(header["clipSeconds"]), tasks, source=path
    )


def write_manifest(path, records: Iterable[dict], sample_rate: int, clip_seconds: float,
                   tasks: Mapping[str, str]) -> None:
    header = {"sampleRate": int(sample_rate), "clipSeconds": clip_seconds, "tasks": dict(tasks)}
    lines = [json.dumps(header)]
    lines += [json.dumps(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Feature matrices


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != values.shape[1]:
                raise ValueError(f"{len(names)} column names for {values.shape[1]} columns")
            object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def rows(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[idx], self.column_names)

    def names(self) -> tuple[str, ...]:
        return self.column_names or tuple(f"c{j}" for j in range(self.p))

    @staticmethod
    def hstack(blocks: list["FeatureMatrix"]) -> "FeatureMatrix":
        if not blocks:
            raise ValueError("no feature blocks to concatenate")
        n = {b.n for b in blocks}
        if len(n) != 1:
            raise ValueError(f"blocks disagree on example count: {sorted(n)}")
        names = tuple(nm for b in blocks for nm in b.names())
        return FeatureMatrix(np.hstack([b.values for b in blocks]), names)


def write_feature_csv(fm: FeatureMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fm.names())
        for row in fm.values:
            w.writerow([repr(float(v)) for v in row])


def read_feature_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return FeatureMatrix(np.array(rows[1:], dtype=float).reshape(len(rows) - 1, -1), rows[0])


def feature_to_bundle(fm: FeatureMatrix, name: str = "features",
                      meta: Mapping[str, str] | None = None) -> TensorBundle:
    meta = dict(meta or {})
    if fm.column_names is not None:
        meta.setdefault("columns", json.dumps(list(fm.column_names)))
    return TensorBundle.from_arrays({name: fm.values.astype(np.float32)}, meta)


def feature_from_bundle(bundle: TensorBundle, name: str = "features") -> FeatureMatrix:
    cols = bundle.meta.get("columns")
    return FeatureMatrix(bundle[name].astype(np.float64), json.loads(cols) if cols else None)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
