"""Dataset model, LTA1 tensor files, synthetic long-tailed data and head/tail splits.

An LTA1 file is the 4-byte magic ``b"LTA1"``, the rank as a little-endian
uint32, one little-endian uint32 per dimension, then the row-major payload
as little-endian float32.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ConfigError, FormatError, PartitionError, ShapeError

MAGIC = b"LTA1"
_U32 = struct.Struct("<I")
_U32_MAX = 2**32 - 1


# ---------------------------------------------------------------------------
# tensor I/O
# ---------------------------------------------------------------------------


def encode_tensor(t) -> bytes:
    arr = np.asarray(t, dtype="<f4")
    if arr.ndim > _U32_MAX or any(d > _U32_MAX for d in arr.shape):
        raise FormatError(f"shape {arr.shape} does not fit the uint32 header")
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an LTA1 tensor")
    (rank,) = _U32.unpack_from(buf, 4)
    off = 8
    if len(buf) < off + 4 * rank:
        raise FormatError(f"truncated header: rank {rank} needs {4 * rank} dim bytes")
    dims = tuple(_U32.unpack_from(buf, off + 4 * i)[0] for i in range(rank))
    off += 4 * rank
    n = math.prod(dims)
    expected = 4 * n
    if expected > len(buf) - off:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(buf) - off}")
    if expected < len(buf) - off:
        raise FormatError(f"trailing bytes after payload ({len(buf) - off - expected})")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(t, path) -> None:
    """Persist ``t`` as LTA1. The file is replaced atomically."""
    _atomic_write(Path(path), encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class Record:
    id: str
    tensor_ref: str
    labels: tuple[int, ...]
    split: str
    provenance: dict = field(default_factory=dict)

    def positives(self) -> list[int]:
        return [k for k, v in enumerate(self.labels) if v]


@dataclass
class DatasetManifest:
    """Record set plus the tensors it references.

    Tensors live either in the in-memory ``cache`` (freshly generated data) or
    on disk relative to ``root`` (a loaded manifest); :meth:`tensor` checks both.
    """

    dims: tuple[int, int, int]
    class_names: list[str]
    records: list[Record]
    root: Path | None = None
    cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def tensor(self, record_id: str) -> np.ndarray:
        if record_id in self.cache:
            return self.cache[record_id]
        rec = self.by_id(record_id)
        if self.root is None:
            raise FormatError(f"tensor for {record_id!r} is neither cached nor on disk")
        arr = read_tensor(self.root / rec.tensor_ref)
        if arr.shape != tuple(self.dims):
            raise ShapeError(f"{rec.tensor_ref}: shape {arr.shape} != manifest dims {self.dims}")
        return arr

    def by_id(self, record_id: str) -> Record:
        index = self.__dict__.get("_index")
        if index is None or len(index) != len(self.records):
            index = {r.id: r for r in self.records}
            self.__dict__["_index"] = index
        return index[record_id]

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def arrays(self, split: str = "train") -> tuple[list[str], np.ndarray, np.ndarray]:
        """(ids, latents (N,H,W,C) float32, labels (N,K) float32) for one split."""
        recs = self.split(split)
        if not recs:
            return [], np.zeros((0, *self.dims), np.float32), np.zeros((0, self.num_classes), np.float32)
        z = np.stack([self.tensor(r.id) for r in recs]).astype(np.float32)
        y = np.array([r.labels for r in recs], dtype=np.float32)
        return [r.id for r in recs], z, y

    def class_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for r in self.split(split):
            counts += np.asarray(r.labels, dtype=np.int64)
        return counts

    def validate(self) -> None:
        k = self.num_classes
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise FormatError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if len(r.labels) != k:
                raise FormatError(f"record {r.id!r}: label length {len(r.labels)} != {k}")
            if any(v not in (0, 1) for v in r.labels):
                raise FormatError(f"record {r.id!r}: labels must be 0/1")
            if r.split not in ("train", "test"):
                raise FormatError(f"record {r.id!r}: unknown split {r.split!r}")
            if r.split == "train" and not any(r.labels):
                raise FormatError(f"train record {r.id!r} has no positive label")
        empty = [self.class_names[c] for c, n in enumerate(self.class_counts("train")) if n == 0]
        if empty:
            raise FormatError(f"degenerate manifest: classes without train records: {empty}")

    def with_records(self, extra: Iterable[Record], tensors: dict[str, np.ndarray]) -> "DatasetManifest":
        cache = dict(self.cache)
        cache.update(tensors)
        return DatasetManifest(self.dims, list(self.class_names), self.records + list(extra), self.root, cache)

    def to_json(self) -> dict:
        out = []
        for r in self.records:
            d = {"id": r.id, "tensor": r.tensor_ref, "labels": list(r.labels), "split": r.split}
            d.update(r.provenance)
            out.append(d)
        return {"dims": list(self.dims), "class_names": list(self.class_names), "records": out}


_RECORD_KEYS = {"id", "tensor", "labels", "split"}


def save_manifest(m: DatasetManifest, path, tensor_dir: str = "tensors") -> Path:
    """Write the manifest JSON and every cached tensor next to it.

    Records whose tensors are not cached keep their ``tensor_ref`` rewritten
    relative to the new manifest location.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for r in m.records:
        if r.id in m.cache:
            ref = f"{tensor_dir}/{r.id}.lta"
            write_tensor(m.cache[r.id], root / ref)
        elif m.root is not None:
            ref = os.path.relpath((m.root / r.tensor_ref).resolve(), root.resolve())
        else:
            raise FormatError(f"tensor for {r.id!r} unavailable")
        records.append(Record(r.id, Path(ref).as_posix(), r.labels, r.split, r.provenance))
    out = DatasetManifest(m.dims, m.class_names, records, root)
    text = json.dumps(out.to_json(), indent=1, sort_keys=False)
    _atomic_write(path, (text + "\n").encode("utf-8"))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        dims = tuple(int(d) for d in doc["dims"])
        names = [str(n) for n in doc["class_names"]]
        records = [
            Record(
                id=str(r["id"]),
                tensor_ref=str(r["tensor"]),
                labels=tuple(int(v) for v in r["labels"]),
                split=str(r["split"]),
                provenance={k: v for k, v in r.items() if k not in _RECORD_KEYS},
            )
            for r in doc["records"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if len(dims) != 3:
        raise FormatError(f"{path}: dims must be [H, W, C]")
    m = DatasetManifest(dims, names, records, path.parent)
    m.validate()
    for r in records:
        if not (m.root / r.tensor_ref).is_file():
            raise FormatError(f"{path}: unresolvable tensor {r.tensor_ref!r}")
    return m


# ---------------------------------------------------------------------------
# synthetic long-tailed data
# ---------------------------------------------------------------------------


class SynthConfig(BaseModel):
    k_head: int = Field(3, ge=1)
    k_tail: int = Field(3, ge=1)
    head_count: int = Field(200, ge=1)
    tail_count: int = Field(20, ge=1)
    # Overrides head_count/tail_count when given; head classes come first.
    train_counts: list[int] | None = None
    test_count: int = Field(50, ge=1)
    dims: tuple[int, int, int] = (8, 8, 4)
    noise_std: float = Field(0.1, ge=0.0)
    cooccurrence: float = Field(0.0, ge=0.0, le=1.0)
    prototype_scale: float = Field(1.0, gt=0.0)

    model_config = {"extra": "forbid"}

    @field_validator("dims")
    @classmethod
    def _dims_ok(cls, v):
        h, w, c = v
        if h < 4 or w < 4:
            raise ValueError("H and W must be at least 4")
        if c < 1:
            raise ValueError("C must be at least 1")
        return v

    @model_validator(mode="after")
    def _counts_ok(self):
        if self.train_counts is not None:
            if len(self.train_counts) != self.k_head + self.k_tail:
                raise ValueError("train_counts must list one count per class")
            if min(self.train_counts) < 1:
                raise ValueError("train_counts must all be >= 1")
        return self

    @property
    def num_classes(self) -> int:
        return self.k_head + self.k_tail

    def counts(self) -> list[int]:
        if self.train_counts is not None:
            return list(self.train_counts)
        return [self.head_count] * self.k_head + [self.tail_count] * self.k_tail


def class_regions(num_classes: int, height: int, width: int) -> list[tuple[slice, slice]]:
    """Disjoint axis-aligned rectangles, tiled row-major, one per class."""
    cols = math.ceil(math.sqrt(num_classes))
    rows = math.ceil(num_classes / cols)
    rh, rw = height // rows, width // cols
    if rh < 1 or rw < 1:
        raise ConfigError(f"{num_classes} class regions do not fit in {height}x{width}")
    return [
        (slice((c // cols) * rh, (c // cols + 1) * rh), slice((c % cols) * rw, (c % cols + 1) * rw))
        for c in range(num_classes)
    ]


def class_prototypes(cfg: SynthConfig, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, 0])
    h, w, c = cfg.dims
    out = []
    for rs, cs in class_regions(cfg.num_classes, h, w):
        shape = (rs.stop - rs.start, cs.stop - cs.start, c)
        mag = rng.uniform(0.5, 1.0, size=shape)
        sign = rng.choice([-1.0, 1.0], size=shape)
        out.append((cfg.prototype_scale * mag * sign).astype(np.float32))
    return out


def render_latent(label_set: Sequence[int], cfg: SynthConfig, prototypes, noise: np.ndarray) -> np.ndarray:
    h, w, _ = cfg.dims
    regions = class_regions(cfg.num_classes, h, w)
    z = noise.astype(np.float32).copy()
    for c in label_set:
        rs, cs = regions[c]
        z[rs, cs, :] += prototypes[c]
    return z


def synth_longtail(cfg: SynthConfig, seed: int) -> DatasetManifest:
    """Planted-prototype long-tailed dataset; a pure function of ``(cfg, seed)``.

    ``cfg.counts()`` is the number of records whose primary class is ``c``.
    Other labels are added independently with probability ``cfg.cooccurrence``.
    """
    k = cfg.num_classes
    h, w, c = cfg.dims
    class_regions(k, h, w)
    protos = class_prototypes(cfg, seed)
    names = [f"head_{i}" for i in range(cfg.k_head)] + [f"tail_{i}" for i in range(cfg.k_tail)]
    records, cache = [], {}
    for split, counts, stream in (
        ("train", cfg.counts(), 1),
        ("test", [cfg.test_count] * k, 2),
    ):
        rng = np.random.default_rng([seed, stream])
        primaries = np.concatenate([np.full(n, cls, dtype=np.int64) for cls, n in enumerate(counts)])
        primaries = primaries[rng.permutation(len(primaries))]
        for i, primary in enumerate(primaries):
            extra = rng.random(k) < cfg.cooccurrence
            extra[primary] = True
            labels = tuple(int(v) for v in extra)
            noise = rng.normal(0.0, cfg.noise_std, size=(h, w, c)) if cfg.noise_std > 0 else np.zeros((h, w, c))
            rid = f"{split}_{i:05d}"
            cache[rid] = render_latent(np.flatnonzero(extra), cfg, protos, noise)
            records.append(Record(rid, f"tensors/{rid}.lta", labels, split))
    m = DatasetManifest((h, w, c), names, records, None, cache)
    m.validate()
    return m


# ---------------------------------------------------------------------------
# head/tail partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    head_classes: frozenset[int]
    tail_classes: frozenset[int]

    def to_json(self) -> dict:
        return {"head": sorted(self.head_classes), "tail": sorted(self.tail_classes)}

    @classmethod
    def from_json(cls, d: dict) -> "PartitionSpec":
        return cls(frozenset(d["head"]), frozenset(d["tail"]))


def partition_head_tail(
    m: DatasetManifest,
    head: Iterable[int] | None = None,
    tail: Iterable[int] | None = None,
    threshold: float | None = None,
) -> PartitionSpec:
    """Split classes into head and tail sets.

    Either pass explicit ``head``/``tail`` lists or a count ``threshold``;
    with a threshold, head classes are those with more than ``threshold``
    train positives.
    """
    k = m.num_classes
    if threshold is not None:
        if head is not None or tail is not None:
            raise PartitionError("give either explicit lists or a threshold, not both")
        counts = m.class_counts("train")
        hs = frozenset(c for c in range(k) if counts[c] > threshold)
        ts = frozenset(range(k)) - hs
    else:
        if head is None or tail is None:
            raise PartitionError("explicit partition needs both head and tail lists")
        hs, ts = frozenset(int(c) for c in head), frozenset(int(c) for c in tail)
    if hs & ts:
        raise PartitionError(f"head and tail overlap: {sorted(hs & ts)}")
    if hs | ts != frozenset(range(k)):
        raise PartitionError(f"partition does not cover classes 0..{k - 1}")
    if not hs:
        raise PartitionError("empty head set")
    if not ts:
        raise PartitionError("empty tail set")
    return PartitionSpec(hs, ts)
