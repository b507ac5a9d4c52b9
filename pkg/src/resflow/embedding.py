"""Per-field categorical embedding tables shared by all task towers.

Row 0 of every field matrix is that field's learnable default vector; ids
without an entry (too rare, evicted or never seen) are routed there.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .tensor import Parameter, Tensor, concat, embedding_bag

ARITIES = ("single", "multi")
POLICIES = ("counted", "enumerated")
SIDES = ("user", "item")


@dataclass(frozen=True)
class FieldSchema:
    name: str
    arity: str = "single"
    policy: str = "counted"
    # only consulted by twin-tower models
    side: str = "user"

    def __post_init__(self):
        if self.arity not in ARITIES:
            raise ConfigError(f"field {self.name!r}: arity must be one of {ARITIES}")
        if self.policy not in POLICIES:
            raise ConfigError(f"field {self.name!r}: policy must be one of {POLICIES}")
        if self.side not in SIDES:
            raise ConfigError(f"field {self.name!r}: side must be one of {SIDES}")


class Schema:
    """Ordered, uniquely named fields. Order fixes the concatenation layout."""

    def __init__(self, fields):
        self.fields = tuple(fields)
        names = [f.name for f in self.fields]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"duplicate field names in schema: {dupes}")
        self._by_name = {f.name: f for f in self.fields}

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def __getitem__(self, name) -> FieldSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise DataError(f"unknown field {name!r}") from None

    def __contains__(self, name):
        return name in self._by_name

    def __iter__(self):
        return iter(self.fields)

    def __len__(self):
        return len(self.fields)

    def __eq__(self, other):
        return isinstance(other, Schema) and self.fields == other.fields

    def side(self, side: str) -> list[str]:
        return [f.name for f in self.fields if f.side == side]


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


class EmbeddingTable:
    def __init__(self, schema: Schema, dim: int, min_count: int = 1, seed: int = 0, dtype=np.float32):
        if dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {dim}")
        if min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {min_count}")
        self.schema = schema
        self.dim = dim
        self.min_count = min_count
        self.dtype = dtype
        self._rng = np.random.default_rng([seed, 0xE3B])
        self.index: dict[str, dict] = {f.name: {} for f in schema}
        self.counts: dict[str, dict] = {f.name: {} for f in schema}
        self.last_seen: dict[str, dict] = {f.name: {} for f in schema}
        self.vectors: dict[str, Parameter] = {
            f.name: Parameter(self._init_rows(1), f"emb.{f.name}") for f in schema
        }

    def _init_rows(self, n: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(self.dim)
        return self._rng.uniform(-bound, bound, (n, self.dim)).astype(self.dtype)

    def parameters(self) -> list[Parameter]:
        return [self.vectors[f.name] for f in self.schema]

    def __len__(self):
        return sum(len(ix) for ix in self.index.values())

    def stored_ids(self, field: str) -> set:
        return set(self.index[field])

    # -- vocabulary ------------------------------------------------------

    def observe(self, features: dict, days: np.ndarray) -> None:
        """Tally occurrences and last-seen days; allocate rows for ids crossing the threshold."""
        for f in self.schema:
            if f.name not in features:
                continue
            col = features[f.name]
            if f.arity == "multi":
                vals = col.values[col.mask]
                vdays = np.broadcast_to(days[:, None], col.mask.shape)[col.mask]
            else:
                vals = np.asarray(col)
                vdays = days
            if len(vals) == 0:
                continue
            uniq, inv = np.unique(vals, return_inverse=True)
            cnt = np.bincount(inv, minlength=len(uniq))
            last = np.full(len(uniq), np.iinfo(np.int64).min, dtype=np.int64)
            np.maximum.at(last, inv, vdays.astype(np.int64))
            counts, seen, index = self.counts[f.name], self.last_seen[f.name], self.index[f.name]
            fresh = []
            for u, c, d in zip(uniq.tolist(), cnt.tolist(), last.tolist()):
                total = counts.get(u, 0) + c
                counts[u] = total
                seen[u] = max(seen.get(u, d), d)
                if u not in index and (f.policy == "enumerated" or total > self.min_count):
                    fresh.append(u)
            if fresh:
                p = self.vectors[f.name]
                start = p.value.shape[0]
                for j, u in enumerate(fresh):
                    index[u] = start + j
                p.value = np.concatenate([p.value, self._init_rows(len(fresh))])

    def evict(self, current_day: int, window: float) -> "EmbeddingTable":
        """Drop entries unseen for more than ``window`` days (in place; returns self)."""
        for f in self.schema:
            index, seen, counts = self.index[f.name], self.last_seen[f.name], self.counts[f.name]
            stale = [u for u, d in seen.items() if current_day - d > window]
            if not stale:
                continue
            for u in stale:
                index.pop(u, None)
                seen.pop(u)
                counts.pop(u, None)
            p = self.vectors[f.name]
            kept = sorted(index.items(), key=lambda kv: kv[1])
            rows = [0] + [r for _, r in kept]
            p.value = p.value[rows].copy()
            self.index[f.name] = {u: i + 1 for i, (u, _) in enumerate(kept)}
        return self

    # -- lookup ----------------------------------------------------------

    def rows_for(self, field: str, values: np.ndarray) -> np.ndarray:
        index = self.index[field]
        values = np.asarray(values)
        if values.size == 0:
            return np.zeros(values.shape, dtype=np.int64)
        uniq, inv = np.unique(values, return_inverse=True)
        mapped = np.fromiter((index.get(u, 0) for u in uniq.tolist()), dtype=np.int64, count=len(uniq))
        return mapped[inv].reshape(values.shape)

    def encode(self, features: dict) -> dict:
        """Map raw ids to table rows once per dataset: field -> rows or (rows, mask)."""
        out = {}
        for f in self.schema:
            if f.name not in features:
                raise DataError(f"sample is missing field {f.name!r}")
            col = features[f.name]
            if f.arity == "multi":
                rows = self.rows_for(f.name, col.values)
                out[f.name] = (rows, col.mask.astype(self.dtype))
            else:
                out[f.name] = self.rows_for(f.name, col)
        for name in features:
            if name not in self.schema:
                raise DataError(f"unknown field {name!r}")
        return out

    def lookup(self, encoded: dict, fields=None) -> Tensor:
        """Concatenate per-field vectors (sum-pooled for multi-value) in schema order."""
        names = [f.name for f in self.schema] if fields is None else list(fields)
        parts = []
        for name in names:
            enc = encoded[name]
            if isinstance(enc, tuple):
                parts.append(embedding_bag(self.vectors[name], enc[0], enc[1]))
            else:
                parts.append(embedding_bag(self.vectors[name], enc))
        return parts[0] if len(parts) == 1 else concat(parts)

    # -- persistence -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(struct.pack("<II", len(self.schema), self.dim))
        for f in self.schema:
            index = self.index[f.name]
            mat = self.vectors[f.name].value.astype("<f4")
            ids = sorted(index, key=index.get)
            is_int = all(isinstance(u, int) for u in ids)
            _write_str(buf, f.name)
            buf.write(struct.pack("<BI", 0 if is_int else 1, len(ids)))
            buf.write(mat[0].tobytes())
            for u in ids:
                if is_int:
                    buf.write(struct.pack("<q", u))
                else:
                    _write_str(buf, str(u))
                buf.write(mat[index[u]].tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, schema: Schema, min_count: int = 1) -> "EmbeddingTable":
        buf = io.BytesIO(data)
        try:
            n_fields, dim = struct.unpack("<II", _read(buf, 8))
            if n_fields != len(schema):
                raise CheckpointError(f"embedding section has {n_fields} fields, schema has {len(schema)}")
            table = cls(schema, dim, min_count=min_count)
            width = 4 * dim
            for f in schema:
                name = _read_str(buf)
                if name != f.name:
                    raise CheckpointError(f"embedding section field {name!r} != schema field {f.name!r}")
                kind, n = struct.unpack("<BI", _read(buf, 5))
                rows = [np.frombuffer(_read(buf, width), dtype="<f4")]
                index = {}
                for i in range(n):
                    u = struct.unpack("<q", _read(buf, 8))[0] if kind == 0 else _read_str(buf)
                    index[u] = i + 1
                    rows.append(np.frombuffer(_read(buf, width), dtype="<f4"))
                table.index[f.name] = index
                table.vectors[f.name].value = np.stack(rows).astype(np.float32)
            if buf.read(1):
                raise CheckpointError("trailing bytes after embedding section")
        except struct.error as exc:
            raise CheckpointError(f"truncated embedding section: {exc}") from None
        return table


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated embedding section")
    return raw


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", _read(buf, 4))
    try:
        return _read(buf, n).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("corrupted string in embedding section") from None


def build_vocab(dataset, min_count: int = 1, dim: int = 8, seed: int = 0, day_seconds: int = 86400,
                dtype=np.float32) -> EmbeddingTable:
    """Allocate entries for ids seen more than ``min_count`` times (all ids for enumerated fields)."""
    table = EmbeddingTable(dataset.schema, dim, min_count=min_count, seed=seed, dtype=dtype)
    days = dataset.timestamps // day_seconds if len(dataset) else np.zeros(0, dtype=np.int64)
    table.observe(dataset.features, days)
    return table


def evict(table: EmbeddingTable, current_day: int, window: float) -> EmbeddingTable:
    return table.evict(current_day, window)


def lookup_concat(table: EmbeddingTable, sample) -> np.ndarray:
    """Input vector for one sample: per-field vectors concatenated in schema order."""
    feats = {}
    for name, v in sample.features.items():
        if name not in table.schema:
            raise DataError(f"unknown field {name!r}")
    for f in table.schema:
        if f.name not in sample.features:
            raise DataError(f"sample is missing field {f.name!r}")
        v = sample.features[f.name]
        if f.arity == "multi":
            members = list(v)
            rows = table.rows_for(f.name, np.asarray(members, dtype=object)) if members else np.zeros(0, np.int64)
            vec = table.vectors[f.name].value[rows].sum(axis=0) if len(rows) else np.zeros(table.dim)
        else:
            vec = table.vectors[f.name].value[table.index[f.name].get(_py(v), 0)]
        feats[f.name] = vec
    return np.concatenate([feats[f.name] for f in table.schema])
