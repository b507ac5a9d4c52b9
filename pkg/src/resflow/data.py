"""Dataset containers, text ingestion, bucketization, time splits and the synthetic funnel."""

from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .embedding import FieldSchema, Schema
from .errors import ConfigError, DataError

MULTI_SEP = "|"


@dataclass
class Sample:
    features: dict
    labels: dict = field(default_factory=dict)
    timestamp: int = 0
    target: float | None = None
    list_id: object = None
    order_count: float | None = None


@dataclass
class MultiValue:
    """Padded multi-value column: ``values[i, j]`` is meaningful only where ``mask[i, j]``."""

    values: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx) -> "MultiValue":
        return MultiValue(self.values[idx], self.mask[idx])

    def row(self, i) -> tuple:
        return tuple(v.item() if isinstance(v, np.generic) else v for v in self.values[i][self.mask[i]])

    @classmethod
    def from_lists(cls, rows, pad=None) -> "MultiValue":
        width = max((len(r) for r in rows), default=0) or 1
        sample = next((r[0] for r in rows if len(r)), "")
        if pad is None:
            pad = -1 if isinstance(sample, (int, np.integer)) else ""
        values = np.full((len(rows), width), pad, dtype=object if not isinstance(pad, int) else np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            values[i, :len(r)] = list(r)
            mask[i, :len(r)] = True
        if values.dtype == object:
            values = values.astype(str)
        return cls(values, mask)


@dataclass
class Dataset:
    """Columnar sample store. Labels hold NaN where a task label is missing."""

    schema: Schema
    features: dict
    labels: dict = field(default_factory=dict)
    timestamps: np.ndarray | None = None
    target: np.ndarray | None = None
    list_ids: np.ndarray | None = None
    order_counts: np.ndarray | None = None
    numeric: dict = field(default_factory=dict)
    extra_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self)
        if self.timestamps is None:
            self.timestamps = np.zeros(n, dtype=np.int64)
        for name, col in {**self.features, **self.labels, **self.numeric}.items():
            if len(col) != n:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {n}")

    def __len__(self):
        for col in self.features.values():
            return len(col)
        for col in self.labels.values():
            return len(col)
        return 0 if self.timestamps is None else len(self.timestamps)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)

        def pick(c):
            return None if c is None else c.take(idx) if isinstance(c, MultiValue) else c[idx]

        return Dataset(
            schema=self.schema,
            features={k: pick(v) for k, v in self.features.items()},
            labels={k: v[idx] for k, v in self.labels.items()},
            timestamps=self.timestamps[idx],
            target=pick(self.target),
            list_ids=pick(self.list_ids),
            order_counts=pick(self.order_counts),
            numeric={k: v[idx] for k, v in self.numeric.items()},
            extra_labels={k: v[idx] for k, v in self.extra_labels.items()},
        )

    def row(self, i: int) -> Sample:
        feats = {}
        for k, v in self.features.items():
            feats[k] = v.row(i) if isinstance(v, MultiValue) else _scalar(v[i])
        return Sample(
            features=feats,
            labels={k: float(v[i]) for k, v in self.labels.items() if not np.isnan(v[i])},
            timestamp=int(self.timestamps[i]),
            target=None if self.target is None else float(self.target[i]),
            list_id=None if self.list_ids is None else _scalar(self.list_ids[i]),
            order_count=None if self.order_counts is None else float(self.order_counts[i]),
        )

    @classmethod
    def from_samples(cls, schema: Schema, samples) -> "Dataset":
        samples = list(samples)
        feats = {}
        for f in schema:
            try:
                vals = [s.features[f.name] for s in samples]
            except KeyError:
                raise DataError(f"sample is missing field {f.name!r}") from None
            feats[f.name] = MultiValue.from_lists([list(v) for v in vals]) if f.arity == "multi" else np.asarray(vals)
        for s in samples:
            unknown = set(s.features) - set(schema.names)
            if unknown:
                raise DataError(f"unknown field(s) {sorted(unknown)}")
        tasks = sorted({k for s in samples for k in s.labels})
        labels = {t: np.array([s.labels.get(t, np.nan) for s in samples], dtype=float) for t in tasks}
        has_target = any(s.target is not None for s in samples)
        has_list = any(s.list_id is not None for s in samples)
        has_w = any(s.order_count is not None for s in samples)
        return cls(
            schema=schema,
            features=feats,
            labels=labels,
            timestamps=np.array([s.timestamp for s in samples], dtype=np.int64),
            target=np.array([np.nan if s.target is None else s.target for s in samples]) if has_target else None,
            list_ids=np.array([s.list_id for s in samples]) if has_list else None,
            order_counts=np.array([s.order_count or 0 for s in samples], dtype=float) if has_w else None,
        )


def _scalar(v):
    return v.item() if isinstance(v, np.generic) else v


# ---------------------------------------------------------------- bucketization

@dataclass
class Bucketizer:
    boundaries: np.ndarray

    @property
    def num_buckets(self) -> int:
        return len(self.boundaries) + 1

    def transform(self, values) -> np.ndarray:
        # v <= boundary falls in the lower bucket
        return np.searchsorted(self.boundaries, np.asarray(values, dtype=float), side="left").astype(np.int64)


def fit_bucketizer(values, num_buckets: int = 100) -> Bucketizer:
    """Boundaries at the interior empirical quantiles ``k / num_buckets`` (linear interpolation)."""
    if num_buckets < 2:
        raise ConfigError(f"num_buckets must be >= 2, got {num_buckets}")
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if len(v) == 0:
        return Bucketizer(np.zeros(0))
    qs = np.quantile(v, np.arange(1, num_buckets) / num_buckets, method="linear")
    qs = np.unique(qs)
    return Bucketizer(qs[qs < v.max()])


def bucketize(dataset: Dataset, bucketizers: dict) -> Dataset:
    """Replace raw numeric columns with bucket-index categorical features."""
    feats = dict(dataset.features)
    for name, b in bucketizers.items():
        if name not in dataset.numeric:
            raise DataError(f"numeric field {name!r} missing from dataset")
        feats[name] = b.transform(dataset.numeric[name])
    return Dataset(dataset.schema, feats, dataset.labels, dataset.timestamps, dataset.target,
                   dataset.list_ids, dataset.order_counts, {}, dataset.extra_labels)


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "fraction"
    value: float = 0.8
    day_seconds: int = 86400

    def __post_init__(self):
        if self.mode not in ("fraction", "day"):
            raise ConfigError(f"split mode must be 'fraction' or 'day', got {self.mode!r}")
        if self.mode == "fraction" and not 0.0 < self.value < 1.0:
            raise ConfigError(f"split fraction must be in (0, 1), got {self.value}")

    @classmethod
    def parse(cls, text: str, day_seconds: int = 86400) -> "SplitSpec":
        mode, _, val = text.partition(":")
        try:
            return cls(mode.strip(), float(val), day_seconds)
        except ValueError:
            raise ConfigError(f"bad split spec {text!r}; expected 'fraction:0.8' or 'day:10'") from None


def split_by_time(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Stable sort by timestamp; earlier samples train, later samples test."""
    order = np.argsort(dataset.timestamps, kind="stable")
    n = len(order)
    if spec.mode == "fraction":
        cut = int(math.floor(n * spec.value + 1e-9))
    else:
        days = dataset.timestamps[order] // spec.day_seconds
        cut = int(np.searchsorted(days, spec.value, side="left"))
    if cut == 0 or cut == n:
        raise ConfigError(f"split {spec} leaves an empty {'train' if cut == 0 else 'test'} side ({n} samples)")
    return dataset.take(order[:cut]), dataset.take(order[cut:])


# ---------------------------------------------------------------- text ingestion

@dataclass
class Manifest:
    fields: list
    multi_value: list = field(default_factory=list)
    enumerated: list = field(default_factory=list)
    item_fields: list = field(default_factory=list)
    numeric: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    timestamp: str | None = None
    target: str | None = None
    list_id: str | None = None
    order_count: str | None = None
    extra_labels: list = field(default_factory=list)
    delimiter: str = ","
    buckets: int = 100

    def schema(self) -> Schema:
        return Schema(
            FieldSchema(
                name,
                arity="multi" if name in self.multi_value else "single",
                policy="enumerated" if (name in self.enumerated or name in self.numeric) else "counted",
                side="item" if name in self.item_fields else "user",
            )
            for name in self.fields
        )

    def dumps(self) -> str:
        lines = []
        for key in ("fields", "multi_value", "enumerated", "item_fields", "numeric", "labels", "extra_labels"):
            vals = getattr(self, key)
            if vals:
                lines.append(f"{key} = {', '.join(vals)}")
        for key in ("timestamp", "target", "list_id", "order_count"):
            if getattr(self, key):
                lines.append(f"{key} = {getattr(self, key)}")
        lines.append(f"delimiter = {'tab' if self.delimiter == chr(9) else self.delimiter}")
        lines.append(f"buckets = {self.buckets}")
        return "\n".join(lines) + "\n"


def _split_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def read_manifest(path: str) -> Manifest:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_string("[manifest]\n" + fh.read())
    except (OSError, configparser.Error) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    sec = parser["manifest"]
    if "fields" not in sec:
        raise DataError(f"manifest {path} must name 'fields'")
    known = {"fields", "multi_value", "enumerated", "item_fields", "numeric", "labels", "timestamp",
             "target", "list_id", "order_count", "extra_labels", "delimiter", "buckets"}
    unknown = set(sec) - known
    if unknown:
        raise DataError(f"manifest {path}: unknown keys {sorted(unknown)}")
    delim = sec.get("delimiter", ",")
    m = Manifest(
        fields=_split_list(sec["fields"]),
        multi_value=_split_list(sec.get("multi_value", "")),
        enumerated=_split_list(sec.get("enumerated", "")),
        item_fields=_split_list(sec.get("item_fields", "")),
        numeric=_split_list(sec.get("numeric", "")),
        labels=_split_list(sec.get("labels", "")),
        timestamp=sec.get("timestamp") or None,
        target=sec.get("target") or None,
        list_id=sec.get("list_id") or None,
        order_count=sec.get("order_count") or None,
        extra_labels=_split_list(sec.get("extra_labels", "")),
        delimiter="\t" if delim == "tab" else delim,
        buckets=int(sec.get("buckets", "100")),
    )
    for name in m.multi_value + m.numeric + m.item_fields + m.enumerated:
        if name not in m.fields:
            raise DataError(f"manifest {path}: {name!r} is not listed in fields")
    return m


def read_dataset(path: str, manifest: Manifest) -> Dataset:
    """Header row naming columns, one sample per line, multi-value members joined by '|'."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh, delimiter=manifest.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"dataset {path} is empty") from None
        cols = {name: i for i, name in enumerate(header)}
        wanted = manifest.fields + manifest.labels + manifest.extra_labels + [
            c for c in (manifest.timestamp, manifest.target, manifest.list_id, manifest.order_count) if c]
        missing = [c for c in wanted if c not in cols]
        if missing:
            raise DataError(f"dataset {path}: header lacks columns {missing}")
        raw = {c: [] for c in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            for c in wanted:
                raw[c].append(row[cols[c]])

    def floats(name):
        try:
            return np.array([float(v) if v != "" else np.nan for v in raw[name]])
        except ValueError as exc:
            raise DataError(f"{path}: column {name!r}: {exc}") from None

    features, numeric = {}, {}
    for name in manifest.fields:
        if name in manifest.numeric:
            numeric[name] = floats(name)
        elif name in manifest.multi_value:
            features[name] = MultiValue.from_lists([v.split(MULTI_SEP) if v else [] for v in raw[name]])
        else:
            features[name] = np.array(raw[name], dtype=str)
    n = len(next(iter(raw.values()))) if raw else 0
    ts = floats(manifest.timestamp).astype(np.int64) if manifest.timestamp else np.arange(n, dtype=np.int64)
    return Dataset(
        schema=manifest.schema(),
        features=features,
        labels={name: floats(name) for name in manifest.labels},
        timestamps=ts,
        target=floats(manifest.target) if manifest.target else None,
        list_ids=np.array(raw[manifest.list_id], dtype=str) if manifest.list_id else None,
        order_counts=floats(manifest.order_count) if manifest.order_count else None,
        numeric=numeric,
        extra_labels={name: floats(name) for name in manifest.extra_labels},
    )


def write_dataset(dataset: Dataset, path: str, manifest: Manifest) -> None:
    d = manifest.delimiter
    n = len(dataset)
    cols, header = [], []

    def fmt_label(v):
        return "" if np.isnan(v) else f"{v:g}"

    for name in manifest.fields:
        header.append(name)
        col = dataset.numeric[name] if name in dataset.numeric else dataset.features[name]
        if isinstance(col, MultiValue):
            cols.append([MULTI_SEP.join(str(x) for x in col.row(i)) for i in range(n)])
        elif name in dataset.numeric:
            cols.append([repr(float(x)) for x in col])
        else:
            cols.append([str(x) for x in col.tolist()])
    for name in manifest.labels:
        header.append(name)
        cols.append([fmt_label(v) for v in dataset.labels[name]])
    for name in manifest.extra_labels:
        header.append(name)
        cols.append([fmt_label(v) for v in dataset.extra_labels[name]])
    for key, col in ((manifest.timestamp, dataset.timestamps), (manifest.target, dataset.target),
                     (manifest.list_id, dataset.list_ids), (manifest.order_count, dataset.order_counts)):
        if key:
            header.append(key)
            cols.append([fmt_label(v) if isinstance(v, float) else str(v) for v in col.tolist()])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=d, lineterminator="\n")
        w.writerow(header)
        w.writerows(zip(*cols))


# ---------------------------------------------------------------- synthetic funnel

FUNNEL_MANIFEST = Manifest(
    fields=["user_id", "user_segment", "item_id", "item_category"],
    enumerated=["user_segment", "item_category"],
    item_fields=["item_id", "item_category"],
    labels=["click", "order"],
    timestamp="ts",
    list_id="request_id",
    order_count="W",
)


def _calibrate(score: np.ndarray, rate: float, weight: np.ndarray | None = None) -> float:
    """Intercept ``a`` with weighted mean of ``sigmoid(a + score)`` equal to ``rate``."""
    w = np.ones_like(score) if weight is None else weight

    def gap(a):
        return float((w * _sig(a + score)).sum() / w.sum()) - rate

    return brentq(gap, -60.0, 60.0, xtol=1e-12)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_funnel(seed: int, n_users: int = 20000, n_items: int = 5000, base_ctr: float = 0.08,
                    base_cvr: float = 0.026, n_samples: int = 100_000, list_size: int = 50,
                    n_days: int = 10, latent_dim: int = 8, n_segments: int = 50, n_categories: int = 100,
                    cvr_correlation: float = 0.7) -> Dataset:
    """Click -> order funnel from a logistic latent-affinity model.

    Users and items carry latent factors around segment/category centroids;
    clicks are Bernoulli(sigmoid(affinity)), orders are drawn only for clicked
    samples from a partially correlated conversion affinity. Intercepts are
    solved so expected CTR and post-click CVR equal the requested rates.
    Samples come in requests of ``list_size`` items shown to one user.
    """
    if not 0.0 < base_ctr < 1.0:
        raise ConfigError(f"base_ctr must be in (0, 1), got {base_ctr}")
    if not 0.0 <= base_cvr < 1.0:
        raise ConfigError(f"base_cvr must be in [0, 1), got {base_cvr}")
    rng = np.random.default_rng(seed)
    r = latent_dim
    seg_c = rng.normal(0, 1, (n_segments, r))
    cat_c = rng.normal(0, 1, (n_categories, r))
    user_seg = rng.integers(0, n_segments, n_users)
    item_cat = rng.integers(0, n_categories, n_items)
    U = (seg_c[user_seg] + 0.6 * rng.normal(0, 1, (n_users, r))) / math.sqrt(r)
    V = (cat_c[item_cat] + 0.6 * rng.normal(0, 1, (n_items, r))) / math.sqrt(r)
    rho = cvr_correlation
    U2 = rho * U + math.sqrt(1 - rho * rho) * rng.normal(0, 1, U.shape) / math.sqrt(r)
    V2 = rho * V + math.sqrt(1 - rho * rho) * rng.normal(0, 1, V.shape) / math.sqrt(r)
    user_bias = rng.normal(0, 0.3, n_users)
    item_bias = rng.normal(0, 0.5, n_items)
    item_cvr_bias = 0.5 * item_bias + rng.normal(0, 0.4, n_items)
    # mild popularity skew so item ids repeat
    pop = 1.0 / np.arange(1, n_items + 1) ** 0.6
    pop = rng.permutation(pop / pop.sum())

    n_req = max(1, n_samples // list_size)
    req_user = rng.integers(0, n_users, n_req)
    users = np.repeat(req_user, list_size)[:n_samples]
    items = rng.choice(n_items, size=n_samples, p=pop)
    if len(users) < n_samples:
        extra = rng.integers(0, n_users)
        users = np.concatenate([users, np.full(n_samples - len(users), extra)])
    req_id = np.minimum(np.arange(n_samples) // list_size, n_req)

    click_score = 1.6 * (U[users] * V[items]).sum(1) * math.sqrt(r) / 2 + user_bias[users] + item_bias[items]
    a = _calibrate(click_score, base_ctr)
    p_click = _sig(a + click_score)
    cvr_score = 1.6 * (U2[users] * V2[items]).sum(1) * math.sqrt(r) / 2 + item_cvr_bias[items]
    if base_cvr > 0:
        b = _calibrate(cvr_score, base_cvr, weight=p_click)
        p_cvr = _sig(b + cvr_score)
    else:
        p_cvr = np.zeros(n_samples)
    click = (rng.random(n_samples) < p_click).astype(float)
    order = click * (rng.random(n_samples) < p_cvr)

    span = n_days * 86400
    req_ts = np.sort(rng.integers(0, span, n_req + 1))
    ts = req_ts[req_id].astype(np.int64)
    return Dataset(
        schema=FUNNEL_MANIFEST.schema(),
        features={
            "user_id": users.astype(np.int64),
            "user_segment": user_seg[users].astype(np.int64),
            "item_id": items.astype(np.int64),
            "item_category": item_cat[items].astype(np.int64),
        },
        labels={"click": click, "order": order},
        timestamps=ts,
        list_ids=req_id.astype(np.int64),
        order_counts=order.copy(),
        extra_labels={"p_click": p_click, "p_ctcvr": p_click * p_cvr},
    )


# ---------------------------------------------------------------- MovieLens-1M

MOVIELENS_MANIFEST = Manifest(
    fields=["user_id", "gender", "age", "occupation", "zip", "movie_id", "year", "genres"],
    multi_value=["genres"],
    enumerated=["gender", "age", "occupation", "year", "genres"],
    item_fields=["movie_id", "year", "genres"],
    timestamp="timestamp",
    target="rating",
)


def load_movielens_1m(root: str) -> Dataset:
    """Read ``ratings.dat``, ``users.dat`` and ``movies.dat`` ('::'-separated, latin-1)."""
    paths = {k: os.path.join(root, f"{k}.dat") for k in ("ratings", "users", "movies")}
    for k, p in paths.items():
        if not os.path.exists(p):
            raise DataError(f"MovieLens-1M file missing: {p}")

    def rows(path):
        with open(path, encoding="latin-1") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    yield line.split("::")

    users = {r[0]: r[1:5] for r in rows(paths["users"])}
    movies = {}
    for mid, title, genres in rows(paths["movies"]):
        year = title.rstrip()[-5:-1] if title.rstrip().endswith(")") else ""
        movies[mid] = (year, genres.split("|") if genres else [])
    cols = {k: [] for k in ("user_id", "gender", "age", "occupation", "zip", "movie_id", "year")}
    genres, ratings, ts = [], [], []
    for uid, mid, rating, t in rows(paths["ratings"]):
        gender, age, occ, zipc = users.get(uid, ("", "", "", ""))
        year, gen = movies.get(mid, ("", []))
        for k, v in zip(cols, (uid, gender, age, occ, zipc, mid, year)):
            cols[k].append(v)
        genres.append(gen)
        ratings.append(float(rating))
        ts.append(int(t))
    features = {k: np.array(v, dtype=str) for k, v in cols.items()}
    features["genres"] = MultiValue.from_lists(genres)
    return Dataset(
        schema=MOVIELENS_MANIFEST.schema(),
        features=features,
        timestamps=np.array(ts, dtype=np.int64),
        target=np.array(ratings),
    )
