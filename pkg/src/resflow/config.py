"""Run configuration: INI-style sections, named presets, validation with line numbers."""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import LINK_PRESETS, MODES, PLACEMENTS, REGULARIZERS, Edge, LossSpec, TaskGraph, TowerSpec, TrainConfig
from .progressive import KUAIRAND_PLAYTIME_LADDER, MOVIELENS_LADDER, ThresholdLadder

SOURCES = ("csv", "movielens-1m", "synthetic-funnel")
REGRESSION_STYLES = ("none", "traditional", "progressive")

# key -> (section, parser name)
_KEYS = {
    "source": ("data", "choice:source"),
    "manifest": ("data", "str"),
    "path": ("data", "str"),
    "test_path": ("data", "str"),
    "split": ("data", "str"),
    "buckets": ("data", "int"),
    "min_count": ("data", "int"),
    "eviction_days": ("data", "float"),
    "synthetic_samples": ("data", "int"),
    "preset": ("model", "str"),
    "mode": ("model", "choice:mode"),
    "tasks": ("model", "list"),
    "links": ("model", "choice:links"),
    "edges": ("model", "str"),
    "widths": ("model", "intlist"),
    "activation": ("model", "str"),
    "dropout": ("model", "floatlist"),
    "twin": ("model", "bool"),
    "placement": ("model", "choice:placement"),
    "embedding_dim": ("model", "int"),
    "epochs": ("train", "int"),
    "batch_size": ("train", "int"),
    "lr": ("train", "float"),
    "seed": ("train", "int"),
    "pos_weights": ("train", "weights"),
    "task_weights": ("train", "weights"),
    "regularizer": ("train", "choice:regularizer"),
    "lam": ("train", "float"),
    "style": ("regression", "choice:style"),
    "ladder": ("regression", "floatlist"),
    "out": ("output", "str"),
    "ks": ("output", "intlist"),
}

_CHOICES = {
    "source": SOURCES,
    "mode": MODES,
    "links": LINK_PRESETS,
    "placement": PLACEMENTS,
    "regularizer": REGULARIZERS,
    "style": REGRESSION_STYLES,
}


@dataclass
class RunConfig:
    # [data]
    source: str = "csv"
    manifest: str = ""
    path: str = ""
    test_path: str = ""
    split: str = "fraction:0.8"
    buckets: int = 100
    min_count: int = 1
    eviction_days: float = math.inf
    synthetic_samples: int = 100_000
    # [model]
    preset: str = ""
    mode: str = "resflow"
    tasks: list = field(default_factory=list)
    links: str = "full"
    edges: str = ""
    widths: list = field(default_factory=lambda: [128, 64, 1])
    activation: str = "prelu"
    dropout: list = field(default_factory=list)
    twin: bool = False
    placement: str = "after"
    embedding_dim: int = 8
    # [train]
    epochs: int = 1
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    pos_weights: object = field(default_factory=dict)
    task_weights: object = field(default_factory=dict)
    regularizer: str = ""
    lam: float = 0.0
    # [regression]
    style: str = "none"
    ladder: list = field(default_factory=list)
    # [output]
    out: str = "out"
    ks: list = field(default_factory=lambda: [10, 50, 100])

    # ---------------------------------------------------------- derived objects

    @property
    def effective_regularizer(self) -> str:
        if self.regularizer:
            return self.regularizer
        # progressive chains default to the structural mandate
        return "M3" if self.style == "progressive" and self.mode == "resflow" else "none"

    def threshold_ladder(self) -> ThresholdLadder | None:
        return ThresholdLadder(tuple(self.ladder)) if self.style == "progressive" else None

    def task_names(self, default_labels=()) -> list[str]:
        if self.style == "progressive":
            return self.threshold_ladder().task_names()
        if self.tasks:
            return list(self.tasks)
        return list(default_labels)

    def graph(self, tasks) -> TaskGraph:
        n_hidden = len(self.widths) - 1
        if self.edges:
            g = TaskGraph(tasks, parse_edges(self.edges))
        else:
            g = TaskGraph.chain(tasks, self.links, n_hidden)
        if self.mode == "nse":
            return TaskGraph(tasks)
        if self.mode == "esmm":
            return g.without_links()
        return g

    def tower(self) -> TowerSpec:
        return TowerSpec(
            tuple(self.widths),
            activation=self.activation,
            dropout=tuple(self.dropout),
            mandate=self.mode == "resflow" and self.effective_regularizer == "M3",
            twin=self.twin,
            placement=self.placement,
        )

    def loss_spec(self, tasks) -> LossSpec:
        return LossSpec(
            task_weights=_resolve_weights(self.task_weights, tasks, "task_weights"),
            pos_weights=_resolve_weights(self.pos_weights, tasks, "pos_weights"),
            regularizer=self.effective_regularizer,
            lam=self.lam,
        )

    def train_config(self, tasks) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed, self.loss_spec(tasks))

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # ---------------------------------------------------------- validation

    def problems(self) -> list[str]:
        """Every semantic problem, one message each (empty when valid)."""
        out = []
        if self.source == "csv" and not (self.manifest and self.path):
            out.append("data: 'manifest' and 'path' are required for source = csv")
        if self.source == "movielens-1m" and not self.path:
            out.append("data: 'path' must point at the MovieLens-1M directory")
        if self.buckets < 2:
            out.append("data.buckets: must be >= 2")
        if self.min_count < 1:
            out.append("data.min_count: must be >= 1")
        if self.eviction_days < 0:
            out.append("data.eviction_days: must be >= 0")
        if self.synthetic_samples < 1:
            out.append("data.synthetic_samples: must be >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            out.append("model.widths: must be a non-empty list of positive integers")
        elif not self.twin and self.widths[-1] != 1:
            out.append("model.widths: a single tower must end in 1")
        if self.embedding_dim < 1:
            out.append("model.embedding_dim: must be >= 1")
        if self.epochs < 0:
            out.append("train.epochs: must be >= 0")
        if self.batch_size < 1:
            out.append("train.batch_size: must be >= 1")
        if not self.lr > 0:
            out.append("train.lr: must be > 0")
        if self.lam < 0:
            out.append("train.lam: must be >= 0")
        if self.twin and self.placement == "both":
            out.append("model.placement: 'both' is not supported")
        if self.effective_regularizer in ("M1", "M2") and self.mode == "nse":
            out.append(f"train.regularizer: {self.effective_regularizer} needs a task chain; mode nse has none")
        if self.style == "progressive":
            try:
                ThresholdLadder(tuple(self.ladder))
            except ConfigError as exc:
                out.append(f"regression.ladder: {exc}")
        if self.style == "traditional" and self.mode != "nse":
            out.append("model.mode: a traditional regression head is a single task; use mode = nse")
        if self.edges:
            try:
                parse_edges(self.edges)
            except ConfigError as exc:
                out.append(f"model.edges: {exc}")
        if any(not 0 <= r < 1 for r in self.dropout):
            out.append("model.dropout: rates must be in [0, 1)")
        if self.dropout and len(self.dropout) > max(len(self.widths) - 1, 0):
            out.append("model.dropout: more rates than hidden layers")
        if any(k < 1 for k in self.ks):
            out.append("output.ks: every K must be >= 1")
        return out

    def validate(self, label_columns=None) -> None:
        errs = self.problems()
        if label_columns is not None and self.style == "none":
            for t in self.task_names(label_columns):
                if t not in label_columns:
                    errs.append(f"model.tasks: task {t!r} is not a label column ({', '.join(label_columns)})")
        if errs:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))

    # ---------------------------------------------------------- text form

    def dumps(self) -> str:
        sections: dict = {}
        for f in fields(self):
            sec, kind = _KEYS[f.name]
            sections.setdefault(sec, []).append(f"{f.name} = {_format(getattr(self, f.name), kind)}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


def _format(v, kind) -> str:
    if kind in ("intlist", "floatlist", "list"):
        return ", ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    if kind == "weights":
        if isinstance(v, dict):
            return ", ".join(f"{k}:{w:g}" for k, w in v.items())
        return ", ".join(f"{w:g}" for w in v)
    if kind == "bool":
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _resolve_weights(spec, tasks, key) -> dict:
    if isinstance(spec, dict):
        unknown = [t for t in spec if t not in tasks]
        if unknown:
            raise ConfigError(f"train.{key}: unknown task(s) {unknown}")
        return dict(spec)
    spec = list(spec)
    # ordered lists may carry one extra leading entry for the ladder minimum; it is dropped
    if len(spec) == len(tasks) + 1:
        spec = spec[1:]
    if len(spec) != len(tasks):
        raise ConfigError(f"train.{key}: {len(spec)} values for {len(tasks)} tasks")
    return dict(zip(tasks, spec))


_EDGE_RE = re.compile(r"^\s*([\w.-]+)\s*->\s*([\w.-]+)\s*(?::(.*))?$")


def parse_edges(text: str) -> list[Edge]:
    """``src->dst: 1 2 logit; dst->next: logit``; an edge with no links is a plain dependency."""
    edges = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        m = _EDGE_RE.match(part)
        if not m:
            raise ConfigError(f"cannot parse edge {part!r}; expected 'src->dst: 1 2 logit'")
        layers, logit = set(), False
        for tok in (m.group(3) or "").replace(",", " ").split():
            if tok == "logit":
                logit = True
            elif tok.isdigit():
                layers.add(int(tok))
            else:
                raise ConfigError(f"edge {part!r}: unknown link {tok!r}")
        edges.append(Edge(m.group(1), m.group(2), frozenset(layers), logit))
    return edges


# ---------------------------------------------------------------- presets

def _preset(**kw) -> dict:
    return kw


PRESETS = {
    "aliccp-nse": _preset(mode="nse", widths=[128, 64, 1], lr=4e-4, embedding_dim=32, batch_size=2048,
                          pos_weights=[1, 1000]),
    "aliccp-esmm": _preset(mode="esmm", widths=[128, 64, 1], lr=4e-4, embedding_dim=32, batch_size=2048,
                           pos_weights=[1, 50]),
    "aliccp-resflow": _preset(mode="resflow", widths=[128, 64, 1], lr=4e-4, embedding_dim=32, batch_size=2048,
                              pos_weights=[100, 500]),
    "ae-nse": _preset(mode="nse", widths=[256, 128, 16, 1], dropout=[0.2, 0.2, 0.0], lr=1e-3, embedding_dim=32,
                      batch_size=1024, pos_weights=[100, 10]),
    "ae-esmm": _preset(mode="esmm", widths=[256, 128, 16, 1], dropout=[0.2, 0.2, 0.0], lr=1e-3, embedding_dim=32,
                       batch_size=1024, pos_weights=[50, 10]),
    "ae-resflow": _preset(mode="resflow", widths=[256, 128, 16, 1], dropout=[0.2, 0.2, 0.0], lr=1e-3,
                          embedding_dim=32, batch_size=1024, pos_weights=[1, 500]),
    "shopee-nse": _preset(mode="nse", widths=[256, 128, 16], twin=True, lr=4e-4, embedding_dim=16, batch_size=512),
    "shopee-esmm": _preset(mode="esmm", widths=[256, 128, 16], twin=True, lr=4e-4, embedding_dim=16, batch_size=512),
    "shopee-resflow": _preset(mode="resflow", widths=[256, 128, 16], twin=True, lr=4e-4, embedding_dim=16,
                              batch_size=512),
    "movielens-traditional": _preset(mode="nse", style="traditional", widths=[192, 128, 1], lr=1e-3,
                                     embedding_dim=8, batch_size=512),
    "movielens-progressive-nse": _preset(mode="nse", style="progressive", ladder=list(MOVIELENS_LADDER),
                                         widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512),
    "movielens-progressive-resflow": _preset(mode="resflow", style="progressive", ladder=list(MOVIELENS_LADDER),
                                             widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512),
    "kuairand-traditional": _preset(mode="nse", style="traditional", widths=[64, 64, 1], lr=1e-3,
                                    embedding_dim=8, batch_size=512),
    "kuairand-progressive-nse": _preset(mode="nse", style="progressive", ladder=list(KUAIRAND_PLAYTIME_LADDER),
                                        widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512),
    "kuairand-progressive-resflow": _preset(mode="resflow", style="progressive",
                                            ladder=list(KUAIRAND_PLAYTIME_LADDER), widths=[128, 64, 1], lr=1e-3,
                                            embedding_dim=8, batch_size=512),
    "kuairand-mtl-nse": _preset(mode="nse", widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512,
                                pos_weights=[1, 1, 100, 1, 40]),
    "kuairand-mtl-esmm": _preset(mode="esmm", widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512,
                                 pos_weights=[1, 20, 20, 20, 20]),
    "kuairand-mtl-resflow": _preset(mode="resflow", widths=[128, 64, 1], lr=1e-3, embedding_dim=8, batch_size=512,
                                    pos_weights=[1, 20, 20, 20, 20]),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return RunConfig(preset=name, **{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- parsing

def _line_numbers(text: str) -> dict:
    """(section, key) -> 1-based line number, for diagnostics."""
    where, section = {}, ""
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")):
            where.setdefault((section, s.split("=", 1)[0].strip()), no)
    return where


def _parse_value(raw: str, kind: str):
    raw = raw.strip()
    if kind == "str":
        return raw
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "list":
        return [p.strip() for p in raw.split(",") if p.strip()]
    if kind == "intlist":
        return [int(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
    if kind == "floatlist":
        return [float(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
    if kind == "weights":
        parts = [p.strip() for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
        if not parts:
            return {}
        if all(":" in p for p in parts):
            return {k.strip(): float(v) for k, v in (p.split(":", 1) for p in parts)}
        return [float(p) for p in parts]
    if kind.startswith("choice:"):
        options = _CHOICES[kind.split(":", 1)[1]]
        if raw == "" and kind == "choice:regularizer":
            return ""  # unset: resolved from the regression style
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {raw!r}")
        return raw
    raise AssertionError(kind)


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    """Parse INI text; every bad key is reported with its line number before anything runs."""
    lines = _line_numbers(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    errors, values = [], {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            where = f"{origin}:{lines.get((section, key), '?')}"
            if key not in _KEYS or _KEYS[key][0] != section:
                hint = f" (belongs in [{_KEYS[key][0]}])" if key in _KEYS else ""
                errors.append(f"{where}: unknown key {section}.{key}{hint}")
                continue
            try:
                values[key] = _parse_value(raw, _KEYS[key][1])
            except ValueError as exc:
                errors.append(f"{where}: {section}.{key}: {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    name = values.pop("preset", "")
    cfg = preset(name, **values) if name else RunConfig(**values)
    problems = cfg.problems()
    if problems:
        # attach line numbers where the offending key is known
        located = []
        for msg in problems:
            key = msg.split(":", 1)[0]
            sec, _, k = key.partition(".")
            no = lines.get((sec, k))
            located.append(f"{origin}:{no}: {msg}" if no else f"{origin}: {msg}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(located))
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, origin=path)
