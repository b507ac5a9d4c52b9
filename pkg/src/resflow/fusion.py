"""Ranking-score fusion of CTR and CTCVR predictions and offline weight search."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .metrics import RankedList, weighted_recall_at_k, WR_VARIANTS

FAMILIES = ("additive", "multiplicative")
CLAMP = 1e-9

DEFAULT_ADDITIVE_ALPHA = tuple(np.round(np.arange(0.0, 2.0001, 0.25), 10))
DEFAULT_ADDITIVE_BETA = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
DEFAULT_MULT_GRID = tuple(np.round(np.arange(-0.5, 1.5001, 0.1), 10))


@dataclass(frozen=True)
class FusionFormula:
    """additive: ``alpha*CTR + beta*CTCVR``; multiplicative: ``CTR**alpha * CVR**beta``."""

    family: str
    alpha: float
    beta: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"fusion family must be one of {FAMILIES}, got {self.family!r}")

    def __str__(self):
        if self.family == "additive":
            return f"{self.alpha:g}*CTR + {self.beta:g}*CTCVR"
        return f"CTR^{self.alpha:g} * CVR^{self.beta:g}"


def _log_multiplicative(formula: FusionFormula, ctr, ctcvr):
    c = np.maximum(ctr, CLAMP)
    cvr = np.maximum(ctcvr / c, CLAMP)
    return formula.alpha * np.log(c) + formula.beta * np.log(cvr)


def fuse(formula: FusionFormula, ctr, ctcvr):
    ctr = np.asarray(ctr, dtype=float)
    ctcvr = np.asarray(ctcvr, dtype=float)
    if formula.family == "additive":
        out = formula.alpha * ctr + formula.beta * ctcvr
    else:
        out = np.exp(_log_multiplicative(formula, ctr, ctcvr))
    return float(out) if out.ndim == 0 else out


def rank_key(formula: FusionFormula, ctr, ctcvr) -> np.ndarray:
    """Monotone transform of ``fuse`` used for ranking.

    Multiplicative scores are ranked by their logarithm; large exponents
    would otherwise underflow distinct scores to a common 0.
    """
    ctr = np.asarray(ctr, dtype=float)
    ctcvr = np.asarray(ctcvr, dtype=float)
    if formula.family == "additive":
        return formula.alpha * ctr + formula.beta * ctcvr
    return _log_multiplicative(formula, ctr, ctcvr)


@dataclass
class PredictionList:
    """Per-item model predictions and labels for one list."""

    ctr: np.ndarray
    ctcvr: np.ndarray
    W: np.ndarray
    order: np.ndarray = None
    atc: np.ndarray = None
    click: np.ndarray = None
    list_id: object = None

    def ranked(self, formula: FusionFormula) -> RankedList:
        return RankedList(rank_key(formula, self.ctr, self.ctcvr), self.W, self.order, self.atc, self.click,
                          list_id=self.list_id)


@dataclass
class GridSpec:
    alphas: tuple
    betas: tuple
    family: str = "additive"
    k: int = 100
    variant: str = "identity"

    def __post_init__(self):
        if not self.alphas or not self.betas:
            raise ConfigError("fusion grid must have at least one alpha and one beta")
        if self.family not in FAMILIES:
            raise ConfigError(f"fusion family must be one of {FAMILIES}, got {self.family!r}")
        if self.variant not in WR_VARIANTS:
            raise ConfigError(f"unknown WR@K variant {self.variant!r}")

    @classmethod
    def default(cls, family: str, k: int = 100) -> "GridSpec":
        if family == "additive":
            return cls(DEFAULT_ADDITIVE_ALPHA, DEFAULT_ADDITIVE_BETA, family, k)
        return cls(DEFAULT_MULT_GRID, DEFAULT_MULT_GRID, family, k)


@dataclass
class SearchResult:
    best: FusionFormula
    best_metric: float
    table: list = field(default_factory=list)  # (alpha, beta, metric) in grid order

    def sorted_table(self) -> list:
        return sorted(self.table, key=lambda row: (-row[2], row[0], row[1]))


def mean_wr(lists, formula: FusionFormula, k: int, variant: str = "identity") -> float:
    vals = [weighted_recall_at_k(pl.ranked(formula), k, variant)
            for pl in lists if WR_VARIANTS[variant](pl.W).sum() > 0]
    if not vals:
        raise DataError("no list carries any order weight; WR@K is undefined everywhere")
    return float(np.mean(vals))


def grid_search(grid: GridSpec, lists) -> SearchResult:
    """Evaluate mean WR@K for every (alpha, beta); ties go to the lexicographically smaller pair."""
    lists = list(lists)
    if not lists:
        raise ValueError("grid_search needs at least one prediction list")
    table = []
    best = None
    for a, b in itertools.product(grid.alphas, grid.betas):
        f = FusionFormula(grid.family, float(a), float(b))
        m = mean_wr(lists, f, grid.k, grid.variant)
        table.append((float(a), float(b), m))
        key = (m, -float(a), -float(b))
        if best is None or key > best[0]:
            best = (key, f, m)
    return SearchResult(best[1], best[2], table)


# ---------------------------------------------------------------- prediction dumps

DUMP_COLUMNS = ("list_id", "item_id", "ctr", "ctcvr", "W", "order", "atc", "click")


def write_predictions(path: str, rows) -> None:
    """``rows``: iterables matching DUMP_COLUMNS."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:4]] + [f"{float(x):g}" for x in r[4:]])


def read_predictions(path: str) -> list[PredictionList]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open predictions {path}: {exc}") from None
    groups: dict = {}
    with fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header[:4]) != DUMP_COLUMNS[:4]:
            raise DataError(f"{path}: expected header starting with {DUMP_COLUMNS[:4]}")
        cols = {c: i for i, c in enumerate(header)}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(row[cols[c]]) if c in cols else 0.0 for c in DUMP_COLUMNS[2:]]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault(row[0], []).append(vals)
    out = []
    for lid, rows in groups.items():
        a = np.array(rows)
        out.append(PredictionList(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5], list_id=lid))
    return out
