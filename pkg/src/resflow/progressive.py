"""Bounded regression recast as a chain of threshold-exceedance tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MOVIELENS_LADDER = (1.0, 2.0, 3.0, 4.0, 5.0)
KUAIRAND_PLAYTIME_LADDER = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0)


@dataclass(frozen=True)
class ThresholdLadder:
    """``v_0 < v_1 < ... < v_K``; task ``k`` (1-based) predicts ``Q(v >= v_k)``."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ConfigError("a ladder needs at least two values (K >= 1)")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"ladder must be strictly increasing, got {vals}")

    @property
    def K(self) -> int:
        return len(self.values) - 1

    def task_names(self, prefix: str = "ge") -> list[str]:
        return [f"{prefix}_{v:g}" for v in self.values[1:]]


def encode_labels(v, ladder: ThresholdLadder) -> np.ndarray:
    """Binary labels ``1[v_k <= v]`` for k = 1..K; ``v`` is clamped into the ladder range.

    Accepts a scalar (returns shape ``(K,)``) or an array (returns ``(n, K)``).
    """
    vals = np.asarray(ladder.values)
    x = np.clip(np.asarray(v, dtype=float), vals[0], vals[-1])
    return (vals[1:] <= x[..., None]).astype(float)


def decode_expectation(Q, ladder: ThresholdLadder) -> np.ndarray | float:
    """Expected value from exceedance probabilities ``Q[..., k-1] = Q(v >= v_k)``.

    ``E = sum_{k<K} v_k * max(Q_k - Q_{k+1}, 0) + v_K * Q_K`` with ``Q_0 = 1``.
    """
    q = np.asarray(Q, dtype=float)
    if q.shape[-1] != ladder.K:
        raise ConfigError(f"expected {ladder.K} probabilities per row, got {q.shape[-1]}")
    vals = np.asarray(ladder.values)
    full = np.concatenate([np.ones(q.shape[:-1] + (1,)), q], axis=-1)
    mass = np.maximum(full[..., :-1] - full[..., 1:], 0.0)
    out = (mass * vals[:-1]).sum(axis=-1) + vals[-1] * full[..., -1]
    return float(out) if out.ndim == 0 else out


def regression_mse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.size == 0:
        raise ValueError("regression_mse needs at least one sample")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))
