"""Minimal dense reverse-mode autodiff over numpy arrays.

Only the handful of primitives the task towers need are provided: affine
maps, a few activations, row-wise dot products, sum-pooled embedding lookups
and the losses. Every op records itself on the innermost active :class:`Tape`
when at least one input requires a gradient; outside a tape ops simply compute
values, which is the evaluation fast path.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

PROB_EPS = 1e-7

_TAPES: list["Tape"] = []
_KINK_PROBES: list[list] = []


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.value.shape}>"

    def item(self) -> float:
        return float(self.value)


class Parameter(Tensor):
    """Learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(value, requires_grad=True, name=name)


class Tape:
    """Ordered record of executed ops, replayed in reverse by :func:`backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def active_tape():
    return _TAPES[-1] if _TAPES else None


class kink_probe:
    """Collect the distance of every non-smooth op's input to its kink (for gradient checks)."""

    def __enter__(self):
        self.distances: list[float] = []
        _KINK_PROBES.append(self.distances)
        return self

    def __exit__(self, *exc):
        _KINK_PROBES.pop()
        return False

    @property
    def nearest(self) -> float:
        return min(self.distances, default=float("inf"))


def _probe(dist) -> None:
    if _KINK_PROBES and np.size(dist):
        _KINK_PROBES[-1].append(float(np.min(dist)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            tape.nodes.append(out)
    return out


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True).reshape(t.value.shape)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(param) for every parameter reached from ``loss``.

    Returns a mapping ``Parameter -> gradient array``.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    leaves = {}
    for node in tape.nodes:
        node.grad = None
        for p in node._parents:
            if p.requires_grad and p._backward is None:
                leaves[id(p)] = p
    for p in leaves.values():
        p.grad = None
    if not loss.requires_grad:
        return {}
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node._backward(node.grad)
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.value)) for p in leaves.values()}


# ---------------------------------------------------------------- numerics

def sigmoid(z):
    """Logistic function; saturates instead of overflowing.

    Works on floats, numpy arrays and :class:`Tensor` (recorded op).
    """
    if isinstance(z, Tensor):
        return _sigmoid_op(z)
    z = np.asarray(z, dtype=float) if not isinstance(z, np.ndarray) else z
    out = _stable_sigmoid(z)
    return float(out) if out.ndim == 0 else out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype if z.dtype.kind == "f" else float)


def weighted_bce(y, p, w_pos: float = 1.0, w_neg: float = 1.0):
    """Class-weighted binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7].

    With a :class:`Tensor` ``p`` this returns the per-sample loss tensor.
    """
    if isinstance(p, Tensor):
        return _bce_prob_op(np.asarray(y), p, w_pos, w_neg)
    pc = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    w = w_pos if y == 1 else w_neg
    return -w * (y * math.log(pc) + (1 - y) * math.log(1.0 - pc))


# ---------------------------------------------------------------- primitive ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.value + b.value, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.value - b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return _node(a.value * b.value, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _acc(a, g * c)

    return _node(a.value * c, (a,), bw)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bw(g):
        _acc(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(a.value.sum()), (a,), bw)


def weighted_total(a: Tensor, weights) -> Tensor:
    """``sum(a * weights)`` with constant weights."""
    w = np.asarray(weights, dtype=a.value.dtype)

    def bw(g):
        _acc(a, g * w)

    return _node(np.asarray((a.value * w).sum()), (a,), bw)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` for a single vector or a row-batch."""
    xv = x.value

    def bw(g):
        _acc(x, g @ W.value)
        if xv.ndim == 1:
            _acc(W, np.outer(g, xv))
            _acc(b, g)
        else:
            _acc(W, g.T @ xv)
            _acc(b, g.sum(axis=0))

    return _node(xv @ W.value.T + b.value, (x, W, b), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    pos = x.value > 0
    xv = x.value
    _probe(np.abs(xv))

    def bw(g):
        _acc(x, g * np.where(pos, 1.0, slope.value))
        gs = np.where(pos, 0.0, g * xv)
        _acc(slope, gs if gs.ndim == 1 else gs.sum(axis=0))

    return _node(np.where(pos, xv, slope.value * xv), (x, slope), bw)


def min_zero(x: Tensor) -> Tensor:
    """Elementwise ``min(x, 0)``; subgradient 0 at exactly 0."""
    neg = x.value < 0
    _probe(np.abs(x.value))

    def bw(g):
        _acc(x, g * neg)

    return _node(np.where(neg, x.value, 0.0).astype(x.value.dtype), (x,), bw)


def max_zero(x: Tensor) -> Tensor:
    pos = x.value > 0
    _probe(np.abs(x.value))

    def bw(g):
        _acc(x, g * pos)

    return _node(np.where(pos, x.value, 0.0).astype(x.value.dtype), (x,), bw)


def _sigmoid_op(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.value)

    def bw(g):
        _acc(x, g * s * (1.0 - s))

    return _node(s, (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.value > lo) & (x.value < hi)
    _probe(np.minimum(np.abs(x.value - lo), np.abs(x.value - hi)))

    def bw(g):
        _acc(x, g * inside)

    return _node(np.clip(x.value, lo, hi), (x,), bw)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two ``(n, d)`` tensors (or two vectors)."""
    if a.shape != b.shape:
        raise ConfigError(f"inner product dimension mismatch {a.shape} vs {b.shape}")

    def bw(g):
        gg = g[..., None] if a.value.ndim == 2 else g
        _acc(a, gg * b.value)
        _acc(b, gg * a.value)

    return _node((a.value * b.value).sum(axis=-1), (a, b), bw)


def column(x: Tensor, j: int = 0) -> Tensor:
    """Select output unit ``j``: ``(n, k) -> (n,)`` or ``(k,) -> ()``."""

    def bw(g):
        full = np.zeros_like(x.value)
        full[..., j] = g
        _acc(x, full)

    return _node(x.value[..., j], (x,), bw)


def concat(parts: list[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, cuts, axis=-1)):
            _acc(p, gp)

    return _node(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)

    def bw(g):
        _acc(x, g * keep)

    return _node(x.value * keep, (x,), bw)


def embedding_bag(table: Tensor, rows: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Gather rows of ``table``; with a 2-D ``rows`` + ``mask``, sum-pool each row's members."""
    tv = table.value
    if rows.ndim == 1:
        value = tv[rows]
    else:
        value = (tv[rows] * mask[..., None]).sum(axis=1).astype(tv.dtype)

    def bw(g):
        gt = np.zeros_like(tv)
        if rows.ndim == 1:
            np.add.at(gt, rows, g)
        else:
            r, c = np.nonzero(mask)
            np.add.at(gt, rows[r, c], g[r])
        _acc(table, gt)

    return _node(value, (table,), bw)


def _bce_prob_op(y: np.ndarray, p: Tensor, w_pos: float, w_neg: float) -> Tensor:
    pv = p.value
    inside = (pv > PROB_EPS) & (pv < 1.0 - PROB_EPS)
    pc = np.clip(pv, PROB_EPS, 1.0 - PROB_EPS)
    w = np.where(y == 1, w_pos, w_neg)
    value = -w * (y * np.log(pc) + (1 - y) * np.log(1.0 - pc))

    def bw(g):
        _acc(p, g * inside * (-w) * (y / pc - (1 - y) / (1.0 - pc)))

    return _node(value.astype(pv.dtype), (p,), bw)


def bce_with_logits(y: np.ndarray, z: Tensor, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Per-sample weighted BCE of ``sigmoid(z)`` computed directly from logits.

    Equal to ``weighted_bce(y, sigmoid(z))`` away from the clamp, but keeps the
    gradient ``w * (sigmoid(z) - y)`` alive for saturated logits.
    """
    zv = z.value
    w = np.where(y == 1, w_pos, w_neg)
    softplus = np.maximum(zv, 0) + np.log1p(np.exp(-np.abs(zv)))
    value = w * (softplus - y * zv)

    def bw(g):
        _acc(z, g * w * (_stable_sigmoid(zv) - y))

    return _node(value.astype(zv.dtype), (z,), bw)


def squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.value - target

    def bw(g):
        _acc(pred, 2.0 * g * diff)

    return _node((diff * diff).astype(pred.value.dtype), (pred,), bw)


# ---------------------------------------------------------------- layers

ACTIVATIONS = ("prelu", "sigmoid", "identity", "min-zero")


class DenseLayer:
    """``activation(W x + b)`` with Glorot-uniform weights and per-unit PReLU slopes."""

    def __init__(self, in_width: int, out_width: int, activation: str = "prelu",
                 rng: np.random.Generator | None = None, dtype=np.float64, name: str = "dense"):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if in_width < 1 or out_width < 1:
            raise ConfigError(f"layer widths must be positive, got {in_width}->{out_width}")
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = math.sqrt(6.0 / (in_width + out_width))
        self.in_width = in_width
        self.out_width = out_width
        self.activation = activation
        self.weights = Parameter(rng.uniform(-limit, limit, (out_width, in_width)).astype(dtype), f"{name}.W")
        self.bias = Parameter(np.zeros(out_width, dtype=dtype), f"{name}.b")
        self.prelu_slope = (Parameter(np.zeros(out_width, dtype=dtype), f"{name}.slope")
                            if activation == "prelu" else None)

    def parameters(self) -> list[Parameter]:
        ps = [self.weights, self.bias]
        if self.prelu_slope is not None:
            ps.append(self.prelu_slope)
        return ps

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != layer.in_width:
        raise ConfigError(f"dense_forward: input width {x.shape[-1]} != layer in-width {layer.in_width}")
    z = affine(x, layer.weights, layer.bias)
    if layer.activation == "prelu":
        return prelu(z, layer.prelu_slope)
    if layer.activation == "sigmoid":
        return _sigmoid_op(z)
    if layer.activation == "min-zero":
        return min_zero(z)
    return z


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam with a constant learning rate."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                if not m.any():
                    continue
                g = np.zeros_like(m)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= ((self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)).astype(p.value.dtype)


def adam_apply(state: Adam, grads: dict) -> list[Parameter]:
    state.step(grads)
    return state.params
