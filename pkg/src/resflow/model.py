"""Multi-task towers over a shared embedding input with inter-task residual links.

Each task owns a tower of identical shape. A link from task ``s`` to task
``t`` at hidden depth ``l`` turns ``t``'s ``l``-th block into a residual
learner: ``o_t[l] = o_s[l] + f_t[l](o_t[l-1])``. A logit link does the same
for the final block, optionally clamping the residual to be non-positive so
that chained probabilities cannot increase. NSE is the link-free special case;
ESMM multiplies stage probabilities along the chain instead.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embedding import EmbeddingTable
from .errors import ConfigError, DataError, NumericalError
from .tensor import PROB_EPS, Adam, DenseLayer, Tape, Tensor

MODES = ("nse", "esmm", "resflow")
REGULARIZERS = ("none", "M1", "M2", "M3")
PLACEMENTS = ("after", "before", "both")
TASK_KINDS = ("binary", "regression")

LINK_PRESETS = ("full", "fr", "lr", "h1", "h2", "none")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    layers: frozenset = frozenset()
    logit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))

    @property
    def has_links(self) -> bool:
        return bool(self.layers) or self.logit


def preset_links(preset: str, n_hidden: int) -> tuple[frozenset, bool]:
    """Link sets for the ablation presets: full, fr (features only), lr (logit only), h1, h2, none."""
    if preset not in LINK_PRESETS:
        raise ConfigError(f"unknown link preset {preset!r}; expected one of {LINK_PRESETS}")
    hidden = frozenset(range(1, n_hidden + 1))
    return {
        "full": (hidden, True),
        "fr": (hidden, False),
        "lr": (frozenset(), True),
        "h1": (frozenset({1}), False),
        "h2": (frozenset({2}), False),
        "none": (frozenset(), False),
    }[preset]


class TaskGraph:
    """Directed acyclic topology over named tasks."""

    def __init__(self, tasks, edges=()):
        self.tasks = tuple(tasks)
        self.edges = tuple(edges)
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"duplicate task names in {self.tasks}")
        for e in self.edges:
            for t in (e.src, e.dst):
                if t not in self.tasks:
                    raise ConfigError(f"edge {e.src}->{e.dst} references unknown task {t!r}")
            if e.src == e.dst:
                raise ConfigError(f"self-loop on task {e.src!r}")
        self._order = self._toposort()
        self._feature_src = {}
        self._logit_src = {}
        for e in self.edges:
            for l in e.layers:
                if (e.dst, l) in self._feature_src:
                    raise ConfigError(f"task {e.dst!r} has two residual sources at depth {l}")
                self._feature_src[(e.dst, l)] = e.src
            if e.logit:
                if e.dst in self._logit_src:
                    raise ConfigError(f"task {e.dst!r} has two logit-residual sources")
                self._logit_src[e.dst] = e.src

    @classmethod
    def chain(cls, tasks, links: str = "full", n_hidden: int = 2) -> "TaskGraph":
        layers, logit = preset_links(links, n_hidden)
        tasks = list(tasks)
        return cls(tasks, [Edge(a, b, layers, logit) for a, b in zip(tasks, tasks[1:])])

    def _toposort(self) -> tuple:
        indeg = {t: 0 for t in self.tasks}
        for e in self.edges:
            indeg[e.dst] += 1
        # ties resolved by name so declaration order never matters
        ready = sorted(t for t, d in indeg.items() if d == 0)
        order = []
        while ready:
            t = ready.pop(0)
            order.append(t)
            for e in self.edges:
                if e.src == t:
                    indeg[e.dst] -= 1
                    if indeg[e.dst] == 0:
                        ready.append(e.dst)
                        ready.sort()
        if len(order) != len(self.tasks):
            raise ConfigError("task graph contains a cycle")
        return tuple(order)

    def order(self) -> tuple:
        return self._order

    def feature_source(self, task: str, depth: int):
        return self._feature_src.get((task, depth))

    def logit_source(self, task: str):
        return self._logit_src.get(task)

    def predecessors(self, task: str) -> list:
        return [e.src for e in self.edges if e.dst == task]

    def has_links(self) -> bool:
        return any(e.has_links for e in self.edges)

    def without_links(self) -> "TaskGraph":
        return TaskGraph(self.tasks, [Edge(e.src, e.dst) for e in self.edges])

    def validate(self, n_hidden: int) -> None:
        for e in self.edges:
            bad = sorted(l for l in e.layers if not 1 <= l <= n_hidden)
            if bad:
                raise ConfigError(f"edge {e.src}->{e.dst}: linked depths {bad} outside 1..{n_hidden}")

    def __eq__(self, other):
        return isinstance(other, TaskGraph) and self.tasks == other.tasks and set(self.edges) == set(other.edges)


@dataclass(frozen=True)
class TowerSpec:
    """Shared tower shape. ``widths`` ends in 1 (single tower) or the inner-product size (twin)."""

    widths: tuple = (128, 64, 1)
    activation: str = "prelu"
    dropout: tuple = ()
    mandate: bool = False
    twin: bool = False
    placement: str = "after"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "dropout", tuple(float(r) for r in self.dropout))
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ConfigError(f"tower widths must be positive, got {self.widths}")
        if not self.twin and self.widths[-1] != 1:
            raise ConfigError(f"single-tower widths must end in 1, got {self.widths}")
        if len(self.dropout) > self.n_hidden:
            raise ConfigError(f"{len(self.dropout)} dropout rates for {self.n_hidden} hidden layers")
        if any(not 0.0 <= r < 1.0 for r in self.dropout):
            raise ConfigError(f"dropout rates must be in [0, 1), got {self.dropout}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}")
        if self.twin and self.placement == "both":
            raise ConfigError("residual links both before and after the inner product are not supported")
        if self.activation not in ("prelu", "identity", "sigmoid"):
            raise ConfigError(f"unsupported hidden activation {self.activation!r}")

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 1

    def dropout_at(self, depth: int) -> float:
        return self.dropout[depth - 1] if depth <= len(self.dropout) else 0.0


@dataclass
class Outputs:
    logits: dict
    probs: dict
    residual_logits: dict = field(default_factory=dict)
    raw_residual_logits: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def prediction(self, task: str) -> Tensor:
        return self.probs.get(task, self.logits[task])


def _task_rng(seed: int, task: str, side: str = "") -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(f"{task}/{side}".encode())])


class MultiTaskModel:
    def __init__(self, table: EmbeddingTable, graph: TaskGraph, tower: TowerSpec, mode: str = "resflow",
                 task_kinds: dict | None = None, seed: int = 0):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.table = table
        self.graph = graph
        self.tower = tower
        self.mode = mode
        self.seed = seed
        self.dtype = table.dtype
        self.task_kinds = {t: "binary" for t in graph.tasks}
        self.task_kinds.update(task_kinds or {})
        for t, k in self.task_kinds.items():
            if k not in TASK_KINDS:
                raise ConfigError(f"task {t!r}: kind must be one of {TASK_KINDS}")
            if t not in graph.tasks:
                raise ConfigError(f"task kind given for unknown task {t!r}")
        graph.validate(tower.n_hidden)
        if mode == "nse" and graph.has_links():
            raise ConfigError("NSE mode takes no residual links")
        if mode == "esmm":
            for t in graph.tasks:
                if len(graph.predecessors(t)) > 1:
                    raise ConfigError(f"ESMM needs a linear chain; task {t!r} has several predecessors")
                if self.task_kinds[t] != "binary":
                    raise ConfigError("ESMM supports binary tasks only")
        if tower.twin:
            if tower.placement == "before" and tower.mandate:
                raise ConfigError("the non-positive residual-logit mandate needs the logit link after the inner product")
            self._user_fields = table.schema.side("user")
            self._item_fields = table.schema.side("item")
            if not self._user_fields or not self._item_fields:
                raise ConfigError("twin-tower model needs both user-side and item-side fields")
            widths = {"user": len(self._user_fields) * table.dim, "item": len(self._item_fields) * table.dim}
            self.towers = {
                t: {side: self._build_tower(t, widths[side], side, final="identity") for side in ("user", "item")}
                for t in graph.tasks
            }
        else:
            in_width = len(table.schema) * table.dim
            self.towers = {t: {"": self._build_tower(t, in_width, "", final="identity")} for t in graph.tasks}

    def _build_tower(self, task, in_width, side, final):
        rng = _task_rng(self.seed, task, side)
        layers, w_in = [], in_width
        for depth, w in enumerate(self.tower.widths, start=1):
            act = final if depth == len(self.tower.widths) else self.tower.activation
            layers.append(DenseLayer(w_in, w, act, rng=rng, dtype=self.dtype, name=f"{task}{'.' + side if side else ''}.l{depth}"))
            w_in = w
        return layers

    def tower_parameters(self) -> list:
        ps = []
        for t in self.graph.tasks:
            for side in sorted(self.towers[t]):
                for layer in self.towers[t][side]:
                    ps.extend(layer.parameters())
        return ps

    def parameters(self) -> list:
        return self.table.parameters() + self.tower_parameters()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # ------------------------------------------------------------ forward

    def _run_tower(self, task, side, x, outs, training, rng, trace):
        """Hidden blocks with feature links; returns the final block output."""
        layers = self.towers[task][side]
        h = x
        key = (task, side)
        outs[key] = []
        for depth, layer in enumerate(layers[:-1], start=1):
            f = T.dropout(layer(h), self.tower.dropout_at(depth), rng, training)
            src = self.graph.feature_source(task, depth)
            if src is not None:
                s = outs[(src, side)][depth - 1]
                h = T.add(s, f)
                if trace is not None:
                    trace.append((task, side, depth, src, s.value, f.value, h.value))
            else:
                h = f
            outs[key].append(h)
        return layers[-1](h)

    def forward(self, batch: dict, training: bool = False, rng: np.random.Generator | None = None,
                trace: bool = False) -> Outputs:
        """``batch`` maps field -> encoded rows (see ``EmbeddingTable.encode``)."""
        if training and rng is None:
            rng = np.random.default_rng(self.seed)
        tr = [] if trace else None
        outs: dict = {}
        logits, probs, res, raw_res = {}, {}, {}, {}
        top: dict = {}
        if self.tower.twin:
            xu = self.table.lookup(batch, self._user_fields)
            xi = self.table.lookup(batch, self._item_fields)
        else:
            x = self.table.lookup(batch)
        for task in self.graph.order():
            lsrc = self.graph.logit_source(task)
            if self.tower.twin:
                u = self._run_tower(task, "user", xu, outs, training, rng, tr)
                i = self._run_tower(task, "item", xi, outs, training, rng, tr)
                if lsrc is not None and self.tower.placement == "before":
                    u = T.add(top[(lsrc, "user")], u)
                    i = T.add(top[(lsrc, "item")], i)
                top[(task, "user")], top[(task, "item")] = u, i
                r = T.rowdot(u, i)
                residual_on_logit = lsrc is not None and self.tower.placement == "after"
            else:
                r = T.column(self._run_tower(task, "", x, outs, training, rng, tr))
                residual_on_logit = lsrc is not None
            if residual_on_logit:
                raw_res[task] = r
                if self.tower.mandate:
                    r = T.min_zero(r)
                res[task] = r
                logit = T.add(logits[lsrc], r)
                if tr is not None:
                    tr.append((task, "", "logit", lsrc, logits[lsrc].value, r.value, logit.value))
            else:
                logit = r
            logits[task] = logit
            if self.task_kinds[task] == "binary":
                if self.mode == "esmm":
                    stage = T.clamp(T.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)
                    preds = self.graph.predecessors(task)
                    probs[task] = T.mul(probs[preds[0]], stage) if preds else stage
                else:
                    probs[task] = T.sigmoid(logit)
        return Outputs(logits, probs, res, raw_res, tr or [])

    # ------------------------------------------------------------ inference

    def predict(self, encoded: dict, batch_size: int = 8192) -> dict:
        """Per-task probabilities (binary) or values (regression), eval mode."""
        n = encoded_len(encoded)
        out = {t: np.empty(n, dtype=np.float64) for t in self.graph.tasks}
        for start in range(0, n, batch_size):
            sl = slice(start, min(n, start + batch_size))
            o = self.forward(slice_encoded(encoded, sl))
            for t in self.graph.tasks:
                out[t][sl] = o.prediction(t).value
        return out


def encoded_len(encoded: dict) -> int:
    for v in encoded.values():
        return len(v[0]) if isinstance(v, tuple) else len(v)
    return 0


def slice_encoded(encoded: dict, idx) -> dict:
    return {k: (v[0][idx], v[1][idx]) if isinstance(v, tuple) else v[idx] for k, v in encoded.items()}


# ---------------------------------------------------------------- losses

@dataclass
class LossSpec:
    task_weights: dict = field(default_factory=dict)
    pos_weights: dict = field(default_factory=dict)
    neg_weights: dict = field(default_factory=dict)
    regularizer: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.regularizer in ("M1", "M2") and self.lam < 0:
            raise ConfigError(f"regularizer weight must be >= 0, got {self.lam}")
        for t, w in self.task_weights.items():
            if w < 0:
                raise ConfigError(f"task weight for {t!r} must be >= 0, got {w}")

    def omega(self, task) -> float:
        return float(self.task_weights.get(task, 1.0))


def task_losses(model: MultiTaskModel, outputs: Outputs, labels: dict, spec: LossSpec) -> dict:
    """Per-task summed losses ``L_k`` (tensors) for tasks with non-zero weight."""
    losses = {}
    for task in model.graph.tasks:
        if spec.omega(task) == 0:
            continue
        y = labels.get(task)
        if y is None or np.isnan(y).any():
            raise DataError(f"missing labels for task {task!r} (weight {spec.omega(task)})")
        if model.task_kinds[task] == "regression":
            per = T.squared_error(outputs.logits[task], y.astype(model.dtype))
        elif model.mode == "esmm":
            per = T.weighted_bce(y, outputs.probs[task], spec.pos_weights.get(task, 1.0),
                                 spec.neg_weights.get(task, 1.0))
        else:
            per = T.bce_with_logits(y, outputs.logits[task], spec.pos_weights.get(task, 1.0),
                                    spec.neg_weights.get(task, 1.0))
        losses[task] = T.total(per)
    return losses


def regularize(model: MultiTaskModel, outputs: Outputs, kind: str, lam: float) -> Tensor | None:
    """M1: penalize probability increases along edges; M2: penalize positive residual logits.

    M3 is structural (the tower mandate) and contributes no loss term.
    """
    if kind in ("none", "M3"):
        return None
    if not model.graph.edges or model.mode == "nse":
        raise ConfigError(f"regularizer {kind} needs a task chain; NSE has none")
    terms = []
    if kind == "M1":
        for e in model.graph.edges:
            if e.src in outputs.probs and e.dst in outputs.probs:
                terms.append(T.total(T.max_zero(T.sub(outputs.probs[e.dst], outputs.probs[e.src]))))
    else:
        if not outputs.raw_residual_logits:
            raise ConfigError("M2 needs logit residual links")
        for task in model.graph.order():
            if task in outputs.raw_residual_logits:
                terms.append(T.total(T.max_zero(outputs.raw_residual_logits[task])))
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, lam)


def joint_loss(model: MultiTaskModel, outputs: Outputs, labels: dict, spec: LossSpec,
               reduction: str = "sum") -> Tensor:
    """``sum_k w_k * L_k`` plus the regularizer; ``reduction='mean'`` divides by batch size."""
    losses = task_losses(model, outputs, labels, spec)
    terms = [T.scale(l, spec.omega(t)) for t, l in losses.items()]
    reg = regularize(model, outputs, spec.regularizer, spec.lam)
    if reg is not None:
        terms.append(reg)
    if not terms:
        return Tensor(np.zeros((), dtype=model.dtype))
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    if reduction == "mean":
        n = len(next(iter(labels.values()))) if labels else 1
        acc = T.scale(acc, 1.0 / max(n, 1))
    return acc


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


@dataclass
class TrainResult:
    loss_trace: list
    steps: int


def train(model: MultiTaskModel, encoded: dict, labels: dict, config: TrainConfig,
          progress=None) -> TrainResult:
    """Minibatch Adam over per-epoch shuffles; the final partial batch is kept."""
    n = encoded_len(encoded)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    opt = Adam(model.parameters(), lr=config.lr)
    trace = []
    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            batch = slice_encoded(encoded, idx)
            ylab = {t: v[idx] for t, v in labels.items()}
            with Tape() as tape:
                out = model.forward(batch, training=True, rng=drop_rng)
                loss = joint_loss(model, out, ylab, config.loss, reduction="mean")
            value = float(loss.value)
            if not np.isfinite(value):
                bad = [t for t, l in task_losses(model, out, ylab, config.loss).items()
                       if not np.isfinite(l.value)]
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {b} (tasks: {bad or 'regularizer'})")
            grads = T.backward(tape, loss)
            opt.step(grads)
            trace.append(value)
            step += 1
            if progress is not None:
                progress(step, value)
    return TrainResult(trace, step)


def dump_activations(model: MultiTaskModel, encoded: dict) -> dict:
    """Source output, residual and their sum at every linked depth, plus residual logits.

    Keys look like ``"order/h1/source"``; twin towers insert the side, e.g.
    ``"order/user/h1/residual"``.
    """
    out = model.forward(encoded, trace=True)
    tables = {}
    for task, side, depth, src, s, r, total in out.trace:
        if depth == "logit":
            tables[f"{task}/residual_logit"] = np.asarray(r)
            tables[f"{task}/source_logit"] = np.asarray(s)
            tables[f"{task}/logit"] = np.asarray(total)
            continue
        prefix = f"{task}/{side + '/' if side else ''}h{depth}"
        tables[f"{prefix}/source"] = s
        tables[f"{prefix}/residual"] = r
        tables[f"{prefix}/sum"] = total
    return tables
