"""Finite-difference verification of the reverse-mode gradients on small random models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MultiValue
from .embedding import EmbeddingTable, FieldSchema, Schema
from .model import Edge, LossSpec, MultiTaskModel, TaskGraph, TowerSpec, joint_loss

STEP = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-6
# gradients smaller than this are dominated by finite-difference noise and are not ranked
RANK_FLOOR = 1e-4
KINK_MARGIN = 1e-3
MAX_PARAMS = 200

# (mode, mandate, twin, regularizer)
VARIANTS = (
    ("nse", False, False, "none"),
    ("esmm", False, False, "none"),
    ("esmm", False, False, "M1"),
    ("resflow", False, False, "none"),
    ("resflow", True, False, "M3"),
    ("resflow", False, False, "M2"),
    ("resflow", False, False, "M1"),
    ("resflow", False, True, "none"),
    ("resflow", True, True, "M3"),
    ("nse", False, True, "none"),
)


@dataclass
class Instance:
    model: MultiTaskModel
    batch: dict
    labels: dict
    loss: LossSpec
    label: str

    def loss_value(self) -> float:
        return float(joint_loss(self.model, self.model.forward(self.batch), self.labels, self.loss).value)


@dataclass
class GradcheckReport:
    instances: int = 0
    entries: int = 0
    worst_rel: float = 0.0
    worst_where: str = ""
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"instances={self.instances} entries={self.entries} worst_rel_err={self.worst_rel:.3e}"
               + (f" at {self.worst_where}" if self.worst_where else "")]
        out.extend(f"FAIL {f}" for f in self.failures[:20])
        out.append("PASS" if self.passed else f"FAIL ({len(self.failures)} entries)")
        return out


def random_instance(rng: np.random.Generator, variant: tuple, n_samples: int = 5) -> Instance:
    """A float64 model with at most MAX_PARAMS parameters plus a labelled batch."""
    mode, mandate, twin, reg = variant
    n_tasks = int(rng.integers(2, 4))
    dim = 2
    schema = Schema([
        FieldSchema("u", side="user"),
        FieldSchema("tags", arity="multi", side="user"),
        FieldSchema("i", side="item"),
    ])
    table = EmbeddingTable(schema, dim, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    n_ids = 3
    table.observe({
        "u": np.repeat(np.arange(n_ids), 2),
        "tags": MultiValue.from_lists([[k, k] for k in range(n_ids)] * 2),
        "i": np.repeat(np.arange(n_ids), 2),
    }, np.zeros(2 * n_ids, dtype=np.int64))
    widths = (3, 2) if twin else (3, 2, 1)
    n_hidden = len(widths) - 1
    tasks = [f"t{k}" for k in range(n_tasks)]
    if mode == "nse":
        graph = TaskGraph(tasks)
    elif mode == "esmm":
        graph = TaskGraph(tasks, [Edge(a, b) for a, b in zip(tasks, tasks[1:])])
    else:
        layers = frozenset(l for l in range(1, n_hidden + 1) if rng.random() < 0.7)
        graph = TaskGraph(tasks, [Edge(a, b, layers, True) for a, b in zip(tasks, tasks[1:])])
    tower = TowerSpec(widths, mandate=mandate, twin=twin)
    model = MultiTaskModel(table, graph, tower, mode=mode, seed=int(rng.integers(1 << 30)))
    # exercise non-zero slopes and biases, which the initialization leaves at zero
    for p in model.tower_parameters():
        if p.name.endswith(".slope") or p.name.endswith(".b"):
            p.value[:] = rng.uniform(-0.5, 0.5, p.value.shape)
    n_params = model.n_parameters()
    if n_params > MAX_PARAMS:
        raise AssertionError(f"gradcheck instance too large: {n_params} parameters")
    batch = table.encode({
        "u": rng.integers(0, n_ids + 1, n_samples),  # id n_ids is unknown -> default row
        "tags": MultiValue.from_lists([list(rng.integers(0, n_ids + 1, rng.integers(0, 3))) for _ in range(n_samples)]),
        "i": rng.integers(0, n_ids + 1, n_samples),
    })
    labels = {}
    prev = np.ones(n_samples)
    for t in tasks:
        prev = prev * (rng.random(n_samples) < 0.6)
        labels[t] = prev.astype(float)
    loss = LossSpec(
        task_weights={t: float(rng.uniform(0.5, 2.0)) for t in tasks},
        pos_weights={t: float(rng.uniform(1.0, 5.0)) for t in tasks},
        regularizer=reg,
        lam=0.7 if reg in ("M1", "M2") else 0.0,
    )
    label = f"{mode}{'+M3' if mandate else ''}{'+twin' if twin else ''}{'+' + reg if reg in ('M1', 'M2') else ''}"
    return Instance(model, batch, labels, loss, label)


def _smooth_instance(rng, variant, attempts: int = 20) -> Instance:
    """Redraw until no non-smooth op sits within KINK_MARGIN of its kink."""
    for _ in range(attempts):
        inst = random_instance(rng, variant)
        with T.kink_probe() as probe:
            inst.loss_value()
        if probe.nearest > KINK_MARGIN:
            return inst
    return inst


def check_instance(inst: Instance, report: GradcheckReport, corrupt: float = 0.0) -> None:
    model = inst.model
    with T.Tape() as tape:
        loss = joint_loss(model, model.forward(inst.batch), inst.labels, inst.loss)
    grads = T.backward(tape, loss)
    params = model.parameters()
    if corrupt:
        # negative control: perturb one analytic entry
        g = grads.get(params[-1], np.zeros_like(params[-1].value)).copy()
        g.flat[0] += corrupt
        grads[params[-1]] = g
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.value))
        for j in range(p.value.size):
            orig = p.value.flat[j]
            p.value.flat[j] = orig + STEP
            up = inst.loss_value()
            p.value.flat[j] = orig - STEP
            down = inst.loss_value()
            p.value.flat[j] = orig
            numeric = (up - down) / (2 * STEP)
            a = float(analytic.flat[j])
            diff = abs(a - numeric)
            report.entries += 1
            scale = max(abs(a), abs(numeric))
            rel = diff / scale if scale > 0 else 0.0
            where = f"{inst.label} {p.name}[{j}] analytic={a:.6e} numeric={numeric:.6e}"
            if (scale >= RANK_FLOOR or diff >= ABS_TOL) and rel > report.worst_rel:
                report.worst_rel, report.worst_where = rel, where
            if diff >= ABS_TOL and rel >= REL_TOL:
                report.failures.append(where)
    report.instances += 1


def run(seed: int = 0, n_instances: int = 50, corrupt: float = 0.0) -> GradcheckReport:
    """Check ``n_instances`` random models cycling through every variant."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for k in range(n_instances):
        inst = _smooth_instance(rng, VARIANTS[k % len(VARIANTS)])
        check_instance(inst, report, corrupt=corrupt if k == 0 else 0.0)
    return report
