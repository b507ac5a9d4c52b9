"""End-to-end orchestration: load data, build vocabulary and model, train, evaluate, dump predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import (FUNNEL_MANIFEST, MOVIELENS_MANIFEST, Dataset, Manifest, MultiValue, SplitSpec, bucketize,
                   fit_bucketizer, generate_funnel, load_movielens_1m, read_dataset, read_manifest, split_by_time)
from .embedding import build_vocab
from .errors import CheckpointError, DataError, UndefinedMetricError
from .fusion import write_predictions
from .metrics import MetricReport, auc, group_lists, list_metrics
from .model import MultiTaskModel, TrainResult, train
from .progressive import decode_expectation, encode_labels, regression_mse

DAY_SECONDS = 86400


@dataclass
class Prepared:
    manifest: Manifest
    train: Dataset
    test: Dataset
    bucketizers: dict
    tasks: list
    task_kinds: dict


def load_source(cfg: RunConfig) -> tuple[Manifest, Dataset]:
    if cfg.source == "movielens-1m":
        return MOVIELENS_MANIFEST, load_movielens_1m(cfg.path)
    if cfg.source == "synthetic-funnel":
        return FUNNEL_MANIFEST, generate_funnel(cfg.seed, n_samples=cfg.synthetic_samples)
    manifest = read_manifest(cfg.manifest)
    return manifest, read_dataset(cfg.path, manifest)


def task_layout(cfg: RunConfig, manifest: Manifest) -> tuple[list, dict]:
    if cfg.style == "traditional":
        name = manifest.target or "target"
        return [name], {name: "regression"}
    tasks = cfg.task_names(manifest.labels)
    return tasks, {t: "binary" for t in tasks}


def task_labels(cfg: RunConfig, dataset: Dataset, tasks) -> dict:
    if cfg.style in ("traditional", "progressive"):
        if dataset.target is None:
            raise DataError("regression runs need a numeric target column")
        if cfg.style == "traditional":
            return {tasks[0]: dataset.target.astype(float)}
        y = encode_labels(dataset.target, cfg.threshold_ladder())
        return {t: y[:, k] for k, t in enumerate(tasks)}
    missing = [t for t in tasks if t not in dataset.labels]
    if missing:
        raise DataError(f"dataset has no label column for task(s) {missing}")
    return {t: dataset.labels[t] for t in tasks}


def prepare(cfg: RunConfig) -> Prepared:
    manifest, data = load_source(cfg)
    if cfg.test_path:
        train_ds, test_ds = data, read_dataset(cfg.test_path, manifest)
    else:
        train_ds, test_ds = split_by_time(data, SplitSpec.parse(cfg.split))
    bucketizers = {f: fit_bucketizer(train_ds.numeric[f], cfg.buckets) for f in manifest.numeric}
    if bucketizers:
        train_ds, test_ds = bucketize(train_ds, bucketizers), bucketize(test_ds, bucketizers)
    tasks, kinds = task_layout(cfg, manifest)
    cfg.validate(label_columns=manifest.labels)
    return Prepared(manifest, train_ds, test_ds, bucketizers, tasks, kinds)


def build_model(cfg: RunConfig, prep: Prepared) -> MultiTaskModel:
    table = build_vocab(prep.train, cfg.min_count, cfg.embedding_dim, seed=cfg.seed, day_seconds=DAY_SECONDS)
    if math.isfinite(cfg.eviction_days) and len(prep.train):
        table.evict(int(prep.train.timestamps.max() // DAY_SECONDS), cfg.eviction_days)
    return MultiTaskModel(table, cfg.graph(prep.tasks), cfg.tower(), mode=cfg.mode,
                          task_kinds=prep.task_kinds, seed=cfg.seed)


def encode(model: MultiTaskModel, dataset: Dataset) -> dict:
    if dataset.schema != model.table.schema:
        raise CheckpointError(f"dataset fields {dataset.schema.names} do not match the model's "
                              f"{model.table.schema.names}")
    return model.table.encode(dataset.features)


def fit(model: MultiTaskModel, cfg: RunConfig, prep: Prepared, progress=None) -> TrainResult:
    labels = task_labels(cfg, prep.train, prep.tasks)
    return train(model, encode(model, prep.train), labels, cfg.train_config(prep.tasks), progress=progress)


def _list_inputs(model, preds, dataset, labels):
    binary = [t for t in model.graph.order() if model.task_kinds[t] == "binary"]
    if dataset.list_ids is None or not binary:
        return None
    score = preds[binary[-1]]
    W = dataset.order_counts if dataset.order_counts is not None else labels.get(binary[-1])
    if W is None:
        return None
    W = np.nan_to_num(np.asarray(W, dtype=float))
    flag = lambda name: None if name not in dataset.labels else np.nan_to_num(dataset.labels[name])
    order = flag("order") if "order" in dataset.labels else (W > 0).astype(float)
    return binary, score, W, order, flag("atc"), flag("click")


def evaluate(model: MultiTaskModel, cfg: RunConfig, dataset: Dataset, tasks, ks=None) -> tuple[MetricReport, dict]:
    """Per-task AUC/MSE plus list metrics when the data carries list ids; also returns predictions."""
    preds = model.predict(encode(model, dataset)) if len(dataset) else {t: np.zeros(0) for t in tasks}
    labels = task_labels(cfg, dataset, tasks)
    report = MetricReport()
    for t in tasks:
        if model.task_kinds[t] == "regression":
            report.task_mse[t] = regression_mse(preds[t], labels[t])
            continue
        y = labels[t]
        keep = ~np.isnan(y)
        try:
            report.task_auc[t] = auc(preds[t][keep], y[keep])
        except UndefinedMetricError:
            pass
    if cfg.style == "progressive":
        q = np.stack([preds[t] for t in tasks], axis=1)
        report.task_mse["expectation"] = regression_mse(decode_expectation(q, cfg.threshold_ladder()),
                                                        dataset.target)
    li = _list_inputs(model, preds, dataset, labels)
    if li is not None:
        _, score, W, order, atc, click = li
        lists = group_lists(dataset.list_ids, score, W, order, atc, click)
        report.list_metrics = list_metrics(lists, tuple(ks or cfg.ks))
    report.extra["n_samples"] = len(dataset)
    return report, preds


def dump_predictions(path: str, model: MultiTaskModel, dataset: Dataset, preds: dict, manifest: Manifest) -> bool:
    """Write the per-item CTR/CTCVR dump consumed by fusion search; False when not applicable."""
    labels = {t: dataset.labels[t] for t in dataset.labels}
    li = _list_inputs(model, preds, dataset, labels)
    if li is None or len(li[0]) < 2:
        return False
    binary, _, W, order, atc, click = li
    n = len(dataset)
    item_field = next((f for f in manifest.item_fields
                       if f in dataset.features and not isinstance(dataset.features[f], MultiValue)), None)
    items = dataset.features[item_field] if item_field else np.arange(n)
    zeros = np.zeros(n)
    rows = zip(dataset.list_ids.tolist(), np.asarray(items).tolist(), preds[binary[0]], preds[binary[-1]], W,
               order, zeros if atc is None else atc, zeros if click is None else click)
    write_predictions(path, rows)
    return True
