"""``resflow`` command line: train, evaluate, fuse-search, gradcheck, generate-synthetic, dump-activations.

Exit codes: 0 success, 1 usage/configuration error, 2 data or checkpoint error,
3 numerical failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint, gradcheck, runner
from .config import RunConfig, load_config, preset
from .data import (FUNNEL_MANIFEST, Manifest, SplitSpec, bucketize, generate_funnel, read_dataset, split_by_time,
                   write_dataset)
from .errors import ConfigError, ResFlowError
from .fusion import GridSpec, grid_search, read_predictions
from .model import dump_activations

log = logging.getLogger("resflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("--k values must be positive integers")
    return ks


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands

def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("train needs --config PATH or --preset NAME")
    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    cfg = cfg.with_overrides(seed=args.seed, mode=args.mode, epochs=args.epochs, out=args.out, ks=args.k)
    problems = cfg.problems()
    if problems:
        raise ConfigError("invalid configuration after overrides:\n  " + "\n  ".join(problems))
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    prep = runner.prepare(cfg)
    model = runner.build_model(cfg, prep)
    log.info("training %s on %d samples (%d parameters)", cfg.mode, len(prep.train), model.n_parameters())
    result = runner.fit(model, cfg, prep)
    report, preds = runner.evaluate(model, cfg, prep.test, prep.tasks)
    os.makedirs(cfg.out, exist_ok=True)
    checkpoint.save(os.path.join(cfg.out, "checkpoint"), model, cfg, prep.manifest, prep.tasks, prep.task_kinds,
                    prep.bucketizers)
    _write(os.path.join(cfg.out, "report.json"), report.dumps())
    _write(os.path.join(cfg.out, "loss_trace.tsv"),
           "step\tloss\n" + "".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(result.loss_trace)))
    if runner.dump_predictions(os.path.join(cfg.out, "predictions.tsv"), model, prep.test, preds, prep.manifest):
        log.info("wrote %s", os.path.join(cfg.out, "predictions.tsv"))
    sys.stdout.write(report.dumps())
    return EXIT_OK


def _load_eval_data(loaded, data_path):
    cfg = loaded.config
    if data_path or cfg.test_path:
        ds = read_dataset(data_path or cfg.test_path, loaded.manifest)
    else:
        _, ds = split_by_time(runner.load_source(cfg)[1], SplitSpec.parse(cfg.split))
    if loaded.bucketizers:
        ds = bucketize(ds, loaded.bucketizers)
    return ds


def cmd_evaluate(args) -> int:
    loaded = checkpoint.load(args.checkpoint)
    ds = _load_eval_data(loaded, args.data)
    report, _ = runner.evaluate(loaded.model, loaded.config, ds, loaded.tasks, ks=args.k)
    text = report.dumps()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "report.json"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_fuse_search(args) -> int:
    lists = read_predictions(args.predictions)
    families = {"add": ["additive"], "mul": ["multiplicative"], "both": ["additive", "multiplicative"]}[args.family]
    k = (args.k or [100])[0]
    out = []
    for fam in families:
        result = grid_search(GridSpec.default(fam, k=k), lists)
        out.append(f"# {fam}: best {result.best} WR@{k}={result.best_metric:.6f}")
        out.append("alpha\tbeta\tWR@%d" % k)
        out.extend(f"{a:g}\t{b:g}\t{m:.6f}" for a, b, m in result.sorted_table())
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            _write(os.path.join(args.out, f"fusion_{fam}.tsv"),
                   "alpha\tbeta\tmetric\n" + "".join(f"{a!r}\t{b!r}\t{m!r}\n" for a, b, m in result.sorted_table()))
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(seed=args.seed or 0, n_instances=args.instances, corrupt=args.corrupt_gradient)
    sys.stdout.write("\n".join(report.lines()) + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_generate_synthetic(args) -> int:
    ds = generate_funnel(args.seed or 0, n_users=args.users, n_items=args.items, base_ctr=args.ctr,
                         base_cvr=args.cvr, n_samples=args.samples)
    out = args.out or "synthetic"
    os.makedirs(out, exist_ok=True)
    manifest = Manifest(**{**FUNNEL_MANIFEST.__dict__, "extra_labels": ["p_click", "p_ctcvr"]})
    write_dataset(ds, os.path.join(out, "data.csv"), manifest)
    _write(os.path.join(out, "manifest.txt"), manifest.dumps())
    sys.stdout.write(f"wrote {len(ds)} samples to {os.path.join(out, 'data.csv')} "
                     f"(ctr={ds.labels['click'].mean():.4f}, ctcvr={ds.labels['order'].mean():.5f})\n")
    return EXIT_OK


def cmd_dump_activations(args) -> int:
    loaded = checkpoint.load(args.checkpoint)
    ds = _load_eval_data(loaded, args.data)
    if args.limit:
        ds = ds.take(np.arange(min(args.limit, len(ds))))
    tables = dump_activations(loaded.model, runner.encode(loaded.model, ds))
    out = args.out or "activations"
    os.makedirs(out, exist_ok=True)
    for name, mat in tables.items():
        mat = np.asarray(mat, dtype=float)
        mat = mat[:, None] if mat.ndim == 1 else mat
        np.savetxt(os.path.join(out, name.replace("/", "__") + ".tsv"), mat, delimiter="\t", fmt="%.9g")
    sys.stdout.write(f"wrote {len(tables)} tables to {out}\n")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--k", type=_ks, default=None, help='cut-offs, e.g. "10,50,100"')
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="resflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a model and report test metrics")
    t.add_argument("--config")
    t.add_argument("--preset")
    t.add_argument("--mode", choices=("nse", "esmm", "resflow"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="delimited dataset; defaults to the checkpoint's test split")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("fuse-search", parents=[common], help="grid-search fusion weights on a prediction dump")
    f.add_argument("predictions")
    f.add_argument("--family", choices=("add", "mul", "both"), default="add")
    f.set_defaults(func=cmd_fuse_search)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("generate-synthetic", parents=[common], help="write a synthetic click/order funnel")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--users", type=int, default=20_000)
    s.add_argument("--items", type=int, default=5_000)
    s.add_argument("--ctr", type=float, default=0.08)
    s.add_argument("--cvr", type=float, default=0.026)
    s.set_defaults(func=cmd_generate_synthetic)

    d = sub.add_parser("dump-activations", parents=[common], help="dump residual activations at linked depths")
    d.add_argument("checkpoint")
    d.add_argument("--data")
    d.add_argument("--limit", type=int, default=1000)
    d.set_defaults(func=cmd_dump_activations)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ResFlowError as exc:
        print(f"resflow: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"resflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
