"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import TASKS, DataError, Dataset, compute_norm_stats, load_csv, sample_toy, save_csv
from .evaluation import (
    OracleDensity,
    ToyProtocol,
    ablation_suite,
    delta_sweep,
    emit_density_grid,
    kfold_indices,
    reliability_ece,
    run_toy,
    sse_on_grid,
    test_nll,
    toy_grid,
    toy_split,
)
from .model import CheckpointError, DegenerateRangeError, atomic_write_text, load_checkpoint, sample, save_checkpoint
from .training import NumericalAbort, train

log = logging.getLogger("cdffirst")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    if getattr(args, "variant", None) is not None:
        overrides["train.variant"] = args.variant
    if getattr(args, "task", None) is not None:
        overrides["data.task"] = args.task
        overrides["data.csv"] = None
    if getattr(args, "csv", None) is not None:
        overrides["data.csv"] = args.csv
        overrides["data.task"] = None
    if getattr(args, "dx", None) is not None:
        overrides["data.dx"] = args.dx
    if getattr(args, "dy", None) is not None:
        overrides["data.dy"] = args.dy
    deltas = getattr(args, "delta", None)
    if deltas:
        if args.command == "sweep-delta":
            overrides["eval.deltas"] = deltas
        else:
            overrides["train.delta"] = deltas[-1]
    cfg = config_mod.load(args.config, {k: v for k, v in overrides.items()})
    if cfg.data.task is None and cfg.data.csv is None:
        raise ConfigError("no data source: set data.task / data.csv or pass --task / --csv")
    return cfg


def _echo(cfg: dict) -> None:
    print(json.dumps({"effective_config": cfg}, sort_keys=True), flush=True)


def _stem(cfg: RunConfig, variant: str | None = None, delta: float | None = None) -> str:
    source = cfg.data.task if cfg.data.is_toy else Path(cfg.data.csv).stem
    variant = variant or cfg.train.variant
    delta = cfg.train.delta if delta is None else delta
    return f"{source}_{variant}_d{delta:g}_s{cfg.seed}"


def _run_echo(cfg: RunConfig) -> dict:
    # the output location is not part of the run's identity
    d = cfg.to_dict()
    d.pop("out")
    return d


def _net(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg.model)


def _protocol(cfg: RunConfig, x_values=None) -> ToyProtocol:
    return ToyProtocol(
        task=cfg.data.task, n_samples=cfg.data.n, train_fraction=cfg.data.split,
        eval_x=tuple(x_values if x_values is not None else cfg.eval.x_values), grid=cfg.eval.grid,
        train=cfg.train, net=_net(cfg),
    )


def _csv_split(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    data = load_csv(cfg.data.csv, cfg.data.dx, cfg.data.dy)
    return data.split(cfg.data.split, np.random.default_rng([cfg.seed, 2]))


def _write_log(path: Path, records: list) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    _echo({"task": args.task, "n": args.n, "seed": args.seed, "out": args.out})
    ds = sample_toy(args.task, args.n, np.random.default_rng(args.seed))
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{args.task}_n{args.n}_s{args.seed}.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out, meta={"task": args.task, "seed": args.seed, "n": args.n})
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _echo(cfg.to_dict())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = _stem(cfg)
    if cfg.data.is_toy:
        result, report = run_toy(_protocol(cfg), cfg.seed)
        save_checkpoint(result.model, out / f"{stem}.ckpt.json", extra={"run": _run_echo(cfg)})
        _write_log(out / f"{stem}.log.jsonl", result.log)
        atomic_write_text(out / f"{stem}.sse.jsonl", report.to_text())
        print(f"best epoch {result.best_epoch}, mean SSE {report.mean:.6g}")
        return EXIT_OK
    data = load_csv(cfg.data.csv, cfg.data.dx, cfg.data.dy)
    if cfg.data.kfold:
        splits = list(kfold_indices(len(data), cfg.data.kfold, np.random.default_rng([cfg.seed, 2])))
        folds = [(f"{stem}_fold{j}", data.subset(tr), data.subset(te)) for j, (tr, te) in enumerate(splits)]
    else:
        tr, te = _csv_split(cfg)
        folds = [(stem, tr, te)]
    nlls, eces = [], []
    for name, tr, te in folds:
        def nll_metric(model, te=te):
            return test_nll(model, te).values["test"]

        result = train(tr, cfg.train, _net(cfg), eval_fn=nll_metric)
        save_checkpoint(result.model, out / f"{name}.ckpt.json", extra={"run": _run_echo(cfg)})
        _write_log(out / f"{name}.log.jsonl", result.log)
        nlls.append(test_nll(result.model, te).values["test"])
        eces.append(reliability_ece(result.model, te, cfg.eval.bins).mean)
    summary = {"nll_mean": float(np.mean(nlls)), "nll_std": float(np.std(nlls)),
               "ece_mean": float(np.mean(eces)), "ece_std": float(np.std(eces)), "folds": len(folds),
               "nll": nlls, "ece": eces}
    atomic_write_text(out / f"{stem}.summary.json", json.dumps(summary, sort_keys=True) + "\n")
    print(f"test NLL {summary['nll_mean']:.6g} +- {summary['nll_std']:.3g}, ECE {summary['ece_mean']:.4g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    _echo(cfg.to_dict())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        if not cfg.data.is_toy:
            raise UsageError("--oracle needs a toy task")
        model, stem = OracleDensity(cfg.data.task), f"{cfg.data.task}_oracle"
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --oracle is given")
        model = load_checkpoint(args.checkpoint)
        stem = Path(args.checkpoint).name.removesuffix(".ckpt.json")
    if cfg.data.is_toy:
        report = sse_on_grid(model, cfg.data.task, cfg.eval.x_values, cfg.eval.grid)
        atomic_write_text(out / f"{stem}.eval.sse.jsonl", report.to_text())
        for x in cfg.eval.x_values:
            emit_density_grid(model, [x], toy_grid(cfg.data.task, x, cfg.eval.grid), out / f"{stem}.grid_x{x:g}.csv")
        print(f"mean SSE {report.mean:.6g}")
        log.info("eval wall time %.2fs", report.wall_time)
        return EXIT_OK
    _, te = _csv_split(cfg)
    nll = test_nll(model, te)
    ece = reliability_ece(model, te, cfg.eval.bins)
    atomic_write_text(out / f"{stem}.eval.nll.jsonl", nll.to_text())
    atomic_write_text(out / f"{stem}.eval.ece.jsonl", ece.to_text())
    print(f"test NLL {nll.mean:.6g}, ECE {ece.mean:.4g}")
    return EXIT_OK


def _parse_x(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --x value {text!r}") from None


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint)
    xs = [_parse_x(t) for t in (args.x or [])]
    if not xs:
        raise UsageError("give at least one --x conditioning value")
    if any(len(x) != model.cfg.dx for x in xs):
        raise UsageError(f"each --x needs {model.cfg.dx} comma-separated value(s)")
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    _echo({"checkpoint": args.checkpoint, "x": xs, "n": args.n, "seed": args.seed, "out": args.out})
    rng = np.random.default_rng(args.seed)
    header = [f"x{j}" for j in range(model.cfg.dx)] + [f"y{j}" for j in range(model.cfg.dy)]
    lines = [",".join(header)]
    for x in xs:
        for row in sample(model, np.array(x), args.n, rng):
            lines.append(",".join(repr(float(v)) for v in (*x, *row)))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.n * len(xs)} samples to {args.out}")
    return EXIT_OK


def cmd_sweep_delta(args) -> int:
    cfg = _run_config(args)
    if not cfg.eval.deltas:
        raise UsageError("the delta list is empty")
    if not cfg.data.is_toy:
        raise UsageError("sweep-delta runs on a toy task")
    _echo(cfg.to_dict())
    report = delta_sweep(_protocol(cfg), cfg.eval.deltas, cfg.eval.seeds)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"{cfg.data.task}_delta-sweep_s{cfg.seed}.jsonl", report.to_text())
    for k, v in report.values.items():
        print(f"{k}\tSSE {v:.6g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if not cfg.data.is_toy:
        raise UsageError("ablate runs on a toy task")
    _echo(cfg.to_dict())
    report = ablation_suite(_protocol(cfg), cfg.eval.seeds, cfg.eval.variants)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / f"{cfg.data.task}_ablation_s{cfg.seed}.jsonl", report.to_text())
    for k, v in report.values.items():
        print(f"{k}\tSSE {v:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdffirst", description="CDF-first conditional density estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", help="write a toy dataset as CSV")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gen_toy)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--task")
        p.add_argument("--csv")
        p.add_argument("--dx", type=int)
        p.add_argument("--dy", type=int)
        p.add_argument("--variant")
        p.add_argument("--delta", type=float, action="append")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the analytic toy density instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", action="append", help="conditioning vector, comma separated; repeatable")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep-delta", help="finite-difference step sensitivity")
    common(p)
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("ablate", help="compare model variants")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, DegenerateRangeError, ad.DomainError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
