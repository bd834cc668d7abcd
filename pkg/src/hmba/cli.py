"""Command-line entry points.

Subcommands cover the whole workflow: cost reports (`flops`, `sweep`),
verification (`gradcheck`, `bench`), and the synthetic task (`train`,
`ablate`). Report commands write CSV files and render companion PNG
figures when --out is given; everything also prints a terminal summary.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from hmba import costmodel
from hmba.config import RunConfig, load_run_config, _parse_value

FLOPS_CONVENTION = "flops = 2 x multiply-adds"


def _apply_sets(cfg: RunConfig, sets: list[str]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for item in sets:
        if "=" not in item:
            raise SystemExit(f"--set needs key=value, got '{item}'")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in fields:
            raise SystemExit(f"--set: unknown config key '{key}'")
        updates[key] = _parse_value(value, fields[key])
    return dataclasses.replace(cfg, **updates).validate()


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config)
    return _apply_sets(cfg, args.set or [])


def _write_csv(path: Path, header: list[str], rows: list[list],
               comment: str | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {path}")


def _add_cfg_args(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="run configuration file (key = value lines)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key; repeatable")


def cmd_flops(args) -> int:
    cfg = _load_cfg(args)
    report = costmodel.model_cost(cfg, batch=args.batch)
    print(f"cost report ({FLOPS_CONVENTION}; forward pass, batch={args.batch})")
    print(f"{'module':<18} {'params':>12} {'flops':>16}")
    for m in report.modules:
        print(f"{m.name:<18} {m.params:>12} {m.flops:>16}")
    print(f"{'total':<18} {report.params:>12} {report.flops:>16}")
    if args.out:
        _write_csv(Path(args.out) / "flops.csv",
                   ["module", "params", "flops"],
                   [[m.name, m.params, m.flops] for m in report.modules],
                   comment=FLOPS_CONVENTION)
    return 0


def cmd_sweep(args) -> int:
    lengths = [int(p) for p in args.lengths.split(",")]
    rows = costmodel.sweep_rows(lengths, args.channels, args.d_model,
                                args.n_state, args.d_conv, args.expand)
    print(f"sweep over lengths {lengths} ({FLOPS_CONVENTION})")
    for row in rows:
        print(f"{row['module']:<20} len {row['length']:>4}  "
              f"flops {row['flops']:>16}  params {row['params']:>12}")
    if args.out:
        out = Path(args.out)
        _write_csv(out / "sweep.csv", ["module", "length", "flops", "params"],
                   [[r["module"], r["length"], r["flops"], r["params"]]
                    for r in rows],
                   comment=FLOPS_CONVENTION)
        from hmba.plots import plot_flops_sweep
        print(f"wrote {plot_flops_sweep(rows, out / 'sweep.png')}")
    return 0


def cmd_gradcheck(args) -> int:
    from hmba.gradcheck import run_suite
    names = args.checks.split(",") if args.checks else None
    results = run_suite(range(args.seeds), tol=args.tol, names=names)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_err)
    failures = 0
    for name, err in worst.items():
        ok = err <= args.tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name:<18} "
              f"max rel err {err:.3e} over {args.seeds} seeds")
    if args.out:
        _write_csv(Path(args.out) / "gradcheck.csv",
                   ["check", "seed", "max_rel_err", "coords"],
                   [[r.name, r.seed, repr(r.max_err), r.n_coords]
                    for r in results])
    print(f"{len(worst) - failures}/{len(worst)} checks passed "
          f"(tolerance {args.tol:g})")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    from hmba.data import generate_dataset
    from hmba.model import init_model, train_step, evaluate
    cfg = _load_cfg(args)
    train, test = generate_dataset(cfg, cfg.seed)
    model = init_model(np.random.default_rng(cfg.seed), cfg)
    feats, labels = train.features[:cfg.batch], train.labels[:cfg.batch]
    train_step(model, feats, labels, lr=0.0)       # warm caches
    t0 = time.time()
    for _ in range(args.steps):
        train_step(model, feats, labels, lr=0.0)
    per_step = (time.time() - t0) / args.steps
    t0 = time.time()
    evaluate(model, test.features[:128], test.labels[:128])
    print(f"train step (batch {cfg.batch}): {per_step*1e3:.1f} ms")
    print(f"eval 128 samples: {(time.time()-t0)*1e3:.1f} ms")
    return 0


def _log_line(step, loss, acc):
    extra = "" if acc is None else f"  test acc {100*acc:.1f}%"
    print(f"step {step:>5}  loss {loss:.4f}{extra}")


def cmd_train(args) -> int:
    from hmba.data import generate_dataset
    from hmba.model import init_model, train_loop, save_model
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps).validate()
    train, test = generate_dataset(cfg, cfg.seed)
    model = init_model(np.random.default_rng(cfg.seed), cfg)
    history, acc = train_loop(model, cfg, train, test,
                              log=_log_line if not args.quiet else None)
    print(f"final test accuracy {100*acc:.1f}%")
    if args.out:
        out = Path(args.out)
        save_model(out / "model", model, cfg)
        print(f"wrote {out / 'model'}")
        _write_csv(out / "training.csv", ["step", "loss", "eval_acc"],
                   [[s, repr(l), "" if a is None else repr(100 * a)]
                    for s, l, a in history])
        from hmba.plots import plot_training_curves
        scaled = [(s, l, None if a is None else 100 * a)
                  for s, l, a in history]
        print(f"wrote {plot_training_curves(scaled, out / 'training.png')}")
    return 0


def cmd_ablate(args) -> int:
    from hmba.experiments import (
        ablation_base_config, run_ablation, margin_summary, ABLATION_VARIANTS,
    )
    base = _apply_sets(ablation_base_config(), args.set or [])
    seeds = [int(p) for p in args.seeds.split(",")]
    names = args.variants.split(",") if args.variants else ABLATION_VARIANTS
    t0 = time.time()
    results = run_ablation(base, seeds, names=names)
    for r in results:
        print(f"{r.name:<9} seed {r.seed}  acc {r.accuracy:5.1f}%")
    summary = margin_summary(results, base.channels)
    print(f"-- means over {len(seeds)} seed(s), {time.time()-t0:.0f}s --")
    for key, val in summary.items():
        print(f"{key:<20} {val:6.1f}")
    if args.out:
        out = Path(args.out)
        _write_csv(out / "ablation.csv", ["name", "seed", "accuracy"],
                   [[r.name, r.seed, repr(r.accuracy)] for r in results])
        from hmba.plots import plot_ablation
        rows = [{"name": r.name, "accuracy": r.accuracy} for r in results]
        print(f"wrote {plot_ablation(rows, out / 'ablation.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmba",
        description="hierarchical Mamba video adapter: reports and runs")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("flops", help="analytic cost report for one config")
    _add_cfg_args(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out", default=None, help="directory for flops.csv")
    p.set_defaults(fn=cmd_flops)

    p = subs.add_parser("sweep", help="cost vs sequence length")
    p.add_argument("--lengths", default="64,128,256")
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--d-model", type=int, default=1024)
    p.add_argument("--n-state", type=int, default=16)
    p.add_argument("--d-conv", type=int, default=4)
    p.add_argument("--expand", type=int, default=2)
    p.add_argument("--out", default=None,
                   help="directory for sweep.csv and sweep.png")
    p.set_defaults(fn=cmd_sweep)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--checks", default=None,
                   help="comma-separated subset of check names")
    p.add_argument("--out", default=None, help="directory for gradcheck.csv")
    p.set_defaults(fn=cmd_gradcheck)

    p = subs.add_parser("bench", help="wall-clock timing of a train step")
    _add_cfg_args(p)
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = subs.add_parser("train-synthetic",
                        help="train one model on the synthetic task")
    _add_cfg_args(p)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--steps", type=int, default=None,
                   help="override the config step count")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", default=None,
                   help="directory for the model, training.csv, training.png")
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("ablate", help="context-arrangement ablation grid")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key of the ablation recipe")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default=None,
                   help="comma-separated subset of variant names")
    p.add_argument("--out", default=None,
                   help="directory for ablation.csv and ablation.png")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
