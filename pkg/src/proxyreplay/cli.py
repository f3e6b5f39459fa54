"""Command-line front end.

    proxyreplay run --config exp.ini [--seeds 0,1,2] [--out DIR] [--grad-audit] [--workers N]
    proxyreplay gradcheck [--instances K] [--seed S]
    proxyreplay tau-sweep --config exp.ini [--seeds ...] [--out DIR]
    proxyreplay export-data --config exp.ini [--seeds ...] [--out DIR]
    proxyreplay plot --out DIR

Output directory precedence: --out, then $PROXYREPLAY_OUT, then the config's
``[experiment] out``. Invalid configs exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from scipy import stats

from . import datastream
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError
from .gradients import CLOSED_FORM_NAMES, LOSS_NAMES, gradcheck_suite
from .losses import TemperatureSchedule
from .trainer import run, write_run

OUT_ENV = "PROXYREPLAY_OUT"
GRADCHECK_TOL = 1e-5
METRIC_NAMES = ("A_T", "AAA", "F_T")


def run_id(method: str, buffer_size: int, seed: int) -> str:
    return f"{method}-M{buffer_size}-s{seed}"


def ci_halfwidth(values, level: float = 0.95) -> float:
    """Half-width of the two-sided Student-t confidence interval of the mean."""
    n = len(values)
    if n < 2:
        return float("nan")
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    return float(stats.t.ppf(0.5 + level / 2, n - 1)) * sd / math.sqrt(n)


def _run_cell(cfg: ExperimentConfig, method: str, buffer_size: int, seed: int, out: Path) -> dict:
    rid = run_id(method, buffer_size, seed)
    stream = datastream.make_task_stream(cfg.stream_for(seed))
    res = run(
        stream,
        cfg.spec(method, buffer_size),
        seed,
        model=cfg.model,
        grad_audit=cfg.grad_audit,
        eval_every=cfg.eval_every or None,
        keep_embeddings=cfg.embeddings,
    )
    write_run(res, out / rid)
    return {"run_id": rid, "A_T": res.A_T, "AAA": res.AAA, "F_T": res.F_T, "wall_time": res.wall_time}


def _safe_cell(args) -> dict:
    cfg, method, buffer_size, seed, out = args
    try:
        return {"status": "ok", **_run_cell(cfg, method, buffer_size, seed, out)}
    except Exception as e:  # a failed cell must not take the sweep down
        return {"status": f"failed: {type(e).__name__}: {e}", "run_id": run_id(method, buffer_size, seed)}


def read_metrics(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh))
    return {k: float(row[k]) for k in METRIC_NAMES}


def write_aggregate(cfg: ExperimentConfig, out: Path) -> Path:
    """Mean and 95% CI half-width over seeds, read back from the per-run files."""
    path = out / "aggregate.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "buffer_size", "metric", "mean", "ci95", "n"])
        for method in cfg.methods:
            for m in cfg.buffer_sizes:
                runs = []
                for s in cfg.seeds:
                    f = out / run_id(method, m, s) / "metrics.csv"
                    if f.exists():
                        runs.append(read_metrics(f))
                for key in METRIC_NAMES:
                    vals = [r[key] for r in runs]
                    mean = math.fsum(vals) / len(vals) if vals else float("nan")
                    w.writerow([method, m, key, repr(mean), repr(ci_halfwidth(vals)), len(vals)])
    return path


def _resolve_out(args, cfg: ExperimentConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out if cfg else "results")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse seeds {args.seeds!r}", "--seeds") from None
        cfg = dataclasses.replace(cfg, seeds=seeds)
    if getattr(args, "grad_audit", False):
        cfg = dataclasses.replace(cfg, grad_audit=True)
    cfg = dataclasses.replace(cfg, out=str(_resolve_out(args, cfg)))
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    cells = [(cfg, m, b, s, out) for m in cfg.methods for b in cfg.buffer_sizes for s in cfg.seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_safe_cell, cells))
    else:
        results = [_safe_cell(c) for c in cells]

    with open(out / "status.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "status", "wall_time"])
        for r in results:
            w.writerow([r["run_id"], r["status"], f"{r.get('wall_time', float('nan')):.3f}"])
    write_aggregate(cfg, out)
    failed = [r for r in results if r["status"] != "ok"]
    for r in results:
        if r["status"] == "ok":
            print(f"{r['run_id']:<28} A_T={r['A_T']:.4f} AAA={r['AAA']:.4f} F_T={r['F_T']:.4f}")
        else:
            print(f"{r['run_id']:<28} {r['status']}", file=sys.stderr)
    print(f"wrote {len(results) - len(failed)} run(s) and aggregate.csv to {out}")
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    errors = gradcheck_suite(instances=args.instances, seed=args.seed)
    bad = []
    print(f"{'check':<16} {'max rel err':>12}")
    for name in LOSS_NAMES + CLOSED_FORM_NAMES:
        e = errors[name]
        ok = e <= GRADCHECK_TOL
        if not ok:
            bad.append(name)
        print(f"{name:<16} {e:12.3e} {'ok' if ok else 'FAIL'}")
    print(f"{args.instances} instances per check in {time.perf_counter() - started:.1f}s")
    if bad:
        print("exceeds 1e-5: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def cmd_tau_sweep(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for hi, lo, s in cfg.tau_grid.cells():
        sched = TemperatureSchedule(hi, lo, s, cfg.schedule.tau)
        for m in cfg.buffer_sizes:
            a_t, aaa = [], []
            for seed in cfg.seeds:
                stream = datastream.make_task_stream(cfg.stream_for(seed))
                res = run(stream, cfg.spec("hpcr", m, sched), seed, model=cfg.model)
                a_t.append(res.A_T)
                aaa.append(res.AAA)
            rows.append((hi, lo, s, m, math.fsum(a_t) / len(a_t), math.fsum(aaa) / len(aaa)))
    with open(out / "tau_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_max", "tau_min", "cycle", "buffer_size", "A_T", "AAA"])
        for r in rows:
            w.writerow([repr(r[0]), repr(r[1]), r[2], r[3], repr(r[4]), repr(r[5])])
    best = max(rows, key=lambda r: r[4])
    print(f"{len(rows)} cell(s); best A_T={best[4]:.4f} at tau_max={best[0]}, tau_min={best[1]}, cycle={best[2]}")
    return 0


def cmd_export_data(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        path = out / f"stream_s{seed}.csv"
        datastream.export_csv(datastream.make_task_stream(cfg.stream_for(seed)), path)
        print(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_results

    written = plot_results(_resolve_out(args))
    for p in written:
        print(f"wrote {p}")
    return 0 if written else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxyreplay", description="Online continual learning with proxy-based replay.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--seeds", help="comma-separated seeds, overrides the config")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="train every method x buffer size x seed cell")
    with_config(sp)
    sp.add_argument("--grad-audit", action="store_true", help="write per-step proxy gradient totals")
    sp.add_argument("--workers", type=int, default=1, help="parallel processes for independent cells")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("tau-sweep", help="HPCR over the [tau_sweep] grid")
    with_config(sp)
    sp.set_defaults(func=cmd_tau_sweep)

    sp = sub.add_parser("export-data", help="write the synthetic stream for each seed as CSV")
    with_config(sp)
    sp.set_defaults(func=cmd_export_data)

    sp = sub.add_parser("plot", help="render PNG figures next to the CSVs in an output directory")
    sp.add_argument("--out", help="results directory to scan")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        where = f" [{e.field}]" if e.field else ""
        print(f"config error{where}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
