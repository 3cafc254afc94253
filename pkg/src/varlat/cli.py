"""Command-line entry point: ``varlat <command> ...``.

Exit status: 0 on success, 2 for usage or configuration errors, 3 when a
simulation aborts because a queue saturated.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .collector import trace_dir, trace_path
from .live import LiveConfig, LiveRunner, run_live
from .lockmgr import SaturationError, tune_theta
from .metrics import summarize
from .refine import run_refinement
from .sim import run_sim
from .tracefmt import (FunctionRegistry, TraceFormatError, UnbalancedTraceError, build_invocations,
                       read_trace, write_trace)
from .vartree import InsufficientSamplesError, SelectionParams, analyze, report, report_csv
from .workload import ConfigError, Menu, RemainingTimeModel, load_config, paired_gap, run_menu

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("varlat")

EXIT_OK, EXIT_USAGE, EXIT_SATURATED = 0, 2, 3


class UsageError(Exception):
    pass


def _emit(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _dump(args, obj: dict, rows: list[dict]) -> None:
    if args.format == "csv":
        _emit(args, _rows_csv(rows))
    else:
        _emit(args, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sim_config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "scheduler", None):
        changes["scheduler"] = args.scheduler
    return cfg.replace(**changes) if changes else cfg


def _live_config(args) -> LiveConfig:
    try:
        with open(args.workload, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"workload file not found: {args.workload}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{args.workload}: {exc}") from None
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return LiveConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# -- commands -----------------------------------------------------------------

def cmd_sim(args) -> int:
    res = run_sim(_sim_config(args))
    _emit(args, res.to_csv() if args.format == "csv" else res.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _sim_config(args)
    names = _csv_list(args.schedulers)
    if len(names) < 2:
        raise UsageError("compare needs at least two schedulers")
    rows = []
    for name in names:
        acc = {"mean_ns": [], "variance_ns2": [], "p99_ns": [], "l2_norm": []}
        for i in range(args.seeds):
            s = summarize(run_sim(cfg.replace(scheduler=name, seed=cfg.seed + i)).latencies_ns, 2.0)
            acc["mean_ns"].append(s.mean_ns)
            acc["variance_ns2"].append(s.variance_ns2)
            acc["p99_ns"].append(s.p99_ns)
            acc["l2_norm"].append(s.lp_norm)
        rows.append({"label": name, **{k: float(np.mean(v)) for k, v in acc.items()}})
    base = rows[0]
    for r in rows:
        for col in ("mean_ns", "variance_ns2", "p99_ns", "l2_norm"):
            b = base[col]
            # positive means the candidate is lower than the first-listed scheduler
            r[f"{col.rsplit('_', 1)[0]}_reduction_pct"] = 100.0 * (b - r[col]) / b if b else 0.0
    _dump(args, {"baseline": base["label"], "seeds": args.seeds, "rows": rows}, rows)
    return EXIT_OK


def cmd_analyze(args) -> int:
    registry = FunctionRegistry.load(args.registry)
    events = []
    for path in args.trace:
        events.extend(read_trace(path))
    forest = build_invocations(events, registry)
    tree, factors = analyze(forest, registry, args.root, SelectionParams(args.k, args.d))
    rep = report(tree, factors)
    _emit(args, report_csv(rep) if args.format == "csv" else json.dumps(rep, indent=1) + "\n")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _live_config(args)
    runner = LiveRunner(cfg)
    if args.root not in runner.registry.names():
        raise UsageError(f"unknown root function {args.root!r}")
    tdir = trace_dir(args.trace_dir)
    runner.registry.save(tdir / "registry.txt")

    def run(profile, iteration):
        res = runner.run(profile)
        events = res.collector.drain()
        write_trace(trace_path(iteration, tdir), events)
        return build_invocations(events, runner.registry)

    out = Path(args.out or ".")
    result = run_refinement(run, runner.registry, args.root, runner.callees,
                            SelectionParams(args.k, args.d), args.max_iterations, out)
    top = result.final["report"]["factors"]
    print(f"{result.final['iterations']} iteration(s), converged={result.final['converged']}; "
          f"top factor: {top[0]['identity'] if top else 'none'}; wrote {out / 'final.json'}")
    return EXIT_OK


def cmd_live(args) -> int:
    cfg = _live_config(args)
    profile = args.profile if args.profile in ("all", "none") else _csv_list(args.profile)
    out = run_live(cfg, profile, args.trace_dir)
    res = out.run
    summary = {"n_txns": res.n_txns, "elapsed_s": res.elapsed_s, "throughput_tps": res.throughput,
               "trace": str(out.trace), "registry": str(out.registry),
               "latency": summarize(res.latencies_ns).to_dict()}
    _dump(args, summary, [{k: v for k, v in summary.items() if k != "latency"}])
    return EXIT_OK


def cmd_tune_theta(args) -> int:
    cfg = _sim_config(args).replace(scheduler="vats")
    grid = [float(x) for x in _csv_list(args.grid)]

    def simulate(theta):
        var, mean = [], []
        for i in range(args.seeds):
            lat = run_sim(cfg.replace(vats_theta=theta, seed=cfg.seed + i)).latencies_ns
            var.append(float(lat.var()))
            mean.append(float(lat.mean()))
        return {"variance_ns2": float(np.mean(var)), "mean_ns": float(np.mean(mean))}

    sweep = tune_theta(simulate, grid, args.tolerance)
    _dump(args, {"best_theta": sweep.best, "table": sweep.table}, sweep.table)
    return EXIT_OK


def cmd_menu(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.menu:
        data = json.loads(Path(args.menu).read_text(encoding="utf-8"))
        menu = Menu.from_pairs([(e["age"], e["arrival"]) for e in data])
    else:
        menu = Menu.random(np.random.default_rng(seed), args.n)
    model = RemainingTimeModel(args.dist, args.mean, args.sigma, seed)
    est = {p: run_menu(menu, model, p, args.trials, args.p) for p in _csv_list(args.policies)}
    first = next(iter(est.values()))
    rows = []
    for e in est.values():
        gap, se = paired_gap(first, e)
        rows.append({**e.to_dict(), "diff_vs_first": gap, "diff_stderr": se})
    _dump(args, {"menu": [{"age": m.age, "arrival": m.arrival} for m in menu.entries],
                 "results": rows}, rows)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="override the RNG seed")
    p.add_argument("--out", default=d(None), help="output file (directory for refine); default stdout")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varlat", description="Latency-variance profiling and simulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", parents=[common], help="run the discrete-event simulator")
    p.add_argument("--config", required=True)
    p.add_argument("--scheduler", choices=("fcfs", "vats", "etf", "random"))
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("compare", parents=[common], help="compare schedulers on one config")
    p.add_argument("--config", required=True)
    p.add_argument("--schedulers", default="fcfs,vats")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", parents=[common], help="rank variance factors in a trace")
    p.add_argument("--trace", nargs="+", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=float, default=0.0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("refine", parents=[common], help="iteratively refine the profile of a live workload")
    p.add_argument("--root", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=float, default=0.05)
    p.add_argument("--max-iterations", type=int, default=10)
    p.add_argument("--workload", required=True)
    p.add_argument("--trace-dir")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("live", parents=[common], help="run the live testbed once and write its trace")
    p.add_argument("--workload", required=True)
    p.add_argument("--profile", default="all", help="'all', 'none' or comma-separated function names")
    p.add_argument("--trace-dir")
    p.set_defaults(func=cmd_live)

    p = sub.add_parser("tune-theta", parents=[common], help="sweep the eldest-first activation threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="0,0.05,0.1,0.2,0.3,0.5,0.7,1.0")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.set_defaults(func=cmd_tune_theta)

    p = sub.add_parser("menu", parents=[common], help="Monte Carlo p-performance of a single lock queue")
    p.add_argument("--menu", help="JSON list of {age, arrival}; random if omitted")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--dist", choices=("exponential", "lognormal", "constant"), default="exponential")
    p.add_argument("--mean", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--policies", default="fcfs,vats,random")
    p.set_defaults(func=cmd_menu)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SaturationError as exc:
        print(f"varlat: aborted, queue saturated: {exc}", file=sys.stderr)
        return EXIT_SATURATED
    except (ConfigError, UsageError, TraceFormatError, UnbalancedTraceError,
            InsufficientSamplesError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"varlat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
