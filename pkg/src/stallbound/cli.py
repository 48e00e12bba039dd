"""Command-line entry point.

Every command reads a cluster config, writes CSV files into ``--out`` and,
unless ``--no-figures`` is given, PNG figures next to them.  Failures print a
single line ``error: <category>: <detail>`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import Evaluator, bound_report
from .baselines import PolicyKind, compare_policies, make_baseline, policy_row, rows_to_csv
from .model import AuxVars, ConfigError, InfeasibleError, SystemConfig, load_config
from .optimizer import (
    SolverSettings,
    alternate,
    initial_point,
    optimize_aux,
    solution_from_csv,
    solution_to_csv,
    trace_frontier,
)
from .simulator import InsufficientSamples, SimSettings, run_simulation

log = logging.getLogger("stallbound")

SWEEP_AXES = ("arrival_scale", "files", "servers", "code", "streams")
EXIT_ERROR = 2
EXIT_VIOLATION = 3


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(f"{category}: {detail}")
        self.category = category
        self.detail = detail


# -- argument parsing ----------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _codes(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            n, k = item.split(":")
            out.append((int(n), int(k)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"codes are n:k pairs separated by commas, got {item!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="cluster config file")
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--theta", type=float, help="override the mean/tail weight")
    common.add_argument("--x", type=_floats, help="tail threshold(s) in seconds")
    common.add_argument("--max-outer", type=int, default=1000, help="outer iteration cap")
    common.add_argument("--no-figures", action="store_true", help="skip PNG output")
    common.add_argument("-v", "--verbose", action="store_true")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--replications", type=int, default=1)
    sim.add_argument("--horizon", type=int, default=12500, help="requests per replication")

    sol = argparse.ArgumentParser(add_help=False)
    sol.add_argument("--solution", type=Path, help="solution CSV written by 'optimize'")

    p = argparse.ArgumentParser(prog="stallbound", description="Stall-duration bounds for erasure-coded video storage")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common, sol], help="bounds for a given or initial solution")
    sub.add_parser("optimize", parents=[common], help="joint placement, access and bound optimisation")
    sub.add_parser("simulate", parents=[common, sim, sol], help="check bounds against simulation")
    sub.add_parser("baselines", parents=[common], help="compare against the reference policies")
    sw = sub.add_parser("sweep", parents=[common], help="metric versus one swept parameter")
    sw.add_argument("--arrival-scale", type=_floats)
    sw.add_argument("--files", type=_ints)
    sw.add_argument("--servers", type=_ints)
    sw.add_argument("--code", type=_codes)
    sw.add_argument("--streams", type=_ints)
    sw.add_argument("--policies", default="Proposed",
                    help="comma-separated policy names, or 'all' (default: Proposed)")
    sw.add_argument("--metric", choices=("mean", "tail", "objective"), default="objective")
    sw.add_argument("--workers", type=int, default=1, help="sweep points evaluated concurrently")
    tr = sub.add_parser("tradeoff", parents=[common], help="mean/tail frontier over theta")
    tr.add_argument("--points", type=int, default=11)
    return p


def _validate(args) -> None:
    if args.theta is not None and not 0 <= args.theta <= 1:
        raise CliError("usage", "--theta must lie in [0, 1]")
    if args.x is not None and (not args.x or any(v < 0 for v in args.x)):
        raise CliError("usage", "--x needs nonnegative values")
    if args.max_outer < 1:
        raise CliError("usage", "--max-outer must be >= 1")
    if args.command not in ("simulate", "sweep") and args.x is not None and len(args.x) > 1:
        raise CliError("usage", f"'{args.command}' takes a single --x value")
    if args.command == "simulate":
        if args.replications < 1 or args.horizon < 10:
            raise CliError("usage", "--replications must be >= 1 and --horizon >= 10")
    if args.command == "sweep":
        axes = [a for a in SWEEP_AXES if getattr(args, a)]
        if args.x is not None and len(args.x) > 1:
            axes.append("x")
        if len(axes) != 1:
            raise CliError("usage", "sweep needs exactly one of --arrival-scale --files --servers --code --streams "
                                    "or a multi-valued --x")
        if args.workers < 1:
            raise CliError("usage", "--workers must be >= 1")
        _policies(args.policies)
    if args.command == "tradeoff" and args.points < 2:
        raise CliError("usage", "--points must be >= 2")


def _policies(text: str) -> list[str]:
    if text == "all":
        return ["Proposed"] + [k.value for k in PolicyKind]
    names = [s.strip() for s in text.split(",") if s.strip()]
    valid = {"Proposed"} | {k.value for k in PolicyKind}
    bad = [n for n in names if n not in valid]
    if bad or not names:
        raise CliError("usage", f"unknown policy {bad[0] if bad else text!r}; choose from {sorted(valid)}")
    return names


# -- helpers -------------------------------------------------------------------


def _load(args) -> SystemConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.theta is not None:
        changes["theta"] = args.theta
    if args.x is not None and len(args.x) == 1:
        changes["x"] = args.x[0]
    return cfg.with_(**changes) if changes else cfg


def _settings(args) -> SolverSettings:
    return SolverSettings(seed=args.seed, max_outer=args.max_outer)


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


def _starting_point(cfg, args):
    """Solution from ``--solution``, else the seeded initial point with tuned t."""
    if getattr(args, "solution", None):
        return solution_from_csv(args.solution.read_text(), cfg)
    settings = _settings(args)
    pi, S, t = initial_point(cfg, settings)
    t, _ = optimize_aux(cfg, S, pi, t, settings)
    return pi, S, t


def _tightest(cfg, S, pi, t, *, theta, x=None):
    """Bound parameters re-tuned for a single metric (and tail threshold)."""
    c = cfg.with_(theta=theta, x=cfg.x if x is None else x)
    tt, _ = optimize_aux(c, S, pi, t)
    return tt


# -- commands --------------------------------------------------------------------


def cmd_analyze(args, cfg, out):
    pi, S, t = _starting_point(cfg, args)
    _write(out, "bounds.csv", bound_report(cfg, pi, S, t).to_csv())


def cmd_optimize(args, cfg, out):
    sol = alternate(cfg, _settings(args))
    _write(out, "solution.csv", solution_to_csv(sol.pi, sol.S, sol.t))
    _write(out, "trace.csv", sol.trace.to_csv())
    _write(out, "bounds.csv", bound_report(cfg, sol.pi, sol.S, sol.t).to_csv())
    if not args.no_figures:
        from . import report

        report.convergence(list(sol.trace.objectives), out / "convergence.png")


def cmd_simulate(args, cfg, out) -> int:
    pi, S, t = _starting_point(cfg, args)
    xs = tuple(args.x) if args.x is not None else (cfg.x,)
    sim = SimSettings(requests=args.horizon, replications=args.replications, seed=args.seed, xs=xs)
    rep = run_simulation(cfg, pi, S, sim)
    _write(out, "simulation.csv", rep.to_csv())
    ev = Evaluator(cfg, pi)
    mean_b = ev.mean_bounds(_tightest(cfg, S, pi, t, theta=1.0).t_mean)
    tails = {x: ev.tail_bounds(_tightest(cfg, S, pi, t, theta=0.0, x=x).t_tail, x=x) for x in xs}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "metric", "x", "bound", "empirical", "stderr", "ok"])
    violations = []
    for i, est in enumerate(rep.files):
        if est is None:
            continue
        checks = [("mean", "", mean_b[i], est.mean, est.mean_se)]
        checks += [("tail", repr(float(x)), tails[x][i], *est.tail[float(x)]) for x in xs]
        for metric, x, b, e, se in checks:
            ok = bool(b >= e - 2 * se)
            w.writerow([i, metric, x, repr(float(b)), repr(float(e)), repr(float(se)), int(ok)])
            if not ok:
                violations.append(f"file {i} {metric}{'@' + x if x else ''} bound {b:.6g} < {e:.6g} - 2*{se:.3g}")
    _write(out, "comparison.csv", buf.getvalue())
    if not args.no_figures:
        from . import report

        idx = [i for i, e in enumerate(rep.files) if e is not None]
        report.bound_vs_sim([float(mean_b[i]) for i in idx], [rep.files[i].mean for i in idx],
                            [rep.files[i].mean_se for i in idx], out / "simulation.png")
    if violations:
        raise CliError("bound-violation", f"{len(violations)} check(s) failed; first: {violations[0]}")
    return 0


def cmd_baselines(args, cfg, out):
    rows = compare_policies(cfg, args.seed, _settings(args))
    _write(out, "baselines.csv", rows_to_csv(rows))
    if not args.no_figures:
        from . import report

        report.policy_bars(rows, out / "baselines.png")


def _cycled(items, count):
    return tuple(items[i % len(items)] for i in range(count))


def sweep_config(cfg: SystemConfig, axis: str, value) -> SystemConfig:
    """Config for one sweep point.

    File and server counts take the first entries of the configured lists,
    repeating them cyclically when the request exceeds what is configured.
    """
    if axis == "arrival_scale":
        return cfg.scale_rates(float(value))
    if axis == "files":
        files = [replace(f, id=str(i)) for i, f in enumerate(_cycled(cfg.files, int(value)))]
        return cfg.with_(files=tuple(files))
    if axis == "servers":
        m = int(value)
        files = tuple(replace(f, cached={j: c for j, c in f.cached.items() if j < m}) for f in cfg.files)
        return cfg.with_(servers=_cycled(cfg.servers, m), files=files)
    if axis == "code":
        n, k = value
        return cfg.with_(files=tuple(replace(f, n=int(n), k=int(k)) for f in cfg.files))
    if axis == "streams":
        return cfg.with_(y=int(value))
    if axis == "x":
        return cfg.with_(x=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


def _sweep_point(job):
    cfg, axis, value, policies, settings = job
    point = sweep_config(cfg, axis, value)
    rows = []
    for name in policies:
        try:
            sol = (alternate(point, settings) if name == "Proposed"
                   else make_baseline(name, point, settings.seed, settings))
            rows.append(policy_row(name, point, sol))
        except InfeasibleError as exc:
            rows.append((name, exc.category, exc.detail))
    return rows


def _label(value) -> str:
    return f"{value[0]}:{value[1]}" if isinstance(value, tuple) else f"{value:g}"


def cmd_sweep(args, cfg, out):
    axis = next((a for a in SWEEP_AXES if getattr(args, a)), "x")
    values = args.x if axis == "x" else getattr(args, axis)
    policies = _policies(args.policies)
    settings = _settings(args)
    jobs = [(cfg, axis, v, policies, settings) for v in values]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "policy", "objective", "mean_stall", "tail", "status"])
    series = {p: [] for p in policies}
    for v, rows in zip(values, results):
        for r in rows:
            if isinstance(r, tuple):
                name, cat, detail = r
                w.writerow([axis, _label(v), name, "", "", "", f"{cat}: {detail}"])
                series[name].append(float("nan"))
            else:
                w.writerow([axis, _label(v), r.policy, repr(r.objective), repr(r.mean_stall), repr(r.tail), "ok"])
                series[r.policy].append({"mean": r.mean_stall, "tail": r.tail, "objective": r.objective}[args.metric])
    _write(out, "sweep.csv", buf.getvalue())
    if not args.no_figures:
        from . import report

        ylabel = {"mean": "mean stall bound (s)", "tail": "tail bound", "objective": "weighted objective"}[args.metric]
        report.sweep_lines([_label(v) for v in values], series, out / "sweep.png", axis.replace("_", " "), ylabel)


def cmd_tradeoff(args, cfg, out):
    thetas = np.linspace(0.0, 1.0, args.points)
    settings = _settings(args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta", "mean_stall", "tail", "objective"])
    means, tails = [], []
    for th, sol in zip(thetas, trace_frontier(cfg, thetas, settings)):
        row = policy_row("Proposed", cfg.with_(theta=float(th)), sol)
        means.append(row.mean_stall)
        tails.append(row.tail)
        w.writerow([repr(float(th)), repr(row.mean_stall), repr(row.tail), repr(row.objective)])
    _write(out, "tradeoff.csv", buf.getvalue())
    if not args.no_figures:
        from . import report

        report.frontier(means, tails, list(thetas), out / "tradeoff.png")


COMMANDS = {
    "analyze": cmd_analyze,
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "baselines": cmd_baselines,
    "sweep": cmd_sweep,
    "tradeoff": cmd_tradeoff,
}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        cfg = _load(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, args.out)
    except CliError as exc:
        print(f"error: {exc.category}: {_one_line(exc.detail)}", file=sys.stderr)
        return EXIT_VIOLATION if exc.category == "bound-violation" else EXIT_ERROR
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except InfeasibleError as exc:
        print(f"error: {exc.category}: {_one_line(exc.detail)}", file=sys.stderr)
        return EXIT_ERROR
    except InsufficientSamples as exc:
        print(f"error: samples: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: input: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
