"""Command line: single runs, permutation batches, drag refits and self-checks.

    platoon-mpc run    --config cfg.toml --out out/
    platoon-mpc batch  --config cfg.toml --out out/ --jobs 4
    platoon-mpc fit-drag [--data gaps.csv] --out out/
    platoon-mpc check

Exit codes: 0 success, 1 a run failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .powertrain import (DRAG_DATA, FitError, drag_reduction, engine_speed, fit_drag_reduction,
                         load_drag_csv)
from .sim import METRIC_COLUMNS, TrajectoryLog, TruckMetrics, _fmt, run_scenario

SUMMARY_FIELDS = ("fuel_kg_per_100km", "headway_s", "gap_rmse_m", "gap_rmse_raw_m",
                  "disengagements", "travel_time_s")


@dataclass
class BatchSpec:
    mass_set: Sequence[float] = (14000.0, 22000.0, 30000.0, 38000.0)
    platoon_size: int = 3
    controllers: Sequence[str] = ("considerate", "anticipative")
    route: str = "rolling-70km"
    out_dir: Path = Path("out")
    seed: int = 0
    jobs: int = 1
    batch_id: str = "batch"
    dt_ctrl: Optional[float] = None
    base: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.platoon_size < 1 or self.platoon_size > len(self.mass_set):
            raise ValueError("platoon_size must lie in 1..len(mass_set)")
        if len(set(self.mass_set)) != len(self.mass_set):
            raise ValueError("mass_set entries must be distinct")
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_config(cls, cfg: RunConfig, out_dir, seed=None, jobs=1) -> "BatchSpec":
        b = cfg.batch
        try:
            return cls(mass_set=tuple(1000.0 * m for m in b.get("mass_set_t", (14, 22, 30, 38))),
                       platoon_size=int(b.get("platoon_size", 3)),
                       controllers=tuple(b.get("controllers", ("considerate", "anticipative"))),
                       route=b.get("route", "rolling-70km"), out_dir=Path(out_dir),
                       seed=cfg.seed if seed is None else seed, jobs=jobs,
                       batch_id=b.get("batch_id", "batch"), dt_ctrl=b.get("dt_ctrl"), base=cfg)
        except ValueError as exc:
            raise ConfigError(f"[batch] {exc}") from None


def enumerate_permutations(spec: BatchSpec) -> list[tuple[float, ...]]:
    """All ordered K-selections of distinct masses, lexicographic."""
    return list(itertools.permutations(sorted(spec.mass_set), spec.platoon_size))


def ordering_label(masses) -> str:
    return "-".join(f"{m / 1000:g}" for m in masses)


# ---------------------------------------------------------------- batch

@dataclass
class RunResult:
    controller: str
    ordering: tuple[float, ...]
    metrics: Optional[list[TruckMetrics]]
    error: str = ""
    solve_times: Optional[dict[str, tuple[int, float, float]]] = None

    @property
    def ok(self) -> bool:
        return self.metrics is not None


def _run_one(args) -> RunResult:
    spec, controller, ordering = args
    run_dir = spec.out_dir / spec.batch_id / controller / ordering_label(ordering)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        sc = spec.base.scenario(masses_t=[m / 1000.0 for m in ordering], controller=controller,
                                route=spec.route, dt_ctrl=spec.dt_ctrl, seed=spec.seed)
        log, metrics = run_scenario(sc)
        log.write_csv(run_dir / "trajectory.csv")
        metrics.write_csv(run_dir / "metrics.csv")
        return RunResult(controller, ordering, metrics.trucks, solve_times=solve_time_stats(log))
    except Exception:  # a failed run is recorded and the batch continues
        err = traceback.format_exc()
        (run_dir / "error.txt").write_text(err, encoding="utf-8")
        return RunResult(controller, ordering, None, err)


def solve_time_stats(log: TrajectoryLog) -> dict[str, tuple[int, float, float]]:
    """Per problem kind: (count, mean s, max s)."""
    out: dict[str, list[float]] = {}
    for rec in log.solve_times:
        out.setdefault(rec.kind, []).append(rec.wall)
    return {k: (len(v), float(np.mean(v)), float(np.max(v))) for k, v in sorted(out.items())}


@dataclass
class SummaryTable:
    """Mean and population std of every metric per controller and truck index."""

    platoon_size: int
    results: list[RunResult]

    def runs(self, controller: str) -> list[RunResult]:
        return [r for r in self.results if r.controller == controller and r.ok]

    @property
    def controllers(self) -> list[str]:
        seen: list[str] = []
        for r in self.results:
            if r.controller not in seen:
                seen.append(r.controller)
        return seen

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.results if not r.ok]

    def values(self, controller: str, truck: int, name: str) -> np.ndarray:
        return np.array([getattr(r.metrics[truck], name) for r in self.runs(controller)], dtype=float)

    def stat(self, controller: str, truck: int, name: str) -> tuple[float, float]:
        v = self.values(controller, truck, name)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        return float(np.mean(v)), float(np.std(v))

    def platoon_fuel(self, controller: str) -> float:
        """Mean over runs of the summed per-truck fuel rate (kg/100 km)."""
        runs = self.runs(controller)
        return float(np.mean([sum(t.fuel_kg_per_100km for t in r.metrics) for r in runs])) if runs else float("nan")

    def header(self) -> list[str]:
        cols = ["controller", "truck", "runs"]
        for f in SUMMARY_FIELDS:
            cols += [f"{f}_mean", f"{f}_std"]
        return cols

    def rows(self) -> list[list]:
        out = []
        for c in self.controllers:
            for k in range(self.platoon_size):
                row = [c, k + 1, len(self.runs(c))]
                for f in SUMMARY_FIELDS:
                    row += list(self.stat(c, k, f))
                out.append(row)
        return out

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
        with open(out_dir / "runs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("controller", "ordering", "status") + METRIC_COLUMNS)
            for r in self.results:
                if not r.ok:
                    w.writerow([r.controller, ordering_label(r.ordering), "failed"])
                    continue
                for tm in r.metrics:
                    w.writerow([r.controller, ordering_label(r.ordering), "ok"] + [_fmt(v) for v in tm.row()])
        (out_dir / "summary.txt").write_text(self.render(), encoding="utf-8")

    def render(self) -> str:
        lines = []
        for c in self.controllers:
            n = len(self.runs(c))
            lines.append(f"{c} ({n} runs)")
            lines.append(f"{'truck':>5} {'fuel kg/100km':>18} {'headway s':>16} {'gap RMSE m':>18} "
                         f"{'diseng.':>14} {'travel s':>18}")
            for k in range(self.platoon_size):
                cells = []
                for f, width in (("fuel_kg_per_100km", 18), ("headway_s", 16), ("gap_rmse_m", 18),
                                 ("disengagements", 14), ("travel_time_s", 18)):
                    m, s = self.stat(c, k, f)
                    cells.append(f"{m:.2f} ({s:.2f})".rjust(width) if np.isfinite(m) else "-".rjust(width))
                lines.append(f"{k + 1:>5} " + " ".join(cells))
            lines.append(f"platoon total fuel: {self.platoon_fuel(c):.3f} kg/100km")
            lines.append("")
        if self.failures:
            lines.append(f"FAILED RUNS: {len(self.failures)}")
            for r in self.failures:
                lines.append(f"  {r.controller} {ordering_label(r.ordering)}")
        return "\n".join(lines) + "\n"


def run_batch(spec: BatchSpec) -> SummaryTable:
    tasks = [(spec, c, o) for c in spec.controllers for o in enumerate_permutations(spec)]
    root = spec.out_dir / spec.batch_id
    root.mkdir(parents=True, exist_ok=True)
    if spec.jobs <= 1:
        results = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    table = SummaryTable(spec.platoon_size, results)
    table.write(root)
    with open(root / "solver_times.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("controller", "ordering", "problem", "solves", "mean_ms", "max_ms"))
        for r in results:
            for kind, (n, mean, mx) in (r.solve_times or {}).items():
                w.writerow([r.controller, ordering_label(r.ordering), kind, n, f"{mean * 1e3:.3f}", f"{mx * 1e3:.3f}"])
    return table


# ---------------------------------------------------------------- plot data

PLOTS = ("travel", "traces", "deltas")


def emit_plot_data(log: TrajectoryLog, which: str, out_dir, trucks: Optional[Sequence[int]] = None,
                   params=None) -> Path:
    """Write one plotting-ready CSV.

    travel: truck, s_km, t_s.  traces: speed, gap, gap error, commanded torque
    and the engine torque limit.  deltas: ego minus predecessor speed, tractive
    acceleration and torque.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trucks = list(range(log.n_trucks)) if trucks is None else list(trucks)
    d = log.data
    path = out_dir / f"{which}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if which == "travel":
            w.writerow(("truck", "s_km", "t_s"))
            for k in trucks:
                for t, s in zip(d["t"][:, k], d["s"][:, k]):
                    w.writerow([k + 1, _fmt(s / 1000.0), _fmt(t)])
        elif which == "traces":
            w.writerow(("truck", "t_s", "v", "gap", "gap_error", "torque", "torque_limit"))
            for k in trucks:
                p = params[k] if params is not None else None
                for i in range(log.n_steps):
                    v, gear = d["v"][i, k], int(d["gear"][i, k])
                    lim = float("nan")
                    if p is not None:
                        omega = engine_speed(v, gear, p)
                        lim = min(p.tau_max, p.p_max / omega) if omega > 0 else p.tau_max
                    gap = d["gap"][i, k]
                    w.writerow([k + 1, _fmt(d["t"][i, k]), _fmt(v), _fmt(gap),
                                _fmt(gap - log.headway * v), _fmt(d["torque"][i, k]), _fmt(lim)])
        elif which == "deltas":
            w.writerow(("truck", "t_s", "dv", "da_t", "dtorque"))
            for k in trucks:
                if k == 0:
                    continue
                for i in range(log.n_steps):
                    w.writerow([k + 1, _fmt(d["t"][i, k]), _fmt(d["v"][i, k] - d["v"][i, k - 1]),
                                _fmt(d["a_t"][i, k] - d["a_t"][i, k - 1]),
                                _fmt(d["torque"][i, k] - d["torque"][i, k - 1])])
        else:
            raise ValueError(f"unknown plot {which!r}; choose from {PLOTS}")
    return path


# ---------------------------------------------------------------- commands

def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    sc = cfg.scenario(seed=args.seed)
    out = Path(args.out) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    log, metrics = run_scenario(sc)
    log.write_csv(out / "trajectory.csv")
    metrics.write_csv(out / "metrics.csv")
    for which in PLOTS:
        emit_plot_data(log, which, out / "plots", params=sc.trucks)
    print(f"{cfg.name}: {log.n_steps} steps in {time.perf_counter() - t0:.1f} s -> {out}")
    for tm in metrics.trucks:
        print("  " + ", ".join(f"{c}={_fmt(v)}" for c, v in zip(METRIC_COLUMNS, tm.row())))
    return 0 if metrics.complete else 1


def _cmd_batch(args) -> int:
    cfg = load_config(args.config)
    spec = BatchSpec.from_config(cfg, args.out, args.seed, args.jobs)
    t0 = time.perf_counter()
    table = run_batch(spec)
    print(table.render())
    print(f"{len(table.results)} runs in {time.perf_counter() - t0:.0f} s -> {spec.out_dir / spec.batch_id}")
    return 1 if table.failures else 0


def _cmd_fit_drag(args) -> int:
    try:
        data = load_drag_csv(args.data) if args.data else list(DRAG_DATA)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        model = fit_drag_reduction(data)
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "drag_fit.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("a", "b", "c", "d_coef", "rmse"))
        w.writerow([f"{x!r}" for x in (*model.coefs, model.rmse)])
    print(f"beta(d) = {model.a:.6g} exp({model.b:.6g} d) + {model.c:.6g} exp({model.d_coef:.6g} d)")
    print(f"RMSE {model.rmse:.3e}; beta(15) = {drag_reduction(15.0, model):.5f}")
    return 0


def _cmd_check(args) -> int:
    from .selfcheck import run_checks
    ok = True
    for name, passed, detail in run_checks(seed=args.seed):
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoon-mpc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run", _cmd_run, "simulate one scenario"),
                            ("batch", _cmd_batch, "mass-permutation study"),
                            ("fit-drag", _cmd_fit_drag, "refit the drafting drag curve"),
                            ("check", _cmd_check, "derivative and KKT self-test")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="TOML config (default: packaged default.toml)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="RNG seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "fit-drag":
            p.add_argument("--data", default=None, help="CSV with header gap_m,beta")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
