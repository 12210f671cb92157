"""Considerate vs anticipative MPC on the S-road with a light leader and two heavy followers.

Writes trajectory, metrics and plot CSVs per controller and prints a short contrast.

    python scripts/s_road_contrast.py --out runs/s_road
"""
import argparse
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from platoon_mpc.cli import PLOTS, emit_plot_data
from platoon_mpc.road import make_s_road
from platoon_mpc.sim import ScenarioConfig, platoon_params, run_scenario


@dataclass
class Config:
    masses: tuple = (14000.0, 38000.0, 38000.0)
    controllers: tuple = ("considerate", "anticipative")
    dt_ctrl: float = 0.5
    out: Path = field(default_factory=lambda: Path("runs/s_road"))


def main(cfg: Config):
    road = make_s_road()
    params = platoon_params(cfg.masses)
    for kind in cfg.controllers:
        sc = ScenarioConfig(params, road, kind, dt_ctrl=cfg.dt_ctrl, name=f"s-road-{kind}")
        t0 = time.perf_counter()
        log, met = run_scenario(sc)
        wall = time.perf_counter() - t0
        out = cfg.out / kind
        out.mkdir(parents=True, exist_ok=True)
        log.write_csv(out / "trajectory.csv")
        met.write_csv(out / "metrics.csv")
        for which in PLOTS:
            emit_plot_data(log, which, out / "plots", params=params)

        gaps = log.data["gap"][:, 1:]
        solves = np.array([r.wall for r in log.solve_times if r.warm])
        print(f"{kind}: {wall:.0f} s wall, warm solves mean {1e3 * solves.mean():.1f} ms "
              f"max {1e3 * solves.max():.1f} ms")
        for t in met.trucks:
            print(f"  truck {t.truck}: {t.fuel_kg_per_100km:.2f} kg/100km, finish {t.travel_time_s:.1f} s, "
                  f"gap rmse {t.gap_rmse_m:.2f} m, disengagements {t.disengagements}")
        print(f"  max follower gap {np.nanmax(gaps):.1f} m")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Config().out)
    ap.add_argument("--dt", type=float, default=Config.dt_ctrl)
    a = ap.parse_args()
    main(Config(dt_ctrl=a.dt, out=a.out))
