"""Solve-time distribution of the considerate and anticipative problems along the S-road.

Separates cold starts (first cycle, after a role change) from warm-started solves.
"""
from dataclasses import dataclass

import numpy as np

from platoon_mpc.road import make_s_road
from platoon_mpc.sim import ScenarioConfig, platoon_params, run_scenario


@dataclass
class Config:
    masses: tuple = (14000.0, 38000.0, 38000.0)
    percentiles: tuple = (50, 90, 99)


def main(cfg: Config):
    for kind in ("considerate", "anticipative"):
        log, _ = run_scenario(ScenarioConfig(platoon_params(cfg.masses), make_s_road(), kind))
        for problem in sorted({r.kind for r in log.solve_times}):
            for warm in (True, False):
                w = np.array([r.wall for r in log.solve_times if r.kind == problem and r.warm == warm])
                if w.size == 0:
                    continue
                pct = " ".join(f"p{p}={1e3 * np.percentile(w, p):.1f}" for p in cfg.percentiles)
                it = np.mean([r.kkt <= 1e-6 for r in log.solve_times if r.kind == problem and r.warm == warm])
                print(f"{kind:>12} / {problem:<12} {'warm' if warm else 'cold'} n={w.size:5d} "
                      f"mean={1e3 * w.mean():.1f} ms max={1e3 * w.max():.1f} ms {pct}  kkt<=1e-6: {it:.0%}")


if __name__ == "__main__":
    main(Config())
