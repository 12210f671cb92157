"""Every ordering of three trucks drawn from four masses, both MPC variants, on the 70 km route.

Thin wrapper over the batch command that also prints the platoon-level contrast.

    python scripts/mass_permutations.py --jobs 4 --out runs
"""
import argparse
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from platoon_mpc.cli import BatchSpec, run_batch
from platoon_mpc.config import load_config


@dataclass
class Config:
    out: Path = Path("runs")
    jobs: int = 1
    config: Optional[str] = None  # packaged default when None


def main(cfg: Config):
    spec = BatchSpec.from_config(load_config(cfg.config), cfg.out, jobs=cfg.jobs)
    t0 = time.perf_counter()
    table = run_batch(spec)
    print(table.render())
    for c in table.controllers:
        runs = table.runs(c)
        dis = np.mean([any(t.disengagements for t in r.metrics[1:]) for r in runs])
        print(f"{c}: runs with a follower disengagement {dis:.0%}")
    fc, fa = table.platoon_fuel("considerate"), table.platoon_fuel("anticipative")
    print(f"platoon fuel considerate vs anticipative: {100 * (fa - fc) / fa:+.2f} %")
    print(f"{len(table.results)} runs in {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Config.out)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--config", default=None)
    a = ap.parse_args()
    main(Config(a.out, a.jobs, a.config))
