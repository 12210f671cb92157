"""Quick invariant and derivative self-test behind ``platoon-mpc check``."""
from __future__ import annotations

import numpy as np

from .nlp import check_derivatives
from .ocp import EgoContext, FollowerContext, OcpConfig, build_considerate, build_solo
from .powertrain import (DRAG_DATA, ExogenousInput, TruckParams, TruckState, drag_reduction,
                         fit_drag_reduction, integrate_step, select_gear)
from .road import fit_preview, make_s_road


def considerate_fixture(s0: float = 24000.0, v: float = 22.0, masses=(14000.0, 38000.0),
                        cfg: OcpConfig | None = None):
    """Leader/follower pair on the S-road climb at a headway-consistent gap."""
    cfg = cfg or OcpConfig()
    prof = make_s_road()
    base = TruckParams()
    pl, pf = base.with_mass(masses[0]), base.with_mass(masses[1])
    window = cfg.v_max * cfg.n_stages * cfg.dt

    def preview(s):
        return fit_preview(prof, s, window)

    lead = TruckState(s0, v, 0.0, select_gear(v, pl))
    s1 = s0 - pl.L - cfg.headway * v
    fol = TruckState(s1, v, 0.0, select_gear(v, pf))
    ego = EgoContext("leader", lead, pl, preview(s0))
    return build_considerate(ego, FollowerContext(fol, pf, preview(s1)), cfg)


def richardson_ratio(h: float = 0.5, n_sub: int = 10, v: float = 22.0) -> float:
    """Error ratio of RK4 with n, 2n and 4n substeps over one climbing step.

    Fourth order gives 16 once the substep is well below the driveline lag.
    """
    prof = make_s_road()
    p = TruckParams().with_mass(38000.0)
    x0 = TruckState(24500.0, v, 0.3, select_gear(v, p))
    w = ExogenousInput(prof)

    def end(n_sub):
        x = integrate_step(x0, 0.4, w, p, h, n_sub, shift=False)
        return np.array([x.v, x.a_t])

    a, b, c = end(n_sub), end(2 * n_sub), end(4 * n_sub)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b - c))


def run_checks(seed: int = 0):
    """Yield (name, passed, detail) triples."""
    model = fit_drag_reduction(DRAG_DATA)
    b15 = drag_reduction(15.0, model)
    yield "drag fit", model.rmse <= 2e-3 and abs(b15 - 0.90497) <= 3e-3, f"rmse={model.rmse:.2e} beta(15)={b15:.5f}"

    ratio = richardson_ratio()
    yield "rk4 order", abs(ratio - 16.0) <= 2.0, f"richardson ratio {ratio:.2f}"

    prob = considerate_fixture()
    rng = np.random.default_rng(seed)
    x = prob.cold_start() + 1e-3 * rng.standard_normal(prob.n_vars)
    err = check_derivatives(prob.nlp, x)
    yield "considerate jacobians", err <= 1e-5, f"max rel err {err:.2e}"

    sol = prob.solve()
    yield "considerate solve", sol.converged, f"{sol.report.status} kkt={sol.report.kkt_residual:.1e} iters={sol.report.iterations}"

    solo = build_solo(prob.ego, OcpConfig(), compliance_on=False)
    ssol = solo.solve()
    yield "solo solve", ssol.converged, f"{ssol.report.status} kkt={ssol.report.kkt_residual:.1e}"
