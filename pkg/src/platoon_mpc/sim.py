"""Closed-loop platoon simulation and per-truck performance metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .nlp import SolveOptions
from .ocp import EgoContext, FollowerContext, OcpConfig
from .platoon import (BackwardMessage, CaccGains, ControllerKind, ControllerMemory, ForwardMessage,
                      Inbox, MessageBus, controller_step)
from .powertrain import (ExogenousInput, TruckParams, TruckState, default_drag_model, engine_torque,
                         integrate_step, select_gear)
from .road import GradeProfile, cosine_ramp, fit_preview

LOG_COLUMNS = ("t", "k", "s", "v", "a_t", "u", "gear", "gap", "torque", "fuel",
               "eps1", "eps2", "kkt", "iters", "disengaged")
METRIC_COLUMNS = ("truck", "mass_kg", "fuel_kg_per_100km", "headway_s", "gap_rmse_m",
                  "gap_rmse_raw_m", "disengagements", "travel_time_s", "complete")


class SimulationError(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    trucks: Sequence[TruckParams]
    profile: GradeProfile
    controller: ControllerKind = ControllerKind.CONSIDERATE
    ocp: OcpConfig = field(default_factory=OcpConfig)
    dt_ctrl: float = 0.5
    plant_substeps: int = 10
    t_max: Optional[float] = None
    disengage_gap: float = 110.0
    initial_gaps: Optional[Sequence[float]] = None
    v0: Optional[float] = None
    cacc: CaccGains = field(default_factory=CaccGains)
    drop_prob: float = 0.0
    seed: int = 0
    preview_margin: float = 200.0
    solver: SolveOptions = field(default_factory=SolveOptions)
    message_log: Optional[str] = None
    name: str = "scenario"
    schedule_margin: float = 0.1
    # None entries (or None overall) start in the gear the shift map picks
    initial_gears: Optional[Sequence[Optional[int]]] = None

    def __post_init__(self):
        self.trucks = list(self.trucks)
        self.controller = ControllerKind(self.controller)
        if not self.trucks:
            raise ValueError("need at least one truck")
        if self.dt_ctrl <= 0:
            raise ValueError("dt_ctrl must be positive")
        if self.disengage_gap <= self.ocp.d_min:
            raise ValueError("disengage_gap must exceed d_min")
        if self.initial_gaps is not None and len(self.initial_gaps) != len(self.trucks) - 1:
            raise ValueError("one initial gap per follower required")
        if self.initial_gears is not None and len(self.initial_gears) != len(self.trucks):
            raise ValueError("one initial gear (or None) per truck required")
        if self.schedule_margin < 0:
            raise ValueError("schedule_margin must be >= 0")
        # trip end defaults to the route end; the schedule leaves slack for climbs
        s_f = self.ocp.s_f if self.ocp.s_f is not None else self.profile.s_f
        t_f = self.ocp.t_f if self.ocp.t_f is not None else (1.0 + self.schedule_margin) * s_f / self.ocp.v_ref
        self.ocp = replace(self.ocp, s_f=s_f, t_f=t_f)

    @property
    def start_speed(self) -> float:
        return self.ocp.v_ref if self.v0 is None else self.v0

    def gaps0(self) -> list[float]:
        if self.initial_gaps is not None:
            return [float(g) for g in self.initial_gaps]
        return [self.ocp.headway * self.start_speed] * (len(self.trucks) - 1)

    @property
    def horizon(self) -> float:
        if self.t_max is not None:
            return self.t_max
        return 2.0 * self.ocp.t_f + 60.0


class SolveRecord(NamedTuple):
    truck: int
    kind: str
    wall: float
    warm: bool
    converged: bool
    kkt: float
    iterations: int


@dataclass
class TrajectoryLog:
    """Samples at every control instant, arrays shaped (steps, trucks)."""

    dt: float
    masses: np.ndarray
    s_f: float
    s0: np.ndarray
    data: dict[str, np.ndarray]
    finish_time: np.ndarray
    finish_fuel: np.ndarray
    disengage_events: np.ndarray
    solve_times: list[SolveRecord]
    complete: bool
    headway: float

    @property
    def n_steps(self) -> int:
        return self.data["t"].shape[0]

    @property
    def n_trucks(self) -> int:
        return self.masses.size

    def truck(self, k: int) -> dict[str, np.ndarray]:
        return {c: self.data[c][:, k] for c in LOG_COLUMNS if c not in ("k",)}

    def write_csv(self, path) -> None:
        cols = [c for c in LOG_COLUMNS]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(self.n_steps):
                for k in range(self.n_trucks):
                    w.writerow([_fmt(self.data[c][i, k]) for c in cols])


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.9g}"


@dataclass
class TruckMetrics:
    """Per-truck results; `truck` counts from 1 at the leader."""

    truck: int
    mass_kg: float
    fuel_kg_per_100km: float
    headway_s: float
    gap_rmse_m: float
    gap_rmse_raw_m: float
    disengagements: int
    travel_time_s: float
    complete: bool

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class RunMetrics:
    trucks: list[TruckMetrics]

    @property
    def complete(self) -> bool:
        return all(t.complete for t in self.trucks)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for tm in self.trucks:
                w.writerow([_fmt(v) for v in tm.row()])


# ---------------------------------------------------------------- logic

def detect_disengagement(gap: float, disengaged: bool, threshold: float = 110.0) -> bool:
    """Latched test: once a follower leaves the drafting envelope it stays disengaged."""
    return disengaged or gap > threshold


def _rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else float("nan")


def compute_metrics(log: TrajectoryLog, headway: Optional[float] = None) -> RunMetrics:
    T = log.headway if headway is None else headway
    out = []
    for k in range(log.n_trucks):
        tr = log.truck(k)
        dist = log.s_f - log.s0[k]
        if dist <= 0:
            raise ValueError("truck starts at or beyond the trip end: zero distance")
        done = np.isfinite(log.finish_time[k])
        fuel = log.finish_fuel[k] if done else tr["fuel"][-1]
        travelled = dist if done else tr["s"][-1] - log.s0[k]
        if travelled <= 0:
            raise ValueError("zero distance travelled")
        fuel100 = fuel / travelled * 1e5
        if k == 0:
            hw = rmse = raw = float("nan")
        else:
            on_route = tr["s"] <= log.s_f
            err = tr["gap"] - T * tr["v"]
            engaged = on_route & (tr["disengaged"] == 0)
            moving = engaged & (tr["v"] > 1.0)
            hw = float(np.mean(tr["gap"][moving] / tr["v"][moving])) if moving.any() else float("nan")
            rmse = _rms(err[engaged])
            raw = _rms(err[on_route])
        out.append(TruckMetrics(k + 1, float(log.masses[k]), float(fuel100), hw, rmse, raw,
                                int(log.disengage_events[k]), float(log.finish_time[k]), bool(done)))
    return RunMetrics(out)


def _predecessor_plan(msg: Optional[ForwardMessage], t: float, cfg: OcpConfig,
                      pred: TruckState, pred_len: float) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Predecessor positions and suggestions on this truck's stage grid.

    The received plan is re-timed to the local grid and shifted so it agrees
    with the measured predecessor position now.  Without a plan the
    predecessor is extrapolated at its measured speed and no suggestion exists.
    """
    times = t + cfg.dt * np.arange(cfg.n_stages)
    if msg is None:
        return pred.s + pred.v * (times - t), None
    plan = msg.positions_at(times)
    plan += pred.s - plan[0]
    return plan, msg.controls_at(times)


def run_scenario(cfg: ScenarioConfig, progress=None) -> tuple[TrajectoryLog, RunMetrics]:
    K = len(cfg.trucks)
    ocp = cfg.ocp
    drag = default_drag_model()
    v0 = cfg.start_speed
    gaps0 = cfg.gaps0()
    s = [0.0]
    for k in range(1, K):
        s.append(s[-1] - cfg.trucks[k - 1].L - gaps0[k - 1])
    gears = cfg.initial_gears or [None] * K
    states = [TruckState(s[k], v0, 0.0, select_gear(v0, p) if gears[k] is None else gears[k])
              for k, p in enumerate(cfg.trucks)]
    s0 = np.array(s)
    mems = [ControllerMemory() for _ in range(K)]
    bus = MessageBus(K, cfg.drop_prob, cfg.seed, log_path=cfg.message_log)
    inboxes = [Inbox() for _ in range(K)]
    disengaged = [False] * K
    events = np.zeros(K, dtype=int)
    finish_t = np.full(K, np.nan)
    finish_fuel = np.full(K, np.nan)
    n_max = int(math.ceil(cfg.horizon / cfg.dt_ctrl))
    cols = {c: [] for c in LOG_COLUMNS}
    solve_times: list[SolveRecord] = []
    complete = False

    reach = ocp.n_stages * ocp.dt

    def preview(st: TruckState):
        # covers every position the horizon can reach, plus a margin
        return fit_preview(cfg.profile, st.s, max(st.v, 1.0) * reach + cfg.preview_margin)

    try:
        for c in range(n_max):
            t = c * cfg.dt_ctrl
            gaps = [np.nan] + [states[k - 1].s - cfg.trucks[k - 1].L - states[k].s for k in range(1, K)]
            for k in range(1, K):
                if not disengaged[k] and detect_disengagement(gaps[k], False, cfg.disengage_gap):
                    disengaged[k] = True
                    events[k] += 1
            outgoing = []
            outs = []
            for k in range(K):
                st, p = states[k], cfg.trucks[k]
                heads = k == 0 or disengaged[k]
                has_follower = k + 1 < K and not disengaged[k + 1]
                role = "leader" if heads else ("mid" if has_follower else "last")
                box = inboxes[k]
                plan = mu = None
                if not heads:
                    plan, mu = _predecessor_plan(box.forward, t, ocp, states[k - 1], cfg.trucks[k - 1].L)
                ego = EgoContext(role, st, p, preview(st), t, plan, mu,
                                 cfg.trucks[k - 1].L if k > 0 else 0.0, drag)
                follower = None
                if has_follower and box.backward is not None:
                    bm = box.backward
                    tau = t - bm.t
                    fst = replace(bm.state, s=bm.state.s + bm.state.v * tau)
                    follower = FollowerContext(fst, bm.params_like(p), preview(fst),
                                               age=max(box.backward_age - 1, 0))
                cacc = None
                if cfg.controller is ControllerKind.CACC and not heads:
                    a_lead = box.forward.a_t if box.forward is not None else 0.0
                    cacc = (gaps[k], states[k - 1].v, a_lead, cfg.cacc)
                kind = cfg.controller
                if kind is ControllerKind.CACC and heads:
                    kind = ControllerKind.ANTICIPATIVE
                out = controller_step(kind, ego, follower, ocp, mems[k], k, c, cfg.solver, cacc)
                if "disengage" in out.flags and not heads:
                    disengaged[k] = True
                    events[k] += 1
                if out.solution is not None:
                    solve_times.append(SolveRecord(k, out.problem_kind, out.solve_time, out.warm,
                                                   out.solution.converged, out.kkt, out.iterations))
                outs.append(out)
                outgoing.append(out.outbox)
                outgoing.append(BackwardMessage.from_truck(k, c, t, st, p))
            inboxes = bus.exchange(outgoing, c)

            for k in range(K):
                st, p, out = states[k], cfg.trucks[k], outs[k]
                e1, e2 = out.slacks
                tq = engine_torque(max(p.m * out.u, 0.0), st.gear, p)
                for name, val in (("t", t), ("k", k), ("s", st.s), ("v", st.v), ("a_t", st.a_t),
                                  ("u", out.u), ("gear", st.gear), ("gap", gaps[k]), ("torque", tq),
                                  ("fuel", st.fuel_used), ("eps1", e1), ("eps2", e2),
                                  ("kkt", out.kkt), ("iters", out.iterations),
                                  ("disengaged", int(disengaged[k]))):
                    cols[name].append(val)

            new_states = []
            for k in range(K):
                st, p = states[k], cfg.trucks[k]
                if k > 0 and gaps[k] >= 0:
                    w = ExogenousInput(cfg.profile, gaps[k], cfg.trucks[k - 1].L, states[k - 1].v)
                else:
                    w = ExogenousInput(cfg.profile)
                nst = integrate_step(st, outs[k].u, w, p, cfg.dt_ctrl, cfg.plant_substeps, drag)
                if not np.all(np.isfinite([nst.s, nst.v, nst.a_t, nst.fuel_used])):
                    raise SimulationError(f"non-finite plant state for truck {k} at t={t:.2f}: {nst}")
                if np.isnan(finish_t[k]) and st.s < ocp.s_f <= nst.s:
                    frac = (ocp.s_f - st.s) / (nst.s - st.s)
                    finish_t[k] = t + frac * cfg.dt_ctrl
                    finish_fuel[k] = st.fuel_used + frac * (nst.fuel_used - st.fuel_used)
                new_states.append(nst)
            states = new_states
            if progress is not None:
                progress(c, t, states)
            if np.all(np.isfinite(finish_t)):
                complete = True
                break
    finally:
        bus.close()

    data = {name: np.asarray(vals).reshape(-1, K) for name, vals in cols.items()}
    log = TrajectoryLog(cfg.dt_ctrl, np.array([p.m for p in cfg.trucks]), ocp.s_f, s0, data,
                        finish_t, finish_fuel, events, solve_times, complete, ocp.headway)
    return log, compute_metrics(log)


# ---------------------------------------------------------------- fixtures

def platoon_params(masses: Sequence[float], base: Optional[TruckParams] = None) -> list[TruckParams]:
    base = base or TruckParams()
    return [base.with_mass(m) for m in masses]


def climb_profile(grade: float = 0.04, start: float = 500.0, length: float = 4000.0,
                  ramp: float = 200.0, run_out: float = 500.0) -> GradeProfile:
    """Flat approach, one constant climb with raised-cosine ends, flat run-out."""
    xs = np.linspace(start - ramp / 2, start + ramp / 2, 9)
    top = start + length
    xe = np.linspace(top - ramp / 2, top + ramp / 2, 9)
    pts = [(-1000.0, 0.0), *zip(xs, cosine_ramp(xs, xs[0], xs[-1], 0.0, grade)),
           *zip(xe, cosine_ramp(xe, xe[0], xe[-1], grade, 0.0)), (top + run_out, 0.0)]
    return GradeProfile.from_breakpoints(pts, top + run_out)


def uphill_saturation_fixture(controller, masses=(14000.0, 38000.0), v0: float = 20.0,
                              grade: float = 0.04, **kw) -> ScenarioConfig:
    """Light leader, heavy follower entering a climb one gear above the shift map's choice.

    The follower's wheel-force limit in that gear cannot hold the climb, so a
    gap controller that ignores the follower's limits loses the follower.
    """
    trucks = platoon_params(masses)
    gears = [None] * len(trucks)
    g = select_gear(v0, trucks[-1])
    gears[-1] = min(g + 1, trucks[-1].top_gear)
    return ScenarioConfig(trucks, climb_profile(grade), controller, v0=v0, initial_gears=gears,
                          name=f"uphill-{ControllerKind(controller).value}", **kw)
