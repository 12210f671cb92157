"""V2V messages, the exchange bus and per-truck controllers.

Downstream (k -> k+1) each planning truck sends its predicted positions and
the controls it suggests for its follower; upstream (k+1 -> k) each truck
reports its state and powertrain limits so its predecessor can plan for it.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .nlp import SolveOptions
from .ocp import (EgoContext, FollowerContext, OcpConfig, OcpSolution, build_considerate,
                  build_solo, warm_start)
from .powertrain import TruckParams, TruckState, admissible_control_set

STALE_LIMIT = 3


class ControllerKind(str, enum.Enum):
    CONSIDERATE = "considerate"
    ANTICIPATIVE = "anticipative"
    CACC = "cacc"


@dataclass(frozen=True)
class BackwardMessage:
    sender: int
    cycle: int
    t: float
    state: TruckState
    m: float
    p_max: float
    tau_max: float
    gear_ratios: tuple[float, ...]

    def __post_init__(self):
        vals = [self.t, self.state.s, self.state.v, self.state.a_t, self.m, self.p_max, self.tau_max,
                *self.gear_ratios]
        if not np.all(np.isfinite(vals)):
            raise ValueError("backward message fields must be finite")

    @classmethod
    def from_truck(cls, sender: int, cycle: int, t: float, state: TruckState, p: TruckParams):
        return cls(sender, cycle, t, replace(state), p.m, p.p_max, p.tau_max, p.gear_ratios)

    def params_like(self, template: TruckParams) -> TruckParams:
        """Follower model: the template with the reported mass and limits substituted."""
        eff = template.gear_efficiency
        if len(eff) != len(self.gear_ratios):
            eff = (eff[-1],) * len(self.gear_ratios)
        return replace(template, m=self.m, p_max=self.p_max, tau_max=self.tau_max,
                       gear_ratios=self.gear_ratios, gear_efficiency=eff)

    def record(self) -> dict:
        d = asdict(self)
        d["kind"] = "backward"
        return d


@dataclass(frozen=True)
class ForwardMessage:
    """Plan of truck ``sender`` on its stage grid t0 + i*dt, i = 0..N-1."""

    sender: int
    cycle: int
    t0: float
    dt: float
    S_r: np.ndarray
    U_r: np.ndarray
    length: float
    a_t: float = 0.0

    def __post_init__(self):
        S = np.asarray(self.S_r, dtype=float)
        U = np.asarray(self.U_r, dtype=float)
        if S.shape != U.shape or S.ndim != 1 or S.size < 2:
            raise ValueError("S_r and U_r must be equal-length vectors")
        if np.any(np.diff(S) < 0):
            raise ValueError("S_r must be non-decreasing")
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(U))):
            raise ValueError("plan must be finite")
        S.flags.writeable = False
        U.flags.writeable = False
        object.__setattr__(self, "S_r", S)
        object.__setattr__(self, "U_r", U)

    def positions_at(self, times) -> np.ndarray:
        """Planned positions at ``times``; linear between stages, last-segment slope beyond."""
        times = np.asarray(times, dtype=float)
        grid = self.t0 + self.dt * np.arange(self.S_r.size)
        out = np.interp(times, grid, self.S_r)
        slope = (self.S_r[-1] - self.S_r[-2]) / self.dt
        late = times > grid[-1]
        out[late] = self.S_r[-1] + slope * (times[late] - grid[-1])
        early = times < grid[0]
        slope0 = (self.S_r[1] - self.S_r[0]) / self.dt
        out[early] = self.S_r[0] + slope0 * (times[early] - grid[0])
        return out

    def controls_at(self, times) -> np.ndarray:
        """Suggested controls at ``times`` (zero-order hold on the sender grid)."""
        idx = np.floor((np.asarray(times, dtype=float) - self.t0) / self.dt + 1e-9).astype(int)
        return self.U_r[np.clip(idx, 0, self.U_r.size - 1)]

    def record(self) -> dict:
        return {"kind": "forward", "sender": self.sender, "cycle": self.cycle, "t0": self.t0,
                "dt": self.dt, "S_r": self.S_r.tolist(), "U_r": self.U_r.tolist(),
                "length": self.length, "a_t": self.a_t}


@dataclass
class Inbox:
    """Latest messages a truck holds at the start of a cycle."""

    forward: Optional[ForwardMessage] = None
    backward: Optional[BackwardMessage] = None
    forward_age: int = 0
    backward_age: int = 0


class MessageBus:
    """Delivers messages sent at cycle c at cycle c + 1.

    Each message is dropped independently with probability ``drop_prob``
    (seeded).  A truck keeps its last delivered message of each direction;
    its age counts cycles since it was sent and it is discarded once older
    than ``stale_limit``.
    """

    def __init__(self, n_trucks: int, drop_prob: float = 0.0, seed: int = 0,
                 stale_limit: int = STALE_LIMIT, log_path=None):
        if not 0.0 <= drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        self.n = n_trucks
        self.drop_prob = drop_prob
        self.stale_limit = stale_limit
        self.rng = np.random.default_rng(seed)
        self.inboxes = [Inbox() for _ in range(n_trucks)]
        self.sent = 0
        self.delivered = 0
        self._log = open(log_path, "w", encoding="utf-8") if log_path else None

    def close(self):
        if self._log:
            self._log.close()
            self._log = None

    def exchange(self, messages, cycle: int) -> list[Inbox]:
        """Route messages sent at ``cycle``; returns the inboxes valid at ``cycle + 1``."""
        fresh_f: dict[int, ForwardMessage] = {}
        fresh_b: dict[int, BackwardMessage] = {}
        ordered = sorted((m for m in messages if m is not None),
                         key=lambda m: (m.sender, isinstance(m, BackwardMessage)))
        for msg in ordered:
            if msg.cycle != cycle:
                raise ValueError("message stamped with a different cycle")
            if isinstance(msg, ForwardMessage):
                dest = msg.sender + 1
            else:
                dest = msg.sender - 1
            if not 0 <= dest < self.n:
                continue
            self.sent += 1
            if self.drop_prob > 0.0 and self.rng.random() < self.drop_prob:
                continue
            self.delivered += 1
            if self._log:
                rec = msg.record()
                rec.update(to=dest, delivered_cycle=cycle + 1)
                self._log.write(json.dumps(rec, default=_jsonable) + "\n")
            if isinstance(msg, ForwardMessage):
                fresh_f[dest] = msg
            else:
                fresh_b[dest] = msg
        for k, box in enumerate(self.inboxes):
            if k in fresh_f:
                box.forward = fresh_f[k]
            if k in fresh_b:
                box.backward = fresh_b[k]
            box.forward_age = cycle + 1 - box.forward.cycle if box.forward else 0
            box.backward_age = cycle + 1 - box.backward.cycle if box.backward else 0
            if box.forward and box.forward_age > self.stale_limit:
                box.forward = None
            if box.backward and box.backward_age > self.stale_limit:
                box.backward = None
        return [replace(b) for b in self.inboxes]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def exchange(bus: MessageBus, messages, cycle: int) -> list[Inbox]:
    return bus.exchange(messages, cycle)


# ---------------------------------------------------------------- CACC

@dataclass(frozen=True)
class CaccGains:
    k_p: float = 0.2
    k_v: float = 0.7
    k_ff: float = 1.0
    headway: float = 0.72

    def __post_init__(self):
        if min(self.k_p, self.k_v, self.k_ff) < 0 or self.headway <= 0:
            raise ValueError("gains must be non-negative and headway positive")


def cacc_law(gap: float, v_ego: float, v_lead: float, a_lead: float, gains: CaccGains,
             bounds: Optional[tuple[float, float]] = None) -> float:
    """Constant-time-headway PD law with leader acceleration feedforward."""
    u = gains.k_p * (gap - gains.headway * v_ego) + gains.k_v * (v_lead - v_ego) + gains.k_ff * a_lead
    if bounds is not None:
        u = min(max(u, bounds[0]), bounds[1])
    return float(u)


# ---------------------------------------------------------------- MPC controller

@dataclass
class ControlOutput:
    u: float
    outbox: Optional[ForwardMessage]
    solution: Optional[OcpSolution] = None
    problem_kind: str = ""
    flags: set = field(default_factory=set)
    warm: bool = False

    @property
    def kkt(self) -> float:
        return self.solution.report.kkt_residual if self.solution else float("nan")

    @property
    def iterations(self) -> int:
        return self.solution.report.iterations if self.solution else 0

    @property
    def solve_time(self) -> float:
        return self.solution.report.wall_time if self.solution else 0.0

    @property
    def slacks(self) -> tuple[float, float]:
        if self.solution is None:
            return (0.0, 0.0)
        return float(self.solution.slacks[0, 0]), float(self.solution.slacks[0, 1])


@dataclass
class ControllerMemory:
    """Per-truck state carried between cycles."""

    prev: Optional[OcpSolution] = None
    failures: int = 0


def _fallback_control(mem: ControllerMemory, ego: EgoContext) -> float:
    lo, hi = admissible_control_set(ego.state.v, ego.state.gear, ego.params)
    if mem.prev is None:
        return 0.0
    lag = ego.t_now - mem.prev.t0
    i = int(np.clip(np.floor(lag / mem.prev.dt + 1e-9) + 1, 0, mem.prev.controls.shape[1] - 1))
    return float(np.clip(mem.prev.controls[0, i], lo, hi))


def _plan_message(sender: int, cycle: int, ego: EgoContext, sol: OcpSolution, own: bool) -> ForwardMessage:
    S = np.maximum.accumulate(sol.planned_positions)
    U = sol.controls[0] if own else sol.follower_controls
    return ForwardMessage(sender, cycle, sol.t0, sol.dt, S, U.copy(), ego.params.L, ego.state.a_t)


def controller_step(kind: ControllerKind, ego: EgoContext, follower: Optional[FollowerContext],
                    cfg: OcpConfig, memory: Optional[ControllerMemory] = None,
                    sender: int = 0, cycle: int = 0, opts: Optional[SolveOptions] = None,
                    cacc: Optional[tuple[float, float, float, CaccGains]] = None) -> ControlOutput:
    """One control cycle for one truck.

    ``ego`` already carries the predecessor's plan when the truck follows.
    ``follower`` is given when this truck plans for the truck behind it.
    For CACC followers ``cacc`` is (gap, v_lead, a_lead, gains).
    """
    memory = memory if memory is not None else ControllerMemory()
    kind = ControllerKind(kind)
    flags: set[str] = set()
    lo, hi = admissible_control_set(ego.state.v, ego.state.gear, ego.params)

    if kind is ControllerKind.CACC and ego.role != "leader":
        if cacc is None:
            raise ValueError("a CACC follower needs gap and leader measurements")
        gap, v_lead, a_lead, gains = cacc
        u = cacc_law(gap, ego.state.v, v_lead, a_lead, gains, (lo, hi))
        trail = ego.state.s + ego.state.v * cfg.dt * np.arange(cfg.n_stages)
        msg = ForwardMessage(sender, cycle, ego.t_now, cfg.dt, trail, np.zeros(cfg.n_stages),
                             ego.params.L, ego.state.a_t)
        return ControlOutput(u, msg, None, "cacc", flags)

    if kind is ControllerKind.CONSIDERATE and follower is not None and ego.role != "last":
        problem = build_considerate(ego, follower, cfg)
    else:
        compliance = kind is ControllerKind.CONSIDERATE
        problem = build_solo(ego, cfg, compliance_on=compliance)
    flags |= problem.flags
    if problem.kind == "anticipative" and kind is ControllerKind.CONSIDERATE and ego.role != "leader":
        flags.add("no_suggestion")

    warm = memory.prev is not None and memory.prev.controls.shape[0] == problem.layout.n_trucks
    guess = warm_start(memory.prev, problem) if warm else problem.cold_start()
    sol = problem.solve(guess, opts)
    if sol.converged:
        memory.failures = 0
        u = float(np.clip(sol.first_control, lo, hi))
        memory.prev = sol
    else:
        memory.failures += 1
        flags.add("solver_failure")
        if memory.failures >= 2:
            u = 0.0
            flags.add("disengage")
        else:
            u = _fallback_control(memory, ego)
        memory.prev = None

    outbox = None
    if ego.role != "last" and sol.converged:
        own = problem.kind != "considerate"
        outbox = _plan_message(sender, cycle, ego, sol, own)
    return ControlOutput(u, outbox, sol, problem.kind, flags, warm)
