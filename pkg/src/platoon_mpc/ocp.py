"""Optimal control problems for one truck or an ego/follower pair.

Every problem is transcribed by direct multiple shooting.  The decision
vector is laid out stage-major so the equality Jacobian restricted to the
state variables is unit lower-triangular:

    [ z_0, z_1, ..., z_N | w_0, ..., w_{N-1} | eps_1^(0), eps_2^(0), ... ]

where z_i stacks [s, v, a_t] of every truck in the problem (ego first) and
w_i stacks their commanded accelerations.  Positions inside the NLP are
measured from the ego's current position (``OcpProblem.s_ref``) to keep the
numbers small; ``OcpProblem.unpack`` returns absolute positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import _kernels
from .nlp import NlpEval, NlpSpec, SolveOptions, SolveReport, solve
from .powertrain import (DragReductionModel, TruckParams, TruckState, V_EPS,
                         default_drag_model, max_wheel_force)
from .road import LegendrePreview, eval_preview

ROLES = ("leader", "mid", "last")


@dataclass(frozen=True)
class OcpConfig:
    n_stages: int = 22
    n_nodes: int = 10
    dt: float = 0.5
    q_t: float = 1.0
    q_u: float = 2.0
    q_v: float = 1.0
    q_d: float = 0.5
    q_c: float = 0.5
    q_eps: float = 1e4
    headway: float = 0.72
    v_max: float = 30.0
    d_min: float = 10.0
    v_ref: float = 25.0
    # trip end; None disables the pace term (a scenario fills these in)
    s_f: Optional[float] = None
    t_f: Optional[float] = None
    # proximal weight on slack variables inside the QP (does not change the optimum)
    slack_prox: float = 1.0

    def __post_init__(self):
        if self.n_stages < 2 or self.n_nodes < 1:
            raise ValueError("need n_stages >= 2 and n_nodes >= 1")
        if self.dt <= 0 or self.headway <= 0:
            raise ValueError("dt and headway must be positive")
        if self.d_min < 0:
            raise ValueError("d_min must be non-negative")
        for name in ("q_t", "q_u", "q_v", "q_d", "q_c", "q_eps", "slack_prox"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be non-negative")


@dataclass
class EgoContext:
    """What truck k knows when it builds its problem.

    ``leader_plan`` holds the predecessor's predicted positions at this
    truck's stage times t_now + i*dt (i = 0..N-1); ``suggested_controls``
    the predecessor's suggestion for this truck at the same stages.
    """

    role: str
    state: TruckState
    params: TruckParams
    preview: LegendrePreview
    t_now: float = 0.0
    leader_plan: Optional[np.ndarray] = None
    suggested_controls: Optional[np.ndarray] = None
    leader_length: float = 0.0
    drag: DragReductionModel = field(default_factory=default_drag_model)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.role == "leader" and (self.leader_plan is not None or self.suggested_controls is not None):
            raise ValueError("a leader has no predecessor plan or suggestion")
        if self.leader_plan is not None:
            self.leader_plan = np.asarray(self.leader_plan, dtype=float)
        if self.suggested_controls is not None:
            self.suggested_controls = np.asarray(self.suggested_controls, dtype=float)

    def check_lengths(self, n: int):
        for name in ("leader_plan", "suggested_controls"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got {arr.shape}")


@dataclass
class FollowerContext:
    """Truck k+1 as reported upstream; ``age`` counts control cycles since it was measured."""

    state: TruckState
    params: TruckParams
    preview: LegendrePreview
    age: int = 0


@dataclass(frozen=True)
class VarLayout:
    n_trucks: int
    n_stages: int

    @property
    def nz(self) -> int:
        return 3 * self.n_trucks

    @property
    def n_states(self) -> int:
        return self.nz * (self.n_stages + 1)

    @property
    def n_controls(self) -> int:
        return self.n_trucks * self.n_stages

    @property
    def n_vars(self) -> int:
        return self.n_states + self.n_controls + 2 * self.n_trucks

    def state(self, truck: int, stage, comp: int) -> np.ndarray | int:
        return np.asarray(stage) * self.nz + 3 * truck + comp

    def control(self, truck: int, stage) -> np.ndarray | int:
        return self.n_states + np.asarray(stage) * self.n_trucks + truck

    def slack(self, truck: int, which: int) -> int:
        return self.n_states + self.n_controls + 2 * truck + which

    def slices(self) -> dict[str, np.ndarray]:
        """Named index sets; disjoint and covering 0..n_vars-1."""
        out = {}
        st = np.arange(self.n_stages + 1)
        for j in range(self.n_trucks):
            for c, name in enumerate(("s", "v", "a_t")):
                out[f"{name}[{j}]"] = self.state(j, st, c)
            out[f"u[{j}]"] = self.control(j, np.arange(self.n_stages))
            out[f"eps1[{j}]"] = np.array([self.slack(j, 0)])
            out[f"eps2[{j}]"] = np.array([self.slack(j, 1)])
        return out


# ---------------------------------------------------------------- cost pieces

def stage_cost(u: float, v: float, d: Optional[float], cfg: OcpConfig, role: str,
               mu: Optional[float] = None, nu: Optional[float] = None) -> float:
    """Running cost of one stage.  Leaders track speed, followers track headway."""
    nu = cfg.v_ref if nu is None else nu
    cost = cfg.q_u * u * u
    if role == "leader":
        return cost + cfg.q_v * (v - nu) ** 2
    if d is None:
        raise ValueError("a follower stage needs a gap")
    cost += cfg.q_d * (d - cfg.headway * v) ** 2
    if mu is not None:
        cost += cfg.q_c * (u - mu) ** 2
    return cost


def pace_active(s_N: float, t_N: float, cfg: OcpConfig) -> bool:
    """True while the trip end is still ahead and reachable on schedule below v_max."""
    if cfg.s_f is None or cfg.t_f is None or t_N >= cfg.t_f or s_N >= cfg.s_f:
        return False
    return (cfg.s_f - s_N) / (cfg.t_f - t_N) <= cfg.v_max


def terminal_cost(s_N: float, v_N: float, t_N: float, cfg: OcpConfig) -> float:
    """Penalty on the gap between v_N and the average pace still needed to make s_f by t_f.

    Falls back to v_ref tracking once the schedule is over or out of reach.
    """
    if not pace_active(s_N, t_N, cfg):
        return cfg.q_t * (v_N - cfg.v_ref) ** 2
    return cfg.q_t * ((cfg.s_f - s_N) / (cfg.t_f - t_N) - v_N) ** 2


def path_constraints(v: float, d: Optional[float], eps1: float, eps2: float, cfg: OcpConfig) -> np.ndarray:
    """Residuals that must be >= 0: speed floor, speed ceiling, minimum gap."""
    res = [v + eps1, cfg.v_max - v + eps1]
    if d is not None:
        res.append(d + eps2 - cfg.d_min)
    return np.array(res)


# ---------------------------------------------------------------- problem

@dataclass
class _Truck:
    params: TruckParams
    gear: int
    x0: np.ndarray          # [s - s_ref, v, a_t]
    preview: np.ndarray     # shifted preview vector
    tracks_speed: bool
    lead: Optional[str]     # None | "ext" | "ego"
    mu: Optional[np.ndarray]

    @property
    def u_bounds(self) -> tuple[float, float]:
        return -self.params.brake_decel, max_wheel_force(self.gear, self.params) / self.params.m


@dataclass
class OcpSolution:
    kind: str
    t0: float
    dt: float
    positions: np.ndarray       # (trucks, N+1) absolute
    velocities: np.ndarray
    accels: np.ndarray
    controls: np.ndarray        # (trucks, N)
    slacks: np.ndarray          # (trucks, 2)
    objective: float
    report: SolveReport
    x: np.ndarray

    @property
    def converged(self) -> bool:
        return self.report.converged

    @property
    def first_control(self) -> float:
        return float(self.controls[0, 0])

    @property
    def planned_positions(self) -> np.ndarray:
        """Ego positions at stages 0..N-1, the plan broadcast downstream."""
        return self.positions[0, :-1].copy()

    @property
    def follower_controls(self) -> np.ndarray:
        """Suggested controls for the follower: the joint follower block, else the ego's own plan."""
        return self.controls[1 if self.controls.shape[0] > 1 else 0].copy()


@lru_cache(maxsize=16)
def _dynamics_template(n_trucks: int, N: int):
    """Identity part of the defect Jacobian and scatter indices for -A, -B."""
    lay = VarLayout(n_trucks, N)
    nz, nw = lay.nz, n_trucks
    Jc = np.zeros((lay.n_states, lay.n_vars))
    Jc[np.arange(lay.n_states), np.arange(lay.n_states)] = 1.0
    Jc.flags.writeable = False
    i, q, r = np.meshgrid(np.arange(N), np.arange(nz), np.arange(nz), indexing="ij")
    a_rows, a_cols = ((i + 1) * nz + q).ravel(), (i * nz + r).ravel()
    i, q, r = np.meshgrid(np.arange(N), np.arange(nz), np.arange(nw), indexing="ij")
    b_rows, b_cols = ((i + 1) * nz + q).ravel(), (lay.n_states + i * nw + r).ravel()
    return Jc, a_rows, a_cols, b_rows, b_cols


class _Rows:
    """Dense affine map x -> M x + m0 filled block by block."""

    def __init__(self, max_rows: int, n_cols: int):
        self.M = np.zeros((max_rows, n_cols))
        self.m0 = np.zeros(max_rows)
        self.n_rows = 0

    def block(self, n_stage: int, per_stage: int) -> "_Block":
        blk = _Block(self, self.n_rows, n_stage, per_stage)
        self.n_rows += n_stage * per_stage
        return blk

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.M[:self.n_rows].copy(), self.m0[:self.n_rows].copy()


class _Block:
    def __init__(self, owner: _Rows, start: int, n_stage: int, per_stage: int):
        self.owner = owner
        self.rows = start + np.arange(n_stage) * per_stage

    def put(self, which: int, cols, val) -> None:
        # accumulate so two puts on one entry add up
        self.owner.M[self.rows + which, cols] += val

    def offset(self, which: int, val) -> None:
        self.owner.m0[self.rows + which] += val


class OcpProblem:
    """A transcribed problem: layout, bounds and evaluation closures."""

    def __init__(self, kind: str, cfg: OcpConfig, ego: EgoContext, trucks: list[_Truck],
                 lead_s: Optional[np.ndarray], s_ref: float, flags: set[str]):
        self.kind = kind
        self.cfg = cfg
        self.ego = ego
        self.trucks = trucks
        self.flags = flags
        self.s_ref = s_ref
        self.t0 = ego.t_now
        N = cfg.n_stages
        self.layout = lay = VarLayout(len(trucks), N)
        self.z0 = np.concatenate([t.x0 for t in trucks])

        self._prm = np.array([[t.params.m, t.params.effective_mass(t.gear), t.params.tau_d,
                               t.params.drag_coef, t.params.m * t.params.grav, t.params.C_r,
                               t.params.L] for t in trucks])
        dm = ego.drag
        self._drag = np.array([dm.a, dm.b, dm.c, dm.d_coef, dm.gap_max])
        self._pv = np.array([t.preview for t in trucks])
        self._L_ext = float(ego.leader_length)
        self._has_ext = lead_s is not None
        # leader positions at stage times (N+1) and on the half-substep grid
        self.lead_s = lead_s
        if lead_s is not None:
            tg = np.arange(N + 1) * cfg.dt
            fine = np.linspace(0.0, N * cfg.dt, 2 * N * cfg.n_nodes + 1)
            self._s_ext = np.interp(fine, tg, lead_s)
        else:
            self._s_ext = np.zeros(1)

        n = lay.n_vars
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for j, t in enumerate(trucks):
            ul, uh = t.u_bounds
            idx = lay.control(j, np.arange(N))
            lo[idx] = ul
            hi[idx] = uh
            lo[lay.slack(j, 0)] = 0.0
            lo[lay.slack(j, 1)] = 0.0
        linear = np.zeros(n)
        for j in range(len(trucks)):
            linear[lay.slack(j, 0)] = cfg.q_eps
            linear[lay.slack(j, 1)] = cfg.q_eps
        self._build_residuals()
        self._build_constraints()
        self._build_dynamics_template()
        prox = np.zeros(n)
        prox[lay.n_states + lay.n_controls:] = cfg.slack_prox
        self.nlp = NlpSpec(n, lay.n_states, self._G_lin.shape[0] + self._n_power, self._evaluate,
                           lo, hi, linear, dependent=np.arange(lay.n_states), damping=prox)

    # -- sizes
    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    @property
    def n_eq(self) -> int:
        return self.nlp.n_eq

    @property
    def n_ineq(self) -> int:
        return self.nlp.n_ineq

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nlp.lo, self.nlp.hi

    # -- linear residual map r = R x + r0
    def _build_residuals(self):
        cfg, lay, N = self.cfg, self.layout, self.cfg.n_stages
        su, sv, sd, sc, stt = (np.sqrt(w) for w in (cfg.q_u, cfg.q_v, cfg.q_d, cfg.q_c, cfg.q_t))
        t_N = self.t0 + N * cfg.dt
        # decided once per build from a constant-speed guess of the ego's s_N
        pace = pace_active(self.s_ref + self.z0[0] + self.z0[1] * N * cfg.dt, t_N, cfg)
        st = np.arange(N)
        mat = _Rows(len(self.trucks) * (3 * N + 1), lay.n_vars)
        for j, t in enumerate(self.trucks):
            comply = t.mu is not None and cfg.q_c > 0 and not t.tracks_speed
            # per stage: effort, tracking, [compliance]
            blk = mat.block(N, 3 if comply else 2)
            blk.put(0, lay.control(j, st), su)
            if t.tracks_speed:
                blk.put(1, lay.state(j, st, 1), sv)
                blk.offset(1, -sv * cfg.v_ref)
            else:
                blk.put(1, lay.state(j, st, 0), -sd)
                blk.put(1, lay.state(j, st, 1), -sd * cfg.headway)
                if t.lead == "ext":
                    blk.offset(1, sd * (self.lead_s[:N] - self._L_ext))
                else:
                    blk.put(1, lay.state(0, st, 0), sd)
                    blk.offset(1, -sd * self.trucks[0].params.L)
                if comply:
                    blk.put(2, lay.control(j, st), sc)
                    blk.offset(2, -sc * t.mu)
            end = mat.block(1, 1)
            if pace:
                dt_left = cfg.t_f - t_N
                end.put(0, lay.state(j, N, 0), -stt / dt_left)
                end.put(0, lay.state(j, N, 1), -stt)
                end.offset(0, stt * (cfg.s_f - self.s_ref) / dt_left)
            else:
                end.put(0, lay.state(j, N, 1), stt)
                end.offset(0, -stt * cfg.v_ref)
        self._R, self._r0 = mat.dense()

    def _build_constraints(self):
        cfg, lay, N = self.cfg, self.layout, self.cfg.n_stages
        st = np.arange(1, N + 1)
        mat = _Rows(len(self.trucks) * 3 * N, lay.n_vars)
        for j, t in enumerate(self.trucks):
            e1, e2 = lay.slack(j, 0), lay.slack(j, 1)
            # per stage: speed floor, speed ceiling, [minimum gap]
            blk = mat.block(N, 2 if t.lead is None else 3)
            vi = lay.state(j, st, 1)
            blk.put(0, vi, 1.0)
            blk.put(0, e1, 1.0)
            blk.put(1, vi, -1.0)
            blk.put(1, e1, 1.0)
            blk.offset(1, cfg.v_max)
            if t.lead is not None:
                blk.put(2, lay.state(j, st, 0), -1.0)
                blk.put(2, e2, 1.0)
                if t.lead == "ext":
                    blk.offset(2, self.lead_s[1:] - self._L_ext - cfg.d_min)
                else:
                    blk.put(2, lay.state(0, st, 0), 1.0)
                    blk.offset(2, -self.trucks[0].params.L - cfg.d_min)
        self._G_lin, self._g0 = mat.dense()
        # power rows 1 - m u v / P >= 0 at stages 0..N-1
        st = np.arange(N)
        self._pw_u = np.concatenate([lay.control(j, st) for j in range(len(self.trucks))])
        self._pw_v = np.concatenate([lay.state(j, st, 1) for j in range(len(self.trucks))])
        self._pw_k = np.concatenate([np.full(N, t.params.m / t.params.p_max) for t in self.trucks])
        self._n_power = self._pw_u.size

    def _build_dynamics_template(self):
        (self._Jc0, self._A_rows, self._A_cols,
         self._B_rows, self._B_cols) = _dynamics_template(self.layout.n_trucks, self.cfg.n_stages)

    # -- evaluation
    def _split(self, x):
        lay, N = self.layout, self.cfg.n_stages
        Z = x[:lay.n_states].reshape(N + 1, lay.nz)
        W = x[lay.n_states:lay.n_states + lay.n_controls].reshape(N, lay.n_trucks)
        return Z, W

    def _shoot(self, Z, W, sens):
        return _kernels.shoot(Z, W, self.cfg.dt, self.cfg.n_nodes, self._prm, self._drag, self._pv,
                              self._has_ext, self._s_ext, self._L_ext, sens)

    def _evaluate(self, x, jac=True) -> NlpEval:
        Z, W = self._split(x)
        Phi, A, B = self._shoot(np.ascontiguousarray(Z), np.ascontiguousarray(W), jac)
        c = np.concatenate([Z[0] - self.z0, (Z[1:] - Phi).ravel()])
        r = self._R @ x + self._r0
        u, v, k = x[self._pw_u], x[self._pw_v], self._pw_k
        g = np.concatenate([self._G_lin @ x + self._g0, 1.0 - k * u * v])
        ev = NlpEval(r, c, g)
        if jac:
            Jc = self._Jc0.copy()
            Jc[self._A_rows, self._A_cols] = -A.ravel()
            Jc[self._B_rows, self._B_cols] = -B.ravel()
            Gp = np.zeros((self._n_power, self.layout.n_vars))
            rr = np.arange(self._n_power)
            Gp[rr, self._pw_u] = -k * v
            Gp[rr, self._pw_v] = -k * u
            ev.Jr, ev.Jc, ev.G = self._R, Jc, np.vstack([self._G_lin, Gp])
        return ev

    def objective(self, x) -> float:
        return self.nlp.objective(x, self._evaluate(x, False))

    def eq_constraints(self, x) -> np.ndarray:
        return self._evaluate(x, False).c

    def ineq_constraints(self, x) -> np.ndarray:
        return self._evaluate(x, False).g

    # -- helpers
    def rollout(self, W) -> np.ndarray:
        W = np.ascontiguousarray(np.asarray(W, dtype=float).reshape(self.cfg.n_stages, self.layout.n_trucks))
        return _kernels.rollout(self.z0, W, self.cfg.dt, self.cfg.n_nodes, self._prm, self._drag,
                                self._pv, self._has_ext, self._s_ext, self._L_ext)

    def pack(self, Z, W, eps=None) -> np.ndarray:
        x = np.zeros(self.n_vars)
        lay = self.layout
        x[:lay.n_states] = np.asarray(Z).ravel()
        x[lay.n_states:lay.n_states + lay.n_controls] = np.asarray(W).ravel()
        if eps is not None:
            x[lay.n_states + lay.n_controls:] = np.asarray(eps).ravel()
        return x

    def equilibrium_controls(self) -> np.ndarray:
        """Per-truck acceleration that holds the current speed on the previewed grade."""
        out = np.zeros(self.layout.n_trucks)
        for j, t in enumerate(self.trucks):
            p = t.params
            v = t.x0[1]
            s_abs = t.x0[0] + self.s_ref
            alpha = float(eval_preview(LegendrePreview(tuple(t.preview[:4]), t.preview[4] + self.s_ref,
                                                       t.preview[5]), s_abs))
            beta = 1.0
            if t.lead is not None:
                lead = self.lead_s[0] - self._L_ext if t.lead == "ext" else self.z0[0] - self.trucks[0].params.L
                d = lead - t.x0[0]
                if 0.0 <= d <= self.ego.drag.gap_max:
                    beta = min(float(self.ego.drag.raw(d)), 1.0)
            force = beta * p.drag_coef * v * v + p.m * p.grav * (p.C_r * np.cos(alpha) + np.sin(alpha))
            lo, hi = t.u_bounds
            hi = min(hi, p.p_max / (p.m * max(v, V_EPS)))
            out[j] = float(np.clip(force / p.m, lo, hi))
        return out

    def cold_start(self) -> np.ndarray:
        W = np.tile(self.equilibrium_controls(), (self.cfg.n_stages, 1))
        return self.pack(self.rollout(W), W)

    def unpack(self, x) -> dict[str, np.ndarray]:
        Z, W = self._split(np.asarray(x))
        ntr = self.layout.n_trucks
        S = Z[:, 0::3].T + self.s_ref
        eps = np.asarray(x[self.layout.n_states + self.layout.n_controls:]).reshape(ntr, 2)
        return {"s": S, "v": Z[:, 1::3].T.copy(), "a_t": Z[:, 2::3].T.copy(), "u": W.T.copy(), "eps": eps}

    def gaps(self, x) -> np.ndarray:
        """Gap of every truck with a predecessor at stages 0..N (NaN where none)."""
        parts = self.unpack(x)
        out = np.full(parts["s"].shape, np.nan)
        for j, t in enumerate(self.trucks):
            if t.lead == "ext":
                out[j] = self.lead_s + self.s_ref - self._L_ext - parts["s"][j]
            elif t.lead == "ego":
                out[j] = parts["s"][0] - self.trucks[0].params.L - parts["s"][j]
        return out

    def solve(self, x0=None, opts: Optional[SolveOptions] = None) -> OcpSolution:
        x0 = self.cold_start() if x0 is None else x0
        rep = solve(self.nlp, x0, opts)
        parts = self.unpack(rep.x_opt)
        return OcpSolution(self.kind, self.t0, self.cfg.dt, parts["s"], parts["v"], parts["a_t"],
                           parts["u"], parts["eps"], rep.objective, rep, rep.x_opt)


# ---------------------------------------------------------------- builders

def _preview_vector(pv: LegendrePreview, s_ref: float) -> np.ndarray:
    vec = pv.as_vector()
    vec[4] -= s_ref
    return vec


def _extend_plan(plan: np.ndarray) -> np.ndarray:
    """Append stage N by linear extrapolation of the last segment."""
    return np.append(plan, 2.0 * plan[-1] - plan[-2])


def _ego_truck(ego: EgoContext, cfg: OcpConfig, compliance: bool, s_ref: float) -> tuple[_Truck, Optional[np.ndarray]]:
    N = cfg.n_stages
    ego.check_lengths(N)
    x0 = np.array([ego.state.s - s_ref, ego.state.v, ego.state.a_t])
    pv = _preview_vector(ego.preview, s_ref)
    if ego.role == "leader":
        return _Truck(ego.params, ego.state.gear, x0, pv, True, None, None), None
    if ego.leader_plan is None:
        raise ValueError("a following truck needs its predecessor's plan to form the gap")
    mu = ego.suggested_controls if (compliance and cfg.q_c > 0) else None
    lead_s = _extend_plan(ego.leader_plan) - s_ref
    return _Truck(ego.params, ego.state.gear, x0, pv, False, "ext", mu), lead_s


def build_solo(ego: EgoContext, cfg: OcpConfig, compliance_on: bool = True) -> OcpProblem:
    """Single-truck problem; ``compliance_on=False`` gives the anticipative variant."""
    s_ref = ego.state.s
    truck, lead_s = _ego_truck(ego, cfg, compliance_on, s_ref)
    kind = "solo" if compliance_on and cfg.q_c > 0 and truck.mu is not None else "anticipative"
    return OcpProblem(kind, cfg, ego, [truck], lead_s, s_ref, set())


def build_considerate(ego: EgoContext, follower: FollowerContext, cfg: OcpConfig,
                      max_age: int = 1) -> OcpProblem:
    """Joint ego + follower problem; the follower drafts behind the ego's decision trajectory."""
    if ego.role == "last":
        raise ValueError("the last truck has no follower to plan for")
    if follower.age > max_age:
        prob = build_solo(ego, cfg, compliance_on=False)
        prob.flags.add("stale_follower")
        return prob
    s_ref = ego.state.s
    truck, lead_s = _ego_truck(ego, cfg, True, s_ref)
    fx = np.array([follower.state.s - s_ref, follower.state.v, follower.state.a_t])
    fol = _Truck(follower.params, follower.state.gear, fx, _preview_vector(follower.preview, s_ref),
                 False, "ego", None)
    return OcpProblem("considerate", cfg, ego, [truck, fol], lead_s, s_ref, set())


def warm_start(prev: Optional[OcpSolution], problem: OcpProblem) -> np.ndarray:
    """Receding-horizon initial guess for ``problem`` from the previous solution.

    Controls are shifted by the elapsed time (one stage when a full stage has
    passed), the last stage is repeated, and the states are re-simulated from
    the current measurement so every defect starts at zero.  Without a usable
    previous solution the guess is an equilibrium rollout.
    """
    N = problem.cfg.n_stages
    if prev is None or prev.controls.shape != (problem.layout.n_trucks, N):
        return problem.cold_start()
    lag = problem.t0 - prev.t0
    idx = np.floor((np.arange(N) * prev.dt + lag) / prev.dt + 1e-9).astype(int)
    idx = np.clip(idx, 0, N - 1)
    W = prev.controls[:, idx].T.copy()
    lo, hi = problem.bounds
    cols = problem.layout.control(np.arange(problem.layout.n_trucks)[None, :], np.arange(N)[:, None])
    W = np.clip(W, lo[cols], hi[cols])
    x = problem.pack(problem.rollout(W), W, prev.slacks)
    return x


def shift_controls(prev_controls: np.ndarray) -> np.ndarray:
    """One-stage shift with the last stage repeated."""
    arr = np.asarray(prev_controls)
    return np.concatenate([arr[..., 1:], arr[..., -1:]], axis=-1)
