"""Longitudinal truck model: drag, rolling resistance, gearbox, engine limits, fuel.

All forces are in N, speeds in m/s, positions in m and grades in rad.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from . import _kernels

# Power-bound guard near standstill.
V_EPS = 0.1
# Drafting envelope edge; beyond it the follower sees undisturbed air.
GAP_MAX = 110.0

# Gap/beta pairs read off the test-track drag-reduction measurements.
DRAG_DATA = (
    (15.0, 0.90497),
    (20.0, 0.91298),
    (30.0, 0.92834),
    (40.0, 0.93729),
    (50.0, 0.94624),
    (60.0, 0.95519),
    (70.0, 0.96415),
    (80.0, 0.97310),
    (100.0, 0.99100),
)

# Multi-start seeds for the two-exponential fit, first one is the nominal seed.
_FIT_SEEDS = (
    (0.85, 1e-4, 0.04, 0.02),
    (0.85, 1e-3, -0.04, -0.05),
    (1.0, 1e-3, -0.1, -0.05),
)


class FitError(RuntimeError):
    """Raised when the drag-reduction fit does not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual RMSE {residual:.3g})")
        self.residual = residual


@dataclass(frozen=True)
class FuelParams:
    willans_eff: float = 0.40
    lhv: float = 42.5e6
    p_idle: float = 5.0e3

    def __post_init__(self):
        if not 0.0 < self.willans_eff < 0.6:
            raise ValueError("willans_eff must lie in (0, 0.6)")
        if self.lhv <= 0 or self.p_idle < 0:
            raise ValueError("lhv must be positive and p_idle non-negative")


@dataclass(frozen=True)
class DragReductionModel:
    """beta(d) = a*exp(b*d) + c*exp(d_coef*d) on [0, gap_max], 1 beyond."""

    a: float
    b: float
    c: float
    d_coef: float
    gap_max: float = GAP_MAX
    rmse: float = 0.0

    def raw(self, d):
        return self.a * np.exp(self.b * d) + self.c * np.exp(self.d_coef * d)

    @property
    def coefs(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d_coef)


@dataclass(frozen=True)
class TruckParams:
    m: float = 38000.0
    L: float = 22.0
    r_w: float = 0.5
    A_f: float = 10.0
    C_D: float = 0.6
    C_r: float = 0.007
    i_f: float = 2.64
    gear_ratios: tuple[float, ...] = (11.0, 8.1, 6.0, 4.4, 3.3, 2.5, 1.9, 1.53, 1.23, 1.0)
    gear_efficiency: tuple[float, ...] = (0.96,) * 10
    tau_max: float = 2500.0
    p_max: float = 300.0e3
    tau_d: float = 0.5
    e0: float = 0.04
    e1: float = 0.0025
    fuel: FuelParams = field(default_factory=FuelParams)
    rho: float = 1.2
    grav: float = 9.81
    brake_decel: float = 2.0
    # shift map: engine speed window and hysteresis on the upshift side
    omega_low: float = 100.0
    omega_high: float = 220.0
    shift_hysteresis: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "gear_ratios", tuple(float(r) for r in self.gear_ratios))
        object.__setattr__(self, "gear_efficiency", tuple(float(e) for e in self.gear_efficiency))
        if min(self.m, self.r_w, self.tau_d, self.p_max, self.tau_max) <= 0:
            raise ValueError("m, r_w, tau_d, p_max and tau_max must be positive")
        ratios = np.asarray(self.gear_ratios)
        if ratios.size == 0 or np.any(ratios <= 0) or np.any(np.diff(ratios) >= 0):
            raise ValueError("gear_ratios must be positive and strictly decreasing")
        if len(self.gear_efficiency) != ratios.size:
            raise ValueError("one efficiency per gear required")
        if any(not 0.0 < e <= 1.0 for e in self.gear_efficiency):
            raise ValueError("gear efficiencies must lie in (0, 1]")
        if self.e0 < 0 or self.e1 < 0:
            raise ValueError("rotational-mass coefficients must be non-negative")

    @property
    def n_gears(self) -> int:
        return len(self.gear_ratios)

    @property
    def top_gear(self) -> int:
        return self.n_gears - 1

    @property
    def drag_coef(self) -> float:
        """0.5*rho*A_f*C_D, the undisturbed quadratic drag coefficient (kg/m)."""
        return 0.5 * self.rho * self.A_f * self.C_D

    def effective_mass(self, gear: int) -> float:
        r = self.gear_ratios[_check_gear(gear, self)]
        return self.m * (1.0 + self.e0 + self.e1 * r * r)

    def with_mass(self, m: float) -> "TruckParams":
        return replace(self, m=float(m))


@dataclass
class TruckState:
    s: float
    v: float
    a_t: float = 0.0
    gear: int = 0
    fuel_used: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v, self.a_t])


@dataclass(frozen=True)
class ExogenousInput:
    """Disturbances acting on one truck during a step.

    ``grade_fit`` maps position to grade, either a callable or any object with
    ``breakpoints`` (a GradeProfile). ``leader_gap`` is the gap at the start
    of the step; with ``leader_speed`` set the leader is advanced at constant
    speed inside the step.
    """

    grade_fit: object = None
    leader_gap: Optional[float] = None
    leader_length: float = 0.0
    leader_speed: Optional[float] = None

    def __post_init__(self):
        if self.leader_gap is not None and self.leader_gap < 0:
            raise ValueError("leader_gap must be non-negative")

    def grade_at(self, s: float) -> float:
        if self.grade_fit is None:
            return 0.0
        if callable(self.grade_fit):
            return float(self.grade_fit(s))
        return float(self.grade_fit.grade(s))


def _check_gear(gear: int, p: TruckParams) -> int:
    if not 0 <= gear < p.n_gears:
        raise IndexError(f"gear {gear} outside 0..{p.n_gears - 1}")
    return int(gear)


# ---------------------------------------------------------------- drag

def drag_reduction(d: float, model: DragReductionModel) -> float:
    if d < 0:
        raise ValueError(f"gap must be non-negative, got {d}")
    if d > model.gap_max:
        return 1.0
    return min(float(model.raw(d)), 1.0)


def fit_drag_reduction(data: Sequence[tuple[float, float]] = DRAG_DATA,
                       rmse_tol: float = 5e-3) -> DragReductionModel:
    """Least-squares fit of the two-exponential drag-reduction curve.

    Levenberg-Marquardt from several seeds; the lowest-residual fit wins.
    """
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 4:
        raise ValueError("need at least 4 (gap, factor) points for 4 coefficients")
    gaps, beta = arr[:, 0], arr[:, 1]
    if np.unique(gaps).size != gaps.size:
        raise ValueError("gaps must be distinct")

    def resid(p):
        return p[0] * np.exp(p[1] * gaps) + p[2] * np.exp(p[3] * gaps) - beta

    best = None
    for seed in _FIT_SEEDS:
        try:
            res = least_squares(resid, seed, method="lm", xtol=1e-15, ftol=1e-15,
                                gtol=1e-15, max_nfev=20000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        rmse = float(np.sqrt(np.mean(res.fun ** 2)))
        if best is None or rmse < best[1]:
            best = (res.x, rmse)
    if best is None:
        raise FitError("drag-reduction fit failed from every seed", float("nan"))
    x, rmse = best
    if rmse > rmse_tol:
        raise FitError("drag-reduction fit did not reach tolerance", rmse)
    return DragReductionModel(*map(float, x), rmse=rmse)


@lru_cache(maxsize=1)
def default_drag_model() -> DragReductionModel:
    return fit_drag_reduction(DRAG_DATA)


def load_drag_csv(path) -> list[tuple[float, float]]:
    """Read ``gap_m,beta`` rows."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["gap_m", "beta"]:
            raise ValueError(f"{path}: expected header gap_m,beta")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row {row!r}") from exc
    return rows


# ---------------------------------------------------------------- forces

def aero_force(v: float, d: Optional[float], p: TruckParams,
               model: Optional[DragReductionModel] = None) -> float:
    if v < 0:
        raise ValueError("speed must be non-negative")
    beta = 1.0
    if d is not None:
        beta = drag_reduction(d, model or default_drag_model())
    return p.drag_coef * beta * v * v


def rolling_force(grade: float, p: TruckParams) -> float:
    return p.m * p.grav * (p.C_r * np.cos(grade) + np.sin(grade))


def max_wheel_force(gear: int, p: TruckParams) -> float:
    g = _check_gear(gear, p)
    return p.tau_max * p.gear_efficiency[g] * p.i_f * p.gear_ratios[g] / p.r_w


def engine_speed(v: float, gear: int, p: TruckParams) -> float:
    g = _check_gear(gear, p)
    return v * p.i_f * p.gear_ratios[g] / p.r_w


def engine_torque(force: float, gear: int, p: TruckParams) -> float:
    """Engine torque producing ``force`` at the wheel in ``gear``."""
    g = _check_gear(gear, p)
    return force * p.r_w / (p.gear_efficiency[g] * p.i_f * p.gear_ratios[g])


def admissible_control_set(v: float, gear: int, p: TruckParams) -> tuple[float, float]:
    f_max = min(max_wheel_force(gear, p), p.p_max / max(v, V_EPS))
    return -p.brake_decel, f_max / p.m


def fuel_rate(tau: float, omega: float, f: FuelParams) -> float:
    if omega < 0:
        raise ValueError("engine speed must be non-negative")
    return (max(tau * omega, 0.0) / f.willans_eff + f.p_idle) / f.lhv


# ---------------------------------------------------------------- gearbox

def shift_thresholds(gear: int, p: TruckParams) -> tuple[float, float]:
    """(downshift speed, upshift speed) for ``gear``.

    Upshift once the next gear keeps the engine above omega_low*(1+hyst);
    downshift when the current gear drops below omega_low.  The lowest gear has
    no downshift and the top gear no upshift.
    """
    g = _check_gear(gear, p)
    k = p.r_w / p.i_f
    down = p.omega_low * k / p.gear_ratios[g] if g > 0 else -np.inf
    if g < p.top_gear:
        up = min(p.omega_low * (1 + p.shift_hysteresis) * k / p.gear_ratios[g + 1],
                 p.omega_high * k / p.gear_ratios[g])
    else:
        up = np.inf
    return down, up


def shift_logic(v: float, gear: int, p: TruckParams) -> int:
    down, up = shift_thresholds(gear, p)
    if v >= up:
        return gear + 1
    if v < down:
        return gear - 1
    return gear


def select_gear(v: float, p: TruckParams) -> int:
    """Gear the shift map settles into from standstill when ramping to ``v``."""
    gear = 0
    for _ in range(p.n_gears):
        nxt = shift_logic(v, gear, p)
        if nxt <= gear:
            break
        gear = nxt
    return gear


# ---------------------------------------------------------------- dynamics

def state_derivative(x: TruckState, u: float, w: ExogenousInput, p: TruckParams,
                     model: Optional[DragReductionModel] = None) -> tuple[float, float, float]:
    if x.v < 0:
        raise ValueError("speed must be non-negative")
    gap = w.leader_gap
    fa = aero_force(x.v, gap, p, model)
    fr = rolling_force(w.grade_at(x.s), p)
    me = p.effective_mass(x.gear)
    return x.v, (p.m * x.a_t - fa - fr) / me, (u - x.a_t) / p.tau_d


def plant_vector(p: TruckParams, gear: int, model: DragReductionModel) -> np.ndarray:
    """Pack the constants the compiled plant integrator needs."""
    g = _check_gear(gear, p)
    return np.array([
        p.m, p.effective_mass(g), p.tau_d, p.drag_coef, p.m * p.grav, p.C_r,
        model.a, model.b, model.c, model.d_coef, model.gap_max,
        p.gear_efficiency[g], p.fuel.willans_eff, p.fuel.p_idle, p.fuel.lhv,
    ])


def _grade_arrays(w: ExogenousInput):
    gf = w.grade_fit
    if gf is None:
        return np.array([0.0]), np.array([0.0])
    if hasattr(gf, "breakpoints"):
        return gf.positions, gf.grades
    raise TypeError("integrate_step needs a GradeProfile (or None) as grade_fit")


def integrate_step(x: TruckState, u: float, w: ExogenousInput, p: TruckParams,
                   h: float, n_sub: int = 10,
                   model: Optional[DragReductionModel] = None,
                   shift: bool = True) -> TruckState:
    """Advance one truck by ``h`` seconds with ``u`` held.

    RK4 with ``n_sub`` substeps; fuel is integrated alongside as a fourth
    state, speed is clamped at zero after every substep and the shift map is
    applied once at the end.
    """
    if h <= 0 or n_sub < 1:
        raise ValueError("need h > 0 and n_sub >= 1")
    model = model or default_drag_model()
    xs, alphas = _grade_arrays(w)
    lead = np.array([
        1.0 if w.leader_gap is not None else 0.0,
        w.leader_gap if w.leader_gap is not None else 0.0,
        w.leader_speed if w.leader_speed is not None else x.v,
        1.0 if w.leader_speed is not None else 0.0,
    ])
    y = np.array([x.s, x.v, x.a_t, x.fuel_used])
    out = _kernels.plant_rk4(y, float(u), float(h), int(n_sub), plant_vector(p, x.gear, model),
                             xs, alphas, lead)
    gear = shift_logic(out[1], x.gear, p) if shift else x.gear
    return TruckState(s=out[0], v=out[1], a_t=out[2], gear=gear, fuel_used=out[3])
