"""Gauss-Newton SQP for least-squares objectives with nonlinear constraints.

Problems have the form

    min  r(x)'r(x) + q'x
    s.t. c(x) = 0,  g(x) >= 0,  lo <= x <= hi

Each iteration linearizes at the current point, solves a convex QP (Hessian
2 J_r'J_r plus Levenberg damping) and takes an l1-merit backtracking step.
When the problem marks a set of *dependent* variables whose equality Jacobian
block is square (the state variables of a multiple-shooting transcription),
the QP is condensed onto the remaining variables before it is solved.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .qp import QPError, solve_qp

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE_QP = "infeasible_qp"
NUMERICAL_ERROR = "numerical_error"


@dataclass
class NlpEval:
    r: np.ndarray
    c: np.ndarray
    g: np.ndarray
    Jr: Optional[np.ndarray] = None
    Jc: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None

    def finite(self) -> bool:
        parts = [self.r, self.c, self.g]
        if self.Jr is not None:
            parts += [self.Jr, self.Jc, self.G]
        # a sum is non-finite iff some entry is (or the sum overflows, which is just as bad)
        return bool(np.isfinite(sum(float(np.sum(p)) for p in parts)))


@dataclass
class NlpSpec:
    """Problem data.

    ``evaluate(x, jac)`` returns an NlpEval; Jacobians are required only when
    ``jac`` is true.  ``dependent`` lists variables eliminated through the
    equality constraints (requires ``len(dependent) == n_eq``).
    """

    n: int
    n_eq: int
    n_ineq: int
    evaluate: Callable[[np.ndarray, bool], NlpEval]
    lo: np.ndarray
    hi: np.ndarray
    linear: Optional[np.ndarray] = None
    dependent: Optional[np.ndarray] = None
    # extra per-variable diagonal added to the QP Hessian (proximal term)
    damping: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != (self.n,) or self.hi.shape != (self.n,):
            raise ValueError("bounds must have shape (n,)")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound above upper bound")
        self.linear = np.zeros(self.n) if self.linear is None else np.asarray(self.linear, dtype=float)
        self.damping = np.zeros(self.n) if self.damping is None else np.asarray(self.damping, dtype=float)
        if self.dependent is not None:
            self.dependent = np.asarray(self.dependent, dtype=int)
            if self.dependent.size != self.n_eq:
                raise ValueError("dependent variable count must equal n_eq")

    @classmethod
    def from_functions(cls, n, residual, eq=None, ineq=None, lo=None, hi=None, linear=None):
        """Build a spec from separate (value, jacobian) callables."""
        lo = np.full(n, -np.inf) if lo is None else lo
        hi = np.full(n, np.inf) if hi is None else hi
        x0 = np.zeros(n)
        n_eq = 0 if eq is None else len(eq(x0)[0])
        n_in = 0 if ineq is None else len(ineq(x0)[0])

        def evaluate(x, jac=True):
            r, Jr = residual(x)
            c, Jc = eq(x) if eq else (np.zeros(0), np.zeros((0, n)))
            g, G = ineq(x) if ineq else (np.zeros(0), np.zeros((0, n)))
            ev = NlpEval(np.atleast_1d(np.asarray(r, float)), np.asarray(c, float), np.asarray(g, float))
            if jac:
                ev.Jr = np.atleast_2d(np.asarray(Jr, float))
                ev.Jc = np.asarray(Jc, float).reshape(n_eq, n)
                ev.G = np.asarray(G, float).reshape(n_in, n)
            return ev

        return cls(n, n_eq, n_in, evaluate, lo, hi, linear)

    def objective(self, x, ev: NlpEval) -> float:
        return float(ev.r @ ev.r + self.linear @ x)


@dataclass
class SolveOptions:
    tol: float = 1e-6
    max_iter: int = 50
    ls_contraction: float = 0.5
    min_step: float = 1e-10
    armijo: float = 1e-4
    lm_init: float = 1e-6
    lm_min: float = 1e-9
    lm_max: float = 1e6
    debug_path: Optional[str] = None


@dataclass
class SolveReport:
    x_opt: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    lam_bounds: np.ndarray
    kkt_residual: float
    iterations: int
    wall_time: float
    status: str
    objective: float = float("nan")
    merit_trace: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


# ---------------------------------------------------------------- KKT

def _active_tol(bound):
    return 1e-9 * np.maximum(1.0, np.abs(bound))


def kkt_terms(spec: NlpSpec, x, ev: NlpEval, lam_eq, lam_in):
    """Stationarity, primal infeasibility, complementarity and bound multipliers.

    Bound multipliers are chosen to best cancel the stationarity residual on
    active bounds (positive at lower bounds, negative at upper bounds).
    """
    grad = 2.0 * ev.Jr.T @ ev.r + spec.linear
    rs = grad - ev.Jc.T @ lam_eq - ev.G.T @ lam_in
    at_lo = np.isfinite(spec.lo) & (x - spec.lo <= _active_tol(spec.lo))
    at_hi = np.isfinite(spec.hi) & (spec.hi - x <= _active_tol(spec.hi))
    z = np.zeros_like(x)
    z[at_lo] = np.maximum(rs[at_lo], 0.0)
    z[at_hi] += np.minimum(rs[at_hi], 0.0)
    stat = np.max(np.abs(rs - z), initial=0.0)
    primal = max(np.max(np.abs(ev.c), initial=0.0),
                 np.max(-ev.g, initial=0.0),
                 np.max(spec.lo - x, initial=0.0),
                 np.max(x - spec.hi, initial=0.0))
    dual = np.max(-lam_in, initial=0.0)
    comp = np.max(np.abs(lam_in * ev.g), initial=0.0)
    return stat, primal, max(comp, dual), z


def kkt_residual(spec, x, ev, lam_eq, lam_in) -> float:
    stat, primal, comp, _ = kkt_terms(spec, x, ev, lam_eq, lam_in)
    return float(max(stat, primal, comp))


# ---------------------------------------------------------------- QP step

class _QPFailure(Exception):
    pass


def _solve_qp(H, q, A, b, meq):
    """min 1/2 p'Hp + q'p  s.t. A p >= b (first meq rows as equalities)."""
    try:
        return solve_qp(0.5 * (H + H.T), q, A, b, meq)
    except QPError as exc:
        raise _QPFailure(str(exc)) from None


class _Bounds:
    """Finite variable bounds of a subset ``idx`` as QP rows  sgn*(x + p) >= sgn*bound."""

    def __init__(self, idx, lo, hi):
        idx = np.asarray(idx)
        lo_i, hi_i = lo[idx], hi[idx]
        kl = np.flatnonzero(np.isfinite(lo_i))
        kh = np.flatnonzero(np.isfinite(hi_i))
        self.pos = np.concatenate([kl, kh])          # position within idx
        self.var = idx[self.pos]                     # global variable index
        self.sgn = np.concatenate([np.ones(kl.size), -np.ones(kh.size)])
        self.bound = np.concatenate([lo_i[kl], hi_i[kh]])
        self.size = self.pos.size

    def rhs(self, x):
        return self.sgn * (self.bound - x[self.var])

    def selector(self, width):
        B = np.zeros((self.size, width))
        B[np.arange(self.size), self.pos] = self.sgn
        return B


class _Condenser:
    def __init__(self, spec: NlpSpec):
        n = spec.n
        self.D = spec.dependent
        mask = np.ones(n, dtype=bool)
        mask[self.D] = False
        self.W = np.flatnonzero(mask)
        self.bW = _Bounds(self.W, spec.lo, spec.hi)
        self.bD = _Bounds(self.D, spec.lo, spec.hi)
        self.BW = self.bW.selector(self.W.size)

    def solve_dep(self, JcD, rhs, trans=False):
        if self._lower:
            return sla.solve_triangular(JcD, rhs, lower=True, trans=1 if trans else 0,
                                        check_finite=False)
        return sla.lu_solve(self._lu, rhs, trans=1 if trans else 0, check_finite=False)

    def factor(self, JcD):
        self._lower = not np.any(np.triu(JcD, 1))
        if not self._lower:
            self._lu = sla.lu_factor(JcD, check_finite=False)


def _qp_step(spec: NlpSpec, x, ev: NlpEval, lm: float, cond):
    """Solve the SQP subproblem; returns step, eq multipliers, ineq multipliers."""
    n = spec.n
    if isinstance(cond, _Bounds):
        H = 2.0 * ev.Jr.T @ ev.Jr + np.diag(lm + spec.damping)
        q = 2.0 * ev.Jr.T @ ev.r + spec.linear
        A = np.vstack([ev.Jc, ev.G, cond.selector(n)])
        b = np.concatenate([-ev.c, -ev.g, cond.rhs(x)])
        p, mult = _solve_qp(H, q, A, b, spec.n_eq)
        return p, mult[:spec.n_eq], mult[spec.n_eq:spec.n_eq + spec.n_ineq]

    D, W = cond.D, cond.W
    JcD = ev.Jc[:, D]
    cond.factor(JcD)
    # p_D = M p_W + m0
    sol = cond.solve_dep(JcD, np.column_stack([ev.Jc[:, W], ev.c]))
    M = -sol[:, :-1]
    m0 = -sol[:, -1]
    JrD = ev.Jr[:, D]
    Jr_c = ev.Jr[:, W] + JrD @ M
    r_c = ev.r + JrD @ m0
    lin_c = spec.linear[W] + spec.linear[D] @ M
    GD = ev.G[:, D]
    G_c = ev.G[:, W] + GD @ M
    g_c = ev.g + GD @ m0
    H = 2.0 * Jr_c.T @ Jr_c + np.diag(lm + spec.damping[W])
    dD = spec.damping[D]
    if np.any(dD):
        H += M.T @ (dD[:, None] * M)
    q = 2.0 * Jr_c.T @ r_c + lin_c

    bW, bD = cond.bW, cond.bD
    BD = bD.sgn[:, None] * M[bD.pos]
    rhsD = bD.rhs(x) - bD.sgn * m0[bD.pos]
    A = np.vstack([G_c, cond.BW, BD])
    b = np.concatenate([-g_c, bW.rhs(x), rhsD])
    pW, mult = _solve_qp(H, q, A, b, 0)
    mu = mult[:spec.n_ineq]
    pD = M @ pW + m0
    p = np.empty(n)
    p[W] = pW
    p[D] = pD
    # equality multipliers from stationarity w.r.t. the dependent block
    gradD = (2.0 * ev.Jr.T @ (ev.r + ev.Jr @ p) + spec.linear)[D] - GD.T @ mu
    if bD.size:
        zD = np.zeros(D.size)
        np.add.at(zD, bD.pos, bD.sgn * mult[spec.n_ineq + bW.size:])
        gradD = gradD - zD
    lam = cond.solve_dep(JcD, gradD, trans=True)
    return p, lam, mu


# ---------------------------------------------------------------- solver

def _merit(spec, x, ev, rho):
    infeas = np.sum(np.abs(ev.c)) + np.sum(np.maximum(-ev.g, 0.0))
    return spec.objective(x, ev) + rho * infeas, infeas


def solve(spec: NlpSpec, x0, opts: Optional[SolveOptions] = None) -> SolveReport:
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    x = np.clip(np.asarray(x0, dtype=float).copy(), spec.lo, spec.hi)
    lam = np.zeros(spec.n_eq)
    mu = np.zeros(spec.n_ineq)
    cond = _Condenser(spec) if spec.dependent is not None else _Bounds(np.arange(spec.n), spec.lo, spec.hi)
    lm = opts.lm_init
    rho = 1.0
    trace: list = []
    dump = open(opts.debug_path, "w", encoding="utf-8") if opts.debug_path else None

    def report(status, kkt, it, ev=None, msg=""):
        if dump:
            dump.write(f"# status={status} kkt={kkt:.3e} iters={it} {msg}\n")
            dump.close()
        obj = spec.objective(x, ev) if ev is not None else float("nan")
        z = np.zeros(spec.n)
        if ev is not None and ev.Jr is not None:
            z = kkt_terms(spec, x, ev, lam, mu)[3]
        return SolveReport(x.copy(), lam.copy(), mu.copy(), z, float(kkt), it,
                           time.perf_counter() - t0, status, obj, trace, msg)

    ev = spec.evaluate(x, True)
    for it in range(opts.max_iter + 1):
        if not ev.finite():
            return report(NUMERICAL_ERROR, np.inf, it, None, f"non-finite evaluation at x={x.tolist()}")
        kkt = kkt_residual(spec, x, ev, lam, mu)
        if dump:
            dump.write(f"{it} f={spec.objective(x, ev):.12e} kkt={kkt:.3e} lm={lm:.1e} rho={rho:.3e}\n")
        if kkt <= opts.tol:
            return report(CONVERGED, kkt, it, ev)
        if it == opts.max_iter:
            return report(MAX_ITER, kkt, it, ev)

        try:
            p, lam_qp, mu_qp = _qp_step(spec, x, ev, lm, cond)
        except _QPFailure as exc:
            return report(INFEASIBLE_QP, kkt, it, ev, str(exc))
        if not np.all(np.isfinite(p)):
            return report(NUMERICAL_ERROR, kkt, it, ev, "non-finite QP step")
        # the QP multipliers may already certify the current point
        kkt_qp = kkt_residual(spec, x, ev, lam_qp, mu_qp)
        if kkt_qp <= opts.tol:
            lam, mu = lam_qp, mu_qp
            return report(CONVERGED, kkt_qp, it, ev)

        rho = max(rho, 1.1 * max(np.max(np.abs(lam_qp), initial=0.0),
                                 np.max(np.abs(mu_qp), initial=0.0)) + 1e-6)
        phi0, infeas0 = _merit(spec, x, ev, rho)
        # merit changes below this are evaluation roundoff, not ascent
        noise = 1e-12 * (1.0 + abs(phi0))
        grad = 2.0 * ev.Jr.T @ ev.r + spec.linear
        slope = grad @ p - rho * infeas0
        alpha = 1.0
        accepted = False
        while alpha >= opts.min_step:
            x_try = np.clip(x + alpha * p, spec.lo, spec.hi)
            ev_try = spec.evaluate(x_try, alpha == 1.0)
            if ev_try.finite():
                phi, _ = _merit(spec, x_try, ev_try, rho)
                if phi <= phi0 + opts.armijo * alpha * min(slope, 0.0) + noise:
                    accepted = True
                    break
            alpha *= opts.ls_contraction
        if not accepted:
            lm = min(lm * 100.0, opts.lm_max)
            if lm >= opts.lm_max:
                return report(NUMERICAL_ERROR, kkt, it + 1, ev, "line search failed")
            continue
        trace.append((phi0, phi, rho))
        x = x_try
        lam = lam + alpha * (lam_qp - lam)
        mu = mu + alpha * (mu_qp - mu)
        lm = max(lm * 0.25, opts.lm_min) if alpha == 1.0 else min(lm * 4.0, opts.lm_max)
        ev = ev_try if ev_try.Jr is not None else spec.evaluate(x, True)
    return report(MAX_ITER, np.inf, opts.max_iter, ev)  # pragma: no cover


# ---------------------------------------------------------------- derivative check

def check_derivatives(spec: NlpSpec, x, h: float = 1e-5) -> float:
    """Max relative error between supplied Jacobians and central differences.

    Errors are |analytic - fd| / max(1, |fd|) over every entry of J_r, J_c, G.
    """
    x = np.asarray(x, dtype=float)
    ev = spec.evaluate(x, True)
    worst = 0.0
    for j in range(spec.n):
        e = np.zeros(spec.n)
        e[j] = h
        ep = spec.evaluate(x + e, False)
        em = spec.evaluate(x - e, False)
        for an, vp, vm in ((ev.Jr, ep.r, em.r), (ev.Jc, ep.c, em.c), (ev.G, ep.g, em.g)):
            if an.size == 0:
                continue
            fd = (vp - vm) / (2 * h)
            err = np.abs(an[:, j] - fd) / np.maximum(1.0, np.abs(fd))
            worst = max(worst, float(np.max(err)))
    return worst
