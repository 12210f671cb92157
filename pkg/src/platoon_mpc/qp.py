"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

    min 1/2 x'Hx + q'x   s.t.  A[:meq] x = b[:meq],  A[meq:] x >= b[meq:]

H must be symmetric positive definite.  The method starts at the
unconstrained minimum and adds violated constraints one at a time, dropping
constraints whose multipliers would turn negative, so every iterate is dual
feasible and the first primal-feasible iterate is optimal.
"""
import numpy as np
from numba import njit

QP_OPTIMAL = 0
QP_INFEASIBLE = 1
QP_NOT_PD = 2
QP_MAX_ITER = 3


class QPError(RuntimeError):
    def __init__(self, status: int):
        msg = {QP_INFEASIBLE: "constraints are inconsistent",
               QP_NOT_PD: "Hessian is not positive definite",
               QP_MAX_ITER: "iteration limit reached"}[status]
        super().__init__(msg)
        self.status = status


@njit(cache=True)
def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0, a
    h = np.hypot(a, b)
    return a / h, b / h, h


@njit(cache=True)
def _add_constraint(J, R, d, q):
    """Rotate d so only its first q+1 entries are nonzero; append to R."""
    n = J.shape[0]
    for j in range(n - 1, q, -1):
        c, s, h = _givens(d[j - 1], d[j])
        if s == 0.0:
            continue
        d[j - 1] = h
        d[j] = 0.0
        for i in range(n):
            t1 = J[i, j - 1]
            t2 = J[i, j]
            J[i, j - 1] = c * t1 + s * t2
            J[i, j] = -s * t1 + c * t2
    for i in range(q + 1):
        R[i, q] = d[i]


@njit(cache=True)
def _drop_constraint(J, R, k, q):
    """Remove active position k (of q) and retriangularize R."""
    n = J.shape[0]
    for col in range(k, q - 1):
        for i in range(q):
            R[i, col] = R[i, col + 1]
    for i in range(q):
        R[i, q - 1] = 0.0
    for j in range(k, q - 1):
        c, s, h = _givens(R[j, j], R[j + 1, j])
        if s == 0.0:
            continue
        R[j, j] = h
        R[j + 1, j] = 0.0
        for col in range(j + 1, q - 1):
            t1 = R[j, col]
            t2 = R[j + 1, col]
            R[j, col] = c * t1 + s * t2
            R[j + 1, col] = -s * t1 + c * t2
        for i in range(n):
            t1 = J[i, j]
            t2 = J[i, j + 1]
            J[i, j] = c * t1 + s * t2
            J[i, j + 1] = -s * t1 + c * t2


@njit(cache=True)
def _back_sub(R, d, q, out):
    for i in range(q - 1, -1, -1):
        acc = d[i]
        for j in range(i + 1, q):
            acc -= R[i, j] * out[j]
        out[i] = acc / R[i, i]


@njit(cache=True)
def gi_solve(H, q_lin, A, b, meq, max_iter):
    """Returns (x, multipliers, status, iterations)."""
    n = H.shape[0]
    m = A.shape[0]
    x = np.zeros(n)
    mult = np.zeros(m)
    L = np.zeros((n, n))
    # Cholesky H = L L'
    for j in range(n):
        acc = H[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0:
            return x, mult, QP_NOT_PD, 0
        L[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc = H[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    # J = L^{-T}: solve L' J = I column by column
    J = np.zeros((n, n))
    for c in range(n):
        for i in range(n - 1, -1, -1):
            acc = 1.0 if i == c else 0.0
            for k in range(i + 1, n):
                acc -= L[k, i] * J[k, c]
            J[i, c] = acc / L[i, i]
    # unconstrained minimum x = -J J' q
    tmp = J.T @ q_lin
    x = -(J @ tmp)

    R = np.zeros((n, n))
    active = np.full(n, -1)
    u = np.zeros(n + 1)
    sign = np.ones(m)
    nact = 0
    d = np.empty(n)
    z = np.empty(n)
    r = np.empty(n)
    anorm = np.empty(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += A[i, j] * A[i, j]
        anorm[i] = np.sqrt(s) if s > 0 else 1.0
    tol = 1e-12
    it = 0
    eq_added = 0
    while it < max_iter:
        it += 1
        # choose constraint: equalities first (in order), then most violated
        p = -1
        if eq_added < meq:
            p = eq_added
            eq_added += 1
            sp = A[p] @ x - b[p]
            sign[p] = -1.0 if sp > 0 else 1.0
        else:
            worst = 0.0
            for i in range(meq, m):
                sv = (A[i] @ x - b[i]) / anorm[i]
                if sv < worst - tol * (1.0 + abs(b[i]) / anorm[i]):
                    already = False
                    for k in range(nact):
                        if active[k] == i:
                            already = True
                            break
                    if not already:
                        worst = sv
                        p = i
            if p < 0:
                for k in range(nact):
                    mult[active[k]] = u[k] * sign[active[k]]
                return x, mult, QP_OPTIMAL, it
        np_vec = sign[p] * A[p]
        bp = sign[p] * b[p]
        u[nact] = 0.0
        while True:
            # step directions
            for i in range(n):
                acc = 0.0
                for k in range(n):
                    acc += J[k, i] * np_vec[k]
                d[i] = acc
            for i in range(n):
                acc = 0.0
                for k in range(nact, n):
                    acc += J[i, k] * d[k]
                z[i] = acc
            _back_sub(R, d, nact, r)
            # partial step: only inequality constraints may be dropped
            t1 = np.inf
            kdrop = -1
            for k in range(nact):
                if active[k] >= meq and r[k] > 0.0:
                    ratio = u[k] / r[k]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = k
            zn = z @ np_vec
            znorm = np.sqrt(z @ z)
            t2 = np.inf
            if znorm > 1e-14 * (1.0 + np.sqrt(np_vec @ np_vec)) and zn > 0.0:
                t2 = -(np_vec @ x - bp) / zn
                if t2 < 0.0:
                    t2 = 0.0
            t = min(t1, t2)
            if t == np.inf:
                return x, mult, QP_INFEASIBLE, it
            if t2 == np.inf:
                for k in range(nact):
                    u[k] -= t * r[k]
                u[nact] += t
                # drop kdrop, keep the pending multiplier in slot nact-1
                pend = u[nact]
                for k in range(kdrop, nact - 1):
                    u[k] = u[k + 1]
                    active[k] = active[k + 1]
                _drop_constraint(J, R, kdrop, nact)
                nact -= 1
                u[nact] = pend
                continue
            for i in range(n):
                x[i] += t * z[i]
            for k in range(nact):
                u[k] -= t * r[k]
            u[nact] += t
            if t == t2:
                # full step: constraint p becomes active
                _add_constraint(J, R, d, nact)
                active[nact] = p
                nact += 1
                break
            pend = u[nact]
            for k in range(kdrop, nact - 1):
                u[k] = u[k + 1]
                active[k] = active[k + 1]
            _drop_constraint(J, R, kdrop, nact)
            nact -= 1
            u[nact] = pend
            it += 1
            if it >= max_iter:
                break
    return x, mult, QP_MAX_ITER, it


def solve_qp(H, q, A=None, b=None, meq: int = 0, max_iter: int | None = None):
    """Solve a dense strictly convex QP; returns (x, multipliers).

    Multipliers follow the convention  H x + q = A' mult,  mult[meq:] >= 0.
    Raises QPError on infeasibility or a non-PD Hessian.
    """
    H = np.ascontiguousarray(H, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    n = q.size
    if A is None or np.size(A) == 0:
        A = np.zeros((0, n))
        b = np.zeros(0)
    A = np.ascontiguousarray(A, dtype=float).reshape(-1, n)
    b = np.ascontiguousarray(b, dtype=float)
    if max_iter is None:
        max_iter = 10 * (n + A.shape[0]) + 100
    x, mult, status, _ = gi_solve(H, q, A, b, int(meq), int(max_iter))
    if status != QP_OPTIMAL:
        raise QPError(status)
    return x, mult
