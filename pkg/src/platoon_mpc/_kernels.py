"""Compiled inner loops: plant RK4 and multiple-shooting stage maps with sensitivities.

Truck parameter rows used by ``shoot`` (one row per truck):
    [m, m_eff, tau_d, drag_coef, m*g, C_r, L]
Drag-fit vector: [a, b, c, d_coef, gap_max].
Preview rows (one per truck): [c0, c1, c2, c3, s_start, s_plus].
"""
import numpy as np
from numba import njit

P_M, P_ME, P_TAUD, P_CD, P_MG, P_CR, P_L = range(7)


@njit(cache=True)
def _beta(d, a, b, c, dc, gmax):
    """Drag factor and its derivative w.r.t. the gap (gap clamped into [0, gmax])."""
    if d <= 0.0:
        dd = 0.0
        inside = False
    elif d >= gmax:
        dd = gmax
        inside = False
    else:
        dd = d
        inside = True
    e1 = a * np.exp(b * dd)
    e2 = c * np.exp(dc * dd)
    beta = e1 + e2
    dbeta = (b * e1 + dc * e2) if inside else 0.0
    if beta > 1.0:
        return 1.0, 0.0
    return beta, dbeta


@njit(cache=True)
def _plant_rhs(y, u, tau, prm, xs, alphas, lead, s0, out):
    s = y[0]
    v = y[1]
    a = y[2]
    m = prm[0]
    alpha = np.interp(s, xs, alphas)
    beta = 1.0
    if lead[0] > 0.5:
        if lead[3] > 0.5:
            d = lead[1] + lead[2] * tau - (s - s0)
        else:
            d = lead[1]
        if d < 0.0:
            d = 0.0
        if d <= prm[10]:
            beta, _ = _beta(d, prm[6], prm[7], prm[8], prm[9], prm[10])
    fa = prm[3] * beta * v * v
    fr = prm[4] * (prm[5] * np.cos(alpha) + np.sin(alpha))
    out[0] = v
    out[1] = (m * a - fa - fr) / prm[1]
    out[2] = (u - a) / prm[2]
    p_eng = m * a * v / prm[11]
    if p_eng < 0.0:
        p_eng = 0.0
    out[3] = (p_eng / prm[12] + prm[13]) / prm[14]


@njit(cache=True)
def plant_rk4(y0, u, h, n_sub, prm, xs, alphas, lead):
    """Integrate [s, v, a_t, fuel] over ``h`` with ``n_sub`` RK4 substeps.

    prm: [m, m_eff, tau_d, drag_coef, m*g, C_r, a, b, c, d_coef, gap_max,
          eta, willans_eff, p_idle, lhv]
    lead: [has_leader, gap0, leader_speed, use_leader_speed]
    """
    y = y0.copy()
    s0 = y0[0]
    hs = h / n_sub
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    tmp = np.empty(4)
    for j in range(n_sub):
        t = j * hs
        _plant_rhs(y, u, t, prm, xs, alphas, lead, s0, k1)
        for q in range(4):
            tmp[q] = y[q] + 0.5 * hs * k1[q]
        _plant_rhs(tmp, u, t + 0.5 * hs, prm, xs, alphas, lead, s0, k2)
        for q in range(4):
            tmp[q] = y[q] + 0.5 * hs * k2[q]
        _plant_rhs(tmp, u, t + 0.5 * hs, prm, xs, alphas, lead, s0, k3)
        for q in range(4):
            tmp[q] = y[q] + hs * k3[q]
        _plant_rhs(tmp, u, t + hs, prm, xs, alphas, lead, s0, k4)
        for q in range(4):
            y[q] += hs / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
        if y[1] < 0.0:
            y[1] = 0.0
    return y


@njit(cache=True)
def _grade(s, pv):
    """Legendre-series grade and d(grade)/ds at position s."""
    sp = pv[5]
    ell = 2.0 * (s - pv[4]) / sp - 1.0
    dl = 2.0 / sp
    if ell < -1.0:
        ell = -1.0
        dl = 0.0
    elif ell > 1.0:
        ell = 1.0
        dl = 0.0
    p2 = 0.5 * (3.0 * ell * ell - 1.0)
    p3 = 0.5 * (5.0 * ell * ell * ell - 3.0 * ell)
    alpha = pv[0] + pv[1] * ell + pv[2] * p2 + pv[3] * p3
    dalpha = pv[1] + pv[2] * 3.0 * ell + pv[3] * 0.5 * (15.0 * ell * ell - 3.0)
    return alpha, dalpha * dl


@njit(cache=True)
def _ocp_rhs(y, w, s_ext, has_ext, L_ext, prm, drag, pv, f, P):
    """Joint dynamics of 1 or 2 trucks; truck 1 drafts behind truck 0.

    Fills f (nz) and the nonzero partials of each truck's speed equation,
    P[j] = [dv'/ds, dv'/dv, dv'/da, dv'/ds_lead].  The position row is
    ds/dt = v and the lag row depends only on a and u.
    """
    ntr = y.shape[0] // 3
    for j in range(ntr):
        o = 3 * j
        s = y[o]
        v = y[o + 1]
        a = y[o + 2]
        m = prm[j, P_M]
        me = prm[j, P_ME]
        beta = 1.0
        dbeta = 0.0
        if j == 0:
            if has_ext:
                beta, dbeta = _beta(s_ext - L_ext - s, drag[0], drag[1], drag[2], drag[3], drag[4])
        else:
            beta, dbeta = _beta(y[0] - prm[0, P_L] - s, drag[0], drag[1], drag[2], drag[3], drag[4])
        alpha, dalpha = _grade(s, pv[j])
        ca = np.cos(alpha)
        sa = np.sin(alpha)
        cd = prm[j, P_CD]
        mg = prm[j, P_MG]
        fa = cd * beta * v * v
        fr = mg * (prm[j, P_CR] * ca + sa)
        dfr_ds = mg * (-prm[j, P_CR] * sa + ca) * dalpha
        dfa_dd = cd * dbeta * v * v
        f[o] = v
        f[o + 1] = (m * a - fa - fr) / me
        f[o + 2] = (w[j] - a) / prm[j, P_TAUD]
        # d = lead - L - s  =>  dd/ds = -1, dd/dlead = +1
        P[j, 0] = (dfa_dd - dfr_ds) / me
        P[j, 1] = -2.0 * cd * beta * v / me
        P[j, 2] = m / me
        P[j, 3] = -dfa_dd / me if j > 0 else 0.0


@njit(cache=True)
def _stage(y0, w, i, dt, n_sub, prm, drag, pv, has_ext, s_ext, L_ext, with_sens, y, S):
    """Integrate stage i from y0 under control w; y <- end state, S <- d(y)/d(y0, w)."""
    nz = y0.shape[0]
    nw = w.shape[0]
    ns = nz + nw
    h = dt / n_sub
    yt = np.empty(nz)
    k1 = np.empty(nz)
    k2 = np.empty(nz)
    k3 = np.empty(nz)
    k4 = np.empty(nz)
    P = np.empty((nw, 4))
    St = np.empty((nz, ns))
    d1 = np.empty((nz, ns))
    d2 = np.empty((nz, ns))
    d3 = np.empty((nz, ns))
    d4 = np.empty((nz, ns))
    for q in range(nz):
        y[q] = y0[q]
    if with_sens:
        for q in range(nz):
            for r in range(ns):
                S[q, r] = 1.0 if q == r else 0.0
    for k in range(n_sub):
        g0 = 2 * (i * n_sub + k)
        for stage in range(4):
            if stage == 0:
                for q in range(nz):
                    yt[q] = y[q]
                gi = g0
                kk = k1
                dk = d1
            elif stage == 1:
                for q in range(nz):
                    yt[q] = y[q] + 0.5 * h * k1[q]
                gi = g0 + 1
                kk = k2
                dk = d2
            elif stage == 2:
                for q in range(nz):
                    yt[q] = y[q] + 0.5 * h * k2[q]
                gi = g0 + 1
                kk = k3
                dk = d3
            else:
                for q in range(nz):
                    yt[q] = y[q] + h * k3[q]
                gi = g0 + 2
                kk = k4
                dk = d4
            sx = s_ext[gi] if has_ext else 0.0
            _ocp_rhs(yt, w, sx, has_ext, L_ext, prm, drag, pv, kk, P)
            if not with_sens:
                continue
            if stage == 0:
                for q in range(nz):
                    for r in range(ns):
                        St[q, r] = S[q, r]
            else:
                fac = h if stage == 3 else 0.5 * h
                prev = d1 if stage == 1 else (d2 if stage == 2 else d3)
                for q in range(nz):
                    for r in range(ns):
                        St[q, r] = S[q, r] + fac * prev[q, r]
            for j in range(nw):
                o = 3 * j
                itau = 1.0 / prm[j, P_TAUD]
                p0 = P[j, 0]
                p1 = P[j, 1]
                p2 = P[j, 2]
                p3 = P[j, 3]
                for r in range(ns):
                    dk[o, r] = St[o + 1, r]
                    acc = p0 * St[o, r] + p1 * St[o + 1, r] + p2 * St[o + 2, r]
                    if j > 0:
                        acc += p3 * St[0, r]
                    dk[o + 1, r] = acc
                    dk[o + 2, r] = -itau * St[o + 2, r]
                dk[o + 2, nz + j] += itau
        for q in range(nz):
            y[q] += h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
        if with_sens:
            for q in range(nz):
                for r in range(ns):
                    S[q, r] += h / 6.0 * (d1[q, r] + 2.0 * d2[q, r] + 2.0 * d3[q, r] + d4[q, r])


@njit(cache=True)
def shoot(Z, W, dt, n_sub, prm, drag, pv, has_ext, s_ext, L_ext, with_sens):
    """Integrate every shooting stage from its own start state.

    Z: (N+1, nz) stage states, W: (N, nw) stage controls, pv: (ntrucks, 6)
    previews, s_ext: external leader positions on the half-substep grid
    (2*N*n_sub+1 points).
    Returns Phi (N, nz), A (N, nz, nz) = dPhi/dz, B (N, nz, nw) = dPhi/dw.
    """
    N = W.shape[0]
    nz = Z.shape[1]
    nw = W.shape[1]
    Phi = np.empty((N, nz))
    A = np.zeros((N, nz, nz))
    B = np.zeros((N, nz, nw))
    y = np.empty(nz)
    S = np.empty((nz, nz + nw))
    for i in range(N):
        _stage(Z[i], W[i], i, dt, n_sub, prm, drag, pv, has_ext, s_ext, L_ext, with_sens, y, S)
        for q in range(nz):
            Phi[i, q] = y[q]
        if with_sens:
            for q in range(nz):
                for r in range(nz):
                    A[i, q, r] = S[q, r]
                for r in range(nw):
                    B[i, q, r] = S[q, nz + r]
    return Phi, A, B


@njit(cache=True)
def rollout(z0, W, dt, n_sub, prm, drag, pv, has_ext, s_ext, L_ext):
    """Sequential simulation of all stages from z0 (single shooting)."""
    N = W.shape[0]
    nz = z0.shape[0]
    Z = np.empty((N + 1, nz))
    Z[0] = z0
    y = np.empty(nz)
    S = np.empty((1, 1))
    for i in range(N):
        _stage(Z[i], W[i], i, dt, n_sub, prm, drag, pv, has_ext, s_ext, L_ext, False, y, S)
        for q in range(nz):
            Z[i + 1, q] = y[q]
    return Z
