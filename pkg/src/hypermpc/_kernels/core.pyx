# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: plant integration, differentiable rollouts, MPC helpers.

Numerically equivalent to `pyref.py` (the pure-Python backend); see that
module for the shared conventions. Everything here is float64 and serial;
callers provide preallocated-compatible numpy arrays.
"""

import numpy as np

from libc.math cimport cos, fabs, isfinite, sin, tanh

BACKEND_NAME = "compiled"

cdef double STATE_LIMIT = 1e6
cdef double COULOMB_EPS = 0.05


cdef inline double _accel(double q, double qd, double tau, double m, double l,
                          double cv, double cc, double gr, double g, double eps_c) nogil:
    cdef double inertia = m * l * l / 3.0
    cdef double torque = gr * tau - cv * qd - cc * tanh(qd / eps_c) - m * g * (l / 2.0) * sin(q)
    return torque / inertia


cdef inline void _accel_partials(double q, double qd, double tau, double m, double l,
                                 double cv, double cc, double gr, double g, double eps_c,
                                 double* out) nogil:
    # out: a, a_q, a_qd, a_tau, a_m, a_l, a_cv, a_cc, a_gr
    cdef double inertia = m * l * l / 3.0
    cdef double th = tanh(qd / eps_c)
    cdef double sin_q = sin(q)
    cdef double torque = gr * tau - cv * qd - cc * th - m * g * (l / 2.0) * sin_q
    cdef double a = torque / inertia
    out[0] = a
    out[1] = -m * g * (l / 2.0) * cos(q) / inertia
    out[2] = (-cv - (cc / eps_c) * (1.0 - th * th)) / inertia
    out[3] = gr / inertia
    out[4] = (-g * (l / 2.0) * sin_q - a * (l * l / 3.0)) / inertia
    out[5] = (-m * (g / 2.0) * sin_q - a * (2.0 * m * l / 3.0)) / inertia
    out[6] = -qd / inertia
    out[7] = -th / inertia
    out[8] = tau / inertia


# ---------------------------------------------------------------------------
# plant with gear backlash
# ---------------------------------------------------------------------------

cdef inline void _plant_deriv(double q, double qd, double qm, double qmd, double tau,
                              double* p, double* d) nogil:
    cdef double m = p[0], l = p[1], damping = p[2], frictionloss = p[3], gear = p[4]
    cdef double delta = p[5], g = p[6], j_m = p[7], b_m = p[8], k_c = p[9], c_c = p[10]
    cdef double inertia = m * l * l / 3.0
    cdef double grav = m * g * (l / 2.0) * sin(q)
    cdef double fric = damping * qd + frictionloss * tanh(qd / COULOMB_EPS)
    cdef double acc, e, half, f, tau_c
    if delta == 0.0:
        acc = (gear * tau - fric - grav) / inertia
        d[0] = qd
        d[1] = acc
        d[2] = qd
        d[3] = acc
        return
    e = qm - q
    half = delta / 2.0
    if e > half:
        f = k_c * (e - half) + c_c * (qmd - qd)
        tau_c = f if f > 0.0 else 0.0
    elif e < -half:
        f = k_c * (e + half) + c_c * (qmd - qd)
        tau_c = f if f < 0.0 else 0.0
    else:
        tau_c = 0.0
    d[0] = qd
    d[1] = (tau_c - fric - grav) / inertia
    d[2] = qmd
    d[3] = (gear * tau - tau_c - b_m * qmd) / j_m


def plant_sim(state, taus, int substeps, double dt_sub, params):
    cdef double[::1] s0 = np.ascontiguousarray(state, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(taus, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef Py_ssize_t n = tv.shape[0]
    out_np = np.empty((n, 4))
    contact_np = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] out = out_np
    cdef unsigned char[::1] contact = contact_np
    cdef double p[11]
    cdef Py_ssize_t i
    for i in range(11):
        p[i] = pv[i]
    cdef double q = s0[0], qd = s0[1], qm = s0[2], qmd = s0[3]
    cdef double delta = p[5]
    if delta == 0.0:
        qm = q  # rigid coupling: the motor mirrors the link
        qmd = qd
    cdef double tau, h, s
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef Py_ssize_t k, j
    cdef long diverged = -1
    with nogil:
        for k in range(n):
            tau = tv[k]
            if diverged < 0:
                for j in range(substeps):
                    _plant_deriv(q, qd, qm, qmd, tau, p, k1)
                    h = dt_sub / 2.0
                    _plant_deriv(q + h * k1[0], qd + h * k1[1], qm + h * k1[2], qmd + h * k1[3], tau, p, k2)
                    _plant_deriv(q + h * k2[0], qd + h * k2[1], qm + h * k2[2], qmd + h * k2[3], tau, p, k3)
                    _plant_deriv(q + dt_sub * k3[0], qd + dt_sub * k3[1], qm + dt_sub * k3[2],
                                 qmd + dt_sub * k3[3], tau, p, k4)
                    s = dt_sub / 6.0
                    q += s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
                    qd += s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
                    qm += s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
                    qmd += s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
                    if not (isfinite(q) and isfinite(qd) and fabs(qd) <= 1000.0):
                        diverged = k
                        break
            out[k, 0] = q
            out[k, 1] = qd
            out[k, 2] = qm
            out[k, 3] = qmd
            contact[k] = 1 if (delta == 0.0 or fabs(qm - q) >= delta / 2.0) else 0
    return out_np, contact_np, int(diverged)


# ---------------------------------------------------------------------------
# batched differentiable rollout, nominal model
# ---------------------------------------------------------------------------

def rollout_fwd(x0, taus, theta, double dt, double gravity, double eps_c):
    cdef double[:, ::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(taus, dtype=np.float64)
    cdef double[:, :, ::1] thv = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t b = tv.shape[0], t_steps = tv.shape[1]
    states_np = np.empty((b, t_steps, 2))
    diverged_np = np.full(b, -1, dtype=np.int64)
    cdef double[:, :, ::1] states = states_np
    cdef long[::1] diverged = diverged_np
    cdef Py_ssize_t i, t
    cdef double q, qd, tau, m, l, cv, cc, gr, h, s
    cdef double k1q, k1v, k2q, k2v, k3q, k3v, k4q, k4v, qn, qdn
    with nogil:
        for i in range(b):
            q = x0v[i, 0]
            qd = x0v[i, 1]
            for t in range(t_steps):
                if diverged[i] >= 0:
                    states[i, t, 0] = q
                    states[i, t, 1] = qd
                    continue
                tau = tv[i, t]
                m = thv[i, t, 0]
                l = thv[i, t, 1]
                cv = thv[i, t, 2]
                cc = thv[i, t, 3]
                gr = thv[i, t, 4]
                k1q = qd
                k1v = _accel(q, qd, tau, m, l, cv, cc, gr, gravity, eps_c)
                h = dt / 2.0
                k2q = qd + h * k1v
                k2v = _accel(q + h * k1q, qd + h * k1v, tau, m, l, cv, cc, gr, gravity, eps_c)
                k3q = qd + h * k2v
                k3v = _accel(q + h * k2q, qd + h * k2v, tau, m, l, cv, cc, gr, gravity, eps_c)
                k4q = qd + dt * k3v
                k4v = _accel(q + dt * k3q, qd + dt * k3v, tau, m, l, cv, cc, gr, gravity, eps_c)
                s = dt / 6.0
                qn = q + s * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
                qdn = qd + s * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
                if not (isfinite(qn) and isfinite(qdn)) or fabs(qn) > STATE_LIMIT or fabs(qdn) > STATE_LIMIT:
                    diverged[i] = t
                else:
                    q = qn
                    qd = qdn
                states[i, t, 0] = q
                states[i, t, 1] = qd
    return states_np, diverged_np


def rollout_bwd(x0, taus, theta, double dt, double gravity, double eps_c,
                states, grad_states, diverged):
    cdef double[:, ::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(taus, dtype=np.float64)
    cdef double[:, :, ::1] thv = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, :, ::1] sv = np.ascontiguousarray(states, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(grad_states, dtype=np.float64)
    cdef long[::1] divv = np.ascontiguousarray(diverged, dtype=np.int64)
    cdef Py_ssize_t b = tv.shape[0], t_steps = tv.shape[1]
    dtheta_np = np.zeros((b, t_steps, 5))
    cdef double[:, :, ::1] dtheta = dtheta_np
    cdef Py_ssize_t i, t, j
    cdef double q, qd, tau, m, l, cv, cc, gr, h, lam0, lam1, c0, c1
    cdef double k1q, k1v, k2q, k2v, k3q, k3v
    cdef double pts[4][2]
    cdef double parts[4][9]
    cdef double adj[4][2]
    cdef double a0, a1, w
    with nogil:
        for i in range(b):
            if divv[i] >= 0:
                continue
            c0 = 0.0
            c1 = 0.0
            for t in range(t_steps - 1, -1, -1):
                if t > 0:
                    q = sv[i, t - 1, 0]
                    qd = sv[i, t - 1, 1]
                else:
                    q = x0v[i, 0]
                    qd = x0v[i, 1]
                lam0 = gv[i, t, 0] + c0
                lam1 = gv[i, t, 1] + c1
                tau = tv[i, t]
                m = thv[i, t, 0]
                l = thv[i, t, 1]
                cv = thv[i, t, 2]
                cc = thv[i, t, 3]
                gr = thv[i, t, 4]
                h = dt / 2.0
                pts[0][0] = q
                pts[0][1] = qd
                _accel_partials(q, qd, tau, m, l, cv, cc, gr, gravity, eps_c, parts[0])
                k1q = qd
                k1v = parts[0][0]
                pts[1][0] = q + h * k1q
                pts[1][1] = qd + h * k1v
                _accel_partials(pts[1][0], pts[1][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[1])
                k2q = pts[1][1]
                k2v = parts[1][0]
                pts[2][0] = q + h * k2q
                pts[2][1] = qd + h * k2v
                _accel_partials(pts[2][0], pts[2][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[2])
                k3q = pts[2][1]
                k3v = parts[2][0]
                pts[3][0] = q + dt * k3q
                pts[3][1] = qd + dt * k3v
                _accel_partials(pts[3][0], pts[3][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[3])
                # stage adjoints: a4..a1 (JT(p, v) = (a_q*v1, v0 + a_qd*v1))
                adj[3][0] = (dt / 6.0) * lam0
                adj[3][1] = (dt / 6.0) * lam1
                adj[2][0] = (2.0 * dt / 6.0) * lam0 + dt * (parts[3][1] * adj[3][1])
                adj[2][1] = (2.0 * dt / 6.0) * lam1 + dt * (adj[3][0] + parts[3][2] * adj[3][1])
                adj[1][0] = (2.0 * dt / 6.0) * lam0 + h * (parts[2][1] * adj[2][1])
                adj[1][1] = (2.0 * dt / 6.0) * lam1 + h * (adj[2][0] + parts[2][2] * adj[2][1])
                adj[0][0] = (dt / 6.0) * lam0 + h * (parts[1][1] * adj[1][1])
                adj[0][1] = (dt / 6.0) * lam1 + h * (adj[1][0] + parts[1][2] * adj[1][1])
                c0 = lam0
                c1 = lam1
                for j in range(4):
                    a0 = adj[j][0]
                    a1 = adj[j][1]
                    c0 += parts[j][1] * a1
                    c1 += a0 + parts[j][2] * a1
                    dtheta[i, t, 0] += parts[j][4] * a1
                    dtheta[i, t, 1] += parts[j][5] * a1
                    dtheta[i, t, 2] += parts[j][6] * a1
                    dtheta[i, t, 3] += parts[j][7] * a1
                    dtheta[i, t, 4] += parts[j][8] * a1
    return dtheta_np


# ---------------------------------------------------------------------------
# batched rollout with additive neural residual (4 -> hid tanh -> 2)
# ---------------------------------------------------------------------------

cdef inline void _res_eval(double q, double qd, double tau, double v_norm,
                           double[:, ::1] w1, double[::1] b1,
                           double[:, ::1] w2, double[::1] b2,
                           Py_ssize_t hid, double* feat, double* h, double* r) nogil:
    cdef Py_ssize_t j
    cdef double pre
    feat[0] = sin(q)
    feat[1] = cos(q)
    feat[2] = qd / v_norm
    feat[3] = tau
    r[0] = b2[0]
    r[1] = b2[1]
    for j in range(hid):
        pre = feat[0] * w1[0, j] + feat[1] * w1[1, j] + feat[2] * w1[2, j] + feat[3] * w1[3, j] + b1[j]
        h[j] = tanh(pre)
        r[0] += h[j] * w2[j, 0]
        r[1] += h[j] * w2[j, 1]


def rollout_res_fwd(x0, taus, theta, w1, b1, w2, b2, double v_norm,
                    double dt, double gravity, double eps_c):
    cdef double[:, ::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(taus, dtype=np.float64)
    cdef double[:, :, ::1] thv = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, ::1] w1v = np.ascontiguousarray(w1, dtype=np.float64)
    cdef double[::1] b1v = np.ascontiguousarray(b1, dtype=np.float64)
    cdef double[:, ::1] w2v = np.ascontiguousarray(w2, dtype=np.float64)
    cdef double[::1] b2v = np.ascontiguousarray(b2, dtype=np.float64)
    cdef Py_ssize_t hid = w1v.shape[1]
    if hid > 128:
        raise ValueError("residual hidden size above 128 is not supported")
    cdef Py_ssize_t b = tv.shape[0], t_steps = tv.shape[1]
    states_np = np.empty((b, t_steps, 2))
    diverged_np = np.full(b, -1, dtype=np.int64)
    cdef double[:, :, ::1] states = states_np
    cdef long[::1] diverged = diverged_np
    cdef Py_ssize_t i, t
    cdef double q, qd, tau, m, l, cv, cc, gr, h, s
    cdef double k1q, k1v, k2q, k2v, k3q, k3v, k4q, k4v, qn, qdn
    cdef double feat[4]
    cdef double hbuf[128]
    cdef double r[2]
    with nogil:
        for i in range(b):
            q = x0v[i, 0]
            qd = x0v[i, 1]
            for t in range(t_steps):
                if diverged[i] >= 0:
                    states[i, t, 0] = q
                    states[i, t, 1] = qd
                    continue
                tau = tv[i, t]
                m = thv[i, t, 0]
                l = thv[i, t, 1]
                cv = thv[i, t, 2]
                cc = thv[i, t, 3]
                gr = thv[i, t, 4]
                h = dt / 2.0
                _res_eval(q, qd, tau, v_norm, w1v, b1v, w2v, b2v, hid, feat, hbuf, r)
                k1q = qd + r[0]
                k1v = _accel(q, qd, tau, m, l, cv, cc, gr, gravity, eps_c) + r[1]
                _res_eval(q + h * k1q, qd + h * k1v, tau, v_norm, w1v, b1v, w2v, b2v, hid, feat, hbuf, r)
                k2q = qd + h * k1v + r[0]
                k2v = _accel(q + h * k1q, qd + h * k1v, tau, m, l, cv, cc, gr, gravity, eps_c) + r[1]
                _res_eval(q + h * k2q, qd + h * k2v, tau, v_norm, w1v, b1v, w2v, b2v, hid, feat, hbuf, r)
                k3q = qd + h * k2v + r[0]
                k3v = _accel(q + h * k2q, qd + h * k2v, tau, m, l, cv, cc, gr, gravity, eps_c) + r[1]
                _res_eval(q + dt * k3q, qd + dt * k3v, tau, v_norm, w1v, b1v, w2v, b2v, hid, feat, hbuf, r)
                k4q = qd + dt * k3v + r[0]
                k4v = _accel(q + dt * k3q, qd + dt * k3v, tau, m, l, cv, cc, gr, gravity, eps_c) + r[1]
                s = dt / 6.0
                qn = q + s * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
                qdn = qd + s * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
                if not (isfinite(qn) and isfinite(qdn)) or fabs(qn) > STATE_LIMIT or fabs(qdn) > STATE_LIMIT:
                    diverged[i] = t
                else:
                    q = qn
                    qd = qdn
                states[i, t, 0] = q
                states[i, t, 1] = qd
    return states_np, diverged_np


def rollout_res_bwd(x0, taus, theta, w1, b1, w2, b2, double v_norm,
                    double dt, double gravity, double eps_c,
                    states, grad_states, diverged):
    cdef double[:, ::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(taus, dtype=np.float64)
    cdef double[:, :, ::1] thv = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, ::1] w1v = np.ascontiguousarray(w1, dtype=np.float64)
    cdef double[::1] b1v = np.ascontiguousarray(b1, dtype=np.float64)
    cdef double[:, ::1] w2v = np.ascontiguousarray(w2, dtype=np.float64)
    cdef double[::1] b2v = np.ascontiguousarray(b2, dtype=np.float64)
    cdef double[:, :, ::1] sv = np.ascontiguousarray(states, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(grad_states, dtype=np.float64)
    cdef long[::1] divv = np.ascontiguousarray(diverged, dtype=np.int64)
    cdef Py_ssize_t hid = w1v.shape[1]
    if hid > 128:
        raise ValueError("residual hidden size above 128 is not supported")
    cdef Py_ssize_t b = tv.shape[0], t_steps = tv.shape[1]
    dtheta_np = np.zeros((b, t_steps, 5))
    dw1_np = np.zeros((4, hid))
    db1_np = np.zeros(hid)
    dw2_np = np.zeros((hid, 2))
    db2_np = np.zeros(2)
    cdef double[:, :, ::1] dtheta = dtheta_np
    cdef double[:, ::1] dw1 = dw1_np
    cdef double[::1] db1 = db1_np
    cdef double[:, ::1] dw2 = dw2_np
    cdef double[::1] db2 = db2_np
    cdef Py_ssize_t i, t, j, j2, stage
    cdef double q, qd, tau, m, l, cv, cc, gr, h, lam0, lam1, c0, c1
    cdef double k1q, k1v, k2q, k2v, k3q, k3v
    cdef double pts[4][2]
    cdef double parts[4][9]
    cdef double adj[4][2]
    cdef double feats[4][4]
    cdef double hs[4][128]
    cdef double r[2]
    cdef double a0, a1, dhj, dprej
    with nogil:
        for i in range(b):
            if divv[i] >= 0:
                continue
            c0 = 0.0
            c1 = 0.0
            for t in range(t_steps - 1, -1, -1):
                if t > 0:
                    q = sv[i, t - 1, 0]
                    qd = sv[i, t - 1, 1]
                else:
                    q = x0v[i, 0]
                    qd = x0v[i, 1]
                lam0 = gv[i, t, 0] + c0
                lam1 = gv[i, t, 1] + c1
                tau = tv[i, t]
                m = thv[i, t, 0]
                l = thv[i, t, 1]
                cv = thv[i, t, 2]
                cc = thv[i, t, 3]
                gr = thv[i, t, 4]
                h = dt / 2.0
                # recompute the four stage points and cache NN activations
                pts[0][0] = q
                pts[0][1] = qd
                _accel_partials(q, qd, tau, m, l, cv, cc, gr, gravity, eps_c, parts[0])
                _res_eval(q, qd, tau, v_norm, w1v, b1v, w2v, b2v, hid, feats[0], hs[0], r)
                k1q = qd + r[0]
                k1v = parts[0][0] + r[1]
                pts[1][0] = q + h * k1q
                pts[1][1] = qd + h * k1v
                _accel_partials(pts[1][0], pts[1][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[1])
                _res_eval(pts[1][0], pts[1][1], tau, v_norm, w1v, b1v, w2v, b2v, hid, feats[1], hs[1], r)
                k2q = pts[1][1] + r[0]
                k2v = parts[1][0] + r[1]
                pts[2][0] = q + h * k2q
                pts[2][1] = qd + h * k2v
                _accel_partials(pts[2][0], pts[2][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[2])
                _res_eval(pts[2][0], pts[2][1], tau, v_norm, w1v, b1v, w2v, b2v, hid, feats[2], hs[2], r)
                k3q = pts[2][1] + r[0]
                k3v = parts[2][0] + r[1]
                pts[3][0] = q + dt * k3q
                pts[3][1] = qd + dt * k3v
                _accel_partials(pts[3][0], pts[3][1], tau, m, l, cv, cc, gr, gravity, eps_c, parts[3])
                _res_eval(pts[3][0], pts[3][1], tau, v_norm, w1v, b1v, w2v, b2v, hid, feats[3], hs[3], r)
                # stage adjoints with full Jacobian (nominal + residual)
                adj[3][0] = (dt / 6.0) * lam0
                adj[3][1] = (dt / 6.0) * lam1
                _stage_jt(parts[3], feats[3], hs[3], w1v, w2v, v_norm, hid, pts[3][0],
                          adj[3][0], adj[3][1], r)
                adj[2][0] = (2.0 * dt / 6.0) * lam0 + dt * r[0]
                adj[2][1] = (2.0 * dt / 6.0) * lam1 + dt * r[1]
                _stage_jt(parts[2], feats[2], hs[2], w1v, w2v, v_norm, hid, pts[2][0],
                          adj[2][0], adj[2][1], r)
                adj[1][0] = (2.0 * dt / 6.0) * lam0 + h * r[0]
                adj[1][1] = (2.0 * dt / 6.0) * lam1 + h * r[1]
                _stage_jt(parts[1], feats[1], hs[1], w1v, w2v, v_norm, hid, pts[1][0],
                          adj[1][0], adj[1][1], r)
                adj[0][0] = (dt / 6.0) * lam0 + h * r[0]
                adj[0][1] = (dt / 6.0) * lam1 + h * r[1]
                c0 = lam0
                c1 = lam1
                for stage in range(4):
                    a0 = adj[stage][0]
                    a1 = adj[stage][1]
                    _stage_jt(parts[stage], feats[stage], hs[stage], w1v, w2v, v_norm, hid,
                              pts[stage][0], a0, a1, r)
                    c0 += r[0]
                    c1 += r[1]
                    dtheta[i, t, 0] += parts[stage][4] * a1
                    dtheta[i, t, 1] += parts[stage][5] * a1
                    dtheta[i, t, 2] += parts[stage][6] * a1
                    dtheta[i, t, 3] += parts[stage][7] * a1
                    dtheta[i, t, 4] += parts[stage][8] * a1
                    db2[0] += a0
                    db2[1] += a1
                    for j in range(hid):
                        dw2[j, 0] += hs[stage][j] * a0
                        dw2[j, 1] += hs[stage][j] * a1
                        dhj = a0 * w2v[j, 0] + a1 * w2v[j, 1]
                        dprej = (1.0 - hs[stage][j] * hs[stage][j]) * dhj
                        db1[j] += dprej
                        for j2 in range(4):
                            dw1[j2, j] += feats[stage][j2] * dprej
    return dtheta_np, dw1_np, db1_np, dw2_np, db2_np


cdef inline void _stage_jt(double* parts, double* feat, double* hvals,
                           double[:, ::1] w1, double[:, ::1] w2, double v_norm,
                           Py_ssize_t hid, double q_stage,
                           double v0, double v1, double* out) nogil:
    # (J_nominal + J_residual)^T . v at one stage point
    cdef Py_ssize_t j
    cdef double dhj, dprej
    cdef double df0 = 0.0, df1 = 0.0, df2 = 0.0
    for j in range(hid):
        dhj = v0 * w2[j, 0] + v1 * w2[j, 1]
        dprej = (1.0 - hvals[j] * hvals[j]) * dhj
        df0 += w1[0, j] * dprej
        df1 += w1[1, j] * dprej
        df2 += w1[2, j] * dprej
    out[0] = parts[1] * v1 + df0 * cos(q_stage) - df1 * sin(q_stage)
    out[1] = v0 + parts[2] * v1 + df2 / v_norm


# ---------------------------------------------------------------------------
# MPC kernels: augmented state (q, q_dot, tau), control tau_dot
# ---------------------------------------------------------------------------

def aug_forward(x0, xs_ref, us_ref, kff, kfb, double alpha, theta,
                double dt, double gravity, double eps_c, double u_bound):
    cdef double[::1] x0v = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] xrv = np.ascontiguousarray(xs_ref, dtype=np.float64)
    cdef double[::1] urv = np.ascontiguousarray(us_ref, dtype=np.float64)
    cdef double[::1] kv = np.ascontiguousarray(kff, dtype=np.float64)
    cdef double[:, ::1] kbv = np.ascontiguousarray(kfb, dtype=np.float64)
    cdef double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = urv.shape[0]
    xs_np = np.zeros((n + 1, 3))
    us_np = np.zeros(n)
    cdef double[:, ::1] xs = xs_np
    cdef double[::1] us = us_np
    cdef double q = x0v[0], qd = x0v[1], tau = x0v[2]
    cdef Py_ssize_t k
    cdef double u, m, l, cv, cc, gr, h, s
    cdef double k1q, k1v, k2q, k2v, k3q, k3v, k4q, k4v
    cdef bint ok = True
    xs[0, 0] = q
    xs[0, 1] = qd
    xs[0, 2] = tau
    with nogil:
        for k in range(n):
            u = (urv[k] + alpha * kv[k]
                 + kbv[k, 0] * (q - xrv[k, 0])
                 + kbv[k, 1] * (qd - xrv[k, 1])
                 + kbv[k, 2] * (tau - xrv[k, 2]))
            if u > u_bound:
                u = u_bound
            elif u < -u_bound:
                u = -u_bound
            us[k] = u
            tau = tau + dt * u
            m = th[k, 0]
            l = th[k, 1]
            cv = th[k, 2]
            cc = th[k, 3]
            gr = th[k, 4]
            k1q = qd
            k1v = _accel(q, qd, tau, m, l, cv, cc, gr, gravity, eps_c)
            h = dt / 2.0
            k2q = qd + h * k1v
            k2v = _accel(q + h * k1q, qd + h * k1v, tau, m, l, cv, cc, gr, gravity, eps_c)
            k3q = qd + h * k2v
            k3v = _accel(q + h * k2q, qd + h * k2v, tau, m, l, cv, cc, gr, gravity, eps_c)
            k4q = qd + dt * k3v
            k4v = _accel(q + dt * k3q, qd + dt * k3v, tau, m, l, cv, cc, gr, gravity, eps_c)
            s = dt / 6.0
            q = q + s * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
            qd = qd + s * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            if not (isfinite(q) and isfinite(qd)) or fabs(qd) > STATE_LIMIT:
                ok = False
                break
            xs[k + 1, 0] = q
            xs[k + 1, 1] = qd
            xs[k + 1, 2] = tau
    return xs_np, us_np, bool(ok)


def ilqr_backward_3(a_mats, b_mats, lx, lu, lxx, luu, vx0, vxx0, double mu):
    """Riccati-style backward sweep for 3-state, scalar-control problems.

    Returns (ok, kff, kfb, dv1, dv2); ok is False when the regularized
    control Hessian loses positivity.
    """
    cdef double[:, :, ::1] av = np.ascontiguousarray(a_mats, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b_mats, dtype=np.float64)
    cdef double[:, ::1] lxv = np.ascontiguousarray(lx, dtype=np.float64)
    cdef double[::1] luv = np.ascontiguousarray(lu, dtype=np.float64)
    cdef double[:, :, ::1] lxxv = np.ascontiguousarray(lxx, dtype=np.float64)
    cdef double[::1] luuv = np.ascontiguousarray(luu, dtype=np.float64)
    cdef double[::1] vx0v = np.ascontiguousarray(vx0, dtype=np.float64)
    cdef double[:, ::1] vxx0v = np.ascontiguousarray(vxx0, dtype=np.float64)
    cdef Py_ssize_t n = luv.shape[0]
    kff_np = np.zeros(n)
    kfb_np = np.zeros((n, 3))
    cdef double[::1] kff = kff_np
    cdef double[:, ::1] kfb = kfb_np
    cdef double vx[3]
    cdef double vxx[3][3]
    cdef double qx[3]
    cdef double qux[3]
    cdef double qxx[3][3]
    cdef double va[3][3]
    cdef double vb[3]
    cdef double kb[3]
    cdef double qu, quu, kf, dv1, dv2, tmp
    cdef Py_ssize_t k, i, j, r
    cdef bint ok = True
    for i in range(3):
        vx[i] = vx0v[i]
        for j in range(3):
            vxx[i][j] = vxx0v[i, j]
    dv1 = 0.0
    dv2 = 0.0
    with nogil:
        for k in range(n - 1, -1, -1):
            # vb = Vxx . B ; va = Vxx . A
            for i in range(3):
                vb[i] = vxx[i][0] * bv[k, 0] + vxx[i][1] * bv[k, 1] + vxx[i][2] * bv[k, 2]
                for j in range(3):
                    va[i][j] = (vxx[i][0] * av[k, 0, j] + vxx[i][1] * av[k, 1, j]
                                + vxx[i][2] * av[k, 2, j])
            qu = luv[k] + bv[k, 0] * vx[0] + bv[k, 1] * vx[1] + bv[k, 2] * vx[2]
            quu = luuv[k] + bv[k, 0] * vb[0] + bv[k, 1] * vb[1] + bv[k, 2] * vb[2] + mu
            if quu <= 1e-12:
                ok = False
                break
            for j in range(3):
                qx[j] = lxv[k, j] + av[k, 0, j] * vx[0] + av[k, 1, j] * vx[1] + av[k, 2, j] * vx[2]
                qux[j] = bv[k, 0] * va[0][j] + bv[k, 1] * va[1][j] + bv[k, 2] * va[2][j]
                for i in range(3):
                    qxx[i][j] = (lxxv[k, i, j] + av[k, 0, i] * va[0][j]
                                 + av[k, 1, i] * va[1][j] + av[k, 2, i] * va[2][j])
            kf = -qu / quu
            for j in range(3):
                kb[j] = -qux[j] / quu
            kff[k] = kf
            for j in range(3):
                kfb[k, j] = kb[j]
            dv1 += kf * qu
            dv2 += 0.5 * kf * quu * kf
            for j in range(3):
                vx[j] = qx[j] + kb[j] * (quu * kf) + kb[j] * qu + qux[j] * kf
            for i in range(3):
                for j in range(3):
                    qxx[i][j] += kb[i] * kb[j] * quu + kb[i] * qux[j] + qux[i] * kb[j]
            for i in range(3):
                for j in range(3):
                    vxx[i][j] = 0.5 * (qxx[i][j] + qxx[j][i])
    return bool(ok), kff_np, kfb_np, dv1, dv2


def aug_linearize(xs, us, theta, double dt, double gravity, double eps_c):
    cdef double[:, ::1] xv = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(us, dtype=np.float64)
    cdef double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0]
    a_np = np.empty((n, 3, 3))
    b_np = np.empty((n, 3))
    cdef double[:, :, ::1] a_out = a_np
    cdef double[:, ::1] b_out = b_np
    cdef Py_ssize_t k, i
    cdef double q, qd, tau, taun, m, l, cv, cc, gr
    cdef double m00, m01, m10, m11, t0v, t1v
    cdef double sj0, sj1, sj2, sj3, st0, st1
    cdef double sq, sv, kq, kvv, w, c, s
    cdef double d00, d01, d10, d11, dt0, dt1
    cdef double parts[9]
    cdef double weights[4]
    cdef double coeffs[4]
    weights[0] = 1.0
    weights[1] = 2.0
    weights[2] = 2.0
    weights[3] = 1.0
    coeffs[0] = 0.5 * dt
    coeffs[1] = 0.5 * dt
    coeffs[2] = dt
    coeffs[3] = 0.0
    with nogil:
        for k in range(n):
            q = xv[k, 0]
            qd = xv[k, 1]
            tau = xv[k, 2]
            taun = tau + dt * uv[k]
            m = th[k, 0]
            l = th[k, 1]
            cv = th[k, 2]
            cc = th[k, 3]
            gr = th[k, 4]
            m00 = 1.0
            m01 = 0.0
            m10 = 0.0
            m11 = 1.0
            t0v = 0.0
            t1v = 0.0
            sj0 = 0.0
            sj1 = 0.0
            sj2 = 0.0
            sj3 = 0.0
            st0 = 0.0
            st1 = 0.0
            sq = q
            sv = qd
            for i in range(4):
                _accel_partials(sq, sv, taun, m, l, cv, cc, gr, gravity, eps_c, parts)
                kq = sv
                kvv = parts[0]
                d00 = m10
                d01 = m11
                d10 = parts[1] * m00 + parts[2] * m10
                d11 = parts[1] * m01 + parts[2] * m11
                dt0 = t1v
                dt1 = parts[1] * t0v + parts[2] * t1v + parts[3]
                w = weights[i]
                sj0 += w * d00
                sj1 += w * d01
                sj2 += w * d10
                sj3 += w * d11
                st0 += w * dt0
                st1 += w * dt1
                if i < 3:
                    c = coeffs[i]
                    m00 = 1.0 + c * d00
                    m01 = c * d01
                    m10 = c * d10
                    m11 = 1.0 + c * d11
                    t0v = c * dt0
                    t1v = c * dt1
                    sq = q + c * kq
                    sv = qd + c * kvv
            s = dt / 6.0
            a_out[k, 0, 0] = 1.0 + s * sj0
            a_out[k, 0, 1] = s * sj1
            a_out[k, 0, 2] = s * st0
            a_out[k, 1, 0] = s * sj2
            a_out[k, 1, 1] = 1.0 + s * sj3
            a_out[k, 1, 2] = s * st1
            a_out[k, 2, 0] = 0.0
            a_out[k, 2, 1] = 0.0
            a_out[k, 2, 2] = 1.0
            b_out[k, 0] = s * st0 * dt
            b_out[k, 1] = s * st1 * dt
            b_out[k, 2] = dt
    return a_np, b_np
