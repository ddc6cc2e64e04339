# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the augmented car-following system.

Formula-for-formula mirror of ``_core_py``; see that module for the state
and parameter layouts.  Parity between the two backends is enforced by the
test suite.
"""

from libc.math cimport cos, sin, exp, pow

import numpy as np
cimport numpy as cnp

cnp.import_array()

COMPILED = True

cdef enum:
    P_DT, P_NI, P_TC, P_NP, P_N, P_MASS, P_MU, P_G, P_THETA, P_CD, P_RHO, \
    P_AREA, P_UMIN, P_UMAX, P_VMIN, P_VMAX, P_DMIN, P_DMAX, P_HS, P_HT, \
    P_W1, P_W2, P_PSI1, P_PSI2, P_ALPHA, P_PCLAMP, P_LITERAL, P_NORM


cdef inline int _active(int k, int tc, int ni) nogil:
    cdef int i
    if k <= 0:
        return 0
    i = (k - 1) / tc
    if i > ni - 1:
        i = ni - 1
    return i


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef double _step_core(double[:] z, double u, double[:] p,
                       double[:] z_next,
                       double[:, :] A, double[:] b, double[:] rx,
                       double* ru, bint want_derivs) except? -1e308:
    """Shared transition + reward (+ derivative) body.  Returns the reward."""
    cdef double dt = p[P_DT]
    cdef int ni = <int> p[P_NI]
    cdef int tc = <int> p[P_TC]
    cdef int npow = <int> p[P_NP]
    cdef int n = <int> p[P_N]
    cdef int bs = npow + 1
    cdef int dim = 3 + ni * bs

    cdef int s = <int> (z[2] + 0.5)
    if s >= n:
        raise RuntimeError(f"episode finished: clock {s} >= horizon {n}")
    cdef int k = s
    cdef int a = _active(k, tc, ni)
    cdef int a2 = _active(k + 1, tc, ni)
    cdef double ratio = (s + 2.0) / (s + 1.0)

    cdef double d_f = z[0]
    cdef double v = z[1]
    cdef double u_cl = u
    if u_cl < p[P_UMIN]:
        u_cl = p[P_UMIN]
    if u_cl > p[P_UMAX]:
        u_cl = p[P_UMAX]
    cdef double gu = 1.0 if (p[P_UMIN] <= u <= p[P_UMAX]) else 0.0

    cdef int i, j, o, col, col_z1, col_q
    cdef double q, z1, hi_sum, hi_sum_next, q_next, rj
    cdef double dp_cur = 0.0
    cdef double dp_next = 0.0
    for i in range(ni):
        o = 3 + i * bs
        q = z[o + bs - 1]
        z1 = z[o + bs - 2]
        hi_sum = 0.0
        hi_sum_next = 0.0
        for j in range(npow, 1, -1):
            col = o + (npow - j)
            z_next[col] = z[col] * pow(ratio, j)
            hi_sum += z[col]
            hi_sum_next += z_next[col]
        z_next[o + bs - 2] = z1 * ratio
        q_next = q + z1 * (ratio - 1.0)
        z_next[o + bs - 1] = q_next
        if i == a:
            dp_cur = q + hi_sum
        if i == a2:
            dp_next = q_next + hi_sum_next

    cdef double delta = dp_next - dp_cur
    cdef double v_raw = v + dt * u_cl
    cdef double v_next = v_raw
    if v_next < p[P_VMIN]:
        v_next = p[P_VMIN]
    if v_next > p[P_VMAX]:
        v_next = p[P_VMAX]
    cdef double gv = 1.0 if (p[P_VMIN] <= v_raw <= p[P_VMAX]) else 0.0
    cdef double d_f_next = d_f + delta - dt * v

    z_next[0] = d_f_next
    z_next[1] = v_next
    z_next[2] = s + 1.0

    cdef double c0 = (p[P_MU] * p[P_MASS] * p[P_G] * cos(p[P_THETA])
                      + p[P_MASS] * p[P_G] * sin(p[P_THETA]))
    cdef double drag = 0.5 * p[P_CD] * p[P_RHO] * p[P_AREA]
    cdef double force = c0 + drag * v * v + p[P_MASS] * u_cl
    cdef double p_raw = force * v
    cdef double dp_dv = c0 + 3.0 * drag * v * v + p[P_MASS] * u_cl
    cdef double dp_du = p[P_MASS] * v * gu
    cdef double power = p_raw
    if p[P_PCLAMP] != 0.0 and p_raw < 0.0:
        power = 0.0
        dp_dv = 0.0
        dp_du = 0.0
    cdef double r_run = -(power + p[P_W1] * u_cl * u_cl)

    cdef double alpha = p[P_ALPHA]
    cdef double upper = d_f - p[P_DMAX]
    cdef double su = _sigmoid(alpha * upper)
    cdef double u_term = su * upper * upper
    cdef double du_dd = alpha * su * (1.0 - su) * upper * upper + 2.0 * upper * su
    cdef double m = d_f - p[P_DMIN] - p[P_HS] * v
    cdef double sign = 1.0 if p[P_LITERAL] != 0.0 else -1.0
    cdef double sl = _sigmoid(alpha * sign * m)
    cdef double l_term = sl * m * m
    cdef double dl_dm = sign * alpha * sl * (1.0 - sl) * m * m + 2.0 * m * sl
    cdef double r_g = -p[P_W2] * (u_term + l_term)

    cdef bint terminal = (k + 1 == n)
    cdef double r_psi = 0.0
    cdef double vp = 0.0, e_d = 0.0, e_v = 0.0
    if terminal:
        vp = delta / dt
        e_d = d_f_next - (p[P_DMIN] + p[P_HT] * vp)
        e_v = v_next - vp
        r_psi = -(p[P_PSI1] * e_d * e_d + p[P_PSI2] * e_v * e_v)

    cdef double norm = p[P_NORM]
    cdef double reward = (r_run + r_g + r_psi) / norm

    if not want_derivs:
        return reward

    cdef double in_a, in_a2, dd, dvp_c
    A[0, 0] = 1.0
    A[0, 1] = -dt
    A[1, 1] = gv
    A[2, 2] = 1.0
    b[1] = gv * dt * gu

    rx[0] = -p[P_W2] * (du_dd + dl_dm)
    rx[1] = -dp_dv - p[P_W2] * dl_dm * (-p[P_HS])
    ru[0] = -(dp_du + 2.0 * p[P_W1] * u_cl * gu)

    for i in range(ni):
        o = 3 + i * bs
        in_a = 1.0 if i == a else 0.0
        in_a2 = 1.0 if i == a2 else 0.0
        for j in range(npow, 1, -1):
            col = o + (npow - j)
            rj = pow(ratio, j)
            A[col, col] = rj
            dd = in_a2 * rj - in_a
            A[0, col] = dd
            if terminal:
                dvp_c = dd / dt
                rx[col] += (-2.0 * p[P_PSI1] * e_d * (dd - p[P_HT] * dvp_c)
                            - 2.0 * p[P_PSI2] * e_v * (-dvp_c))
        col_z1 = o + bs - 2
        col_q = o + bs - 1
        A[col_z1, col_z1] = ratio
        A[col_q, col_q] = 1.0
        A[col_q, col_z1] = ratio - 1.0
        dd = in_a2 * (ratio - 1.0)
        A[0, col_z1] = dd
        if terminal:
            dvp_c = dd / dt
            rx[col_z1] += (-2.0 * p[P_PSI1] * e_d * (dd - p[P_HT] * dvp_c)
                           - 2.0 * p[P_PSI2] * e_v * (-dvp_c))
        dd = in_a2 - in_a
        A[0, col_q] = dd
        if terminal:
            dvp_c = dd / dt
            rx[col_q] += (-2.0 * p[P_PSI1] * e_d * (dd - p[P_HT] * dvp_c)
                          - 2.0 * p[P_PSI2] * e_v * (-dvp_c))

    if terminal:
        # d_f / v / u channels of the terminal penalty
        rx[0] += -2.0 * p[P_PSI1] * e_d
        rx[1] += (-2.0 * p[P_PSI1] * e_d * (-dt)
                  - 2.0 * p[P_PSI2] * e_v * gv)
        ru[0] += -2.0 * p[P_PSI2] * e_v * gv * dt * gu

    for i in range(dim):
        rx[i] /= norm
    ru[0] /= norm
    return reward


def step(cnp.ndarray[double, ndim=1] z, double u, cnp.ndarray[double, ndim=1] p):
    cdef int dim = z.shape[0]
    cdef cnp.ndarray[double, ndim=1] z_next = np.empty(dim)
    cdef double ru = 0.0
    cdef double reward = _step_core(z, u, p, z_next, None, None, None, &ru, False)
    return z_next, reward


def step_jacobian(cnp.ndarray[double, ndim=1] z, double u,
                  cnp.ndarray[double, ndim=1] p):
    cdef int dim = z.shape[0]
    cdef cnp.ndarray[double, ndim=1] z_next = np.empty(dim)
    cdef cnp.ndarray[double, ndim=2] A = np.zeros((dim, dim))
    cdef cnp.ndarray[double, ndim=1] b = np.zeros(dim)
    cdef cnp.ndarray[double, ndim=1] rx = np.zeros(dim)
    cdef double ru = 0.0
    cdef double reward = _step_core(z, u, p, z_next, A, b, rx, &ru, True)
    return z_next, reward, A, b, rx, ru


def rollout(cnp.ndarray[double, ndim=1] z0, cnp.ndarray[double, ndim=1] us,
            cnp.ndarray[double, ndim=1] p):
    cdef int t = us.shape[0]
    cdef int dim = z0.shape[0]
    cdef cnp.ndarray[double, ndim=2] traj = np.empty((t + 1, dim))
    cdef cnp.ndarray[double, ndim=1] rewards = np.empty(t)
    cdef double ru = 0.0
    cdef int i
    traj[0, :] = z0
    for i in range(t):
        rewards[i] = _step_core(traj[i], us[i], p, traj[i + 1], None, None,
                                None, &ru, False)
    return traj, rewards


def adjoint(cnp.ndarray[double, ndim=1] z0, cnp.ndarray[double, ndim=1] us,
            cnp.ndarray[double, ndim=1] p):
    cdef int t = us.shape[0]
    cdef int dim = z0.shape[0]
    cdef cnp.ndarray[double, ndim=3] A = np.zeros((t, dim, dim))
    cdef cnp.ndarray[double, ndim=2] B = np.zeros((t, dim))
    cdef cnp.ndarray[double, ndim=2] RX = np.zeros((t, dim))
    cdef cnp.ndarray[double, ndim=1] ru = np.zeros(t)
    cdef cnp.ndarray[double, ndim=1] grad = np.empty(t)
    cdef cnp.ndarray[double, ndim=1] lam = np.zeros(dim)
    cdef cnp.ndarray[double, ndim=1] lam_next = np.zeros(dim)
    cdef cnp.ndarray[double, ndim=1] z = z0.copy()
    cdef cnp.ndarray[double, ndim=1] z_next = np.empty(dim)
    cdef double obj = 0.0
    cdef double ru_i = 0.0
    cdef int i, r, c
    cdef double acc

    for i in range(t):
        obj += _step_core(z, us[i], p, z_next, A[i], B[i], RX[i], &ru_i, True)
        ru[i] = ru_i
        z, z_next = z_next, z

    cdef double[:, :, :] Av = A
    cdef double[:, :] Bv = B
    cdef double[:, :] RXv = RX
    cdef double[:] lamv = lam
    cdef double[:] lam_nextv = lam_next
    for i in range(t - 1, -1, -1):
        acc = ru[i]
        for r in range(dim):
            acc += lamv[r] * Bv[i, r]
        grad[i] = acc
        for c in range(dim):
            acc = RXv[i, c]
            for r in range(dim):
                acc += Av[i, r, c] * lamv[r]
            lam_nextv[c] = acc
        lam_nextv[2] = 0.0
        for c in range(dim):
            lamv[c] = lam_nextv[c]
    return obj, grad
