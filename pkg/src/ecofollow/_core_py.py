"""Pure-python reference kernels for the augmented car-following system.

These four functions (step, step_jacobian, rollout, adjoint) are the hot
path of both the adjoint-MPC solver and the training loop.  A compiled
Cython twin (``_core``) implements the same formulas; ``kernels`` picks one
at import time and the test suite checks parity between the two.

State layout (dim = 3 + n_intervals * (poly_order + 1)):

    z = [d_f, v, s, | z_Np^0 .. z_1^0, q_0 | z_Np^1 .. | ... ]

Parameters travel as a flat float64 vector packed by ``pack_params``.
"""

from __future__ import annotations

import math

import numpy as np

# indices into the packed parameter vector
(P_DT, P_NI, P_TC, P_NP, P_N, P_MASS, P_MU, P_G, P_THETA, P_CD, P_RHO,
 P_AREA, P_UMIN, P_UMAX, P_VMIN, P_VMAX, P_DMIN, P_DMAX, P_HS, P_HT,
 P_W1, P_W2, P_PSI1, P_PSI2, P_ALPHA, P_PCLAMP, P_LITERAL, P_NORM) = range(28)

N_PARAMS = 28

COMPILED = False


def pack_params(params, weights, spec, config) -> np.ndarray:
    """Flatten VehicleParams / RewardWeights / ConstraintSpec / TranscriptionConfig."""
    p = np.zeros(N_PARAMS)
    p[P_DT] = config.dt
    p[P_NI] = config.n_intervals
    p[P_TC] = config.interval_steps
    p[P_NP] = config.poly_order
    p[P_N] = config.horizon
    p[P_MASS] = params.mass
    p[P_MU] = params.rolling_coeff
    p[P_G] = params.gravity
    p[P_THETA] = params.grade
    p[P_CD] = params.drag_coeff
    p[P_RHO] = params.air_density
    p[P_AREA] = params.frontal_area
    p[P_UMIN] = params.u_min
    p[P_UMAX] = params.u_max
    p[P_VMIN] = params.v_min
    p[P_VMAX] = params.v_max
    p[P_DMIN] = spec.d_min
    p[P_DMAX] = spec.d_max
    p[P_HS] = spec.h_s
    p[P_HT] = spec.h_t
    p[P_W1] = weights.w1
    p[P_W2] = weights.w2
    p[P_PSI1] = weights.psi1
    p[P_PSI2] = weights.psi2
    p[P_ALPHA] = weights.sig_slope
    p[P_PCLAMP] = 1.0 if weights.power_clamp else 0.0
    p[P_LITERAL] = 1.0 if weights.literal_lower_sigmoid else 0.0
    p[P_NORM] = weights.normalizer
    return p


def state_dim(p: np.ndarray) -> int:
    return 3 + int(p[P_NI]) * (int(p[P_NP]) + 1)


def _active(k: int, tc: int, ni: int) -> int:
    if k <= 0:
        return 0
    return min((k - 1) // tc, ni - 1)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def step(z: np.ndarray, u: float, p: np.ndarray):
    """One transition of the augmented system; returns (z_next, reward)."""
    z_next, reward, _, _, _, _ = _step_impl(z, u, p, want_derivs=False)
    return z_next, reward


def step_jacobian(z: np.ndarray, u: float, p: np.ndarray):
    """Transition plus exact derivatives (A = df/dz, b = df/du, rx, ru)."""
    return _step_impl(z, u, p, want_derivs=True)


def _step_impl(z, u, p, want_derivs):
    dt = p[P_DT]
    ni = int(p[P_NI])
    tc = int(p[P_TC])
    npow = int(p[P_NP])
    n = int(p[P_N])
    bs = npow + 1
    dim = 3 + ni * bs

    s = int(round(z[2]))
    if s >= n:
        raise RuntimeError(f"episode finished: clock {s} >= horizon {n}")
    k = s
    a = _active(k, tc, ni)
    a2 = _active(k + 1, tc, ni)
    ratio = (s + 2.0) / (s + 1.0)

    d_f = z[0]
    v = z[1]
    u_cl = min(max(u, p[P_UMIN]), p[P_UMAX])
    gu = 1.0 if p[P_UMIN] <= u <= p[P_UMAX] else 0.0

    # traffic blocks: current d_p, stepped blocks, next d_p
    z_next = np.empty(dim)
    dp_cur = 0.0
    dp_next = 0.0
    for i in range(ni):
        o = 3 + i * bs
        q = z[o + bs - 1]
        z1 = z[o + bs - 2]
        hi_sum = 0.0
        hi_sum_next = 0.0
        for j in range(npow, 1, -1):
            col = o + (npow - j)
            z_next[col] = z[col] * ratio ** j
            hi_sum += z[col]
            hi_sum_next += z_next[col]
        z_next[o + bs - 2] = z1 * ratio
        q_next = q + z1 * (ratio - 1.0)
        z_next[o + bs - 1] = q_next
        if i == a:
            dp_cur = q + hi_sum
        if i == a2:
            dp_next = q_next + hi_sum_next

    delta = dp_next - dp_cur
    v_raw = v + dt * u_cl
    v_next = min(max(v_raw, p[P_VMIN]), p[P_VMAX])
    gv = 1.0 if p[P_VMIN] <= v_raw <= p[P_VMAX] else 0.0
    d_f_next = d_f + delta - dt * v

    z_next[0] = d_f_next
    z_next[1] = v_next
    z_next[2] = s + 1.0

    # --- reward terms at (d_f, v, u_cl), terminal term at the next state ---
    c0 = (p[P_MU] * p[P_MASS] * p[P_G] * math.cos(p[P_THETA])
          + p[P_MASS] * p[P_G] * math.sin(p[P_THETA]))
    drag = 0.5 * p[P_CD] * p[P_RHO] * p[P_AREA]
    force = c0 + drag * v * v + p[P_MASS] * u_cl
    p_raw = force * v
    dp_dv = c0 + 3.0 * drag * v * v + p[P_MASS] * u_cl
    dp_du = p[P_MASS] * v * gu
    power = p_raw
    if p[P_PCLAMP] != 0.0 and p_raw < 0.0:
        power = 0.0
        dp_dv = 0.0
        dp_du = 0.0
    r_run = -(power + p[P_W1] * u_cl * u_cl)

    alpha = p[P_ALPHA]
    upper = d_f - p[P_DMAX]
    su = _sigmoid(alpha * upper)
    u_term = su * upper * upper
    du_dd = alpha * su * (1.0 - su) * upper * upper + 2.0 * upper * su
    m = d_f - p[P_DMIN] - p[P_HS] * v
    sign = 1.0 if p[P_LITERAL] != 0.0 else -1.0
    sl = _sigmoid(alpha * sign * m)
    l_term = sl * m * m
    dl_dm = sign * alpha * sl * (1.0 - sl) * m * m + 2.0 * m * sl
    r_g = -p[P_W2] * (u_term + l_term)

    terminal = (k + 1 == n)
    r_psi = 0.0
    if terminal:
        vp = delta / dt
        e_d = d_f_next - (p[P_DMIN] + p[P_HT] * vp)
        e_v = v_next - vp
        r_psi = -(p[P_PSI1] * e_d * e_d + p[P_PSI2] * e_v * e_v)

    norm = p[P_NORM]
    reward = (r_run + r_g + r_psi) / norm

    if not want_derivs:
        return z_next, reward, None, None, None, None

    A = np.zeros((dim, dim))
    b = np.zeros(dim)
    rx = np.zeros(dim)

    A[0, 0] = 1.0
    A[0, 1] = -dt
    A[1, 1] = gv
    A[2, 2] = 1.0
    b[1] = gv * dt * gu

    ddelta = np.zeros(dim)
    for i in range(ni):
        o = 3 + i * bs
        in_a = 1.0 if i == a else 0.0
        in_a2 = 1.0 if i == a2 else 0.0
        for j in range(npow, 1, -1):
            col = o + (npow - j)
            rj = ratio ** j
            A[col, col] = rj
            ddelta[col] = in_a2 * rj - in_a
        col_z1 = o + bs - 2
        col_q = o + bs - 1
        A[col_z1, col_z1] = ratio
        A[col_q, col_q] = 1.0
        A[col_q, col_z1] = ratio - 1.0
        ddelta[col_z1] = in_a2 * (ratio - 1.0)
        ddelta[col_q] = in_a2 - in_a
    A[0, 3:] = ddelta[3:]

    rx[0] = -p[P_W2] * (du_dd + dl_dm)
    rx[1] = -dp_dv - p[P_W2] * dl_dm * (-p[P_HS])
    ru = -(dp_du + 2.0 * p[P_W1] * u_cl * gu)

    if terminal:
        vp = delta / dt
        e_d = d_f_next - (p[P_DMIN] + p[P_HT] * vp)
        e_v = v_next - vp
        # d(d_f_next)/dz, dvp/dz, dv_next/dz as vectors over the state
        ddfn = ddelta.copy()
        ddfn[0] += 1.0
        ddfn[1] += -dt
        dvp = ddelta / dt
        dvn = np.zeros(dim)
        dvn[1] = gv
        rx += (-2.0 * p[P_PSI1] * e_d * (ddfn - p[P_HT] * dvp)
               - 2.0 * p[P_PSI2] * e_v * (dvn - dvp))
        ru += -2.0 * p[P_PSI2] * e_v * gv * dt * gu

    rx /= norm
    ru /= norm
    return z_next, reward, A, b, rx, ru


def rollout(z0: np.ndarray, us: np.ndarray, p: np.ndarray):
    """Forward simulation; returns (trajectory (T+1, dim), rewards (T,))."""
    t = len(us)
    traj = np.empty((t + 1, len(z0)))
    rewards = np.empty(t)
    traj[0] = z0
    for i in range(t):
        traj[i + 1], rewards[i] = step(traj[i], float(us[i]), p)
    return traj, rewards


def adjoint(z0: np.ndarray, us: np.ndarray, p: np.ndarray):
    """Objective and its gradient w.r.t. the controls via the costate sweep.

    The terminal penalty is folded into the final running reward, so the
    sweep starts from lambda_T = 0.  The clock coordinate is zeroed out of
    the costate at every step (it is an integer index, not a state that can
    be perturbed).
    """
    t = len(us)
    dim = len(z0)
    a_list = []
    b_list = []
    rx_list = []
    ru_list = np.empty(t)
    obj = 0.0
    z = z0
    for i in range(t):
        z, r, ai, bi, rxi, rui = step_jacobian(z, float(us[i]), p)
        obj += r
        a_list.append(ai)
        b_list.append(bi)
        rx_list.append(rxi)
        ru_list[i] = rui

    grad = np.empty(t)
    lam = np.zeros(dim)
    for i in range(t - 1, -1, -1):
        grad[i] = ru_list[i] + lam @ b_list[i]
        lam = rx_list[i] + a_list[i].T @ lam
        lam[2] = 0.0
    return obj, grad
