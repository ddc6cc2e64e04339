"""Discrete finite-horizon linear-quadratic toy system.

Used as an analytically solvable instance: the backward Riccati recursion
provides exact optimal cost, feedback gains, and value-function gradients
against which the MPC solver and both critic losses are checked.  The
state carries an integer clock as its last coordinate, mirroring the
augmented car-following system's layout conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def riccati(A, B, Q, R, Qf, n_steps):
    """Finite-horizon Riccati recursion for reward -(x'Qx + u'Ru).

    Returns (P, K): P[k] with V_k(x) = -x' P[k] x for k = 0..N, and the
    feedback gains K[k] with u*_k = -K[k] x_k for k = 0..N-1.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    Q = np.asarray(Q, float)
    R = np.atleast_2d(np.asarray(R, float))
    P = [None] * (n_steps + 1)
    K = [None] * n_steps
    P[n_steps] = np.asarray(Qf, float)
    for k in range(n_steps - 1, -1, -1):
        pn = P[k + 1]
        gain = np.linalg.solve(R + B.T @ pn @ B, B.T @ pn @ A)
        K[k] = gain
        P[k] = Q + A.T @ pn @ A - A.T @ pn @ B @ gain
        P[k] = 0.5 * (P[k] + P[k].T)
    return P, K


@dataclass
class LqModel:
    """Differentiable-model protocol over x' = Ax + Bu with quadratic reward.

    State layout: [x_1 .. x_n, k].  The terminal cost -x' Qf x is folded
    into the reward of the final transition, so adjoint sweeps start from a
    zero costate exactly as with the car-following model.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: float
    Qf: np.ndarray
    horizon: int
    u_min: float = -np.inf
    u_max: float = np.inf

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        self.B = np.asarray(self.B, float).reshape(-1)
        self.Q = np.asarray(self.Q, float)
        self.Qf = np.asarray(self.Qf, float)
        self.n = self.A.shape[0]
        self.dim = self.n + 1
        self.diff_mask = np.ones(self.dim, dtype=bool)
        self.diff_mask[-1] = False

    def step(self, z, u):
        z = np.asarray(z, float)
        x, k = z[:-1], int(round(z[-1]))
        if k >= self.horizon:
            raise RuntimeError(f"episode finished: clock {k} >= {self.horizon}")
        u = min(max(float(u), self.u_min), self.u_max)
        x_next = self.A @ x + self.B * u
        r = -(x @ self.Q @ x + self.R * u * u)
        if k + 1 == self.horizon:
            r -= x_next @ self.Qf @ x_next
        return np.concatenate([x_next, [k + 1.0]]), float(r)

    def step_jacobian(self, z, u):
        z = np.asarray(z, float)
        x, k = z[:-1], int(round(z[-1]))
        z_next, r = self.step(z, u)
        u = min(max(float(u), self.u_min), self.u_max)
        dim = self.dim
        Afull = np.zeros((dim, dim))
        Afull[:-1, :-1] = self.A
        Afull[-1, -1] = 1.0
        b = np.zeros(dim)
        b[:-1] = self.B
        rx = np.zeros(dim)
        rx[:-1] = -2.0 * self.Q @ x
        ru = -2.0 * self.R * u
        if k + 1 == self.horizon:
            x_next = z_next[:-1]
            gterm = -2.0 * self.Qf @ x_next
            rx[:-1] += self.A.T @ gterm
            ru += self.B @ gterm
        return z_next, r, Afull, b, rx, ru

    def optimal_cost(self, x0):
        P, _ = riccati(self.A, self.B, self.Q, self.R, self.Qf, self.horizon)
        x0 = np.asarray(x0, float)
        return float(-(x0 @ P[0] @ x0))

    def value_grad(self, z):
        """Exact value-function gradient (costate) at augmented state z."""
        P, _ = riccati(self.A, self.B, self.Q, self.R, self.Qf, self.horizon)
        x, k = np.asarray(z, float)[:-1], int(round(z[-1]))
        g = np.zeros(self.dim)
        g[:-1] = -2.0 * P[k] @ x
        return g


def default_lq(horizon: int = 30) -> LqModel:
    """Small 2-state, 1-control instance used across the test suite."""
    return LqModel(A=np.array([[1.0, 0.1], [-0.05, 0.97]]),
                   B=np.array([0.0, 0.1]),
                   Q=np.diag([1.0, 0.1]),
                   R=0.5,
                   Qf=np.diag([3.0, 1.0]),
                   horizon=horizon,
                   u_min=-100.0, u_max=100.0)
