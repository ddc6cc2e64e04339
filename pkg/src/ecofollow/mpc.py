"""Model-based baseline: single-shooting with costate (adjoint) gradients
and projected gradient ascent on the box-constrained controls.

The objective is literally the summed environment reward, so the baseline
and the learned controller optimize the same quantity through the same
transition code.  The backward sweep

    lambda_k = dr/dx_k + (df/dx_k)' lambda_{k+1}
    dJ/du_k  = dr/du_k + lambda_{k+1}' (df/du_k)

is the discrete optimality system; the terminal penalty is folded into the
final running reward, so lambda_N = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    grad_tol: float = 1e-6       # sup-norm of the projected gradient, scaled units
    rel_improve_tol: float = 1e-10
    backtrack: float = 0.5
    step_init: float = 1.0
    step_max: float = 1e3
    armijo_c1: float = 1e-4
    max_backtracks: int = 40


@dataclass
class OcpInstance:
    """One fixed-horizon optimal control problem over a differentiable model."""

    model: object
    z0: np.ndarray
    horizon: int = None

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, float)
        if self.horizon is None:
            self.horizon = self.model.horizon - int(round(self.z0[self._clock_index()]))

    def _clock_index(self):
        mask = getattr(self.model, "diff_mask", None)
        if mask is None:
            return -1
        return int(np.flatnonzero(~mask)[0])


@dataclass
class SolveResult:
    controls: np.ndarray
    objective: float
    iterations: int
    converged: bool
    degraded: bool = False
    costates: np.ndarray = None


def rollout(instance: OcpInstance, controls) -> tuple:
    """Forward simulation; returns (state trajectory, total objective)."""
    us = np.asarray(controls, float)
    if len(us) != instance.horizon:
        raise ValueError(f"need {instance.horizon} controls, got {len(us)}")
    model = instance.model
    if hasattr(model, "rollout"):
        traj, rewards = model.rollout(instance.z0, us)
        return traj, float(np.sum(rewards))
    z = instance.z0
    traj = [z]
    total = 0.0
    for u in us:
        z, r = model.step(z, float(u))
        traj.append(z)
        total += r
    return np.asarray(traj), total


def adjoint_gradient(instance: OcpInstance, controls):
    """Objective and dJ/du via the backward costate sweep."""
    us = np.asarray(controls, float)
    model = instance.model
    if hasattr(model, "adjoint"):
        obj, grad = model.adjoint(instance.z0, us)
        return float(obj), grad
    mask = np.asarray(model.diff_mask, bool)
    a_list, b_list, rx_list, ru_list = [], [], [], []
    z = instance.z0
    obj = 0.0
    for u in us:
        z, r, A, b, rx, ru = model.step_jacobian(z, float(u))
        obj += r
        a_list.append(A)
        b_list.append(b)
        rx_list.append(rx)
        ru_list.append(ru)
    t = len(us)
    grad = np.empty(t)
    lam = np.zeros(len(instance.z0))
    for i in range(t - 1, -1, -1):
        grad[i] = ru_list[i] + lam @ b_list[i]
        lam = rx_list[i] + a_list[i].T @ lam
        lam[~mask] = 0.0
    return float(obj), grad


def costate_trajectory(instance: OcpInstance, controls) -> np.ndarray:
    """Full lambda_k sequence, k = 0..N (lambda_N = 0 by construction)."""
    us = np.asarray(controls, float)
    model = instance.model
    mask = np.asarray(model.diff_mask, bool)
    jacs = []
    z = instance.z0
    for u in us:
        z, r, A, b, rx, ru = model.step_jacobian(z, float(u))
        jacs.append((A, rx))
    lams = np.zeros((len(us) + 1, len(instance.z0)))
    for i in range(len(us) - 1, -1, -1):
        A, rx = jacs[i]
        lam = rx + A.T @ lams[i + 1]
        lam[~mask] = 0.0
        lams[i] = lam
    return lams


def _project(us, lo, hi):
    return np.minimum(np.maximum(us, lo), hi)


def solve(instance: OcpInstance, init_controls=None,
          config: SolverConfig = None) -> SolveResult:
    """Projected gradient ascent with backtracking line search.

    Monotone in the objective; terminates on the projected-gradient norm,
    on vanishing relative improvement, or at the iteration cap.  A failed
    line search returns the best iterate with ``degraded`` set.
    """
    cfg = config or SolverConfig()
    model = instance.model
    lo, hi = model.u_min, model.u_max
    if init_controls is None:
        us = np.zeros(instance.horizon)
    else:
        us = _project(np.asarray(init_controls, float).copy(), lo, hi)

    obj, grad = adjoint_gradient(instance, us)
    best_us, best_obj = us.copy(), obj
    alpha = cfg.step_init
    degraded = False
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        pg = _project(us + grad, lo, hi) - us
        if np.max(np.abs(pg)) <= cfg.grad_tol:
            return SolveResult(best_us, best_obj, iters, True, degraded)
        accepted = False
        a = alpha
        for _ in range(cfg.max_backtracks):
            cand = _project(us + a * grad, lo, hi)
            _, cand_obj = rollout(instance, cand)
            # Armijo condition along the projected direction
            if cand_obj >= obj + cfg.armijo_c1 * float(grad @ (cand - us)):
                accepted = True
                break
            a *= cfg.backtrack
        if not accepted:
            degraded = True
            break
        improve = cand_obj - obj
        us, obj = cand, cand_obj
        if obj > best_obj:
            best_us, best_obj = us.copy(), obj
        alpha = min(a * 2.0, cfg.step_max)
        obj, grad = adjoint_gradient(instance, us)
        if improve <= cfg.rel_improve_tol * (1.0 + abs(obj)):
            return SolveResult(best_us, best_obj, iters, True, degraded)
    return SolveResult(best_us, best_obj, iters, False, degraded)


def shifted_warm_start(prev_controls: np.ndarray, shift: int) -> np.ndarray:
    """Warm start for the next RHC cycle: shift and pad with the last control."""
    us = np.asarray(prev_controls, float)
    out = np.empty_like(us)
    out[: len(us) - shift] = us[shift:]
    out[len(us) - shift:] = us[-1]
    return out
