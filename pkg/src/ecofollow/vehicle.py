"""Point-mass ego vehicle: longitudinal dynamics, power demand and reward terms.

All functions here are pure and operate on plain floats; the batched /
compiled code paths re-implement the same formulas (see ``_core_py`` and
``_core.pyx``) and are parity-tested against this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


def _check_finite(**values: float) -> None:
    for name, val in values.items():
        if not math.isfinite(val):
            raise ValueError(f"non-finite value for {name}: {val!r}")


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of the ego vehicle and road.

    Defaults describe a nominal midsize sedan on a flat urban corridor.
    """

    mass: float = 1500.0          # kg
    rolling_coeff: float = 0.015  # unitless
    gravity: float = 9.81         # m/s^2
    grade: float = 0.0            # rad
    drag_coeff: float = 0.32      # unitless
    air_density: float = 1.2      # kg/m^3
    frontal_area: float = 2.3     # m^2
    u_min: float = -3.0           # m/s^2
    u_max: float = 2.5            # m/s^2
    v_min: float = 0.0            # m/s
    v_max: float = 35.0           # m/s

    def __post_init__(self):
        if self.mass <= 0 or self.air_density <= 0 or self.frontal_area <= 0:
            raise ValueError("mass, air_density and frontal_area must be positive")
        if self.drag_coeff < 0 or self.rolling_coeff < 0:
            raise ValueError("drag and rolling coefficients must be non-negative")
        if not (self.u_min < 0.0 < self.u_max):
            raise ValueError("control bounds must straddle zero")
        if not (0.0 <= self.v_min < self.v_max):
            raise ValueError("need 0 <= v_min < v_max")


@dataclass(frozen=True)
class EgoState:
    """Gap to the preceding vehicle, ego speed, and absolute position (logging)."""

    d_f: float
    v: float
    d_abs: float = 0.0


@dataclass(frozen=True)
class RewardWeights:
    """Weights of the reward terms plus the sigmoid slope and scaling knobs.

    ``normalizer`` divides every reward before it reaches a learner or
    solver; raw watt-scale targets destabilize small networks.  The same
    normalizer is shared by the learning controller and the MPC baseline so
    objectives stay comparable.
    """

    w1: float = 80.0            # accel penalty, W per (m/s^2)^2
    w2: float = 2000.0          # constraint penalty, W per m^2
    psi1: float = 800.0         # terminal gap penalty, W per m^2
    psi2: float = 2500.0        # terminal speed penalty, W per (m/s)^2
    sig_slope: float = 2.0      # sigmoid steepness alpha
    power_clamp: bool = False   # treat negative traction power as zero
    literal_lower_sigmoid: bool = False  # keep the violation-side sigmoid sign flipped
    normalizer: float = 1.0e4   # reward scale divisor (W)

    def __post_init__(self):
        if min(self.w1, self.w2, self.psi1, self.psi2) < 0:
            raise ValueError("reward weights must be non-negative")
        if self.sig_slope <= 0:
            raise ValueError("sigmoid slope must be positive")
        if self.normalizer <= 0:
            raise ValueError("normalizer must be positive")


@dataclass(frozen=True)
class ConstraintSpec:
    """Car-following distance corridor and headway targets."""

    d_min: float = 7.0   # m
    d_max: float = 100.0 # m
    h_s: float = 1.0     # s, safety headway in the lower bound
    h_t: float = 1.5     # s, terminal headway target

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")
        if self.h_s <= 0 or self.h_t <= 0:
            raise ValueError("headways must be positive")


def step_ego(params: VehicleParams, state: EgoState, u: float, dp_delta: float,
             dt: float) -> EgoState:
    """Advance gap and speed one step given the lead displacement ``dp_delta``."""
    _check_finite(u=u, dp_delta=dp_delta, dt=dt, d_f=state.d_f, v=state.v)
    if dt <= 0:
        raise ValueError("dt must be positive")
    d_f = dp_delta + state.d_f - dt * state.v
    v = min(max(state.v + dt * u, params.v_min), params.v_max)
    return EgoState(d_f=d_f, v=v, d_abs=state.d_abs + dt * state.v)


def power_demand(params: VehicleParams, v: float, u: float,
                 clamp: bool = False) -> float:
    """Traction power (W) from rolling, grade, drag and inertial forces."""
    _check_finite(v=v, u=u)
    if v < 0:
        raise ValueError("speed must be non-negative")
    force = (params.rolling_coeff * params.mass * params.gravity * math.cos(params.grade)
             + params.mass * params.gravity * math.sin(params.grade)
             + 0.5 * params.drag_coeff * params.air_density * params.frontal_area * v * v
             + params.mass * u)
    p = force * v
    return max(p, 0.0) if clamp else p


def running_reward(params: VehicleParams, weights: RewardWeights, v: float,
                   u: float) -> float:
    """Negative of power demand plus a quadratic accel penalty (unnormalized)."""
    p = power_demand(params, v, u, clamp=weights.power_clamp)
    return -(p + weights.w1 * u * u)


def sigmoid(x: float, slope: float) -> float:
    # split to avoid overflow in exp for large |x|
    t = slope * x
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def constraint_reward(weights: RewardWeights, spec: ConstraintSpec, d_f: float,
                      v: float) -> float:
    """Soft distance-corridor penalty, sigmoid-gated squared deviations.

    Upper bound activates when d_f exceeds d_max.  The lower bound margin is
    m = d_f - d_min - h_s*v; by default the gate activates on m < 0 (the
    violation side).  ``literal_lower_sigmoid`` flips the gate argument.
    """
    a = weights.sig_slope
    upper = d_f - spec.d_max
    m = d_f - spec.d_min - spec.h_s * v
    gate_arg = m if weights.literal_lower_sigmoid else -m
    r = weights.w2 * (sigmoid(upper, a) * upper * upper
                      + sigmoid(gate_arg, a) * m * m)
    return -r


def terminal_reward(weights: RewardWeights, spec: ConstraintSpec, d_f: float,
                    v: float, vp_terminal: float, k: int, n: int) -> float:
    """Terminal headway/speed penalty; active only at the horizon end k == n."""
    if k < n:
        return 0.0
    gap_target = spec.d_min + spec.h_t * vp_terminal
    return -(weights.psi1 * (d_f - gap_target) ** 2
             + weights.psi2 * (v - vp_terminal) ** 2)
