"""Augmented car-following environment: 15-state assembly, transitions and
their exact derivatives.

Two views are exposed over the same kernels:

* ``CarFollowModel`` - stateless, vector in / vector out.  This is the
  differentiable model handed to the MPC solver and to the learner's
  model-based actor update.  The dynamics are trajectory-independent; a
  specific lead trajectory enters only through the initial state.
* ``CarFollowEnv`` - a thin episodic wrapper (reset / step) for rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .transcription import (TranscriptionConfig, TrafficSubstate, init_substate,
                            active_interval)
from .vehicle import (ConstraintSpec, EgoState, RewardWeights, VehicleParams,
                      constraint_reward, power_demand, running_reward,
                      terminal_reward)


@dataclass(frozen=True)
class AugmentedState:
    """Ego pair (d_f, v) plus the transcribed-traffic substate, fixed order."""

    ego: EgoState
    traffic: TrafficSubstate

    def vector(self) -> np.ndarray:
        return np.concatenate(([self.ego.d_f, self.ego.v, float(self.traffic.s)],
                               self.traffic.blocks.ravel()))

    @staticmethod
    def from_vector(z: np.ndarray, config: TranscriptionConfig,
                    d_abs: float = 0.0) -> "AugmentedState":
        blocks = np.asarray(z[3:], dtype=float).reshape(config.n_intervals,
                                                        config.block_size)
        return AugmentedState(
            ego=EgoState(d_f=float(z[0]), v=float(z[1]), d_abs=d_abs),
            traffic=TrafficSubstate(s=int(round(z[2])), blocks=blocks))


@dataclass(frozen=True)
class EpisodeSpec:
    """Everything needed to start one fixed-horizon episode."""

    segments: tuple
    d_f0: float
    v0: float
    params: VehicleParams = field(default_factory=VehicleParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    config: TranscriptionConfig = field(default_factory=TranscriptionConfig)


class CarFollowModel:
    """Differentiable augmented dynamics + reward over flat state vectors."""

    def __init__(self, params: VehicleParams = None,
                 weights: RewardWeights = None,
                 constraints: ConstraintSpec = None,
                 config: TranscriptionConfig = None):
        self.params = params or VehicleParams()
        self.weights = weights or RewardWeights()
        self.constraints = constraints or ConstraintSpec()
        self.config = config or TranscriptionConfig()
        self._packed = kernels.pack_params(self.params, self.weights,
                                           self.constraints, self.config)
        self.dim = self.config.state_dim
        self.horizon = self.config.horizon
        self.u_min = self.params.u_min
        self.u_max = self.params.u_max
        # the integer step clock is excluded from every derivative surface
        self.diff_mask = np.ones(self.dim, dtype=bool)
        self.diff_mask[2] = False

    def step(self, z: np.ndarray, u: float):
        return kernels.step(np.asarray(z, dtype=float), float(u), self._packed)

    def step_jacobian(self, z: np.ndarray, u: float):
        return kernels.step_jacobian(np.asarray(z, dtype=float), float(u),
                                     self._packed)

    def rollout(self, z0: np.ndarray, us: np.ndarray):
        return kernels.rollout(np.asarray(z0, dtype=float),
                               np.asarray(us, dtype=float), self._packed)

    def adjoint(self, z0: np.ndarray, us: np.ndarray):
        return kernels.adjoint(np.asarray(z0, dtype=float),
                               np.asarray(us, dtype=float), self._packed)

    def initial_state(self, spec: EpisodeSpec) -> np.ndarray:
        sub = init_substate(spec.segments, self.config)
        return np.concatenate(([spec.d_f0, spec.v0, 0.0], sub.blocks.ravel()))

    def reconstruct_dp(self, z: np.ndarray, k: int) -> float:
        cfg = self.config
        i = active_interval(k, cfg)
        block = z[3 + i * cfg.block_size: 3 + (i + 1) * cfg.block_size]
        return float(block[-1] + np.sum(block[: cfg.poly_order - 1]))

    def reward_components(self, z: np.ndarray, u: float) -> dict:
        """Per-term reward breakdown of one transition (for traces/metrics)."""
        d_f, v = float(z[0]), float(z[1])
        u_cl = min(max(float(u), self.u_min), self.u_max)
        s = int(round(z[2]))
        z_next, _ = self.step(z, u)
        p_veh = power_demand(self.params, v, u_cl, clamp=self.weights.power_clamp)
        r = running_reward(self.params, self.weights, v, u_cl)
        r_g = constraint_reward(self.weights, self.constraints, d_f, v)
        r_psi = 0.0
        if s + 1 == self.horizon:
            dp_delta = float(z_next[0]) - d_f + self.config.dt * v
            vp = dp_delta / self.config.dt
            r_psi = terminal_reward(self.weights, self.constraints,
                                    float(z_next[0]), float(z_next[1]), vp,
                                    self.horizon, self.horizon)
        return {"P_veh": p_veh, "r": r, "r_g": r_g, "r_psi": r_psi,
                "total_scaled": (r + r_g + r_psi) / self.weights.normalizer}

    def violates(self, z: np.ndarray) -> bool:
        """Hard distance-corridor check g(x) > 0."""
        d_f, v = float(z[0]), float(z[1])
        c = self.constraints
        return d_f > c.d_max or d_f < c.d_min + c.h_s * v


class EpisodeFinished(RuntimeError):
    pass


class CarFollowEnv:
    """Episodic wrapper; one environment per rollout worker."""

    def __init__(self, model: CarFollowModel):
        self.model = model
        self._z = None

    @property
    def state(self) -> np.ndarray:
        return None if self._z is None else self._z.copy()

    def reset(self, spec: EpisodeSpec) -> np.ndarray:
        if len(spec.segments) != self.model.config.n_intervals:
            raise ValueError("segment count does not match transcription config")
        self._z = self.model.initial_state(spec)
        return self._z.copy()

    def step(self, u: float):
        if self._z is None:
            raise RuntimeError("reset before stepping")
        if int(round(self._z[2])) >= self.model.horizon:
            raise EpisodeFinished("episode horizon reached")
        z_next, reward = self.model.step(self._z, u)
        self._z = z_next
        done = int(round(z_next[2])) >= self.model.horizon
        return z_next.copy(), reward, done
