"""Piecewise-polynomial transcription of the predicted lead-vehicle positions.

A horizon of N = n_intervals * interval_steps steps is split into windows;
each window gets an independent least-squares polynomial in the basis
(dt*(k+1))^j.  The fitted coefficients seed a set of recursion states
(z_j, q per interval) whose one-step update never consults the
coefficients again, which is what makes the augmented system dynamics
trajectory-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vehicle import ConstraintSpec

# pseudo-inverse cutoff for rank-deficient interval fits
LSTSQ_RCOND = 1e-12


@dataclass(frozen=True)
class TranscriptionConfig:
    n_intervals: int = 3     # number of polynomial windows
    interval_steps: int = 10 # steps per window (T_c)
    poly_order: int = 3      # polynomial order per window
    dt: float = 0.5          # s

    def __post_init__(self):
        if self.n_intervals < 1 or self.poly_order < 1:
            raise ValueError("need n_intervals >= 1 and poly_order >= 1")
        if self.interval_steps < self.poly_order + 1:
            raise ValueError("interval_steps must be at least poly_order + 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        """Horizon steps N."""
        return self.n_intervals * self.interval_steps

    @property
    def block_size(self) -> int:
        """States per interval: z_{N_p} .. z_1 plus q."""
        return self.poly_order + 1

    @property
    def state_dim(self) -> int:
        """Dimension of the full augmented state vector."""
        return 3 + self.n_intervals * self.block_size


@dataclass(frozen=True)
class PolySegment:
    """Coefficients p_j (ascending powers) of one interval's polynomial."""

    coeffs: np.ndarray
    interval_index: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite polynomial coefficients")

    def eval_at_step(self, k: int, dt: float) -> float:
        """Direct polynomial evaluation at basis time dt*(k+1)."""
        t = dt * (k + 1)
        return float(np.polynomial.polynomial.polyval(t, self.coeffs))


@dataclass(frozen=True)
class TrafficSubstate:
    """Step clock s plus per-interval blocks [z_{N_p}, ..., z_1, q]."""

    s: int
    blocks: np.ndarray  # shape (n_intervals, poly_order + 1)

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("clock must be non-negative")


def active_interval(k: int, config: TranscriptionConfig) -> int:
    """Index of the polynomial window covering step k (boundary ties go low)."""
    if k <= 0:
        return 0
    i = (k - 1) // config.interval_steps
    return min(i, config.n_intervals - 1)


def activation(k: int, i: int, config: TranscriptionConfig) -> int:
    """Window indicator sigma(k - i*T_c) with the lower-interval tie-break."""
    if not (0 <= k <= config.horizon):
        raise ValueError(f"step {k} outside [0, {config.horizon}]")
    return int(i == active_interval(k, config))


def fit_segments(dp_samples, config: TranscriptionConfig):
    """Least-squares fit of the N+1 position samples, one fit per interval.

    Returns (segments, residuals) where residuals[i] is the max-abs fit
    error of interval i at its own sample points.
    """
    samples = np.asarray(dp_samples, dtype=float)
    n = config.horizon
    if samples.shape != (n + 1,):
        raise ValueError(f"expected {n + 1} samples, got {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise ValueError("non-finite position samples")

    segments = []
    residuals = np.zeros(config.n_intervals)
    for i in range(config.n_intervals):
        ks = np.arange(i * config.interval_steps,
                       (i + 1) * config.interval_steps + 1)
        t = config.dt * (ks + 1)
        basis = np.vander(t, config.poly_order + 1, increasing=True)
        coeffs, *_ = np.linalg.lstsq(basis, samples[ks], rcond=LSTSQ_RCOND)
        segments.append(PolySegment(coeffs=coeffs, interval_index=i))
        residuals[i] = np.max(np.abs(basis @ coeffs - samples[ks]))
    return segments, residuals


def init_substate(segments, config: TranscriptionConfig) -> TrafficSubstate:
    """Initial recursion states: z_j = p_j*dt^j, q = p_1*dt + p_0, s = 0."""
    if len(segments) != config.n_intervals:
        raise ValueError("segment count does not match config")
    blocks = np.zeros((config.n_intervals, config.block_size))
    for seg in segments:
        p = seg.coeffs
        i = seg.interval_index
        for j in range(config.poly_order, 0, -1):
            blocks[i, config.poly_order - j] = p[j] * config.dt ** j
        blocks[i, -1] = p[1] * config.dt + p[0]
    return TrafficSubstate(s=0, blocks=blocks)


def step_substate(state: TrafficSubstate, config: TranscriptionConfig) -> TrafficSubstate:
    """One-step update of (s, z, q); uses no polynomial coefficients."""
    s = state.s
    ratio = (s + 2.0) / (s + 1.0)
    blocks = state.blocks.copy()
    npow = config.poly_order
    for j in range(npow, 0, -1):
        blocks[:, npow - j] *= ratio ** j
    # q consumes the *previous* z_1
    blocks[:, -1] += state.blocks[:, npow - 1] * (ratio - 1.0)
    return TrafficSubstate(s=s + 1, blocks=blocks)


def reconstruct_dp(state: TrafficSubstate, k: int, config: TranscriptionConfig) -> float:
    """Lead position at step k from the recursion states alone.

    q already carries z_1 + p_0, so only z_j for j >= 2 are summed on top.
    """
    i = active_interval(k, config)
    block = state.blocks[i]
    return float(block[-1] + np.sum(block[: config.poly_order - 1]))


def terminal_lead_speed(state_at_n: TrafficSubstate, state_at_nm1: TrafficSubstate,
                        config: TranscriptionConfig) -> float:
    """Finite-difference lead speed at the horizon end, from recursion states."""
    n = config.horizon
    return (reconstruct_dp(state_at_n, n, config)
            - reconstruct_dp(state_at_nm1, n - 1, config)) / config.dt


def terminal_target(vp_terminal: float, spec: ConstraintSpec):
    """Terminal (gap, speed) target for the horizon end."""
    if vp_terminal < 0:
        raise ValueError("terminal lead speed must be non-negative")
    return (spec.d_min + spec.h_t * vp_terminal, vp_terminal)
