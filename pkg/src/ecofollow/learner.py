"""Learning controller: value critic trained on the Bellman residual plus a
costate (differentiated-Bellman) residual, and a model-based actor update.

The critic minimizes

    J_phi = || V(z_k) - (r_k + gamma * V_tgt(z_{k+1})) ||^2
    J_p   = || dV/dz|_k - (dr/dz_k + gamma * (df/dz_k)' dV_tgt/dz|_{k+1}) ||^2

with the combined objective J_phi + w_p * J_p; the costate residual runs
over the continuous coordinates only (the integer step clock is masked
out) and holds the target's value gradient fixed.  The actor maximizes
r(z, pi(z)) + gamma * V(f(z, pi(z))) through the known dynamics.

With w_p = 0 the physics pathway is never evaluated, so the update
sequence degenerates exactly to the generic actor-critic path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .nets import Mlp, adam_init, adam_step, forward, grad_input, grad_params, \
    grad_params_of_input_grad, init_mlp, polyak_update


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 1.0
    w_p: float = 0.1
    batch_size: int = 64
    replay_capacity: int = 60_000
    lr_critic: float = 1e-3
    lr_actor: float = 3e-4
    tau: float = 0.005            # target smoothing coefficient
    entropy_coeff: float = 0.0    # 0 = deterministic policy + external noise
    episodes: int = 1000
    seed: int = 0
    hidden: tuple = (256, 256, 256)
    warmup_steps: int = 1500      # uniform-action steps before learning starts
    noise_start: float = 0.8      # m/s^2 exploration stddev
    noise_end: float = 0.05
    noise_anneal_frac: float = 0.7
    updates_per_step: int = 1
    max_loss_skips: int = 200
    state_offset: np.ndarray = None  # None -> calibrated from warmup data
    state_scale: np.ndarray = None
    demo_episodes: int = 0        # planner-solved episodes seeding the buffer
    bc_iters: int = 30000         # supervised actor pretraining batches
    lr_bc: float = 1e-3
    probe_every: int = 0          # 0 = keep the final actor, no snapshots
    probe_episodes: int = 8
    refine_rounds: int = 6        # plan-refinement passes after cloning
    refine_jitter_runs: int = 5   # extra randomized-start runs per lead/round
    refine_margin: float = 2.5    # corridor tightening (m) for refined labels
    lr_refine: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.w_p < 0:
            raise ValueError("w_p must be non-negative")
        if self.replay_capacity <= 0 or self.batch_size <= 0:
            raise ValueError("capacities must be positive")


class ReplayBuffer:
    """FIFO ring buffer storing transitions with their analytic Jacobians."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.z = np.empty((capacity, dim))
        self.u = np.empty(capacity)
        self.r = np.empty(capacity)
        self.z_next = np.empty((capacity, dim))
        self.done = np.empty(capacity, dtype=bool)
        self.A = np.empty((capacity, dim, dim))
        self.rx = np.empty((capacity, dim))
        self.size = 0
        self._head = 0

    def push(self, z, u, r, z_next, done, A, rx):
        i = self._head
        self.z[i] = z
        self.u[i] = u
        self.r[i] = r
        self.z_next[i] = z_next
        self.done[i] = done
        self.A[i] = A
        self.rx[i] = rx
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, size=batch_size)
        return {"z": self.z[idx], "u": self.u[idx], "r": self.r[idx],
                "z_next": self.z_next[idx], "done": self.done[idx],
                "A": self.A[idx], "rx": self.rx[idx]}


@dataclass
class CriticEnsemble:
    online: Mlp
    target: Mlp
    twin: Mlp = None

    @staticmethod
    def create(dim, hidden, rng, input_offset=None, input_scale=None):
        online = init_mlp((dim, *hidden, 1), rng, input_offset=input_offset,
                          input_scale=input_scale)
        return CriticEnsemble(online=online, target=online.copy())


@dataclass
class ActorPolicy:
    """State-feedback policy squashed into [u_min, u_max] by tanh."""

    net: Mlp
    u_min: float
    u_max: float
    stochastic: bool = False
    log_std_min: float = -5.0
    log_std_max: float = 1.0

    @staticmethod
    def create(dim, hidden, u_min, u_max, rng, stochastic=False,
               input_offset=None, input_scale=None):
        net = init_mlp((dim, *hidden, 2 if stochastic else 1), rng,
                       input_offset=input_offset, input_scale=input_scale)
        return ActorPolicy(net=net, u_min=u_min, u_max=u_max,
                           stochastic=stochastic)

    def _squash(self, pre):
        mid = 0.5 * (self.u_max + self.u_min)
        half = 0.5 * (self.u_max - self.u_min)
        return mid + half * np.tanh(pre)

    def forward_batch(self, z):
        out, tape = forward(self.net, np.atleast_2d(z))
        if self.stochastic:
            log_std = np.clip(out[:, 1], self.log_std_min, self.log_std_max)
            return out[:, 0], log_std, tape
        return out[:, 0], None, tape


def act(actor: ActorPolicy, z, deterministic: bool = True,
        rng: np.random.Generator = None) -> float:
    """Policy output for one state; sampling needs an rng."""
    mean_pre, log_std, _ = actor.forward_batch(np.asarray(z, float)[None, :])
    pre = mean_pre[0]
    if not deterministic:
        if rng is None:
            raise ValueError("stochastic act needs an rng")
        std = np.exp(log_std[0]) if actor.stochastic else 0.0
        pre = pre + std * rng.standard_normal()
    return float(actor._squash(pre))


def td_residuals(v, r, v_next, gamma, done):
    """Bellman residuals V(z) - (r + gamma * V(z')); terminal bootstraps 0."""
    v_next = np.where(done, 0.0, v_next)
    return v - (r + gamma * v_next)


def costate_residuals(g, rx, A, g_next, gamma, done, mask):
    """Differentiated-Bellman residuals over the masked coordinates.

    g, g_next: (B, dim) value gradients at z and z'; A: (B, dim, dim)
    transition Jacobians; rx: (B, dim) reward gradients.
    """
    back = np.einsum("brc,br->bc", A, g_next)
    back[done] = 0.0
    res = (g - (rx + gamma * back)) * mask
    return res


def critic_loss(batch, critic: CriticEnsemble, gamma: float):
    """Mean squared Bellman residual and its parameter gradients."""
    if len(batch["r"]) == 0:
        raise ValueError("empty batch")
    v, tape = forward(critic.online, batch["z"])
    v_next, _ = forward(critic.target, batch["z_next"])
    delta = td_residuals(v[:, 0], batch["r"], v_next[:, 0], gamma, batch["done"])
    n = len(delta)
    loss = float(np.mean(delta ** 2))
    grads = grad_params(critic.online, tape, (2.0 / n) * delta[:, None])
    return loss, grads


def physics_loss(batch, critic: CriticEnsemble, gamma: float, mask):
    """Mean squared costate residual and its parameter gradients.

    The target network's value gradient is held fixed (same treatment as
    the bootstrapped value in the ordinary critic loss).
    """
    if "A" not in batch or batch["A"] is None:
        raise ValueError("batch carries no transition Jacobians")
    mask = np.asarray(mask, float)
    _, g = nets.value_and_grad(critic.online, batch["z"])
    _, g_next = nets.value_and_grad(critic.target, batch["z_next"])
    res = costate_residuals(g, batch["rx"], batch["A"], g_next, gamma,
                            batch["done"], mask)
    n = len(res)
    loss = float(np.mean(np.sum(res ** 2, axis=1)))
    grads = grad_params_of_input_grad(critic.online, batch["z"], (2.0 / n) * res)
    return loss, grads


def combine_grads(g1, g2, w2: float):
    return [(dw1 + w2 * dw2, db1 + w2 * db2)
            for (dw1, db1), (dw2, db2) in zip(g1, g2)]


def actor_objective(batch, actor: ActorPolicy, critic: CriticEnsemble,
                    model, gamma: float, entropy_coeff: float = 0.0,
                    rng: np.random.Generator = None):
    """Model-based policy objective mean[r(z, pi(z)) + gamma V(f(z, pi(z)))].

    Returns (objective value, parameter gradients of the NEGATIVE objective,
    so the result feeds an Adam minimizer directly).
    """
    z = batch["z"]
    n = len(z)
    mean_pre, log_std, tape = actor.forward_batch(z)
    half = 0.5 * (actor.u_max - actor.u_min)
    eps = None
    if actor.stochastic:
        if rng is None:
            raise ValueError("stochastic actor needs an rng")
        eps = rng.standard_normal(n)
        pre = mean_pre + np.exp(log_std) * eps
    else:
        pre = mean_pre
    tanh_pre = np.tanh(pre)
    u = 0.5 * (actor.u_max + actor.u_min) + half * tanh_pre

    clock = model_clock_index(model)
    z_next = np.empty_like(z)
    bvec = np.empty_like(z)
    ru_vec = np.empty(n)
    rewards = np.empty(n)
    for i in range(n):
        z_next[i], rewards[i], _, bvec[i], _, ru_vec[i] = \
            model.step_jacobian(z[i], float(u[i]))
    term = np.round(z_next[:, clock]).astype(int) >= model.horizon
    v_next, gv_next = nets.value_and_grad(critic.online, z_next)
    live = ~term
    dobj_du = ru_vec + gamma * live * np.sum(gv_next * bvec, axis=1)
    obj = float(np.mean(rewards + gamma * live * v_next))

    du_dpre = half * (1.0 - tanh_pre ** 2)
    up_mean = dobj_du * du_dpre / n
    if actor.stochastic:
        obj += entropy_coeff * float(np.mean(log_std))
        up_std = dobj_du * du_dpre * np.exp(log_std) * eps / n \
            + entropy_coeff / n
        upstream = np.stack([up_mean, up_std], axis=1)
    else:
        upstream = up_mean[:, None]
    grads = grad_params(actor.net, tape, -upstream)  # ascent via minimizer
    return obj, grads


def model_clock_index(model) -> int:
    return int(np.flatnonzero(~np.asarray(model.diff_mask, bool))[0])


@dataclass
class TrainResult:
    actor: ActorPolicy
    critic: CriticEnsemble
    log: list = field(default_factory=list)
    config: LearnerConfig = None


def _initial_state(model, spec):
    if hasattr(spec, "segments"):
        return model.initial_state(spec)
    return np.asarray(spec, float)


def _calibrate_scaling(states: np.ndarray):
    offset = states.mean(axis=0)
    scale = np.maximum(states.std(axis=0), 1e-3)
    return offset, scale


def collect_demonstrations(config: LearnerConfig, sampler, model, rng,
                           buf: ReplayBuffer):
    """Trajectory-optimization solutions on sampled episodes.

    The transitions land in the replay buffer (they carry real rewards and
    Jacobians like any other) and the visited (state, control) pairs come
    back for supervised actor pretraining.
    """
    from . import mpc as planner
    clock = model_clock_index(model)
    states, controls = [], []
    for _ in range(config.demo_episodes):
        z = _initial_state(model, sampler(rng))
        res = planner.solve(planner.OcpInstance(model, z))
        for u in res.controls:
            u = float(u)
            z_next, r, A, b, rx, ru = model.step_jacobian(z, u)
            done = int(round(z_next[clock])) >= model.horizon
            buf.push(z, u, r, z_next, done, A, rx)
            states.append(z)
            controls.append(u)
            z = z_next
    return np.asarray(states), np.asarray(controls)


def behavior_clone(actor: ActorPolicy, states, controls, iters: int,
                   lr: float, batch_size: int, rng) -> float:
    """Least-squares fit of the squashed policy output to reference controls.

    Regression happens in control space (not pre-squash space), so
    saturated reference controls stay well-posed.  Returns the last
    minibatch MSE.
    """
    opt = adam_init(actor.net)
    mid = 0.5 * (actor.u_max + actor.u_min)
    half = 0.5 * (actor.u_max - actor.u_min)
    n = len(states)
    mse = np.inf
    for _ in range(iters):
        idx = rng.integers(0, n, size=min(batch_size, n))
        mean_pre, _, tape = actor.forward_batch(states[idx])
        tanh_pre = np.tanh(mean_pre)
        err = mid + half * tanh_pre - controls[idx]
        mse = float(np.mean(err ** 2))
        up = (2.0 / len(idx)) * err * half * (1.0 - tanh_pre ** 2)
        if actor.stochastic:
            up = np.stack([up, np.zeros_like(up)], axis=1)
        else:
            up = up[:, None]
        adam_step(actor.net, grad_params(actor.net, tape, up), opt, lr)
    return mse


def _probe_return(actor: ActorPolicy, model, specs) -> float:
    """Total deterministic-policy return over a fixed episode set."""
    clock = model_clock_index(model)
    total = 0.0
    for spec in specs:
        z = _initial_state(model, spec)
        while int(round(z[clock])) < model.horizon:
            z, r = model.step(z, act(actor, z))
            total += r
    return total


def _snapshot_net(net: Mlp):
    return ([w.copy() for w in net.weights], [b.copy() for b in net.biases])


def _restore_net(net: Mlp, snap) -> None:
    ws, bs = snap
    for w, src in zip(net.weights, ws):
        w[...] = src
    for b, src in zip(net.biases, bs):
        b[...] = src


def train(config: LearnerConfig, sampler, model,
          actor_init: ActorPolicy = None) -> TrainResult:
    """Episodic training loop; fully deterministic for a fixed seed/sampler.

    ``sampler(rng)`` yields either an EpisodeSpec or an initial state
    vector for the given differentiable model.  ``actor_init`` starts the
    loop from a pretrained policy instead of a fresh one.
    """
    rng = np.random.default_rng(config.seed)
    dim = model.dim
    horizon = model.horizon
    clock = model_clock_index(model)
    mask = np.asarray(model.diff_mask, float)
    buf = ReplayBuffer(config.replay_capacity, dim)

    # --- warmup: uniform random actions to fill the buffer and calibrate ---
    warmup_states = []
    while buf.size < config.warmup_steps:
        z = _initial_state(model, sampler(rng))
        while int(round(z[clock])) < horizon:
            u = float(rng.uniform(model.u_min, model.u_max))
            z_next, r, A, b, rx, ru = model.step_jacobian(z, u)
            done = int(round(z_next[clock])) >= horizon
            buf.push(z, u, r, z_next, done, A, rx)
            warmup_states.append(z)
            z = z_next

    if config.state_offset is not None:
        offset = np.asarray(config.state_offset, float)
        scale = np.asarray(config.state_scale, float)
    else:
        offset, scale = _calibrate_scaling(np.asarray(warmup_states))

    critic = CriticEnsemble.create(dim, config.hidden, rng,
                                   input_offset=offset, input_scale=scale)
    stochastic = config.entropy_coeff > 0.0
    if actor_init is not None:
        actor = actor_init
        stochastic = actor.stochastic
    else:
        actor = ActorPolicy.create(dim, config.hidden, model.u_min,
                                   model.u_max, rng, stochastic=stochastic,
                                   input_offset=offset, input_scale=scale)
    opt_c = adam_init(critic.online)
    opt_a = adam_init(actor.net)

    if config.demo_episodes > 0:
        demo_z, demo_u = collect_demonstrations(config, sampler, model, rng,
                                                buf)
        if config.bc_iters > 0:
            behavior_clone(actor, demo_z, demo_u, config.bc_iters,
                           config.lr_bc, config.batch_size, rng)

    probe_specs = None
    best_score = -np.inf
    best_actor = None
    if config.probe_every > 0:
        probe_specs = [sampler(rng) for _ in range(config.probe_episodes)]
        best_score = _probe_return(actor, model, probe_specs)
        best_actor = _snapshot_net(actor.net)

    log = []
    skips = 0
    anneal = max(1, int(config.episodes * config.noise_anneal_frac))
    for episode in range(config.episodes):
        frac = min(1.0, episode / anneal)
        noise_std = config.noise_start + frac * (config.noise_end - config.noise_start)
        z = _initial_state(model, sampler(rng))
        ep_return = 0.0
        ep_violations = 0
        ep_jphi = []
        ep_jp = []
        done = False
        while not done:
            if stochastic:
                u = act(actor, z, deterministic=False, rng=rng)
            else:
                u = act(actor, z) + noise_std * rng.standard_normal()
            u = float(np.clip(u, model.u_min, model.u_max))
            z_next, r, A, b, rx, ru = model.step_jacobian(z, u)
            done = int(round(z_next[clock])) >= horizon
            buf.push(z, u, r, z_next, done, A, rx)
            ep_return += r
            if hasattr(model, "violates") and model.violates(z_next):
                ep_violations += 1
            z = z_next

            for _ in range(config.updates_per_step):
                batch = buf.sample(config.batch_size, rng)
                jphi, gphi = critic_loss(batch, critic, config.gamma)
                if config.w_p > 0.0:
                    jp, gp = physics_loss(batch, critic, config.gamma, mask)
                    gphi = combine_grads(gphi, gp, config.w_p)
                else:
                    jp = 0.0
                if not adam_step(critic.online, gphi, opt_c, config.lr_critic):
                    skips += 1
                polyak_update(critic.target, critic.online, config.tau)
                aobj, ga = actor_objective(batch, actor, critic, model,
                                           config.gamma,
                                           config.entropy_coeff, rng)
                if not adam_step(actor.net, ga, opt_a, config.lr_actor):
                    skips += 1
                ep_jphi.append(jphi)
                ep_jp.append(jp)
                if skips > config.max_loss_skips:
                    raise RuntimeError(
                        f"aborting: {skips} non-finite update steps")
        log.append({"episode": episode,
                    "return": ep_return,
                    "j_phi": float(np.mean(ep_jphi)) if ep_jphi else None,
                    "j_p": float(np.mean(ep_jp)) if ep_jp else None,
                    "violations": ep_violations,
                    "noise_std": noise_std,
                    "skipped_updates": skips})
        if probe_specs and (episode + 1) % config.probe_every == 0:
            score = _probe_return(actor, model, probe_specs)
            if score > best_score:
                best_score = score
                best_actor = _snapshot_net(actor.net)
    if probe_specs and _probe_return(actor, model, probe_specs) < best_score:
        _restore_net(actor.net, best_actor)
    return TrainResult(actor=actor, critic=critic, log=log, config=config)


def write_log(log, path) -> None:
    """Line-delimited JSON training log."""
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def save_checkpoint(path, actor: ActorPolicy, critic: CriticEnsemble = None) -> None:
    """Policy (and optionally critic) in one self-describing npz file."""
    import io

    meta = {"version": nets.CHECKPOINT_VERSION,
            "u_min": actor.u_min, "u_max": actor.u_max,
            "stochastic": actor.stochastic,
            "actor_sizes": list(actor.net.sizes),
            "has_critic": critic is not None}
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}

    def pack(prefix, net):
        arrays[f"{prefix}_offset"] = net.input_offset
        arrays[f"{prefix}_scale"] = net.input_scale
        arrays[f"{prefix}_sizes"] = np.asarray(net.sizes)
        for li in range(net.n_layers):
            arrays[f"{prefix}_w{li}"] = net.weights[li]
            arrays[f"{prefix}_b{li}"] = net.biases[li]

    pack("actor", actor.net)
    if critic is not None:
        pack("critic", critic.online)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (ActorPolicy, CriticEnsemble or None)."""
    def unpack(data, prefix):
        sizes = tuple(int(s) for s in data[f"{prefix}_sizes"])
        n_layers = len(sizes) - 1
        return Mlp(sizes=sizes,
                   weights=[data[f"{prefix}_w{li}"].copy()
                            for li in range(n_layers)],
                   biases=[data[f"{prefix}_b{li}"].copy()
                           for li in range(n_layers)],
                   input_offset=data[f"{prefix}_offset"].copy(),
                   input_scale=data[f"{prefix}_scale"].copy())

    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != nets.CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint version: {meta.get('version')}")
            actor = ActorPolicy(net=unpack(data, "actor"),
                                u_min=float(meta["u_min"]),
                                u_max=float(meta["u_max"]),
                                stochastic=bool(meta["stochastic"]))
            critic = None
            if meta.get("has_critic"):
                online = unpack(data, "critic")
                critic = CriticEnsemble(online=online, target=online.copy())
    except (KeyError, OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    return actor, critic
