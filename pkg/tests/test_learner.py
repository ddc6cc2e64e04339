"""Learner checks: residual formulas against hand values and the exact
linear-quadratic value function, the replay buffer, and a short end-to-end
training run on the LQ model."""

import json

import numpy as np
import pytest

from ecofollow import mpc
from ecofollow.learner import (ActorPolicy, CriticEnsemble, LearnerConfig,
                               ReplayBuffer, act, actor_objective,
                               combine_grads, costate_residuals, critic_loss,
                               load_checkpoint, model_clock_index,
                               physics_loss, save_checkpoint, td_residuals,
                               train, write_log)
from ecofollow.lq import default_lq, riccati


@pytest.fixture
def lq():
    return default_lq()


def lq_batch(lq, rng, n=48):
    """Random transitions of the LQ model with Jacobians attached."""
    P, K = riccati(lq.A, lq.B, lq.Q, lq.R, lq.Qf, lq.horizon)
    zs, us, rs, zn, done, As, rxs = [], [], [], [], [], [], []
    for _ in range(n):
        k = int(rng.integers(0, lq.horizon))
        z = np.concatenate([rng.standard_normal(2), [float(k)]])
        u = float(rng.standard_normal())
        z_next, r, A, b, rx, ru = lq.step_jacobian(z, u)
        zs.append(z); us.append(u); rs.append(r); zn.append(z_next)
        done.append(k + 1 >= lq.horizon); As.append(A); rxs.append(rx)
    return {"z": np.array(zs), "u": np.array(us), "r": np.array(rs),
            "z_next": np.array(zn), "done": np.array(done),
            "A": np.array(As), "rx": np.array(rxs)}, P


def exact_values(lq, P, z_batch):
    v = np.empty(len(z_batch))
    g = np.zeros((len(z_batch), 3))
    for i, z in enumerate(z_batch):
        x, k = z[:2], int(round(z[2]))
        v[i] = -(x @ P[k] @ x)
        g[i, :2] = -2.0 * P[k] @ x
    return v, g


class TestResiduals:
    def test_td_residual_hand_values(self):
        delta = td_residuals(np.array([5.0]), np.array([1.0]),
                             np.array([3.0]), 0.9, np.array([False]))
        assert delta[0] == pytest.approx(5.0 - (1.0 + 2.7))

    def test_td_terminal_bootstraps_zero(self):
        delta = td_residuals(np.array([5.0]), np.array([1.0]),
                             np.array([99.0]), 0.9, np.array([True]))
        assert delta[0] == pytest.approx(4.0)

    def test_exact_lq_value_zeroes_both_residuals(self, lq):
        # the Riccati value function solves the Bellman equation ALONG THE
        # OPTIMAL CONTROL; for arbitrary controls the residual is the gap
        # to optimality, so build transitions with the optimal feedback
        rng = np.random.default_rng(0)
        P, K = riccati(lq.A, lq.B, lq.Q, lq.R, lq.Qf, lq.horizon)
        zs, rs, zn, done, As, rxs = [], [], [], [], [], []
        for _ in range(64):
            k = int(rng.integers(0, lq.horizon))
            z = np.concatenate([rng.standard_normal(2), [float(k)]])
            u = float(-K[k] @ z[:2])
            z_next, r, A, b, rx, ru = lq.step_jacobian(z, u)
            # the costate recursion needs the closed-loop Jacobian
            # A_cl = A - B K since the optimal u varies with x
            A_cl = A.copy()
            A_cl[:2, :2] = lq.A - np.outer(lq.B, K[k])
            rx_cl = rx + ru * np.concatenate([-K[k][0], [0.0]])
            zs.append(z); rs.append(r); zn.append(z_next)
            done.append(k + 1 >= lq.horizon)
            As.append(A_cl); rxs.append(rx_cl)
        zs, zn = np.array(zs), np.array(zn)
        done = np.array(done)
        v, g = exact_values(lq, P, zs)
        v_next, g_next = exact_values(lq, P, zn)
        delta = td_residuals(v, np.array(rs), v_next, 1.0, done)
        assert np.max(np.abs(delta)) < 1e-6
        mask = np.array([1.0, 1.0, 0.0])
        res = costate_residuals(g, np.array(rxs), np.array(As), g_next, 1.0,
                                done, mask)
        assert np.max(np.abs(res)) < 1e-6


class TestReplayBuffer:
    def test_fifo_overwrite(self):
        buf = ReplayBuffer(capacity=3, dim=2)
        for i in range(5):
            z = np.full(2, float(i))
            buf.push(z, 0.0, float(i), z, False, np.eye(2), np.zeros(2))
        assert buf.size == 3
        batch = buf.sample(3, np.random.default_rng(0))
        assert set(batch["r"]) <= {2.0, 3.0, 4.0}

    def test_sample_deterministic_in_rng(self):
        buf = ReplayBuffer(capacity=10, dim=2)
        for i in range(10):
            z = np.full(2, float(i))
            buf.push(z, 0.0, float(i), z, False, np.eye(2), np.zeros(2))
        a = buf.sample(4, np.random.default_rng(3))
        b = buf.sample(4, np.random.default_rng(3))
        np.testing.assert_array_equal(a["r"], b["r"])

    def test_jacobians_stored(self):
        buf = ReplayBuffer(capacity=4, dim=2)
        A = np.arange(4.0).reshape(2, 2)
        buf.push(np.zeros(2), 0.0, 0.0, np.zeros(2), False, A, np.ones(2))
        batch = buf.sample(1, np.random.default_rng(0))
        np.testing.assert_array_equal(batch["A"][0], A)


class TestLosses:
    def test_critic_loss_gradient_direction(self, lq):
        rng = np.random.default_rng(1)
        batch, _ = lq_batch(lq, rng)
        critic = CriticEnsemble.create(3, (16,), rng)
        loss0, grads = critic_loss(batch, critic, 1.0)
        # a small step along -grad must reduce the loss
        for li, (dw, db) in enumerate(grads):
            critic.online.weights[li] -= 1e-3 * dw
            critic.online.biases[li] -= 1e-3 * db
        loss1, _ = critic_loss(batch, critic, 1.0)
        assert loss1 < loss0

    def test_physics_loss_gradient_direction(self, lq):
        rng = np.random.default_rng(2)
        batch, _ = lq_batch(lq, rng)
        critic = CriticEnsemble.create(3, (16,), rng)
        mask = np.array([1.0, 1.0, 0.0])
        loss0, grads = physics_loss(batch, critic, 1.0, mask)
        for li, (dw, db) in enumerate(grads):
            critic.online.weights[li] -= 1e-4 * dw
            critic.online.biases[li] -= 1e-4 * db
        loss1, _ = physics_loss(batch, critic, 1.0, mask)
        assert loss1 < loss0

    def test_combine_grads_weighting(self):
        g1 = [(np.ones((2, 2)), np.ones(2))]
        g2 = [(np.full((2, 2), 2.0), np.full(2, 2.0))]
        out = combine_grads(g1, g2, 0.5)
        np.testing.assert_allclose(out[0][0], 2.0)

    def test_actor_objective_gradient_ascends(self, lq):
        rng = np.random.default_rng(3)
        batch, _ = lq_batch(lq, rng)
        critic = CriticEnsemble.create(3, (16,), rng)
        actor = ActorPolicy.create(3, (16,), lq.u_min, lq.u_max, rng)
        obj0, grads = actor_objective(batch, actor, critic, lq, 1.0)
        # the wide control box amplifies parameter steps, so keep it tiny
        for li, (dw, db) in enumerate(grads):
            actor.net.weights[li] -= 1e-6 * dw   # grads are of -objective
            actor.net.biases[li] -= 1e-6 * db
        obj1, _ = actor_objective(batch, actor, critic, lq, 1.0)
        assert obj1 > obj0


class TestAct:
    def test_deterministic_output_in_box(self):
        rng = np.random.default_rng(0)
        actor = ActorPolicy.create(3, (8,), -3.0, 2.5, rng)
        for _ in range(10):
            u = act(actor, rng.standard_normal(3))
            assert -3.0 <= u <= 2.5

    def test_sampling_needs_rng(self):
        actor = ActorPolicy.create(3, (8,), -3.0, 2.5,
                                   np.random.default_rng(0))
        with pytest.raises(ValueError):
            act(actor, np.zeros(3), deterministic=False)


class TestTrainOnLq:
    @pytest.fixture(scope="class")
    def trained(self):
        lq = default_lq()
        lq.u_min, lq.u_max = -10.0, 10.0

        def sampler(rng):
            return np.concatenate([rng.uniform(-2, 2, 2), [0.0]])

        cfg = LearnerConfig(episodes=120, seed=0, hidden=(32, 32),
                            warmup_steps=300, noise_start=1.0, noise_end=0.1,
                            batch_size=32)
        return lq, train(cfg, sampler, lq)

    def test_policy_beats_random_and_approaches_optimum(self, trained):
        lq, result = trained
        rng = np.random.default_rng(5)
        gap_policy, gap_rand = [], []
        for _ in range(5):
            x0 = rng.uniform(-2, 2, 2)
            opt = lq.optimal_cost(x0)
            z = np.concatenate([x0, [0.0]])
            total = 0.0
            zz = z.copy()
            for _ in range(lq.horizon):
                zz, r = lq.step(zz, act(result.actor, zz))
                total += r
            gap_policy.append(opt - total)
            zz, total_r = z.copy(), 0.0
            for _ in range(lq.horizon):
                zz, r = lq.step(zz, float(rng.uniform(-10, 10)))
                total_r += r
            gap_rand.append(opt - total_r)
        assert np.median(gap_policy) < 0.2 * np.median(gap_rand)

    def test_log_schema(self, trained):
        _, result = trained
        rec = result.log[-1]
        for key in ("episode", "return", "j_phi", "j_p", "violations",
                    "noise_std", "skipped_updates"):
            assert key in rec
        assert rec["episode"] == 119

    def test_write_log_jsonl(self, trained, tmp_path):
        _, result = trained
        path = tmp_path / "log.jsonl"
        write_log(result.log, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 120
        assert json.loads(lines[0])["episode"] == 0

    def test_disabled_physics_loss_never_touches_jacobians(self):
        # w_p = 0 must degenerate to the plain actor-critic path; j_p stays 0
        lq = default_lq()
        lq.u_min, lq.u_max = -10.0, 10.0

        def sampler(rng):
            return np.concatenate([rng.uniform(-2, 2, 2), [0.0]])

        cfg = LearnerConfig(episodes=5, seed=0, hidden=(8,), warmup_steps=60,
                            w_p=0.0, batch_size=16)
        result = train(cfg, sampler, lq)
        assert all(rec["j_p"] == 0.0 for rec in result.log)


class TestDeterminism:
    def test_same_seed_same_training_log(self):
        lq = default_lq()
        lq.u_min, lq.u_max = -10.0, 10.0

        def sampler(rng):
            return np.concatenate([rng.uniform(-2, 2, 2), [0.0]])

        cfg = LearnerConfig(episodes=4, seed=11, hidden=(8,), warmup_steps=60,
                            batch_size=16)
        a = train(cfg, sampler, lq)
        b = train(cfg, sampler, lq)
        assert a.log == b.log
        for wa, wb in zip(a.actor.net.weights, b.actor.net.weights):
            np.testing.assert_array_equal(wa, wb)


class TestCheckpoint:
    def test_round_trip_preserves_policy(self, tmp_path):
        rng = np.random.default_rng(0)
        actor = ActorPolicy.create(5, (8,), -3.0, 2.5, rng)
        critic = CriticEnsemble.create(5, (8,), rng)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, actor, critic)
        actor2, critic2 = load_checkpoint(path)
        z = rng.standard_normal(5)
        assert act(actor2, z) == act(actor, z)
        assert critic2 is not None

    def test_corrupted_file_raises_value_error(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not an archive")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestClockIndex:
    def test_car_and_lq_conventions(self, lq):
        from ecofollow.envmodel import CarFollowModel
        assert model_clock_index(lq) == 2
        assert model_clock_index(CarFollowModel()) == 2
