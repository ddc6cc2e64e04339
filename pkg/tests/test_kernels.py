"""Transition-kernel checks: compiled/pure parity and finite-difference
validation of the analytic Jacobians and the backward (costate) gradient."""

import numpy as np
import pytest

from ecofollow import _core_py as pure
from ecofollow import kernels
from ecofollow.envmodel import CarFollowModel
from ecofollow.harness import build_episode, generate_lead, window_positions


@pytest.fixture(scope="module")
def model():
    return CarFollowModel()


@pytest.fixture(scope="module")
def packed(model):
    return model._packed


def random_state(rng, model, clock=0):
    lead = generate_lead("urban", 40.0, int(rng.integers(1000)))
    start = int(rng.integers(0, lead.n_steps - model.horizon))
    window = window_positions(lead, start, model.horizon)
    d_f0 = float(rng.uniform(8.0, 90.0))
    v0 = float(rng.uniform(0.5, 20.0))
    spec = build_episode(window, d_f0, v0, model)
    z = model.initial_state(spec)
    for _ in range(clock):
        z, _ = model.step(z, float(rng.uniform(model.u_min, model.u_max)))
    return z


def central_diff(f, x, eps):
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


class TestParity:
    """Compiled backend must agree with the reference to machine precision."""

    compiled = pytest.mark.skipif(not kernels.COMPILED,
                                  reason="compiled backend unavailable")

    @compiled
    def test_step_matches(self, model, packed):
        from ecofollow import _core
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = random_state(rng, model, clock=int(rng.integers(0, 29)))
            u = float(rng.uniform(model.u_min, model.u_max))
            zc, rc = _core.step(z, u, packed)
            zp, rp = pure.step(z, u, packed)
            np.testing.assert_allclose(zc, zp, rtol=1e-13, atol=1e-13)
            assert rc == pytest.approx(rp, rel=1e-13, abs=1e-15)

    @compiled
    def test_jacobian_matches(self, model, packed):
        from ecofollow import _core
        rng = np.random.default_rng(1)
        for _ in range(20):
            z = random_state(rng, model, clock=int(rng.integers(0, 30)))
            u = float(rng.uniform(model.u_min, model.u_max))
            out_c = _core.step_jacobian(z, u, packed)
            out_p = pure.step_jacobian(z, u, packed)
            for a, b in zip(out_c[2:], out_p[2:]):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    @compiled
    def test_rollout_and_adjoint_match(self, model, packed):
        from ecofollow import _core
        rng = np.random.default_rng(2)
        z = random_state(rng, model)
        us = rng.uniform(model.u_min, model.u_max, model.horizon)
        tc, rc = _core.rollout(z, us, packed)
        tp, rp = pure.rollout(z, us, packed)
        np.testing.assert_allclose(tc, tp, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(rc, rp, rtol=1e-12, atol=1e-12)
        oc, gc = _core.adjoint(z, us, packed)
        op, gp = pure.adjoint(z, us, packed)
        assert oc == pytest.approx(op, rel=1e-12)
        np.testing.assert_allclose(gc, gp, rtol=1e-11, atol=1e-12)


class TestStepJacobianFd:
    def _check_state(self, model, z, u, eps=1e-6):
        _, _, A, b, rx, ru = kernels.step_jacobian(z, u, model._packed)
        mask = model.diff_mask
        for i in np.flatnonzero(mask):
            def fz(h, i=i):
                zp = z.copy()
                zp[i] += h
                zn, r = kernels.step(zp, u, model._packed)
                return zn, r
            dz = (fz(eps)[0] - fz(-eps)[0]) / (2 * eps)
            dr = (fz(eps)[1] - fz(-eps)[1]) / (2 * eps)
            np.testing.assert_allclose(A[:, i][mask], dz[mask], rtol=1e-5,
                                       atol=1e-6)
            assert rx[i] == pytest.approx(dr, rel=1e-5, abs=1e-7)

    def test_state_jacobian_random_clocks(self, model):
        rng = np.random.default_rng(10)
        for _ in range(5):
            clock = int(rng.integers(0, 29))
            z = random_state(rng, model, clock=clock)
            u = float(rng.uniform(-2.0, 2.0))
            self._check_state(model, z, u)

    def test_state_jacobian_at_interval_boundary_and_terminal(self, model):
        rng = np.random.default_rng(11)
        for clock in (9, 10, 11, 20, 29):
            z = random_state(rng, model, clock=clock)
            self._check_state(model, z, 0.7)

    def test_control_derivatives(self, model):
        rng = np.random.default_rng(12)
        eps = 1e-6
        for _ in range(10):
            z = random_state(rng, model, clock=int(rng.integers(0, 30)))
            u = float(rng.uniform(-2.0, 2.0))
            _, _, A, b, rx, ru = kernels.step_jacobian(z, u, model._packed)
            zp, rp = kernels.step(z, u + eps, model._packed)
            zm, rm = kernels.step(z, u - eps, model._packed)
            np.testing.assert_allclose(b[model.diff_mask],
                                       ((zp - zm) / (2 * eps))[model.diff_mask],
                                       rtol=1e-5, atol=1e-7)
            assert ru == pytest.approx((rp - rm) / (2 * eps), rel=1e-5,
                                       abs=1e-7)

    def test_control_gate_outside_box(self, model):
        # saturated controls contribute no sensitivity
        rng = np.random.default_rng(13)
        z = random_state(rng, model)
        _, _, _, b, _, ru = kernels.step_jacobian(z, 4.0, model._packed)
        assert ru == 0.0
        assert np.all(b == 0.0)


class TestAdjointFd:
    def test_gradient_matches_finite_differences(self, model):
        rng = np.random.default_rng(20)
        eps = 1e-6
        z = random_state(rng, model)
        us = rng.uniform(-2.0, 2.0, model.horizon)
        obj, grad = kernels.adjoint(z, us, model._packed)
        _, rewards = kernels.rollout(z, us, model._packed)
        assert obj == pytest.approx(float(np.sum(rewards)), rel=1e-12)
        for i in (0, 7, 15, 29):
            up = us.copy(); up[i] += eps
            um = us.copy(); um[i] -= eps
            fp = np.sum(kernels.rollout(z, up, model._packed)[1])
            fm = np.sum(kernels.rollout(z, um, model._packed)[1])
            assert grad[i] == pytest.approx((fp - fm) / (2 * eps), rel=1e-4,
                                            abs=1e-7)


class TestEpisodeEnd:
    def test_step_past_horizon_raises(self, model):
        rng = np.random.default_rng(30)
        z = random_state(rng, model)
        for _ in range(model.horizon):
            z, _ = kernels.step(z, 0.0, model._packed)
        with pytest.raises(RuntimeError):
            kernels.step(z, 0.0, model._packed)
