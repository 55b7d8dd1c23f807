import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from koopreach.controller import (GainSchedule, LqrWeights, ReferencePlan, feedforward, lifted_control, load_plan,
                                  make_plan, pinv, riccati_cost_to_go, riccati_gains, rollout_latent_decoded,
                                  rollout_true_closed_loop, save_plan, state_control, true_closed_loop)
from koopreach.dynamics import DimensionError, Trajectory, rollout
from koopreach.koopman import identity_model
from oracles import kkt_lqr, policy_cost


def random_weights(rng, l, m):
    def spd(k):
        M = rng.normal(size=(k, k))
        return M @ M.T + 0.5 * np.eye(k)
    return LqrWeights(spd(l), spd(m), spd(l))


# -- weights ------------------------------------------------------------------

def test_weights_reject_asymmetric_and_indefinite():
    with pytest.raises(ValueError):
        LqrWeights(np.array([[1.0, 0.1], [0.0, 1.0]]), np.eye(1), np.eye(2))
    with pytest.raises(ValueError):
        LqrWeights(np.eye(2), -np.eye(1), np.eye(2))


# -- feedforward --------------------------------------------------------------

def test_feedforward_identity_KB(rng):
    K_A = rng.normal(size=(3, 3))
    model = identity_model(K_A, np.eye(3))
    z = rng.normal(size=(6, 3))
    np.testing.assert_allclose(feedforward(model, z), z[1:] - z[:-1] @ K_A.T, atol=1e-12)


def test_feedforward_constant_reference_is_zero(rng):
    model = identity_model(np.eye(3), rng.normal(size=(3, 2)))
    z = np.tile(rng.normal(size=3), (5, 1))
    np.testing.assert_allclose(feedforward(model, z), 0.0, atol=1e-14)


def test_feedforward_least_squares_oracle(rng):
    K_A, K_B = rng.normal(size=(5, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(pinv(K_B) @ K_B, np.eye(2), atol=1e-12)
    model = identity_model(K_A, K_B)
    z = rng.normal(size=(8, 5))
    u = feedforward(model, z)
    for t in range(7):
        target = z[t + 1] - K_A @ z[t]
        oracle = np.linalg.solve(K_B.T @ K_B, K_B.T @ target)  # normal equations
        np.testing.assert_allclose(u[t], oracle, rtol=1e-9, atol=1e-12)


def test_pinv_drops_tiny_singular_values():
    M = np.diag([1.0, 1e-12])
    np.testing.assert_allclose(pinv(M), np.diag([1.0, 0.0]))


def test_feedforward_needs_two_states(rng):
    with pytest.raises(ValueError):
        feedforward(identity_model(np.eye(2), np.eye(2)), np.zeros((1, 2)))


# -- Riccati ------------------------------------------------------------------

def test_riccati_scalar_hand_case():
    w = LqrWeights(np.eye(1), np.eye(1), np.eye(1))
    gains = riccati_gains([[1.0]], [[1.0]], w, 1)
    assert gains.gains[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_riccati_no_actuation_zero_gains(rng):
    gains = riccati_gains(rng.normal(size=(3, 3)), np.zeros((3, 2)), LqrWeights.default(3, 2), 7)
    assert np.all(gains.gains == 0) and gains.gains.shape == (7, 2, 3)


def test_riccati_matches_dense_kkt_random_4dim():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(4, 4)) * 0.5, rng.normal(size=(4, 2))
    w = random_weights(rng, 4, 2)
    gains = riccati_gains(A, B, w, 20)
    dz0 = rng.normal(size=4)
    cost_kkt, du = kkt_lqr(A, B, w.Q, w.R, w.Q_T, dz0, 20)
    assert policy_cost(A, B, w.Q, w.R, w.Q_T, dz0, gains.gains) == pytest.approx(cost_kkt, rel=1e-8)
    # the closed-loop input sequence is the QP minimiser itself
    dz, us = dz0.copy(), []
    for G in gains.gains:
        us.append(-G @ dz)
        dz = A @ dz + B @ us[-1]
    np.testing.assert_allclose(us, du, rtol=1e-6, atol=1e-9)
    P0 = riccati_cost_to_go(A, B, w, 20)
    assert dz0 @ P0 @ dz0 == pytest.approx(cost_kkt, rel=1e-8)


def test_riccati_beats_random_policies():
    rng = np.random.default_rng(9)
    A, B = rng.normal(size=(3, 3)) * 0.4, rng.normal(size=(3, 2))
    w = LqrWeights.default(3, 2)
    gains = riccati_gains(A, B, w, 15)
    dz0 = rng.normal(size=3)
    best = policy_cost(A, B, w.Q, w.R, w.Q_T, dz0, gains.gains)
    for _ in range(100):
        G = gains.gains + 0.3 * rng.normal(size=gains.gains.shape)
        assert best <= policy_cost(A, B, w.Q, w.R, w.Q_T, dz0, G) + 1e-12


def test_riccati_P_symmetric_over_long_horizon(rng):
    A, B = rng.normal(size=(5, 5)), rng.normal(size=(5, 2))
    P = riccati_cost_to_go(A, B, LqrWeights.default(5, 2), 400)
    assert np.max(np.abs(P - P.T)) <= 1e-10 * max(1.0, np.max(np.abs(P)))
    np.linalg.cholesky(P)


def test_riccati_rejects_bad_dims():
    with pytest.raises(DimensionError):
        riccati_gains(np.eye(3), np.ones((3, 1)), LqrWeights.default(2, 1), 5)
    with pytest.raises(ValueError):
        riccati_gains(np.eye(2), np.ones((2, 1)), LqrWeights.default(2, 1), 0)


# -- control laws -------------------------------------------------------------

def test_lifted_control_cases():
    u_ref, G, z_ref = np.array([1.0, -2.0]), np.array([[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]]), np.array([1.0, 1.0, 1.0])
    np.testing.assert_array_equal(lifted_control(u_ref, G, z_ref, z_ref), u_ref)
    np.testing.assert_array_equal(lifted_control(u_ref, np.zeros((2, 3)), z_ref + 5, z_ref), u_ref)
    # z - z_ref = (1, -1, 0.5): G dz = (1 + 1, 0.5 + 1) = (2, 1.5)
    np.testing.assert_allclose(lifted_control(u_ref, G, [2.0, 0.0, 1.5], z_ref), [-1.0, -3.5])


def test_state_control_is_lifted_control_of_encoding(rng):
    model = random_model(rng, n=2, m=1, l=3)
    u_ref, G, x, z_ref = rng.normal(size=1), rng.normal(size=(1, 3)), rng.normal(size=2), rng.normal(size=3)
    assert np.array_equal(state_control(model, u_ref, G, x, z_ref), lifted_control(u_ref, G, model.encode(x), z_ref))
    ident = identity_model(np.eye(2), np.ones((2, 1)))
    np.testing.assert_array_equal(state_control(ident, u_ref, G[:, :2], x, z_ref[:2]),
                                  lifted_control(u_ref, G[:, :2], x, z_ref[:2]))
    np.testing.assert_array_equal(state_control(model, u_ref, np.zeros((1, 3)), x, z_ref), u_ref)


# -- rollouts -----------------------------------------------------------------

def _plan_for(model, system, rng, T=12):
    ref = rollout(system, rng.normal(size=system.n), rng.normal(size=(T, system.m)))
    plan = make_plan(model, ref)
    return plan, riccati_gains(model.K_A, model.K_B, LqrWeights.default(model.l, model.m), T)


def test_latent_rollout_frozen_dynamics():
    model = identity_model(np.eye(2), np.zeros((2, 1)))
    ref = Trajectory(np.zeros((6, 2)), np.zeros((5, 1)))
    plan = make_plan(model, ref)
    gains = GainSchedule(np.zeros((5, 1, 2)))
    x0 = np.array([0.4, -0.3])
    traj = rollout_latent_decoded(model, plan, gains, x0)
    assert traj.states.shape == (6, 2)
    np.testing.assert_array_equal(traj.states, np.tile(x0, (6, 1)))


def test_exact_plant_tracks_reference_in_both_rollouts(exact_linear, rng):
    system, model = exact_linear
    plan, gains = _plan_for(model, system, rng)
    x0 = plan.x_ref.states[0]
    latent = rollout_latent_decoded(model, plan, gains, x0)
    true = rollout_true_closed_loop(system, model, plan, gains, x0)
    np.testing.assert_allclose(latent.states, plan.x_ref.states, atol=1e-12)
    np.testing.assert_allclose(true.states, plan.x_ref.states, atol=1e-12)
    np.testing.assert_allclose(true.controls, plan.x_ref.controls, atol=1e-12)


def test_feedforward_only_reproduces_reference(exact_linear, rng):
    system, model = exact_linear
    plan, _ = _plan_for(model, system, rng)
    zero = GainSchedule(np.zeros((plan.horizon, 2, 3)))
    traj = rollout_true_closed_loop(system, model, plan, zero, plan.x_ref.states[0])
    np.testing.assert_allclose(traj.states, plan.x_ref.states, atol=1e-12)


def test_zero_gain_controls_independent_of_x0(exact_linear, rng):
    system, model = exact_linear
    plan, _ = _plan_for(model, system, rng)
    zero = GainSchedule(np.zeros((plan.horizon, 2, 3)))
    _, ca = true_closed_loop(system, model, plan, zero, rng.normal(size=3))
    _, cb = true_closed_loop(system, model, plan, zero, rng.normal(size=3))
    np.testing.assert_array_equal(ca, cb)
    np.testing.assert_array_equal(ca, plan.u_ref)


def test_true_closed_loop_deterministic_and_batched(rng):
    from koopreach.dynamics import unicycle
    model = random_model(rng, n=3, m=2, l=4, hidden=(6,))
    plan, gains = _plan_for(model, unicycle(), rng, T=8)
    x0 = rng.normal(size=(3, 3))
    a, _ = true_closed_loop(unicycle(), model, plan, gains, x0)
    b, _ = true_closed_loop(unicycle(), model, plan, gains, x0)
    assert np.array_equal(a, b)
    single = rollout_true_closed_loop(unicycle(), model, plan, gains, x0[1])
    np.testing.assert_allclose(single.states, a[1], rtol=1e-12, atol=1e-12)


def test_plan_roundtrip_checks_model_hash(tmp_path, exact_linear, rng):
    system, model = exact_linear
    plan, gains = _plan_for(model, system, rng)
    save_plan(tmp_path / "plan.json", plan, gains, model)
    assert json.loads((tmp_path / "plan.json").read_text())["model_hash"] == model.content_hash()
    back, g = load_plan(tmp_path / "plan.json", model)
    np.testing.assert_array_equal(back.z_ref, plan.z_ref)
    np.testing.assert_array_equal(g.gains, gains.gains)
    other = identity_model(2 * np.eye(3), np.ones((3, 2)))
    with pytest.raises(ValueError):
        load_plan(tmp_path / "plan.json", other)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 25), st.integers(0, 2**31))
def test_riccati_matches_kkt_property(l, m, T, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(l, l)) * 0.6, rng.normal(size=(l, m))
    w = random_weights(rng, l, m)
    dz0 = rng.normal(size=l)
    cost_kkt, _ = kkt_lqr(A, B, w.Q, w.R, w.Q_T, dz0, T)
    cost = policy_cost(A, B, w.Q, w.R, w.Q_T, dz0, riccati_gains(A, B, w, T).gains)
    assert cost == pytest.approx(cost_kkt, rel=1e-8)
