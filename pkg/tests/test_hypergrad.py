import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bisirl.envs import random_environment
from bisirl.game import MarkovGame, sample_trajectories
from bisirl.hypergrad import (
    BilevelProblem,
    HessianError,
    SpsaConfig,
    analytical_derivatives,
    analytical_hypergradient,
    cg_solve,
    damp_hessian,
    estimate_hypergradient,
    lookahead_expectation,
    spsa_grad,
    spsa_hess,
    spsa_jacobian,
)
from bisirl.lower import LowerProblem
from bisirl.reward import RewardModel
from bisirl.soft import backward_expectation, solve_soft


def bilevel(seed, n_states=3, upper="true_rl", features="linear"):
    rng = np.random.default_rng(seed)
    env = random_environment(n_states, 2, 2, 4, 0.9, rng, features=features)
    demos = sample_trajectories(env.game, solve_soft(env.game, env.r_l, env.r_e).policy, 20, rng)
    lower = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    return BilevelProblem(lower, env.r_l, upper), rng


def fd(fn, x, eps=1e-5):
    return np.array([(np.asarray(fn(x + eps * e)) - np.asarray(fn(x - eps * e))) / (2 * eps) for e in np.eye(x.size)])


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_linear_objective(rng):
    # one coordinate: exact on every draw; several: cross terms c_j d_j / d_i cancel only on average
    est = spsa_grad(lambda t: 2.5 * t[0], np.array([0.4]), SpsaConfig(p=0.3, n_avg=1), rng)
    np.testing.assert_allclose(est, [2.5], rtol=1e-12)
    c = np.array([1.0, -2.0, 0.5])
    est = spsa_grad(lambda t: c @ t, rng.normal(size=3), SpsaConfig(p=0.3, n_avg=10_000), rng)
    np.testing.assert_allclose(est, c, atol=0.1)


def test_quadratic_objective_averages_to_gradient(rng):
    theta0 = np.array([0.3, -0.2, 0.5])
    est = spsa_grad(lambda t: 0.5 * t @ t, theta0, SpsaConfig(p=0.1, n_avg=10_000), rng)
    np.testing.assert_allclose(est, theta0, atol=0.05)


def test_constant_objective_gives_zero(rng):
    est = spsa_grad(lambda t: 4.2, np.zeros(3), SpsaConfig(n_avg=1), rng)
    np.testing.assert_array_equal(est, 0.0)


def test_regularizer_hessian_diagonal_exact_per_draw(rng):
    lam = 0.3
    one = spsa_hess(lambda t: lam * t, np.zeros(3), SpsaConfig(p=0.1, n_avg=1), rng)
    np.testing.assert_allclose(np.diag(one), lam, rtol=1e-12)
    avg = spsa_hess(lambda t: lam * t, np.zeros(3), SpsaConfig(p=0.1, n_avg=10_000), rng)
    assert np.abs(avg - lam * np.eye(3)).max() <= 0.05 * lam


def test_constant_gradient_gives_zero_matrix(rng):
    est = spsa_hess(lambda t: np.ones(3), np.zeros(3), SpsaConfig(), rng)
    np.testing.assert_array_equal(est, 0.0)


def test_jacobian_of_linear_map(rng):
    a = rng.normal(size=(2, 3))
    est = spsa_jacobian(lambda t: a @ t, np.zeros(3), SpsaConfig(n_avg=10_000), rng)
    assert est.shape == (2, 3)
    assert np.abs(est - a).max() <= 0.05 * np.linalg.norm(a)


def test_batched_matches_loop(rng):
    a = rng.normal(size=(3, 3))
    fn = lambda t: np.tanh(a @ t)  # noqa: E731
    loop = spsa_hess(fn, np.ones(3), SpsaConfig(n_avg=8), np.random.default_rng(1))
    batched = spsa_hess(lambda ts: np.tanh(ts @ a.T), np.ones(3), SpsaConfig(n_avg=8), np.random.default_rng(1), batched=True)
    np.testing.assert_allclose(batched, loop, atol=1e-14)


def test_cg_examples(rng):
    b = rng.normal(size=4)
    np.testing.assert_allclose(cg_solve(np.eye(4), b), b)
    np.testing.assert_allclose(cg_solve(np.diag([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 4.0])), 1.0, atol=1e-12)
    m = rng.normal(size=(8, 8))
    spd = m @ m.T + 0.5 * np.eye(8)
    b = rng.normal(size=8)
    x = cg_solve(spd, b, max_iter=8)
    assert np.linalg.norm(spd @ x - b) / np.linalg.norm(b) < 1e-8


def test_cg_rejects_indefinite():
    with pytest.raises(HessianError, match="not positive definite"):
        cg_solve(np.diag([1.0, -1.0]), np.array([1.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 70), st.integers(0, 2**32 - 1))
def test_damping_floors_spectrum(m, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, m))
    out = damp_hessian(a + a.T, 0.05)
    np.testing.assert_allclose(out, out.T)
    assert np.linalg.eigvalsh(out).min() >= 0.05 - 1e-9


def test_lookahead_equals_backward(rng):
    problem, rng = bilevel(0)
    game = problem.game
    policy = problem.lower.solve(rng.normal(size=3), rng.normal(size=3)).policy
    per_step = problem.lower.model_e.features()
    for got, want in zip(lookahead_expectation(game, policy, per_step), backward_expectation(game, policy, per_step)):
        np.testing.assert_allclose(got, want, atol=1e-13)


@pytest.mark.parametrize("upper", ["true_rl", "estimated_rtheta_l"])
@pytest.mark.parametrize("seed", range(3))
def test_analytical_derivatives_match_finite_differences(upper, seed):
    problem, rng = bilevel(seed, n_states=int(2 + seed), upper=upper)
    lower = problem.lower
    tl, te = 0.5 * rng.normal(size=3), 0.5 * rng.normal(size=3)
    parts = analytical_derivatives(problem, tl, te)
    assert rel(parts["grad_l_f"], fd(lambda t: problem.f(t, te), tl)) < 1e-5
    assert rel(parts["grad_e_f"], fd(lambda t: problem.f(tl, t), te)) < 1e-5
    assert rel(parts["hess_ee"], fd(lambda t: lower.grad_e(tl, t), te)) < 1e-5
    assert rel(parts["jac_le"], fd(lambda t: lower.grad_l(tl, t), te).T) < 1e-5


def test_matched_tabular_hessian_is_covariance_plus_lam():
    problem, rng = bilevel(3, features="tabular")
    parts = analytical_derivatives(problem, np.zeros(12), np.zeros(12))
    np.linalg.cholesky(parts["hess_ee"])
    assert np.linalg.eigvalsh(parts["hess_ee"]).min() >= 0.1 - 1e-12


def test_one_step_one_state_reduces_to_softmax_regression(rng):
    game = MarkovGame(np.ones((1, 2, 3, 1)), 1, 0.9, np.array([1.0]))
    phi_l, phi_e = rng.normal(size=(1, 2, 3, 2)), rng.normal(size=(1, 2, 3, 3))
    r_true = rng.normal(size=(1, 2, 3))
    model_l, model_e = RewardModel.linear(phi_l), RewardModel.linear(phi_e)
    demos = sample_trajectories(game, solve_soft(game, r_true, np.zeros((1, 2, 3))).policy, 5, rng)
    problem = BilevelProblem(LowerProblem(game, model_l, model_e, demos, 0.2), r_true)
    tl, te = rng.normal(size=2), rng.normal(size=3)
    # logistic-model formulas over the 6 joint actions
    xl, xe, r = phi_l.reshape(6, 2), phi_e.reshape(6, 3), r_true.ravel()
    logits = xl @ tl + xe @ te
    p = np.exp(logits - logits.max())
    p /= p.sum()
    cl, ce = xl - p @ xl, xe - p @ xe
    parts = analytical_derivatives(problem, tl, te)
    np.testing.assert_allclose(parts["grad_l_f"], -(p * r) @ cl, atol=1e-12)
    np.testing.assert_allclose(parts["grad_e_f"], -(p * r) @ ce, atol=1e-12)
    np.testing.assert_allclose(parts["hess_ee"], (ce * p[:, None]).T @ ce + 0.2 * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(parts["jac_le"], (cl * p[:, None]).T @ ce, atol=1e-12)


def test_zero_features_give_degenerate_hypergradient(rng):
    problem, rng = bilevel(4)
    game = problem.game
    zero_l = RewardModel.linear(np.zeros((3, 2, 2, 2)))
    lower = LowerProblem(game, zero_l, problem.lower.model_e, problem.lower.demos, 0.1)
    est = estimate_hypergradient(BilevelProblem(lower, problem.r_l_true), np.zeros(2), np.zeros(3), SpsaConfig(), rng)
    np.testing.assert_array_equal(est.grad_l_f, 0.0)
    np.testing.assert_allclose(est.assembled, -est.jac_le @ est.cg_solution)
    zero_e = RewardModel.linear(np.zeros((3, 2, 2, 3)))
    lower = LowerProblem(game, zero_l, zero_e, problem.lower.demos, 0.1)
    est = estimate_hypergradient(BilevelProblem(lower, problem.r_l_true), np.zeros(2), np.zeros(3), SpsaConfig(), rng)
    np.testing.assert_array_equal(est.assembled, 0.0)


def test_estimate_is_deterministic_for_a_seed():
    problem, _ = bilevel(5)
    a = estimate_hypergradient(problem, np.zeros(3), np.zeros(3), SpsaConfig(), np.random.default_rng(9))
    b = estimate_hypergradient(problem, np.zeros(3), np.zeros(3), SpsaConfig(), np.random.default_rng(9))
    np.testing.assert_array_equal(a.assembled, b.assembled)


def test_estimate_agrees_with_oracle():
    problem, rng = bilevel(6)
    tl, te = 0.5 * rng.normal(size=3), 0.5 * rng.normal(size=3)
    exact = analytical_hypergradient(problem, tl, te)
    est = estimate_hypergradient(problem, tl, te, SpsaConfig(p=1e-3, n_avg=2000), rng).assembled
    assert exact @ est / (np.linalg.norm(exact) * np.linalg.norm(est)) > 0.9


def test_batch_f_matches_f():
    problem, rng = bilevel(7, upper="estimated_rtheta_l")
    tls = rng.normal(size=(4, 3))
    te = rng.normal(size=3)
    np.testing.assert_allclose(problem.batch_f(tls, te), [problem.f(t, te) for t in tls], atol=1e-12)


def test_unknown_objective_rejected():
    problem, _ = bilevel(8)
    with pytest.raises(ValueError, match="upper_objective"):
        BilevelProblem(problem.lower, problem.r_l_true, "bogus")
