import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from taylortd import autodiff as ad
from taylortd.analysis import (AffineFeatures, LinearLqProblem, QuadraticFeatures, RandomTanhFeatures,
                               StabilityReport, ToyConfig, iterate_expected_update, lq_stability_dataset,
                               measure_update_variance, sign_test_p, spearman, stability_experiment,
                               stability_matrices, stationary_covariance, toy_advantage, toy_experiment,
                               toy_sample_objective_grad, toy_taylor_objective_graph, toy_taylor_objective_grad,
                               total_variance_decomposition, variance_across_training)
from taylortd.envs import LqSpec
from taylortd.nets import MLP
from taylortd.rng import make_rng

from conftest import rel_err


# ---------------------------------------------------------------------------
# feature maps


@pytest.mark.parametrize("make", [
    lambda rng: QuadraticFeatures(3, 2),
    lambda rng: AffineFeatures(3, 2),
    lambda rng: RandomTanhFeatures(3, 2, 7, rng),
])
def test_feature_jacobians_match_finite_differences(make):
    rng = make_rng(0)
    feats = make(rng)
    S, A = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    _, Js, Ja = feats(S, A)
    for i in range(4):
        for j in range(feats.dim):
            fd_s = ad.finite_difference_gradient(lambda s: float(feats(s[None], A[i:i + 1])[0][0, j]), S[i])
            fd_a = ad.finite_difference_gradient(lambda a: float(feats(S[i:i + 1], a[None])[0][0, j]), A[i])
            assert_allclose(Js[i, j], fd_s, atol=1e-7)
            assert_allclose(Ja[i, j], fd_a, atol=1e-7)


def test_quadratic_features_example():
    x, _, _ = QuadraticFeatures(1, 1)(np.array([[2.0]]), np.array([[3.0]]))
    assert_array_equal(x, [[4.0, 6.0, 9.0, 2.0, 3.0, 1.0]])


# ---------------------------------------------------------------------------
# LQ problem and variance


def test_problem_td_gradients_match_finite_differences():
    rng = make_rng(1)
    problem = LinearLqProblem.random(3, 2, rng, action_cost=0.2, dt=0.1, gamma=0.9)
    S, A = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    _, _, _, _, d_s, d_a = problem.td(S, A)
    for i in range(5):
        fd_s = ad.finite_difference_gradient(lambda s: float(problem.td(s[None], A[i:i + 1])[0][0]), S[i])
        fd_a = ad.finite_difference_gradient(lambda a: float(problem.td(S[i:i + 1], a[None])[0][0]), A[i])
        assert rel_err(d_s[i], fd_s) < 1e-6 and rel_err(d_a[i], fd_a) < 1e-6


def test_taylor_update_is_exact_expectation_when_delta_is_affine_in_action():
    rng = make_rng(2)
    problem = LinearLqProblem.random(3, 2, rng, features="affine", action_cost=0.0, dt=0.1, lambda_s=0.0)
    S = problem.sample_states(rng, 10)
    assert_allclose(problem.taylor_updates(S), problem.expected_updates(S), rtol=1e-10, atol=1e-12)


def test_sample_updates_average_to_expected_update():
    rng = make_rng(3)
    problem = LinearLqProblem.random(2, 2, rng, features="affine", action_cost=0.3, dt=0.1, lambda_s=0.05)
    S = np.repeat(problem.sample_states(rng, 1), 200_000, axis=0)
    U = problem.sample_updates(S, rng)
    se = U.std(0, ddof=1) / np.sqrt(len(U))
    assert np.all(np.abs(U.mean(0) - problem.expected_updates(S[:1])[0]) < 4 * se + 1e-12)


def test_zero_noise_variances_coincide():
    rng = make_rng(4)
    problem = LinearLqProblem.random(3, 2, rng, lambda_a=0.0, lambda_s=0.0)
    rep = measure_update_variance(problem, 50, [0, 1, 2])
    assert_array_equal(rep.taylor, rep.sample_based)
    assert rep.taylor_lower == 0


def test_variance_report_statistics():
    rng = make_rng(5)
    problem = LinearLqProblem.random(4, 4, rng)
    rep = measure_update_variance(problem, 200, range(10))
    assert rep.n_seeds == 10 and rep.taylor_lower == 10
    assert rep.taylor_mean < rep.sample_mean
    assert_allclose(rep.taylor_se, np.std(rep.taylor, ddof=1) / np.sqrt(10))
    rows = rep.rows("x")
    assert len(rows) == 20 and rows[0][:3] == (0, "x", "taylor_variance")
    with pytest.raises(ValueError):
        measure_update_variance(problem, 1, [0])


def test_sign_test_examples():
    assert sign_test_p(10, 10) == 1 / 1024
    assert sign_test_p(9, 10) == 11 / 1024
    assert sign_test_p(0, 10) == 1.0


def test_total_variance_decomposition_closes():
    rng = make_rng(6)
    problem = LinearLqProblem.random(3, 3, rng)
    dec = total_variance_decomposition(problem, 400, 25, rng)
    assert dec.closes(3.0)
    assert dec.expected_inner_var > 0 and dec.var_expected > 0
    with pytest.raises(ValueError):
        total_variance_decomposition(problem, 10, 1, rng)


def test_variance_across_training():
    factory = lambda seed: LinearLqProblem.random(3, 3, make_rng((seed, 9)))
    reports = variance_across_training(factory, checkpoints=(0, 50), seeds=(0, 1), n_states=64)
    assert [r.step for r in reports] == [0, 50]
    # the step-0 report equals a direct measurement of the untrained problem
    direct = measure_update_variance(factory(1), 64, [1])
    assert reports[0].taylor[1] == direct.taylor[0]
    assert reports[1].taylor[1] != reports[0].taylor[1]
    with pytest.raises(ValueError):
        variance_across_training(factory, checkpoints=(50, 0))


# ---------------------------------------------------------------------------
# stability


def test_stationary_covariance_solves_lyapunov():
    rng = make_rng(7)
    T = 0.5 * rng.standard_normal((4, 4)) / 2
    Q = np.eye(4)
    P = stationary_covariance(T, Q)
    assert_allclose(P, T @ P @ T.T + Q, atol=1e-12)


def test_myopic_matrices_are_psd():
    rng = make_rng(8)
    spec = LqSpec.random(4, 3, rng, dt=0.05)
    K = 0.1 * rng.standard_normal((3, 4))
    feats = RandomTanhFeatures(4, 3, 16, rng)
    data = lq_stability_dataset(feats, spec, K, 2000, rng)
    rep = stability_matrices(feats, data, gamma=0.0, lambda_a=0.25, dt=0.05)
    assert rep.min_eig_A > -1e-12 and rep.min_eig_A_tilde > -1e-12
    assert rep.a_tilde_psd
    x, _, Ja = feats(data["s"], data["a"])
    assert_allclose(rep.A, x.T @ x / 2000, rtol=1e-12)
    assert_allclose(rep.A_tilde, np.einsum("nfa,nga->fg", Ja, Ja) / 2000, rtol=1e-12)


def test_stability_dataset_rejects_unstable_chain():
    rng = make_rng(9)
    spec = LqSpec.random(2, 1, rng, dt=10.0)
    K = np.zeros((1, 2))
    with pytest.raises(ValueError):
        lq_stability_dataset(AffineFeatures(2, 1), spec, K, 10, rng)


def _diag_report(eigs):
    M = np.diag(eigs)
    u = np.ones(len(eigs))
    thr = float(np.min(2.0 / np.asarray(eigs)))
    return StabilityReport(M, np.zeros_like(M), u, 0.25, 1e-3, min(eigs), 0.0, min(eigs), thr)


def test_iteration_converges_below_threshold_and_diverges_above():
    rep = _diag_report([1.0, 2.0])
    assert rep.step_threshold == 1.0
    ok, _, err = iterate_expected_update(rep, 0.9, max_iter=10_000)
    assert ok and err <= 1e-8
    assert_allclose(rep.fixed_point, [1.0, 0.5])
    ok, _, _ = iterate_expected_update(rep, 1.1, max_iter=10_000)
    assert not ok


def test_stability_experiment_small():
    run = stability_experiment(0, dt=1e-2, n_features=16, n_samples=4000, state_dim=3, action_dim=2)
    assert run.report.a_tilde_psd
    assert run.report.min_eig_M > 0 and run.eta > 0
    assert run.converged


# ---------------------------------------------------------------------------
# toy regression


def test_toy_taylor_gradient_matches_graph():
    rng = make_rng(10)
    net = MLP((4, 8, 1), hidden="tanh")
    theta = net.init(rng)
    X, y, gy = rng.standard_normal((6, 4)), rng.standard_normal(6), rng.standard_normal((6, 4))
    J, g = toy_taylor_objective_grad(net, theta, X, y, gy, 0.3)
    params = net.to_graph(theta)
    loss = toy_taylor_objective_graph(params, X, y, gy, 0.3)
    assert_allclose(J, loss.value, rtol=1e-13)
    assert rel_err(g, net.flatten_grads(ad.grad(loss, params.nodes()))) < 1e-8


def test_toy_sample_gradient_matches_finite_differences():
    rng = make_rng(11)
    net = MLP((3, 5, 1), hidden="tanh")
    theta = net.init(rng)
    Xp, yp = rng.standard_normal((7, 3)), rng.standard_normal(7)
    _, g = toy_sample_objective_grad(net, theta, Xp, yp)
    fd = ad.finite_difference_gradient(lambda t: toy_sample_objective_grad(net, t, Xp, yp)[0], theta)
    assert rel_err(g, fd) < 1e-6


def test_toy_zero_noise_makes_methods_agree():
    cfg = ToyConfig(dim=3, lambda_x=0.0, steps=50)
    assert_allclose(toy_experiment(cfg, "taylor"), toy_experiment(cfg, "sample_based"), rtol=1e-10)


def test_toy_experiment_is_deterministic_and_validates():
    cfg = ToyConfig(dim=2, steps=20)
    assert toy_experiment(cfg, "taylor") == toy_experiment(cfg, "taylor")
    with pytest.raises(ValueError):
        toy_experiment(cfg, "other")
    with pytest.raises(ValueError):
        ToyConfig(regime="medium")
    with pytest.raises(ValueError):
        ToyConfig(dim=0)
    assert ToyConfig(regime="high").train_size == 128


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # ranks with ties: x -> (1, 2.5, 2.5, 4), y -> (1, 2, 3, 4); Pearson of the ranks
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(4.5 / np.sqrt(4.5 * 5.0))
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0


def test_toy_advantage_example():
    rows = [(0, "d=5;regime=low", "taylor_test_mse", 1.0), (0, "d=5;regime=low", "sample_based_test_mse", 2.0),
            (1, "d=5;regime=low", "taylor_test_mse", 3.0), (1, "d=5;regime=low", "sample_based_test_mse", 2.0)]
    assert toy_advantage(rows) == {("low", 5): pytest.approx(0.0)}
