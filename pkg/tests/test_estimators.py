import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import make_trial
from immrm.data import ALL_MODELS, Model, TrialDataset, WorkingModelSpec
from immrm.errors import PositivityError, SingularDesignError
from immrm.estimators import (ModelProblem, ParameterVector, SolverOptions, dsigma_dalpha, estimating_function,
                              estimating_functions, extract_delta, log_likelihood, logchol_from_sigma,
                              sigma_from_logchol, solve)


def _direct_loglik(ds, model, beta, sigmas):
    """Sum of per-subject Gaussian log densities (constant dropped), one subject at a time."""
    from immrm.data import encode_design
    d = encode_design(ds, WorkingModelSpec(model))
    total = 0.0
    for i in range(ds.n):
        vis = list(d.visits)
        obs = [k for k, t in enumerate(vis) if ds.mask[i, t]]
        if not obs:
            continue
        S = sigmas[ds.arm[i] if model is Model.IMMRM else 0]
        mu = d.tensor[i] @ beta
        y = ds.outcomes[i, [vis[k] for k in obs]]
        lp = stats.multivariate_normal(mu[obs], S[np.ix_(obs, obs)]).logpdf(y)
        total += lp + 0.5 * len(obs) * np.log(2 * np.pi)
    return total


def test_logchol_round_trip(rng):
    A = rng.normal(size=(3, 3))
    S = A @ A.T + np.eye(3)
    a = logchol_from_sigma(S)
    assert np.allclose(sigma_from_logchol(a, 3)[0], S)
    h = 1e-6
    D = dsigma_dalpha(a, 3)
    for l in range(a.size):
        e = np.zeros(a.size)
        e[l] = h
        fd = (sigma_from_logchol(a + e, 3)[0] - sigma_from_logchol(a - e, 3)[0]) / (2 * h)
        assert np.allclose(D[l], fd, atol=1e-8)


@pytest.mark.parametrize("model", ALL_MODELS)
def test_loglik_matches_direct_density(rng, model):
    ds = make_trial(rng, n=12, K=2, J=1, p=1, miss=0.3)
    prob = ModelProblem(ds, WorkingModelSpec(model))
    beta = rng.normal(size=prob.q)
    sig = []
    for _ in range(prob.G):
        A = rng.normal(size=(prob.K, prob.K))
        sig.append(A @ A.T + 0.5 * np.eye(prob.K))
    pv = ParameterVector(model, ds.K, ds.J, ds.p, beta, tuple(sig), np.zeros(ds.J) if model is Model.IMMRM else None)
    assert log_likelihood(pv, ds, WorkingModelSpec(model)) == pytest.approx(
        _direct_loglik(ds, model, beta, sig), abs=1e-10, rel=1e-12)


def test_scalar_ancova_loglik(rng):
    n = 10
    arm = np.arange(n) % 2
    y = rng.normal(size=(n, 1))
    ds = TrialDataset(arm, np.zeros((n, 0)), y, np.ones((n, 1), bool), 1)
    beta = np.array([0.1, 0.4])
    s2 = 1.7
    r = y[:, 0] - beta[0] - beta[1] * arm
    pv = ParameterVector(Model.ANCOVA, 1, 1, 0, beta, (np.array([[s2]]),))
    assert log_likelihood(pv, ds, WorkingModelSpec("ancova")) == pytest.approx(-0.5 * np.sum(np.log(s2) + r ** 2 / s2))


@pytest.mark.parametrize("model", ALL_MODELS)
def test_covariance_score_is_loglik_gradient(rng, model):
    ds = make_trial(rng, n=30, K=3, J=1, p=1, miss=0.3)
    spec = WorkingModelSpec(model)
    prob = ModelProblem(ds, spec)
    theta = solve(ds, spec).theta_flat() + 0.05 * rng.normal(size=prob.dim)
    psi = prob.psi(theta)
    _, beta, alphas = prob.unpack(theta)
    from immrm.data import encode_design
    d = encode_design(ds, spec)

    def ell(i, g, a):
        vis = list(d.visits)
        obs = [k for k, t in enumerate(vis) if ds.mask[i, t]]
        if not obs:
            return 0.0
        S = sigma_from_logchol(a, prob.K)[0][np.ix_(obs, obs)]
        r = ds.outcomes[i, [vis[k] for k in obs]] - (d.tensor[i] @ beta)[obs]
        return -0.5 * (np.linalg.slogdet(S)[1] + r @ np.linalg.solve(S, r))

    h = 1e-6
    for i in range(ds.n):
        g = ds.arm[i] if model is Model.IMMRM else 0
        for l in range(prob.na):
            e = np.zeros(prob.na)
            e[l] = h
            fd = (ell(i, g, alphas[g] + e) - ell(i, g, alphas[g] - e)) / (2 * h)
            assert psi[i, prob.sl_alpha[g]][l] == pytest.approx(fd, abs=1e-6)


def test_ancova_psi_zero_without_final_visit(rng):
    ds = make_trial(rng, n=20, K=3, miss=0.4)
    spec = WorkingModelSpec("ancova")
    fit = solve(ds, spec)
    i = int(np.flatnonzero(~ds.mask[:, -1])[0])
    assert np.array_equal(estimating_function(fit.theta_hat, i, ds, spec), np.zeros(fit.problem.dim))


@pytest.mark.parametrize("model", ALL_MODELS)
def test_fitted_mean_estimating_function_vanishes(rng, model):
    ds = make_trial(rng, n=50, K=3, J=2, p=2, miss=0.25)
    spec = WorkingModelSpec(model)
    fit = solve(ds, spec)
    assert fit.converged
    psi = estimating_functions(fit.theta_hat, ds, spec)
    rms = np.sqrt((psi ** 2).mean(axis=0))
    rel = np.abs(psi.mean(axis=0)) / np.where(rms > 0, rms, 1)
    assert rel.max() < 1e-8
    assert fit.final_gradient_norm < 1e-8


@pytest.mark.parametrize("model", ALL_MODELS)
def test_loglik_trace_monotone(rng, model):
    ds = make_trial(rng, n=80, K=3, J=1, p=2, miss=0.35)
    tr = np.array(solve(ds, WorkingModelSpec(model)).loglik_trace)
    assert np.all(np.diff(tr) >= -1e-12 * np.maximum(1, np.abs(tr[1:])))


def test_difference_in_means(rng):
    n = 30
    arm = np.arange(n) % 2
    y = rng.normal(size=(n, 1)) + arm[:, None]
    ds = TrialDataset(arm, np.zeros((n, 0)), y, np.ones((n, 1), bool), 1)
    want = y[arm == 1].mean() - y[arm == 0].mean()
    for m in ALL_MODELS:
        assert solve(ds, WorkingModelSpec(m)).delta_hat[0] == pytest.approx(want, abs=1e-12)


def test_single_visit_collapse(rng):
    ds = make_trial(rng, n=40, K=1, J=2, p=2, miss=0.0)
    a = solve(ds, WorkingModelSpec("ancova"))
    for m in ("mmrm1", "mmrm2"):
        b = solve(ds, WorkingModelSpec(m))
        assert np.allclose(b.delta_hat, a.delta_hat, atol=1e-10)
        assert b.theta_hat.covariance[0][0, 0] == pytest.approx(a.theta_hat.sigma2, rel=1e-10)


def test_single_visit_immrm_is_heterogeneous_slope_regression(rng):
    ds = make_trial(rng, n=60, K=1, J=2, p=2, miss=0.0)
    X, y, xbar = ds.covariates, ds.outcomes[:, 0], ds.covariates.mean(axis=0)
    means = []
    for j in range(3):
        idx = ds.arm == j
        D = np.column_stack([np.ones(idx.sum()), X[idx] - xbar])
        means.append(np.linalg.lstsq(D, y[idx], rcond=None)[0][0])
    want = np.array(means[1:]) - means[0]
    assert np.allclose(solve(ds, WorkingModelSpec("immrm")).delta_hat, want, atol=1e-10)


def test_immrm_separable_with_complete_data(rng):
    ds = make_trial(rng, n=60, K=3, J=1, p=2, miss=0.0)
    fit = solve(ds, WorkingModelSpec("immrm"))
    X = ds.covariates
    for j in range(2):
        idx = ds.arm == j
        D = np.column_stack([np.ones(idx.sum()), X[idx]])
        coef, *_ = np.linalg.lstsq(D, ds.outcomes[idx], rcond=None)
        R = ds.outcomes[idx] - D @ coef
        assert np.allclose(fit.theta_hat.covariance[j], R.T @ R / idx.sum(), atol=1e-7)


def test_extract_delta_arithmetic():
    K, J, p = 2, 1, 1
    beta = np.zeros(K * (1 + J + p + J * p))
    from immrm.estimators import arm_effect_index, interaction_index
    beta[arm_effect_index(Model.IMMRM, K, J, 1)] = 0.3
    beta[interaction_index(K, J, p, 1, 0)] = 0.5
    pv = ParameterVector(Model.IMMRM, K, J, p, beta, (np.eye(2), np.eye(2)), np.zeros(1))
    assert extract_delta(pv, xbar=[0.4])[0] == pytest.approx(0.5)
    beta[interaction_index(K, J, p, 1, 0)] = 0.0
    pv = dataclasses.replace(pv, beta=beta)
    assert extract_delta(pv, xbar=[0.4])[0] == pytest.approx(0.3)


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.sampled_from(ALL_MODELS))
def test_final_visit_shift_equivariance(seed, c, model):
    ds = make_trial(np.random.default_rng(seed), n=40, K=2, J=2, p=1, miss=0.25)
    j = 2
    Y = ds.outcomes.copy()
    Y[ds.arm == j, -1] += c
    ds2 = dataclasses.replace(ds, outcomes=Y)
    d1 = solve(ds, WorkingModelSpec(model)).delta_hat
    d2 = solve(ds2, WorkingModelSpec(model)).delta_hat
    assert d2[j - 1] - d1[j - 1] == pytest.approx(c, abs=1e-7)
    assert d2[0] == pytest.approx(d1[0], abs=1e-7)


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.sampled_from(ALL_MODELS))
def test_covariate_affine_invariance(seed, model):
    rng = np.random.default_rng(seed)
    ds = make_trial(rng, n=50, K=3, J=1, p=2, miss=0.25)
    A = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    b = rng.normal(size=2)
    ds2 = dataclasses.replace(ds, covariates=ds.covariates @ A + b)
    d1 = solve(ds, WorkingModelSpec(model)).delta_hat
    d2 = solve(ds2, WorkingModelSpec(model)).delta_hat
    assert np.allclose(d1, d2, atol=1e-8)


def test_convergence_flag_and_errors(rng):
    ds = make_trial(rng, n=60, K=3, miss=0.3)
    f = solve(ds, WorkingModelSpec("mmrm1"), SolverOptions(max_iterations=1))
    assert not f.converged and f.iterations == 1
    dup = dataclasses.replace(ds, covariates=np.hstack([ds.covariates, 2 * ds.covariates]),
                              covariate_names=("x1", "x2"))
    with pytest.raises(SingularDesignError, match="x2"):
        solve(dup, WorkingModelSpec("mmrm2"))
    M = ds.mask.copy()
    M[ds.arm == 1, 0] = False
    bad = dataclasses.replace(ds, mask=M, outcomes=np.where(M, ds.outcomes, np.nan))
    with pytest.raises(PositivityError, match="arm 1"):
        solve(bad, WorkingModelSpec("immrm"))


def test_pattern_only_in_one_arm_is_allowed(rng):
    ds = make_trial(rng, n=40, K=2, miss=0.0)
    M = ds.mask.copy()
    M[np.flatnonzero(ds.arm == 1)[-3:], 0] = False
    ds2 = dataclasses.replace(ds, mask=M, outcomes=np.where(M, ds.outcomes, np.nan))
    assert solve(ds2, WorkingModelSpec("immrm")).converged
