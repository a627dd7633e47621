import dataclasses

import numpy as np
import pytest

from conftest import make_trial
from immrm.data import ALL_MODELS, Model, TrialDataset, WorkingModelSpec
from immrm.errors import InputError
from immrm.estimators import solve
from immrm.oracle import _correction, population_quantities, random_dgp
from immrm.variance import (correction_inputs, correction_matrix, estimate_variances, infer, jacobian, sandwich,
                            stratified_correction, wald)


@pytest.mark.parametrize("model", ALL_MODELS)
def test_analytic_beta_block_matches_finite_differences(rng, model):
    ds = make_trial(rng, n=60, K=2, J=1, p=1, miss=0.3)
    fit = solve(ds, WorkingModelSpec(model))
    jac = jacobian(fit)
    sl = fit.problem.sl_beta
    fd = jac.matrix[sl, sl]
    assert np.allclose(fd, jac.beta_block, rtol=1e-5, atol=1e-5 * np.abs(jac.beta_block).max())


def test_scalar_ancova_jacobian_by_hand(rng):
    n = 20
    arm = np.arange(n) % 2
    y = rng.normal(size=(n, 1))
    M = np.ones((n, 1), bool)
    M[[2, 5, 7]] = False                       # two control, one treated drop
    ds = TrialDataset(arm, np.zeros((n, 0)), np.where(M, y, np.nan), M, 1)
    fit = solve(ds, WorkingModelSpec("ancova"))
    s2 = fit.theta_hat.sigma2
    f0 = np.mean((arm == 0) & M[:, 0])
    f1 = np.mean((arm == 1) & M[:, 0])
    want = -np.array([[f0 + f1, f1], [f1, f1]]) / s2
    jac = jacobian(fit)
    assert np.allclose(jac.matrix[:2, :2], want, rtol=1e-6)


@pytest.mark.parametrize("model", ALL_MODELS)
def test_jacobian_taylor(rng, model):
    ds = make_trial(rng, n=40, K=2, J=1, p=1, miss=0.25)
    fit = solve(ds, WorkingModelSpec(model))
    prob, th = fit.problem, fit.theta_flat()
    J = jacobian(fit).matrix
    d = 1e-4 * rng.normal(size=th.size)
    lin = prob.mean_psi(th) + J @ d
    assert np.abs(prob.mean_psi(th + d) - lin).max() < 1e-6


def test_difference_in_means_sandwich(rng):
    n = 50
    arm = (rng.random(n) < 0.4).astype(int)
    arm[:2] = [0, 1]
    y = rng.normal(size=(n, 1)) * (1 + arm[:, None])
    ds = TrialDataset(arm, np.zeros((n, 0)), y, np.ones((n, 1), bool), 1)
    want = sum(np.var(y[arm == j, 0]) / np.mean(arm == j) for j in (0, 1)) / n
    for m in ALL_MODELS:
        assert sandwich(solve(ds, WorkingModelSpec(m)))[0, 0] == pytest.approx(want, rel=1e-8)


def test_sandwich_symmetric_psd_random_fixtures():
    rng = np.random.default_rng(5)
    for k in range(50):
        ds = make_trial(rng, n=50, K=int(rng.integers(1, 4)), J=int(rng.integers(1, 3)), p=1, miss=0.2)
        V = sandwich(solve(ds, WorkingModelSpec(ALL_MODELS[k % 4])))
        assert np.allclose(V, V.T, atol=0)
        assert np.linalg.eigvalsh(V)[0] >= -1e-14 * np.abs(V).max()


@pytest.mark.parametrize("model", ALL_MODELS)
def test_stratified_never_exceeds_simple(rng, model):
    ds = make_trial(rng, n=120, K=3, J=2, p=1, miss=0.2, strata=3)
    ds = dataclasses.replace(ds, covariates=np.hstack([ds.covariates, (ds.stratum[:, None] == [2, 3]).astype(float)]),
                             covariate_names=("x1", "stratum_2", "stratum_3"))
    fit = solve(ds, WorkingModelSpec(model))
    v = estimate_variances(fit, ds)
    assert v.stratified
    if model is Model.IMMRM:
        assert np.array_equal(v.v_corrected, v.v_tilde)
    corr = correction_matrix(correction_inputs(ds, fit), model)
    if np.linalg.eigvalsh(corr)[0] >= 0 and not v.floored:
        assert np.all(np.diag(v.v_corrected) <= np.diag(v.v_tilde) + 1e-10)


def test_single_stratum_has_no_correction(rng):
    ds = make_trial(rng, n=80, K=2, miss=0.2)
    ds = dataclasses.replace(ds, stratum=np.ones(ds.n, dtype=int))
    for m in ALL_MODELS:
        fit = solve(ds, WorkingModelSpec(m))
        inp = correction_inputs(ds, fit)
        assert np.allclose(inp.var_EXS, 0, atol=1e-14)
        v = estimate_variances(fit, ds)
        assert np.allclose(v.v_corrected, v.v_tilde, rtol=1e-12, atol=1e-16)


def test_correction_needs_strata(rng):
    ds = make_trial(rng, n=40, K=2)
    fit = solve(ds, WorkingModelSpec("ancova"))
    with pytest.raises(InputError, match="stratified correction requires stratum labels"):
        stratified_correction(ds, fit)
    with pytest.raises(InputError):
        infer(fit, estimate_variances(fit, ds), randomization="stratified")


def test_two_arm_equal_allocation_ancova_correction_vanishes():
    rng = np.random.default_rng(11)
    for _ in range(20):
        dgp = random_dgp(rng, 3, 1, 2, 3, pi=[0.5, 0.5])
        assert abs(_correction(dgp, population_quantities(dgp), Model.ANCOVA)[0, 0]) < 1e-8


@pytest.mark.parametrize("model", ALL_MODELS)
def test_scale_equivariance(rng, model):
    ds = make_trial(rng, n=90, K=2, J=1, p=1, miss=0.2, strata=2)
    ds = dataclasses.replace(ds, covariates=np.hstack([ds.covariates, (ds.stratum[:, None] == 2).astype(float)]),
                             covariate_names=("x1", "stratum_2"))
    c = 3.0
    ds2 = dataclasses.replace(ds, outcomes=c * ds.outcomes)
    v1 = estimate_variances(solve(ds, WorkingModelSpec(model)), ds)
    v2 = estimate_variances(solve(ds2, WorkingModelSpec(model)), ds2)
    assert np.allclose(v2.v_tilde, c ** 2 * v1.v_tilde, rtol=1e-5)
    assert np.allclose(v2.v_corrected, c ** 2 * v1.v_corrected, rtol=1e-5)


def test_wald():
    z, p, lo, hi = wald(0.0, 1.0)
    assert (lo, hi) == pytest.approx((-1.959963985, 1.959963985))
    assert p == 1.0
    z, p, lo, hi = wald(-1.0, 0.25)
    assert z == -4.0
    assert p == pytest.approx(6.334e-5, rel=1e-3)


def test_inference_table_serialisation(rng):
    ds = make_trial(rng, n=60, K=2, J=2, strata=2)
    fit = solve(ds, WorkingModelSpec("immrm"))
    t = infer(fit, estimate_variances(fit, ds), 0.9, "stratified")
    d = t.to_dict()
    assert d["schema_version"] == 1 and len(d["rows"]) == 2
    lines = t.to_csv().split("\r\n")
    assert lines[0] == "arm,estimate,se_simple,se_stratified,ci_low,ci_high,z,p"
    assert len(lines) == 4 and lines[-1] == ""
    r = t.rows[0]
    assert r.ci_high - r.estimate == pytest.approx(1.6448536 * r.se_stratified, rel=1e-6)
