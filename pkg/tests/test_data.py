import itertools

import numpy as np
import pytest

from immrm.data import (ALL_MODELS, CsvSchema, Model, TrialDataset, WorkingModelSpec, encode_design, load_csv,
                        n_fixed_effects, validate, write_csv)
from immrm.errors import InputError, ParseError
from immrm.estimators import solve
from immrm.simulate import bundled_config, generate, load_config


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_row_file(tmp_path):
    p = _write(tmp_path, "id,arm,x1,y1,y2\na,0,0.5,1.0,2.0\nb,1,-0.5,1.5,\nc,1,0.1,0.2,0.3\n")
    ds = load_csv(p)
    assert (ds.n, ds.K, ds.J, ds.p) == (3, 2, 1, 1)
    assert ds.mask.tolist() == [[True, True], [True, False], [True, True]]
    assert np.isnan(ds.outcomes[1, 1])


def test_arm_outside_declared_range(tmp_path):
    p = _write(tmp_path, "id,arm,y1\na,0,1\nb,1,2\nc,2,3\n")
    with pytest.raises(ParseError, match="row 4"):
        load_csv(p, CsvSchema(J=1))


@pytest.mark.parametrize("text,pattern", [
    ("id,arm,y1\na,0,1\nb,1,abc\n", "row 3"),
    ("id,arm,y1\na,0,1\na,1,2\n", "row 3: duplicate id"),
    ("id,arm,y1\n", "zero subjects"),
    ("id,arm,y1\na,0,1\nb,x,2\n", "row 3"),
    ("id,arm,y1\na,0,1\nb,1\n", "row 3"),
])
def test_parse_errors_name_rows(tmp_path, text, pattern):
    with pytest.raises(ParseError, match=pattern):
        load_csv(_write(tmp_path, text))


def test_missing_file_named(tmp_path):
    with pytest.raises(InputError, match="nope.csv"):
        load_csv(tmp_path / "nope.csv")


def test_simulated_file_round_trip(tmp_path):
    cfg = load_config(bundled_config("shift_mcar"))
    import dataclasses
    cfg = dataclasses.replace(cfg, n=844)
    ds = generate(cfg, np.random.default_rng(7)).dataset
    p = tmp_path / "sim.csv"
    write_csv(ds, p)
    back = load_csv(p, CsvSchema(stratum_col="stratum"))
    assert (back.n, back.K) == (844, 5)
    assert np.array_equal(back.arm, ds.arm)
    assert np.array_equal(back.mask, ds.mask)
    assert np.array_equal(back.outcomes[ds.mask], ds.outcomes[ds.mask])
    assert np.array_equal(back.covariates, ds.covariates)
    assert back.covariate_names == ds.covariate_names
    p2 = tmp_path / "again.csv"
    write_csv(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_stratum_dummies_appended(tmp_path):
    p = _write(tmp_path, "id,arm,s,x1,y1\na,0,1,0.1,1\nb,1,2,0.2,2\nc,0,3,0.3,3\nd,1,2,0.0,1\n")
    ds = load_csv(p, CsvSchema(stratum_col="s"))
    assert ds.covariate_names == ("x1", "stratum_2", "stratum_3")
    assert ds.n_stratum_dummies == 2
    assert ds.covariates[:, 1].tolist() == [0, 1, 0, 1]
    kept = load_csv(p, CsvSchema(stratum_col="s", strata_in_covariates=True))
    assert kept.p == 1


def test_validate_flags():
    M = np.array([[1, 1], [1, 0], [1, 1], [0, 1]], bool)
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    ds = TrialDataset([0, 1, 0, 1], X, np.ones((4, 2)), M, 1)
    r = validate(ds)
    assert r.positivity_violated and r.arms_without_complete_case == (1,)
    assert r.complete_cases_per_arm == (2, 0)
    ds2 = TrialDataset([0, 1, 0, 1], np.hstack([X, X]), np.ones((4, 2)), np.ones((4, 2), bool), 1)
    r2 = validate(ds2)
    assert r2.rank_deficient and r2.collinear_columns == ("x2",)
    assert not r2.positivity_violated
    assert r2.pattern_counts == {"11": 4}


def test_dataset_invariants():
    with pytest.raises(InputError):
        TrialDataset([0, 0], np.zeros((2, 0)), np.ones((2, 1)), np.ones((2, 1), bool), 1)
    with pytest.raises(InputError):
        TrialDataset([0, 1], np.array([[np.nan], [1.0]]), np.ones((2, 1)), np.ones((2, 1), bool), 1)
    with pytest.raises(InputError):
        TrialDataset([0, 1], np.zeros((2, 0)), np.array([[np.inf], [1.0]]), np.ones((2, 1), bool), 1)
    ds = TrialDataset([0, 1], np.zeros((2, 0)), np.ones((2, 1)), np.ones((2, 1), bool), 1)
    with pytest.raises(ValueError):
        ds.outcomes[0, 0] = 5.0


@pytest.mark.parametrize("K,J,p", list(itertools.product(range(1, 5), repeat=3)))
def test_design_column_counts(K, J, p):
    rng = np.random.default_rng(K * 100 + J * 10 + p)
    n = 3 * (J + 1)
    ds = TrialDataset(np.arange(n) % (J + 1), rng.normal(size=(n, p)), rng.normal(size=(n, K)),
                      np.ones((n, K), bool), J)
    expected = {Model.ANCOVA: 1 + J + p, Model.MMRM_I: K * (1 + J) + p,
                Model.MMRM_II: K * (1 + J + p), Model.IMMRM: K * (1 + J + p + J * p)}
    for m in ALL_MODELS:
        d = encode_design(ds, WorkingModelSpec(m))
        assert d.n_columns == expected[m] == n_fixed_effects(m, K, J, p)
        assert len(d) == n and d[0].matrix.shape[1] == expected[m]


def test_small_design_counts_and_k1_collapse(rng):
    ds = TrialDataset([0, 1, 0, 1], rng.normal(size=(4, 1)), rng.normal(size=(4, 2)), np.ones((4, 2), bool), 1)
    assert encode_design(ds, WorkingModelSpec("mmrm2")).n_columns == 6
    assert encode_design(ds, WorkingModelSpec("immrm")).n_columns == 8
    ds1 = TrialDataset([0, 1, 0, 1], rng.normal(size=(4, 2)), rng.normal(size=(4, 1)), np.ones((4, 1), bool), 1)
    a = encode_design(ds1, WorkingModelSpec("ancova")).tensor
    b = encode_design(ds1, WorkingModelSpec("mmrm1")).tensor
    assert np.array_equal(a, b)


def test_all_missing_subject_only_moves_covariate_mean(rng):
    from conftest import make_trial
    ds = make_trial(rng, n=40, K=2, p=1, miss=0.2)
    extra_y = np.vstack([ds.outcomes, [[np.nan, np.nan]]])
    extra_m = np.vstack([ds.mask, [[False, False]]])
    extra_x = np.vstack([ds.covariates, [[5.0]]])
    ds2 = TrialDataset(np.append(ds.arm, 1), extra_x, extra_y, extra_m, 1)
    for m in ALL_MODELS:
        f1, f2 = solve(ds, WorkingModelSpec(m)), solve(ds2, WorkingModelSpec(m))
        assert f2.loglik == pytest.approx(f1.loglik, rel=1e-9, abs=1e-9)
        assert np.allclose(f2.theta_hat.beta, f1.theta_hat.beta, atol=1e-7)
        assert f2.xbar[0] == pytest.approx((f1.xbar[0] * 40 + 5.0) / 41)
