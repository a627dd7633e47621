import json

import numpy as np
import pytest

from immrm.cli import main
from immrm.data import write_csv
from immrm.oracle import counterexample_dgp, dgp_to_dict

from conftest import make_trial


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_counterexample_output(capsys):
    code, out, _ = run(capsys, "oracle", "--counterexample")
    assert "ANCOVA 27.000000000" in out
    assert "MMRM-II 28.312925170" in out
    assert code == 0                              # only ANCOVA vs MMRM-II flips; IMMRM still dominates


def test_sweep_exit_code(capsys):
    code, out, _ = run(capsys, "oracle", "--sweep", "10", "--seed", "3")
    assert code == 0 and "violated in 0" in out


def test_homoscedastic_population_table(capsys, tmp_path):
    cfg = {"pi": [0.5, 0.5], "strata": [{"prob": 1.0, "mean": [0.0]}], "cov_x_within": [[1.0]],
           "arms": [{"intercept": [0.0, 0.0], "slopes": [[0.5], [0.5]], "noise_cov": [[1.0, 0.3], [0.3, 1.0]]}] * 2,
           "patterns": {"11": 1.0}}
    p = tmp_path / "h.json"
    p.write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "oracle", "--config", str(p), "--out", str(tmp_path / "o"))
    assert code == 0
    rep = json.loads((tmp_path / "o" / "oracle.json").read_text())
    vals = [rep["v_tilde"][k][0][0] for k in ("ANCOVA", "MMRM-I", "MMRM-II", "IMMRM")]
    assert np.allclose(vals, vals[0], atol=1e-12)
    for lab in ("ANCOVA", "MMRM-I", "MMRM-II", "IMMRM"):
        assert lab in out


def test_non_pd_population_rejected(capsys, tmp_path):
    d = dgp_to_dict(counterexample_dgp())
    d["arms"][0]["noise_cov"] = [[1.0, 3.0], [3.0, 1.0]]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    code, _, err = run(capsys, "oracle", "--config", str(p))
    assert code == 1 and err.startswith("error:") and err.count("\n") == 1


@pytest.fixture
def trial_csv(tmp_path):
    ds = make_trial(np.random.default_rng(5), n=80, K=3, J=1, p=2, strata=2)
    path = tmp_path / "trial.csv"
    write_csv(ds, path)
    return path


def test_fit_all_writes_four_tables(capsys, tmp_path, trial_csv):
    out = tmp_path / "report"
    code, stdout, _ = run(capsys, "fit", str(trial_csv), "--model", "all", "--strata-col", "stratum",
                          "--out", str(out))
    assert code == 0
    for m in ("ancova", "mmrm1", "mmrm2", "immrm"):
        tab = json.loads((out / f"{m}.json").read_text())
        assert tab["schema_version"] == 1
        assert (out / f"{m}.csv").read_bytes().startswith(b"arm,estimate")
    assert stdout.count("arm 1") == 4


def test_fit_missing_file(capsys, tmp_path):
    path = tmp_path / "nope.csv"
    code, _, err = run(capsys, "fit", str(path))
    assert code == 1 and err.startswith("error:") and str(path) in err


def test_fit_positivity_violation(capsys, tmp_path):
    ds = make_trial(np.random.default_rng(6), n=30, K=2, J=1, p=1, miss=0.0)
    mask = ds.mask.copy()
    mask[ds.arm == 1, 1] = False
    bad = type(ds)(ds.arm, ds.covariates, np.where(mask, ds.outcomes, np.nan), mask, 1)
    path = tmp_path / "bad.csv"
    write_csv(bad, path)
    code, _, err = run(capsys, "fit", str(path), "--model", "immrm")
    assert code == 1 and "positivity" in err and err.startswith("error:")


SMALL = """n_per_arm = 30
n_replications = {reps}
seed = 99
{extra}
[shift]
c = [[0.0, 0.0, 0.0, 0.0, 0.0], [-0.2, -0.5, -0.8, -0.9, -1.0]]
alpha = [[0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]]
gamma = [[0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]]

[randomization]
kind = "stratified"
block_size = {bs}

[missingness]
kind = "mcar"
rates = [0.03, 0.06, 0.10, 0.13, 0.15]
"""


def test_block_size_five_rejected(capsys, tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL.format(reps=2, extra="", bs=5))
    code, _, err = run(capsys, "simulate", str(p))
    assert code == 1 and "non-integral block composition" in err


def test_invalid_key_named(capsys, tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL.format(reps=2, extra="repliactions = 3", bs=6))
    code, _, err = run(capsys, "simulate", str(p))
    assert code == 1 and "'repliactions'" in err


def test_simulate_threads_identical(capsys, tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL.format(reps=6, extra="", bs=6))
    assert run(capsys, "simulate", str(p), "--threads", "1", "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, "simulate", str(p), "--threads", "8", "--out", str(tmp_path / "b"))[0] == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert {r["estimator"] for r in json.loads(a)["rows"]} == {"ANCOVA", "MMRM-I", "MMRM-II", "IMMRM"}


def test_bundled_smoke(capsys):
    code, out, _ = run(capsys, "simulate", "--bundled", "mcar_small", "--replications", "3")
    assert code == 0 and "IMMRM" in out


def test_bad_arguments_exit_one(capsys):
    assert run(capsys, "fit")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
