"""Synthetic trials and a replication harness for operating characteristics.

Two outcome generators are available:

* ``ShiftGenerator``: a Gaussian control-arm law for ``Y(0)`` given a
  baseline score ``X1``; treated arms add a visit-specific constant plus
  linear and quadratic terms in centred ``X1``.  Strata are the joint levels
  of a binary covariate and ``1{X1 >= threshold}``.
* ``PopulationDgp`` from :mod:`immrm.oracle`, for which asymptotic
  covariances are known exactly.

Each replication draws from its own ``SeedSequence`` child, so results do not
depend on how replications are spread over worker processes.
"""
from __future__ import annotations

import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .data import ALL_MODELS, Model, TrialDataset, WorkingModelSpec, stratum_dummies
from .errors import ConfigError, InputError
from .estimators import solve
from .oracle import PopulationDgp, dgp_from_dict
from .patterns import PatternDistribution, bits_to_mask
from .variance import estimate_variances

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1

# dropout model: P(still observed at t | observed before t) = expit(logit(q_t) + b_t(A) * Z_t)
# with Z_1 = X1 and Z_t = residual of the previous visit
MAR_RETENTION = (0.99, 0.969, 0.958, 0.967, 0.977)
MAR_SLOPES = ((-0.14, -0.14, -0.12),
              (-0.70, -0.70, -0.50),
              (-0.72, -0.72, -0.51),
              (-0.74, -0.74, -0.52),
              (-0.76, -0.76, -0.53))


# ---------------------------------------------------------------- config types

@dataclass(frozen=True)
class ShiftGenerator:
    """Treatment-shift outcome law.

    ``Y(0) = base_mean + base_x1_slope * (X1 - x1_mean) + e`` with ``e``
    Gaussian, AR(1) correlation ``base_rho`` and visit SDs ``base_sd``.
    For arm ``j >= 1``::

        Y_t(j) = c[j-1, t] + Y_t(0) + alpha[j-1, t] (X1 - E X1) + gamma[j-1, t] (X1^2 - E X1^2)

    Centring uses population moments, so the final-visit effect is exactly
    ``c[:, -1]``.
    """

    c: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    pi: np.ndarray
    x1_mean: float = 8.0
    x1_sd: float = 0.9
    x2_prob: float = 0.6
    x3_threshold: float = 8.5
    base_mean: np.ndarray = field(default_factory=lambda: np.array([-0.6, -1.0, -1.2, -1.25, -1.25]))
    base_x1_slope: np.ndarray = field(default_factory=lambda: np.array([-0.25, -0.35, -0.4, -0.42, -0.45]))
    base_sd: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.8, 0.85, 0.9, 0.9]))
    base_rho: float = 0.7

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        J, K = c.shape
        for name in ("alpha", "gamma"):
            a = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if a.shape != (J, K):
                raise ConfigError(f"shift.{name} must have shape ({J}, {K})")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "c", c)
        for name in ("base_mean", "base_x1_slope", "base_sd"):
            a = np.asarray(getattr(self, name), dtype=float).ravel()
            if a.size != K:
                raise ConfigError(f"shift.{name} must have length K={K}")
            object.__setattr__(self, name, a)
        if np.any(self.base_sd <= 0) or not -1 < self.base_rho < 1:
            raise ConfigError("shift.base_sd must be positive and |base_rho| < 1")
        if self.x1_sd <= 0 or not 0 < self.x2_prob < 1:
            raise ConfigError("shift.x1_sd must be positive and 0 < x2_prob < 1")
        object.__setattr__(self, "pi", _check_pi(self.pi, J))

    @property
    def K(self) -> int:
        return self.c.shape[1]

    @property
    def J(self) -> int:
        return self.c.shape[0]

    def base_cov(self) -> np.ndarray:
        t = np.arange(self.K)
        R = self.base_rho ** np.abs(t[:, None] - t[None, :])
        return R * np.outer(self.base_sd, self.base_sd)

    def truth(self) -> np.ndarray:
        return self.c[:, -1].copy()


def _check_pi(pi, J):
    pi = np.full(J + 1, 1.0 / (J + 1)) if pi is None else np.asarray(pi, dtype=float).ravel()
    if pi.size != J + 1 or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-12:
        raise ConfigError(f"pi must be {J + 1} non-negative numbers summing to 1")
    return pi


@dataclass(frozen=True)
class Randomization:
    kind: str = "simple"
    block_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("simple", "stratified"):
            raise ConfigError(f"randomization.kind must be 'simple' or 'stratified', got {self.kind!r}")
        if self.kind == "stratified" and (self.block_size is None or int(self.block_size) < 1):
            raise ConfigError("stratified randomization needs a positive block_size")


@dataclass(frozen=True)
class Missingness:
    """Censoring mechanism.

    kind : 'none', 'mcar' (per-visit rates; monotone unless ``monotone`` is
        False), 'pattern' (i.i.d. draws from the population's pattern law) or
        'mar' (sequential logistic dropout).
    retention : per-visit baseline probabilities of remaining observed (mar).
    slopes : (K, J+1) dropout coefficients per visit and arm (mar).
    """

    kind: str = "none"
    rates: tuple[float, ...] | None = None
    monotone: bool = True
    retention: tuple[float, ...] | None = None
    slopes: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "mcar", "pattern", "mar"):
            raise ConfigError(f"missingness.kind must be none, mcar, pattern or mar, got {self.kind!r}")
        if self.kind == "mcar":
            if self.rates is None:
                raise ConfigError("mcar missingness needs 'rates'")
            r = tuple(float(x) for x in self.rates)
            if any(not 0 <= x < 1 for x in r):
                raise ConfigError("missing rates must lie in [0, 1)")
            object.__setattr__(self, "rates", r)
        if self.kind == "mar":
            ret = tuple(self.retention if self.retention is not None else MAR_RETENTION)
            sl = np.asarray(self.slopes if self.slopes is not None else MAR_SLOPES, dtype=float)
            if sl.ndim != 2 or sl.shape[0] != len(ret):
                raise ConfigError("mar coefficient list length must equal the number of visits")
            if any(not 0 < q < 1 for q in ret):
                raise ConfigError("mar retention probabilities must lie in (0, 1)")
            object.__setattr__(self, "retention", ret)
            object.__setattr__(self, "slopes", sl)


@dataclass(frozen=True)
class SimConfig:
    """One simulation study.

    ``n`` is the total sample size per replication.  ``se`` selects which
    standard error drives intervals and tests: 'auto' uses the stratified
    one under stratified randomization.
    """

    n: int
    n_replications: int
    seed: int
    source: ShiftGenerator | PopulationDgp
    randomization: Randomization = Randomization()
    missingness: Missingness = Missingness()
    estimators: tuple[Model, ...] = ALL_MODELS
    level: float = 0.95
    se: str = "auto"
    compute_se: bool = True

    def __post_init__(self):
        if int(self.n) < 2 or int(self.n_replications) < 1:
            raise ConfigError("n must be >= 2 and n_replications >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.se not in ("auto", "simple", "stratified"):
            raise ConfigError("se must be auto, simple or stratified")
        if not self.estimators:
            raise ConfigError("no estimators requested")
        K = self.K
        m = self.missingness
        if m.kind == "mcar" and len(m.rates) != K:
            raise ConfigError(f"mcar rates must have length K={K}")
        if m.kind == "mar":
            if m.slopes.shape != (K, self.J + 1):
                raise ConfigError(f"mar coefficients must have shape ({K}, {self.J + 1})")
        if m.kind == "pattern" and not isinstance(self.source, PopulationDgp):
            raise ConfigError("pattern missingness needs a population source")
        if self.randomization.kind == "stratified":
            block_composition(self.pi, self.randomization.block_size)

    @property
    def K(self) -> int:
        return self.source.K

    @property
    def J(self) -> int:
        return self.source.J

    @property
    def pi(self) -> np.ndarray:
        return self.source.pi

    def truth(self) -> np.ndarray:
        return true_effect(self.source)


def true_effect(source) -> np.ndarray:
    if isinstance(source, ShiftGenerator):
        return source.truth()
    probs = np.array([s.prob for s in source.strata])
    mu = probs @ np.array([s.mean for s in source.strata]).reshape(len(probs), -1)
    final = np.array([a.intercept[-1] + a.slopes[-1] @ mu for a in source.arm_models])
    return final[1:] - final[0]


# ---------------------------------------------------------------- config I/O

_TOP = {"n", "n_per_arm", "n_replications", "seed", "estimators", "level", "se", "compute_se",
        "shift", "population", "randomization", "missingness"}
_SHIFT = {"c", "alpha", "gamma", "pi", "x1_mean", "x1_sd", "x2_prob", "x3_threshold",
          "base_mean", "base_x1_slope", "base_sd", "base_rho"}


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in {where}")


def config_from_dict(d: dict) -> SimConfig:
    _strict(d, _TOP, "simulation config")
    rz = d.get("randomization", {})
    _strict(rz, {"kind", "block_size"}, "[randomization]")
    ms = d.get("missingness", {})
    _strict(ms, {"kind", "rates", "monotone", "retention", "slopes"}, "[missingness]")
    if ("shift" in d) == ("population" in d):
        raise ConfigError("give exactly one of [shift] or [population]")
    if "shift" in d:
        _strict(d["shift"], _SHIFT, "[shift]")
        for k in ("c", "alpha", "gamma"):
            if k not in d["shift"]:
                raise ConfigError(f"[shift] lacks {k!r}")
        source = ShiftGenerator(**{**{"pi": None}, **d["shift"]})
    else:
        source = dgp_from_dict(d["population"])
    if ("n" in d) == ("n_per_arm" in d):
        raise ConfigError("give exactly one of n or n_per_arm")
    n = int(d["n"]) if "n" in d else int(d["n_per_arm"]) * (source.J + 1)
    for k in ("n_replications", "seed"):
        if k not in d:
            raise ConfigError(f"simulation config lacks {k!r}")
    try:
        ests = tuple(Model.parse(e) for e in d.get("estimators", [m.value for m in ALL_MODELS]))
    except InputError as e:
        raise ConfigError(str(e)) from None
    return SimConfig(n=n, n_replications=int(d["n_replications"]), seed=int(d["seed"]), source=source,
                     randomization=Randomization(**rz), missingness=Missingness(**ms), estimators=ests,
                     level=float(d.get("level", 0.95)), se=d.get("se", "auto"),
                     compute_se=bool(d.get("compute_se", True)))


def load_config(path) -> SimConfig:
    """Read a TOML (or ``.json``) simulation config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            d = json.loads(path.read_text(encoding="utf-8"))
        else:
            d = tomllib.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(d)


def bundled_config(name: str) -> Path:
    p = Path(__file__).parent / "configs" / name
    if not p.suffix:
        p = p.with_suffix(".toml")
    return p


# ---------------------------------------------------------------- assignment

def block_composition(pi, block_size) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    bs = int(block_size) if block_size is not None else 0
    counts = pi * bs
    if bs < 1 or np.any(np.abs(counts - np.round(counts)) > 1e-9):
        raise ConfigError(f"non-integral block composition: block size {block_size} with pi {pi.tolist()}")
    return np.repeat(np.arange(pi.size), np.round(counts).astype(int))


def assign_stratified(strata, pi, block_size, rng) -> np.ndarray:
    """Permuted-block assignment within each stratum, strata in sorted order."""
    block = block_composition(pi, block_size)
    strata = np.asarray(strata)
    arm = np.empty(strata.size, dtype=np.int64)
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        nb = -(-idx.size // block.size)
        seq = np.concatenate([rng.permutation(block) for _ in range(nb)])
        arm[idx] = seq[:idx.size]
    return arm


def assign_simple(n, pi, rng) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    return rng.choice(pi.size, size=int(n), p=pi / pi.sum()).astype(np.int64)


# ---------------------------------------------------------------- censoring

def censor_mcar(n, K, target_rates, rng, monotone: bool = True) -> np.ndarray:
    """Masks with ``P(visit t missing) = target_rates[t]``.

    Monotone censoring inverts the discrete dropout hazard
    ``h_t = (r_t - r_{t-1}) / (1 - r_{t-1})``; a single uniform per subject
    does this exactly, since visit t is missing iff ``U < r_t``.
    """
    r = np.asarray(target_rates, dtype=float)
    if r.size != K:
        raise InputError(f"need {K} missing rates, got {r.size}")
    if np.any((r < 0) | (r >= 1)):
        raise InputError("missing rates must lie in [0, 1)")
    if not monotone:
        return rng.random((n, K)) >= r
    if np.any(np.diff(r) < 0):
        raise InputError("monotone censoring needs non-decreasing missing rates")
    u = rng.random(n)
    return u[:, None] >= r[None, :]


def censor_patterns(n, dist: PatternDistribution, rng) -> np.ndarray:
    """I.i.d. pattern draws; leftover probability mass is the all-missing pattern."""
    pats = [m for m, _ in dist.items()]
    probs = np.array([p for _, p in dist.items()])
    K = dist.K
    choices = pats + [None]
    probs = np.append(probs, max(0.0, 1.0 - probs.sum()))
    pick = rng.choice(len(choices), size=n, p=probs / probs.sum())
    table = np.array([bits_to_mask(m.bits, K) if m is not None else np.zeros(K, bool) for m in choices])
    return table[pick]


def _slr_residuals(y, x):
    xc = x - x.mean()
    sxx = xc @ xc
    b = (xc @ (y - y.mean())) / sxx if sxx > 0 else 0.0
    return y - y.mean() - b * xc


def censor_mar(arm, x1, outcomes, retention, slopes, rng) -> np.ndarray:
    """Sequential logistic dropout.

    At visit 1 the retention log-odds are ``logit(q_1) + b_1(A) X1``; at visit
    ``t > 1`` they are ``logit(q_t) + b_t(A) R_{t-1}``, where ``R_{t-1}`` is
    the residual of the previous outcome on ``X1`` from a simple linear
    regression within the subject's arm.  Once a visit is missed all later
    visits are missing.
    """
    arm = np.asarray(arm)
    Y = np.asarray(outcomes, dtype=float)
    n, K = Y.shape
    slopes = np.asarray(slopes, dtype=float)
    if len(retention) != K or slopes.shape[0] != K:
        raise InputError(f"coefficient list length must equal K={K}")
    resid = np.empty_like(Y)
    for j in np.unique(arm):
        idx = arm == j
        for t in range(K):
            resid[idx, t] = _slr_residuals(Y[idx, t], x1[idx])
    mask = np.zeros((n, K), dtype=bool)
    alive = np.ones(n, dtype=bool)
    for t in range(K):
        z = x1 if t == 0 else resid[:, t - 1]
        keep = expit(logit(retention[t]) + slopes[t, arm] * z)
        alive &= rng.random(n) < keep
        mask[:, t] = alive
    return mask


# ---------------------------------------------------------------- generation

@dataclass(frozen=True)
class GeneratedTrial:
    """Potential outcomes ``(J+1, n, K)`` plus the realised dataset."""

    potential: np.ndarray
    dataset: TrialDataset


def _draw_shift(g: ShiftGenerator, n, rng):
    x1 = g.x1_mean + g.x1_sd * rng.standard_normal(n)
    x2 = (rng.random(n) < g.x2_prob).astype(float)
    x3 = (x1 >= g.x3_threshold).astype(float)
    e = rng.multivariate_normal(np.zeros(g.K), g.base_cov(), size=n, method="cholesky")
    y0 = g.base_mean + np.outer(x1 - g.x1_mean, g.base_x1_slope) + e
    m2 = g.x1_mean ** 2 + g.x1_sd ** 2
    pot = [y0]
    for j in range(g.J):
        pot.append(g.c[j] + y0 + np.outer(x1 - g.x1_mean, g.alpha[j]) + np.outer(x1 * x1 - m2, g.gamma[j]))
    stratum = (2 * x2 + x3).astype(np.int64) + 1
    return np.stack(pot), x1[:, None], stratum, x1


def _draw_population(d: PopulationDgp, n, rng):
    probs = np.array([s.prob for s in d.strata])
    s = rng.choice(probs.size, size=n, p=probs)
    means = np.array([st.mean for st in d.strata]).reshape(probs.size, d.p)
    X = means[s]
    if d.p:
        w, U = np.linalg.eigh(d.cov_x_within)        # PSD; may be singular
        X = X + rng.standard_normal((n, d.p)) @ (U * np.sqrt(np.clip(w, 0, None))).T
    pot = []
    for a in d.arm_models:
        e = rng.multivariate_normal(np.zeros(d.K), a.noise_cov, size=n, method="cholesky")
        pot.append(a.intercept + X @ a.slopes.T + e)
    x1 = X[:, 0] if d.p else np.zeros(n)
    return np.stack(pot), X, s.astype(np.int64) + 1, x1


def generate(config: SimConfig, rng) -> GeneratedTrial:
    """Draw one trial: covariates, potential outcomes, assignment, censoring."""
    src = config.source
    n = int(config.n)
    if isinstance(src, ShiftGenerator):
        pot, X, stratum, x1 = _draw_shift(src, n, rng)
        D, dnames = stratum_dummies(stratum)
        X = np.hstack([X, D])
        names = ("x1", *dnames)
        nd = D.shape[1]
    else:
        pot, X, stratum, x1 = _draw_population(src, n, rng)
        names = tuple(f"x{m + 1}" for m in range(X.shape[1]))
        nd = 0
    if config.randomization.kind == "stratified":
        arm = assign_stratified(stratum, config.pi, config.randomization.block_size, rng)
    else:
        arm = assign_simple(n, config.pi, rng)
    Y = pot[arm, np.arange(n)]
    m = config.missingness
    if m.kind == "none":
        mask = np.ones(Y.shape, dtype=bool)
    elif m.kind == "mcar":
        mask = censor_mcar(n, config.K, m.rates, rng, m.monotone)
    elif m.kind == "pattern":
        mask = censor_patterns(n, src.pattern_dist, rng)
    else:
        mask = censor_mar(arm, x1, Y, m.retention, m.slopes, rng)
    ds = TrialDataset(arm=arm, covariates=X, outcomes=np.where(mask, Y, np.nan), mask=mask, J=config.J,
                      stratum=stratum, covariate_names=names, n_stratum_dummies=nd)
    return GeneratedTrial(pot, ds)


# ---------------------------------------------------------------- harness

def _one_replication(config: SimConfig, seq: np.random.SeedSequence):
    """Estimates and SEs per estimator; NaN rows mark failures."""
    rng = np.random.default_rng(seq)
    J = config.J
    out = np.full((len(config.estimators), 2, J), np.nan)
    try:
        ds = generate(config, rng).dataset
    except InputError:
        return out
    use_strat = config.se == "stratified" or (config.se == "auto" and config.randomization.kind == "stratified")
    for e, model in enumerate(config.estimators):
        try:
            fit = solve(ds, WorkingModelSpec(model))
        except InputError:
            continue
        if not fit.converged:
            continue
        out[e, 0] = fit.delta_hat
        if config.compute_se:
            try:
                v = estimate_variances(fit, ds)
            except InputError:
                out[e, 0] = np.nan
                continue
            V = v.v_corrected if use_strat else v.v_tilde
            out[e, 1] = np.sqrt(np.maximum(np.diag(V), 0.0))
    return out


def _run_block(args):
    config, seqs = args
    return np.stack([_one_replication(config, s) for s in seqs])


@dataclass(frozen=True)
class MetricRow:
    estimator: str
    contrast: int
    bias: float
    ese: float
    ase: float | None
    cp: float | None
    por: float | None
    rmse: float | None
    bias_mcse: float
    rmse_mcse: float | None


@dataclass(frozen=True)
class SimReport:
    """Aggregated operating characteristics.

    ``rmse`` is MSE(estimator) / MSE(IMMRM) over replications where every
    estimator succeeded; ``failures`` counts, per estimator, replications
    whose fit failed or did not converge.  ``estimates`` holds the raw
    ``(used, J)`` estimates per estimator and is not serialised.
    """

    n: int
    n_replications: int
    n_used: int
    truth: np.ndarray
    failures: dict
    rows: tuple[MetricRow, ...]
    estimates: dict = field(default_factory=dict, repr=False, compare=False)
    ses: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "n": self.n, "n_replications": self.n_replications,
                "n_used": self.n_used, "truth": [float(t) for t in self.truth],
                "failures": dict(self.failures),
                "rows": [{k: getattr(r, k) for k in MetricRow.__dataclass_fields__} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        def f(x, w, d):
            return f"{'-':>{w}}" if x is None else f"{x:>{w}.{d}f}"
        buf = io.StringIO()
        buf.write(f"{'Estimator':<10}{'Contrast':>9}{'Bias':>9}{'ESE':>8}{'ASE':>8}"
                  f"{'CP(%)':>8}{'PoR(%)':>8}{'RMSE':>7}\n")
        for r in self.rows:
            buf.write(f"{r.estimator:<10}{r.contrast:>9}{f(r.bias, 9, 3)}{f(r.ese, 8, 3)}{f(r.ase, 8, 3)}"
                      f"{f(r.cp, 8, 1)}{f(r.por, 8, 1)}{f(r.rmse, 7, 2)}\n")
        buf.write(f"replications used: {self.n_used}/{self.n_replications}; failures: "
                  + ", ".join(f"{k}={v}" for k, v in self.failures.items()) + "\n")
        return buf.getvalue()


def _ratio_mcse(a, b):
    """Delta-method standard error of mean(a) / mean(b)."""
    r = a.mean() / b.mean()
    return float(np.std(a - r * b, ddof=1) / (math.sqrt(a.size) * b.mean())) if a.size > 1 else float("nan")


def _fsum_mean(x):
    return math.fsum(x) / len(x)


def aggregate(config: SimConfig, raw: np.ndarray) -> SimReport:
    """Summarise ``raw`` of shape ``(R, n_estimators, 2, J)``."""
    truth = config.truth()
    labels = [m.label for m in config.estimators]
    failed = np.isnan(raw[:, :, 0, :]).any(axis=2)
    if config.compute_se:
        failed |= np.isnan(raw[:, :, 1, :]).any(axis=2)
    ok = ~failed.any(axis=1)
    used = raw[ok]
    zq = stats.norm.ppf(0.5 + config.level / 2)
    rows = []
    est_map, se_map = {}, {}
    imm = labels.index("IMMRM") if "IMMRM" in labels else None
    for e, lab in enumerate(labels):
        est_map[lab] = used[:, e, 0, :].copy()
        se_map[lab] = used[:, e, 1, :].copy()
        for j in range(config.J):
            x = used[:, e, 0, j]
            R = x.size
            if R == 0:
                rows.append(MetricRow(lab, j + 1, *(float("nan"),) * 2, None, None, None, None, float("nan"), None))
                continue
            bias = _fsum_mean(x) - truth[j]
            ese = math.sqrt(math.fsum((x - _fsum_mean(x)) ** 2) / (R - 1)) if R > 1 else float("nan")
            ase = cp = por = None
            if config.compute_se:
                s = used[:, e, 1, j]
                ase = _fsum_mean(s)
                cp = 100.0 * float(np.mean(np.abs(x - truth[j]) <= zq * s))
                por = 100.0 * float(np.mean(np.abs(x) > zq * s))
            rmse = rmse_se = None
            if imm is not None:
                a = (x - truth[j]) ** 2
                b = (used[:, imm, 0, j] - truth[j]) ** 2
                rmse = 1.0 if e == imm else math.fsum(a) / math.fsum(b)
                rmse_se = 0.0 if e == imm else _ratio_mcse(a, b)
            rows.append(MetricRow(lab, j + 1, float(bias), float(ese), ase, cp, por, rmse,
                                  float(ese / math.sqrt(R)) if R > 1 else float("nan"), rmse_se))
    fails = {lab: int(failed[:, e].sum()) for e, lab in enumerate(labels)}
    return SimReport(int(config.n), int(config.n_replications), int(ok.sum()), truth, fails, tuple(rows),
                     est_map, se_map)


def run_study(config: SimConfig, threads: int = 1) -> SimReport:
    """Run every replication and aggregate.  ``threads`` sets the number of
    worker processes; the report does not depend on it."""
    seqs = np.random.SeedSequence(int(config.seed)).spawn(int(config.n_replications))
    threads = max(1, int(threads))
    if threads == 1:
        raw = _run_block((config, seqs))
    else:
        chunks = [seqs[k::threads] for k in range(threads)]
        order = np.concatenate([np.arange(len(seqs))[k::threads] for k in range(threads)])
        with ProcessPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(_run_block, [(config, c) for c in chunks if c]))
        stacked = np.concatenate(parts)
        raw = np.empty_like(stacked)
        raw[order[:stacked.shape[0]]] = stacked
    return aggregate(config, raw)
