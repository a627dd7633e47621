"""Closed-form asymptotic covariances for linear-Gaussian trial populations.

The population: assignment fractions ``pi``, a stratum mixture for the
covariates ``X`` (stratum-specific means, shared within-stratum covariance),
arm-specific outcome laws ``Y(j) = a_j + B_j X + e_j`` with ``e_j ~ N(0, S_j)``,
and a missing-pattern distribution shared by all arms (MCAR).

Under this law every moment the limiting covariances need is available in
closed form, so the asymptotic covariance of each estimator is a finite
computation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ALL_MODELS, Model
from .errors import ConfigError, InputError
from .patterns import PatternDistribution, check_pd, mean_pattern_precision, mean_pattern_sandwich

PSD_TOL = 1e-9
FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAXIT = 10_000


@dataclass(frozen=True)
class ArmModel:
    """Outcome law of one arm: ``Y = intercept + slopes @ X + N(0, noise_cov)``."""

    intercept: np.ndarray
    slopes: np.ndarray
    noise_cov: np.ndarray


@dataclass(frozen=True)
class Stratum:
    prob: float
    mean: np.ndarray


@dataclass(frozen=True)
class PopulationDgp:
    """Linear-Gaussian trial population.

    Attributes
    ----------
    pi : (J+1,) array
        Assignment fractions, control first.
    strata : tuple of Stratum
        Stratum probabilities and covariate means.
    cov_x_within : (p, p) array
        Covariate covariance within every stratum (PSD).
    arm_models : tuple of ArmModel
        One per arm.
    pattern_dist : PatternDistribution
        Observed-pattern law, identical across arms.
    """

    pi: np.ndarray
    strata: tuple[Stratum, ...]
    cov_x_within: np.ndarray
    arm_models: tuple[ArmModel, ...]
    pattern_dist: PatternDistribution

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        if pi.size < 2 or np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-12:
            raise ConfigError("pi must have >= 2 positive entries summing to 1")
        object.__setattr__(self, "pi", pi)
        if len(self.arm_models) != pi.size:
            raise ConfigError(f"need {pi.size} arm models, got {len(self.arm_models)}")
        if not self.strata:
            raise ConfigError("need at least one stratum")
        probs = np.array([s.prob for s in self.strata], dtype=float)
        if np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-12:
            raise ConfigError("stratum probabilities must be positive and sum to 1")
        W = np.atleast_2d(np.asarray(self.cov_x_within, dtype=float))
        p = W.shape[0] if W.size else 0
        W = W.reshape(p, p)
        if p and (not np.allclose(W, W.T) or np.linalg.eigvalsh(W)[0] < -1e-12):
            raise ConfigError("cov_x_within must be symmetric PSD")
        object.__setattr__(self, "cov_x_within", W)
        strata = []
        for s in self.strata:
            m = np.asarray(s.mean, dtype=float).ravel()
            if m.size != p:
                raise ConfigError(f"stratum mean must have length {p}")
            strata.append(Stratum(float(s.prob), m))
        object.__setattr__(self, "strata", tuple(strata))
        K = self.pattern_dist.K
        arms = []
        for j, am in enumerate(self.arm_models):
            a = np.asarray(am.intercept, dtype=float).ravel()
            B = np.asarray(am.slopes, dtype=float).reshape(K, p)
            S = np.atleast_2d(np.asarray(am.noise_cov, dtype=float))
            if a.size != K or S.shape != (K, K):
                raise ConfigError(f"arm {j}: intercept/noise_cov must match K={K}")
            try:
                S = check_pd(S, f"noise covariance of arm {j}")
            except InputError as e:
                raise ConfigError(str(e)) from None
            arms.append(ArmModel(a, B, S))
        object.__setattr__(self, "arm_models", tuple(arms))
        if self.pattern_dist.prob_full <= 0:
            raise ConfigError("the all-observed pattern must have positive probability")
        if p:
            Vx = _var_x(self)
            if np.linalg.eigvalsh(Vx)[0] <= 1e-12 * max(1.0, np.abs(Vx).max()):
                raise ConfigError("covariate covariance is singular")

    @property
    def K(self) -> int:
        return self.pattern_dist.K

    @property
    def J(self) -> int:
        return self.pi.size - 1

    @property
    def p(self) -> int:
        return self.cov_x_within.shape[0]


def _var_x(dgp):
    probs = np.array([s.prob for s in dgp.strata])
    means = np.array([s.mean for s in dgp.strata]).reshape(len(dgp.strata), -1)
    mu = probs @ means
    D = means - mu
    return dgp.cov_x_within + (D.T * probs) @ D


@dataclass(frozen=True)
class PopulationQuantities:
    """Population moments and limiting working-model quantities.

    Attributes
    ----------
    mean_X, var_X, var_EXS, e_varXS : arrays
        Covariate mean, covariance, and its between/within-stratum parts.
    B_bar : (K, p) array
        Assignment-weighted mean slope matrix.
    b_Kj : (p, J+1) array
        Final-visit slopes per arm; ``b_K`` is their weighted mean.
    beta_X_underline : (p,) array
        Limiting shared covariate slope of MMRM-I.
    sigma_est : dict
        Model label -> tuple of limiting per-arm residual covariances.
    sigma_pooled : dict
        Model label -> assignment-weighted pooled residual covariance.
    mean_precisions : dict
        ``MMRM-I``/``MMRM-II``: mean pattern precision at the pooled
        covariance; ``IMMRM``: tuple of per-arm mean precisions.
    fixed_point_iterations : int
    """

    mean_X: np.ndarray
    var_X: np.ndarray
    var_EXS: np.ndarray
    e_varXS: np.ndarray
    B_bar: np.ndarray
    b_Kj: np.ndarray
    b_K: np.ndarray
    beta_X_underline: np.ndarray
    sigma_est: dict
    sigma_pooled: dict
    mean_precisions: dict
    fixed_point_iterations: int = 0


def _mmrm1_fixed_point(dgp, var_X, B_bar):
    K = dgp.K
    ones = np.ones(K)
    arms = dgp.arm_models
    pi = dgp.pi
    S = sum(pi[j] * (arms[j].slopes @ var_X @ arms[j].slopes.T + arms[j].noise_cov)
            for j in range(pi.size))
    beta = np.zeros(dgp.p)
    for it in range(1, FIXED_POINT_MAXIT + 1):
        W = mean_pattern_precision(dgp.pattern_dist, S)
        w = W @ ones / (ones @ W @ ones)
        beta = B_bar.T @ w
        per_arm = []
        for j in range(pi.size):
            D = arms[j].slopes - np.outer(ones, beta)
            per_arm.append(D @ var_X @ D.T + arms[j].noise_cov)
        S_new = sum(pi[j] * per_arm[j] for j in range(pi.size))
        S_new = 0.5 * (S_new + S_new.T)
        if np.linalg.norm(S_new - S) < FIXED_POINT_TOL * max(1.0, np.linalg.norm(S)):
            return beta, tuple(per_arm), S_new, it
        S = S_new
    raise InputError(f"MMRM-I fixed point did not converge in {FIXED_POINT_MAXIT} iterations")


def population_quantities(dgp: PopulationDgp) -> PopulationQuantities:
    K, p, pi = dgp.K, dgp.p, dgp.pi
    probs = np.array([s.prob for s in dgp.strata])
    means = np.array([s.mean for s in dgp.strata]).reshape(len(dgp.strata), p)
    mu = probs @ means
    D = means - mu
    var_exs = (D.T * probs) @ D
    var_x = dgp.cov_x_within + var_exs
    arms = dgp.arm_models
    B_bar = sum(pi[j] * arms[j].slopes for j in range(pi.size))
    b_Kj = np.column_stack([a.slopes[-1] for a in arms]) if p else np.zeros((0, pi.size))
    b_K = b_Kj @ pi
    sig2 = []
    for a in arms:
        Dj = a.slopes - B_bar
        sig2.append(0.5 * ((Dj @ var_x @ Dj.T + a.noise_cov) + (Dj @ var_x @ Dj.T + a.noise_cov).T))
    sig2 = tuple(sig2)
    beta_x, sig1, pooled1, its = _mmrm1_fixed_point(dgp, var_x, B_bar)
    pooled2 = sum(pi[j] * sig2[j] for j in range(pi.size))
    sig_im = tuple(a.noise_cov for a in arms)
    pd = dgp.pattern_dist
    precis = {"MMRM-I": mean_pattern_precision(pd, pooled1),
              "MMRM-II": mean_pattern_precision(pd, pooled2),
              "IMMRM": tuple(mean_pattern_precision(pd, S) for S in sig_im)}
    return PopulationQuantities(
        mean_X=mu, var_X=var_x, var_EXS=var_exs, e_varXS=dgp.cov_x_within.copy(), B_bar=B_bar,
        b_Kj=b_Kj, b_K=b_K, beta_X_underline=beta_x,
        sigma_est={"ANCOVA": sig2, "MMRM-I": sig1, "MMRM-II": sig2, "IMMRM": sig_im},
        sigma_pooled={"ANCOVA": pooled2, "MMRM-I": pooled1, "MMRM-II": pooled2,
                      "IMMRM": sum(pi[j] * sig_im[j] for j in range(pi.size))},
        mean_precisions=precis, fixed_point_iterations=its)


def contrast(J: int) -> np.ndarray:
    return np.hstack([-np.ones((J, 1)), np.eye(J)])


def _sym(M):
    return 0.5 * (M + M.T)


def _v_tilde(dgp, pq, model: Model) -> np.ndarray:
    J, K, pi = dgp.J, dgp.K, dgp.pi
    L = contrast(J)
    eK = np.zeros(K)
    eK[-1] = 1.0
    pd = dgp.pattern_dist
    if model is Model.ANCOVA:
        pK = pd.prob_observed(K - 1)
        d = [pq.sigma_est["ANCOVA"][j][-1, -1] / (pi[j] * pK) for j in range(J + 1)]
        return _sym(L @ np.diag(d) @ L.T)
    if model in (Model.MMRM_I, Model.MMRM_II):
        lab = model.label
        Winv = np.linalg.inv(pq.mean_precisions[lab])
        u = Winv @ eK
        S_pool = pq.sigma_pooled[lab]
        d = [u @ mean_pattern_sandwich(pd, S_pool, pq.sigma_est[lab][j]) @ u / pi[j]
             for j in range(J + 1)]
        return _sym(L @ np.diag(d) @ L.T)
    r = np.column_stack([pq.b_Kj[:, j] for j in range(J + 1)]) if dgp.p else np.zeros((0, J + 1))
    d = [np.linalg.inv(pq.mean_precisions["IMMRM"][j])[-1, -1] / pi[j] for j in range(J + 1)]
    return _sym(L @ (np.diag(d) + r.T @ pq.var_X @ r) @ L.T)


def _correction(dgp, pq, model: Model) -> np.ndarray:
    J = dgp.J
    if model is Model.IMMRM or dgp.p == 0:
        return np.zeros((J, J))
    centre = pq.beta_X_underline if model is Model.MMRM_I else pq.b_K
    W = pq.b_Kj - centre[:, None]
    quad = W.T @ pq.var_EXS @ W
    M = np.diag(np.diag(quad) / dgp.pi) - quad
    L = contrast(J)
    return _sym(L @ M @ L.T)


def asy_cov(dgp: PopulationDgp, est, randomization: str = "simple",
            pq: PopulationQuantities | None = None) -> np.ndarray:
    """Asymptotic covariance (J x J) of sqrt(n)(estimate - truth)."""
    model = Model.parse(est)
    if randomization not in ("simple", "stratified"):
        raise InputError("randomization must be 'simple' or 'stratified'")
    pq = pq or population_quantities(dgp)
    V = _v_tilde(dgp, pq, model)
    if randomization == "stratified":
        V = V - _correction(dgp, pq, model)
    return V


def anhecova_cov(dgp: PopulationDgp) -> np.ndarray:
    """IMMRM covariance when only the final visit is modelled."""
    K = dgp.K
    arms = tuple(ArmModel(a.intercept[-1:], a.slopes[-1:], a.noise_cov[-1:, -1:]) for a in dgp.arm_models)
    pd = dgp.pattern_dist.marginalize([K - 1])
    if pd.prob_full <= 0:
        raise InputError("the final visit is never observed")
    final = PopulationDgp(dgp.pi, dgp.strata, dgp.cov_x_within, arms, pd)
    return asy_cov(final, Model.IMMRM)


def _min_eig(M):
    return float(np.linalg.eigvalsh(_sym(M))[0]) if M.size else 0.0


@dataclass(frozen=True)
class OracleReport:
    """All eight asymptotic covariances and the partial-order verdict.

    ``min_eigenvalues`` holds, per estimator, the smallest eigenvalue of
    (simple - stratified) and of (stratified - IMMRM).
    """

    v_tilde: dict
    v_corrected: dict
    min_eigenvalues: dict
    partial_order_ok: bool
    tolerance: float = PSD_TOL

    def to_dict(self) -> dict:
        return {"schema_version": 1,
                "v_tilde": {k: v.tolist() for k, v in self.v_tilde.items()},
                "v_corrected": {k: v.tolist() for k, v in self.v_corrected.items()},
                "min_eigenvalues": {k: list(v) for k, v in self.min_eigenvalues.items()},
                "partial_order_ok": self.partial_order_ok, "tolerance": self.tolerance}

    def table(self) -> str:
        J = next(iter(self.v_tilde.values())).shape[0]
        lines = [f"{'estimator':<10}{'arm':>4}{'simple':>18}{'stratified':>18}"]
        for lab in self.v_tilde:
            for j in range(J):
                lines.append(f"{lab:<10}{j + 1:>4}{self.v_tilde[lab][j, j]:>18.9f}"
                             f"{self.v_corrected[lab][j, j]:>18.9f}")
        lines.append(f"partial order holds: {'yes' if self.partial_order_ok else 'NO'}")
        return "\n".join(lines)


def check_partial_order(dgp: PopulationDgp, tol: float = PSD_TOL) -> OracleReport:
    pq = population_quantities(dgp)
    vt = {m.label: asy_cov(dgp, m, "simple", pq) for m in ALL_MODELS}
    vc = {m.label: asy_cov(dgp, m, "stratified", pq) for m in ALL_MODELS}
    ref = vc["IMMRM"]
    mins = {}
    ok = True
    for m in ALL_MODELS[:3]:
        lab = m.label
        scale = max(1.0, float(np.abs(np.linalg.eigvalsh(vt[lab])).max()))
        a, b = _min_eig(vt[lab] - vc[lab]), _min_eig(vc[lab] - ref)
        mins[lab] = (a, b)
        ok &= a >= -tol * scale and b >= -tol * scale
    return OracleReport(vt, vc, mins, bool(ok), tol)


# ---------------------------------------------------------------- constructors

def counterexample_dgp() -> PopulationDgp:
    """Two arms, two visits, no covariates, unequal allocation, in which
    MMRM-II is asymptotically less precise than ANCOVA."""
    S0 = np.array([[4.0, 3.0], [3.0, 4.0]])
    S1 = np.array([[4.0, -3.0], [-3.0, 4.0]])
    arms = (ArmModel(np.zeros(2), np.zeros((2, 0)), S0), ArmModel(np.zeros(2), np.zeros((2, 0)), S1))
    pd = PatternDistribution(2, {"10": 1 / 3, "01": 1 / 3, "11": 1 / 3})
    return PopulationDgp(np.array([2 / 3, 1 / 3]), (Stratum(1.0, np.zeros(0)),), np.zeros((0, 0)), arms, pd)


def random_pd(rng, k: int, ridge: float = 0.2) -> np.ndarray:
    A = rng.normal(size=(k, k))
    return A @ A.T / k + ridge * np.eye(k)


def random_pattern_dist(rng, K: int, final_closed: bool = False, min_full: float = 0.25) -> PatternDistribution:
    """Random pattern law with P(all observed) >= ``min_full``.

    ``final_closed`` restricts the support to patterns observing the final
    visit plus the all-missing pattern.
    """
    full = (1 << K) - 1
    cands = [b for b in range(full) if (not final_closed) or b == 0 or (b >> (K - 1)) & 1]
    k = int(rng.integers(1, min(len(cands), 4) + 1))
    chosen = rng.choice(cands, size=k, replace=False)
    w = rng.dirichlet(np.ones(k + 1))
    p_full = min_full + (1 - min_full) * w[0]
    probs = {full: p_full}
    rest = (1 - p_full) * w[1:] / w[1:].sum()
    for b, q in zip(chosen, rest):
        probs[int(b)] = probs.get(int(b), 0.0) + q
    return PatternDistribution(K, probs)


def random_dgp(rng, K: int, J: int, p: int, R: int, pi=None, final_closed: bool = False,
               pattern_dist: PatternDistribution | None = None) -> PopulationDgp:
    """Random heterogeneous, heteroscedastic population for property sweeps."""
    if pi is None:
        pi = 0.2 + rng.random(J + 1)
        pi = pi / pi.sum()
    sp = rng.dirichlet(2 * np.ones(R))
    strata = tuple(Stratum(float(sp[s]), rng.normal(size=p)) for s in range(R))
    arms = tuple(ArmModel(rng.normal(size=K), rng.normal(size=(K, p)), random_pd(rng, K))
                 for _ in range(J + 1))
    pd = pattern_dist or random_pattern_dist(rng, K, final_closed)
    return PopulationDgp(np.asarray(pi, float), strata, random_pd(rng, p) if p else np.zeros((0, 0)), arms, pd)


# ---------------------------------------------------------------- config I/O

_DGP_KEYS = {"pi", "strata", "cov_x_within", "arms", "patterns"}


def _strict(d: dict, allowed: set, where: str):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in {where}")


def dgp_from_dict(d: dict) -> PopulationDgp:
    """Build a population from a parsed TOML/JSON mapping (unknown keys are errors)."""
    _strict(d, _DGP_KEYS, "population config")
    for k in ("pi", "arms", "patterns"):
        if k not in d:
            raise ConfigError(f"population config lacks {k!r}")
    pi = np.asarray(d["pi"], dtype=float)
    strata_cfg = d.get("strata", [{"prob": 1.0, "mean": []}])
    strata = []
    for s in strata_cfg:
        _strict(s, {"prob", "mean"}, "strata entry")
        strata.append(Stratum(float(s["prob"]), np.asarray(s.get("mean", []), dtype=float)))
    p = strata[0].mean.size
    cov = np.asarray(d.get("cov_x_within", np.zeros((p, p))), dtype=float).reshape(p, p)
    pats = d["patterns"]
    if not isinstance(pats, dict) or not pats:
        raise ConfigError("patterns must map pattern strings like '101' to probabilities")
    K = len(next(iter(pats)))
    for k in pats:
        if len(k) != K or set(k) - {"0", "1"}:
            raise ConfigError(f"bad pattern key {k!r}")
    pd = PatternDistribution(K, dict(pats))
    arms = []
    for a in d["arms"]:
        _strict(a, {"intercept", "slopes", "noise_cov"}, "arms entry")
        arms.append(ArmModel(np.asarray(a.get("intercept", np.zeros(K)), dtype=float),
                             np.asarray(a.get("slopes", np.zeros((K, p))), dtype=float).reshape(K, p),
                             np.asarray(a["noise_cov"], dtype=float)))
    return PopulationDgp(pi, tuple(strata), cov, tuple(arms), pd)


def dgp_to_dict(dgp: PopulationDgp) -> dict:
    return {"pi": dgp.pi.tolist(),
            "strata": [{"prob": s.prob, "mean": s.mean.tolist()} for s in dgp.strata],
            "cov_x_within": dgp.cov_x_within.tolist(),
            "arms": [{"intercept": a.intercept.tolist(), "slopes": a.slopes.tolist(),
                      "noise_cov": a.noise_cov.tolist()} for a in dgp.arm_models],
            "patterns": dgp.pattern_dist.labelled()}


def report_json(report: OracleReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"
