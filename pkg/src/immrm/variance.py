"""Sandwich variance, stratified-randomization correction and Wald inference."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Model, TrialDataset, WorkingModelSpec
from .errors import InputError
from .estimators import (FitResult, ModelProblem, ParameterVector, _chol_inv, dsigma_dalpha,
                         sigma_from_logchol)

SCHEMA_VERSION = 1
COND_WARN = 1e12
VAR_FLOOR = 1e-12


def fd_steps(theta: np.ndarray) -> np.ndarray:
    return 1e-6 * np.maximum(1.0, np.abs(theta))


@dataclass(frozen=True)
class JacobianResult:
    """Jacobian of the mean estimating function at a parameter value.

    Attributes
    ----------
    matrix : (dim, dim) array
        Central finite differences, columns in ``(delta, beta, alpha)`` order.
    beta_block : (q, q) array
        Analytic beta-by-beta block (minus the weighted Gram matrix over n).
    condition : float
    ill_conditioned : bool
        Condition number above 1e12.
    """

    matrix: np.ndarray
    beta_block: np.ndarray
    condition: float
    ill_conditioned: bool


def _jacobian_problem(prob: ModelProblem, theta: np.ndarray) -> JacobianResult:
    n, q, nd = prob.n, prob.q, prob.nd
    delta, beta, alphas = prob.unpack(theta)
    h = fd_steps(theta)
    dim = prob.dim
    Jm = np.zeros((dim, dim))
    sig = prob.sigmas(alphas)
    dSs = [dsigma_dalpha(a, prob.K) for a in alphas]
    inv = [_chol_inv(sig[c.g][np.ix_(c.pos, c.pos)])[0] for c in prob.cells]

    # delta columns: delta enters only its own rows
    for k in range(nd):
        e = np.zeros(dim)
        e[k] = h[k]
        Jm[:, k] = (prob.mean_psi(theta + e) - prob.mean_psi(theta - e)) / (2 * h[k])

    # beta columns, all perturbations at once (covariances are untouched)
    hb = h[prob.sl_beta]
    B = np.concatenate([beta[:, None] + np.diag(hb), beta[:, None] - np.diag(hb)], axis=1)
    A_tot = np.zeros((q, q))
    b_tot = np.zeros(q)
    alpha_rows = [np.zeros((prob.na, 2 * q)) for _ in range(prob.G)]
    for c, V in zip(prob.cells, inv):
        A_tot += (V.ravel() @ c.ZZ2).reshape(q, q)
        b_tot += np.einsum("kl,kql->q", V, c.ZY)
        dSc = dSs[c.g][:, c.pos][:, :, c.pos]
        W = np.einsum("ij,ajk,kl->ail", V, dSc, V)          # V dS V
        RR = c.rr_batch(B)                                   # (2q, d, d)
        quad = np.einsum("ail,mil->am", W, RR)
        tr = np.einsum("kl,alk->a", V, dSc)
        alpha_rows[c.g] += 0.5 * (quad - c.n * tr[:, None])
    psi_b = np.zeros((dim, 2 * q))
    psi_b[prob.sl_beta] = (b_tot[:, None] - A_tot @ B) / n
    for g in range(prob.G):
        psi_b[prob.sl_alpha[g]] = alpha_rows[g] / n
    if nd:
        lin = B[prob.effect_index]
        if prob.p:
            lin = lin + np.einsum("jm,jmc->jc", np.broadcast_to(prob.xbar, (prob.J, prob.p)),
                                  B[prob.inter_index])
        psi_b[:nd] = lin - delta[:, None]
    Jm[:, prob.sl_beta] = (psi_b[:, :q] - psi_b[:, q:]) / (2 * hb)

    # covariance columns, one group at a time, all perturbations at once
    rrs = [c.rr(beta) for c in prob.cells]
    for g in range(prob.G):
        sl = prob.sl_alpha[g]
        hg = h[sl]
        P = np.concatenate([alphas[g] + np.diag(hg), alphas[g] - np.diag(hg)])   # (2na, na)
        S = np.stack([sigma_from_logchol(a, prob.K)[0] for a in P])
        dS = np.stack([dsigma_dalpha(a, prob.K) for a in P])
        rows_b = np.zeros((P.shape[0], q))
        rows_a = np.zeros((P.shape[0], prob.na))
        for c, RR in zip(prob.cells, rrs):
            if c.g != g:
                continue
            V = np.linalg.inv(S[:, c.pos][:, :, c.pos])
            Zb = np.tensordot(c.ZZ4, beta, axes=([3], [0]))
            rows_b += np.einsum("mkl,kql->mq", V, c.ZY - Zb)
            M = V @ RR @ V - c.n * V
            rows_a += 0.5 * np.einsum("mkl,malk->ma", M, dS[:, :, c.pos][:, :, :, c.pos])
        na = prob.na
        Jm[prob.sl_beta, sl] = (rows_b[:na] - rows_b[na:]).T / (2 * hg) / n
        Jm[sl, sl] = (rows_a[:na] - rows_a[na:]).T / (2 * hg) / n
    cond = float(np.linalg.cond(Jm))
    ill = not np.isfinite(cond) or cond > COND_WARN
    return JacobianResult(Jm, -A_tot / n, cond, ill)


def _problem_and_theta(obj, ds=None, spec=None):
    if isinstance(obj, FitResult):
        return obj.problem, obj.theta_flat()
    if isinstance(obj, ParameterVector):
        if ds is None or spec is None:
            raise InputError("a ParameterVector needs the dataset and model spec")
        prob = ModelProblem(ds, spec)
        return prob, prob.from_parameters(obj)
    raise TypeError("expected a FitResult or ParameterVector")


def jacobian(theta, ds: TrialDataset | None = None, spec: WorkingModelSpec | None = None) -> JacobianResult:
    """Finite-difference Jacobian of the mean estimating function.

    Step for coordinate k is ``1e-6 * max(1, |theta_k|)``.  Accepts a
    :class:`FitResult`, or a :class:`ParameterVector` with its data and spec.
    """
    prob, flat = _problem_and_theta(theta, ds, spec)
    return _jacobian_problem(prob, flat)


def _delta_selector(prob: ModelProblem) -> np.ndarray:
    C = np.zeros((prob.J, prob.dim))
    for j in range(prob.J):
        C[j, j if prob.nd else prob.sl_beta.start + prob.effect_index[j]] = 1.0
    return C


def _sandwich_problem(prob, flat, jac: JacobianResult | None = None):
    jac = jac or _jacobian_problem(prob, flat)
    ps = prob.psi(flat)
    meat = ps.T @ ps / prob.n
    C = _delta_selector(prob)
    try:
        CJ = np.linalg.solve(jac.matrix.T, C.T).T
    except np.linalg.LinAlgError:
        raise InputError("singular Jacobian; the sandwich variance is undefined") from None
    V = CJ @ meat @ CJ.T / prob.n
    return 0.5 * (V + V.T), jac


def sandwich(theta, ds: TrialDataset | None = None, spec: WorkingModelSpec | None = None) -> np.ndarray:
    """Model-robust covariance of the treatment-effect estimates (J x J)."""
    prob, flat = _problem_and_theta(theta, ds, spec)
    return _sandwich_problem(prob, flat)[0]


@dataclass(frozen=True)
class StratifiedCorrectionInputs:
    """Plug-in pieces of the stratified-randomization correction.

    Attributes
    ----------
    b_hat_Kj : (p, J+1) array
        Per-arm regression of the final outcome on X.
    b_hat_K : (p,) array
        Arm-fraction weighted average of ``b_hat_Kj``.
    beta_hat_X : (p,) array or None
        Shared covariate slope of MMRM-I.
    z_hat, v_hat : (p, J+1) arrays
        ``b_hat_Kj`` centred at ``b_hat_K`` and at ``beta_hat_X``.
    L : (J, J+1) array
        Contrast matrix ``(-1 | I)``.
    var_EXS : (p, p) array
        Covariance of the stratum-wise covariate means.
    pi_hat : (J+1,) array
    """

    b_hat_Kj: np.ndarray
    b_hat_K: np.ndarray
    beta_hat_X: np.ndarray | None
    z_hat: np.ndarray
    v_hat: np.ndarray | None
    L: np.ndarray
    var_EXS: np.ndarray
    pi_hat: np.ndarray


def contrast_matrix(J: int) -> np.ndarray:
    return np.hstack([-np.ones((J, 1)), np.eye(J)])


def correction_inputs(ds: TrialDataset, fit: FitResult) -> StratifiedCorrectionInputs:
    if ds.stratum is None:
        raise InputError("stratified correction requires stratum labels")
    prob = fit.problem
    X = prob.X
    n, p, J = ds.n, X.shape[1], ds.J
    pi = ds.arm_fractions()
    xbar = X.mean(axis=0)
    varX = X.T @ X / n - np.outer(xbar, xbar)
    var_exs = -np.outer(xbar, xbar)
    for s in np.unique(ds.stratum):
        w = ds.stratum == s
        m = X[w].sum(axis=0) / n
        var_exs += np.outer(m, m) / w.mean()
    var_exs = 0.5 * (var_exs + var_exs.T)
    bKj = np.zeros((p, J + 1))
    if p:
        ev = np.linalg.eigvalsh(varX)
        if not ev[0] > 1e-12 * max(ev[-1], 1e-300):
            raise InputError("covariate covariance is singular; cannot form the correction")
        yK = np.where(ds.mask[:, -1], ds.outcomes[:, -1], 0.0)
        for j in range(J + 1):
            w = (ds.arm == j) & ds.mask[:, -1]
            pj = w.mean()
            if pj == 0:
                raise InputError(f"arm {j} has no observed final outcome")
            cov = (X[w] * yK[w, None]).sum(axis=0) / (n * pj) - xbar * yK[w].sum() / (n * pj)
            bKj[:, j] = np.linalg.solve(varX, cov)
    bK = bKj @ pi
    beta_x = None
    v_hat = None
    if fit.spec.model is Model.MMRM_I:
        beta_x = fit.theta_hat.beta[prob.K * (1 + J):]
        v_hat = bKj - beta_x[:, None]
    return StratifiedCorrectionInputs(bKj, bK, beta_x, bKj - bK[:, None], v_hat,
                                      contrast_matrix(J), var_exs, pi)


def correction_matrix(inp: StratifiedCorrectionInputs, model: Model) -> np.ndarray:
    """``L[diag{pi_j^-1 w_j' VE w_j} - w' VE w]L'`` (population scale)."""
    if model is Model.IMMRM:
        return np.zeros((inp.L.shape[0],) * 2)
    W = inp.v_hat if model is Model.MMRM_I else inp.z_hat
    VE = inp.var_EXS
    quad = W.T @ VE @ W
    M = np.diag(np.diag(quad) / inp.pi_hat) - quad
    out = inp.L @ M @ inp.L.T
    return 0.5 * (out + out.T)


def stratified_correction(ds: TrialDataset, fit: FitResult, spec: WorkingModelSpec | None = None,
                          v_tilde: np.ndarray | None = None) -> np.ndarray:
    """Covariance of the effect estimates under stratified permuted blocks.

    Returns the sandwich minus the correction; IMMRM is returned unchanged.
    Negative diagonals are floored at 1e-12 (see :func:`estimate_variances`
    for the flag).
    """
    if ds.stratum is None:
        raise InputError("stratified correction requires stratum labels")
    if v_tilde is None:
        v_tilde = sandwich(fit)
    return _corrected(ds, fit, v_tilde)[0]


def _corrected(ds, fit, v_tilde):
    model = fit.spec.model
    if model is Model.IMMRM:
        return v_tilde.copy(), False
    corr = correction_matrix(correction_inputs(ds, fit), model) / ds.n
    V = v_tilde - corr
    d = np.diag(V).copy()
    floored = bool(np.any(d < VAR_FLOOR))
    if floored:
        V[np.diag_indices_from(V)] = np.maximum(d, VAR_FLOOR)
    return V, floored


@dataclass(frozen=True)
class VarianceEstimates:
    """Covariance estimates for the treatment effects.

    Attributes
    ----------
    v_tilde : (J, J) array
        Sandwich covariance under simple randomization.
    v_corrected : (J, J) array
        Stratified-randomization covariance; equals ``v_tilde`` for IMMRM and
        when no strata are available.
    jacobian_condition : float
    ill_conditioned : bool
    floored : bool
        Some corrected variance was negative and floored at 1e-12.
    stratified : bool
        Whether the correction was computed.
    """

    v_tilde: np.ndarray
    v_corrected: np.ndarray
    jacobian_condition: float
    ill_conditioned: bool = False
    floored: bool = False
    stratified: bool = False


def estimate_variances(fit: FitResult, ds: TrialDataset | None = None) -> VarianceEstimates:
    prob = fit.problem
    ds = ds or prob.ds
    vt, jac = _sandwich_problem(prob, fit.theta_flat())
    if jac.ill_conditioned:
        warnings.warn(f"Jacobian condition number {jac.condition:.3g} exceeds 1e12", RuntimeWarning)
    if ds.stratum is not None:
        vc, floored = _corrected(ds, fit, vt)
        return VarianceEstimates(vt, vc, jac.condition, jac.ill_conditioned, floored, True)
    return VarianceEstimates(vt, vt.copy(), jac.condition, jac.ill_conditioned, False, False)


@dataclass(frozen=True)
class InferenceRow:
    arm: int
    estimate: float
    se_simple: float
    se_stratified: float | None
    ci_low: float
    ci_high: float
    z: float
    p: float


CSV_COLUMNS = ("arm", "estimate", "se_simple", "se_stratified", "ci_low", "ci_high", "z", "p")


@dataclass(frozen=True)
class InferenceTable:
    """Wald inference for each arm-versus-control contrast."""

    model: str
    level: float
    randomization: str
    rows: tuple[InferenceRow, ...]
    converged: bool = True
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "model": self.model, "level": self.level,
                "randomization": self.randomization, "converged": self.converged,
                "flags": dict(sorted(self.flags.items())),
                "rows": [{k: getattr(r, k) for k in CSV_COLUMNS} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(["" if getattr(r, k) is None else repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                        else getattr(r, k) for k in CSV_COLUMNS])
        return buf.getvalue()


def wald(estimate: float, se: float, level: float = 0.95):
    """Two-sided Wald z, p-value and confidence interval."""
    zq = stats.norm.ppf(0.5 + level / 2)
    z = estimate / se
    p = float(2 * stats.norm.sf(abs(z)))
    return float(z), p, float(estimate - zq * se), float(estimate + zq * se)


def infer(fit: FitResult, variances: VarianceEstimates, level: float = 0.95,
          randomization: str = "simple") -> InferenceTable:
    if not 0 < level < 1:
        raise InputError("level must lie in (0, 1)")
    if randomization not in ("simple", "stratified"):
        raise InputError("randomization must be 'simple' or 'stratified'")
    if randomization == "stratified" and not variances.stratified:
        raise InputError("stratified inference requires stratum labels")
    rows = []
    for j in range(fit.delta_hat.size):
        est = float(fit.delta_hat[j])
        se_s = float(np.sqrt(max(variances.v_tilde[j, j], 0.0)))
        se_c = float(np.sqrt(variances.v_corrected[j, j])) if variances.stratified else None
        se = se_c if randomization == "stratified" else se_s
        z, p, lo, hi = wald(est, se, level)
        rows.append(InferenceRow(j + 1, est, se_s, se_c, lo, hi, z, p))
    flags = {"ill_conditioned_jacobian": variances.ill_conditioned,
             "floored_variance": variances.floored,
             "jacobian_condition": float(variances.jacobian_condition)}
    return InferenceTable(fit.spec.model.label, level, randomization, tuple(rows), fit.converged, flags)
