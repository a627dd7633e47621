"""Maximum-likelihood fitting of the four working models.

Every model is a multivariate Gaussian regression of the modelled visits on a
fixed-effect design, with an unstructured covariance (one shared matrix, or one
per arm for IMMRM).  ANCOVA is the one-visit case restricted to the final visit.

Subjects are grouped into cells of identical (covariance group, observed
pattern).  Within a cell the likelihood, the GLS normal equations and the mean
score depend on the data only through cross-product sums, so iterations cost
nothing in ``n`` once those sums are formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Model, TrialDataset, WorkingModelSpec, _dependent_columns, encode_design
from .errors import InputError, NotPositiveDefiniteError, PositivityError, SingularDesignError
from .patterns import check_pd, masks_to_bits


# ---------------------------------------------------------------- log-Cholesky

def logchol_from_sigma(S: np.ndarray) -> np.ndarray:
    """Lower-triangle entries of chol(S), row-major, with log on the diagonal."""
    L = np.linalg.cholesky(S)
    ti, tj = np.tril_indices(S.shape[0])
    a = L[ti, tj].copy()
    d = ti == tj
    a[d] = np.log(a[d])
    return a


def sigma_from_logchol(a: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    ti, tj = np.tril_indices(K)
    L = np.zeros((K, K))
    vals = np.where(ti == tj, np.exp(a), a)
    L[ti, tj] = vals
    return L @ L.T, L


def dsigma_dalpha(a: np.ndarray, K: int) -> np.ndarray:
    """Derivatives of Sigma with respect to each log-Cholesky coordinate, (n_a, K, K)."""
    _, L = sigma_from_logchol(a, K)
    ti, tj = np.tril_indices(K)
    out = np.empty((ti.size, K, K))
    for l, (i, j) in enumerate(zip(ti, tj)):
        dL = np.zeros((K, K))
        dL[i, j] = L[i, j] if i == j else 1.0
        M = dL @ L.T
        out[l] = M + M.T
    return out


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class SolverOptions:
    """Controls for :func:`solve`.

    ``gradient_tolerance`` is relative: each row of the mean estimating
    function is divided by the root-mean-square of that row across subjects.
    """

    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    max_halvings: int = 40
    initializer: str = "complete_case"

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_halvings < 0:
            raise InputError("iteration limits must be positive")
        if not self.gradient_tolerance > 0:
            raise InputError("gradient_tolerance must be > 0")
        if self.initializer not in ("complete_case", "available_case"):
            raise InputError(f"unknown initializer {self.initializer!r}")


@dataclass(frozen=True)
class ParameterVector:
    """Working-model parameters in canonical order.

    Attributes
    ----------
    model : Model
    K, J, p : int
        Visits, treatment arms, and adjusted covariates.
    beta : (q,) array
        Visit intercepts, arm-by-visit effects, covariate block(s) and, for
        IMMRM, arm-by-covariate-by-visit interactions.  ANCOVA uses
        (intercept, arm effects, covariate slopes).
    covariance : tuple of arrays
        One matrix for ANCOVA (1x1) and MMRM-I/II, one per arm for IMMRM.
    delta : (J,) array or None
        Treatment-effect slot of IMMRM.
    """

    model: Model
    K: int
    J: int
    p: int
    beta: np.ndarray
    covariance: tuple[np.ndarray, ...]
    delta: np.ndarray | None = None

    @property
    def sigma2(self) -> float:
        if self.model is not Model.ANCOVA:
            raise AttributeError("sigma2 is only defined for ANCOVA")
        return float(self.covariance[0][0, 0])


def arm_effect_index(model: Model, K: int, J: int, j: int) -> int:
    """Position of the final-visit effect of arm ``j`` (1-based) in beta."""
    if model is Model.ANCOVA:
        return j
    return K + (K - 1) * J + (j - 1)


def interaction_index(K: int, J: int, p: int, j: int, m: int) -> int:
    """Position of the final-visit arm-``j`` by covariate-``m`` interaction (IMMRM)."""
    return K * (1 + J + p) + (K - 1) * J * p + m * J + (j - 1)


def extract_delta(theta: ParameterVector, spec: WorkingModelSpec | None = None, xbar=None) -> np.ndarray:
    """Treatment effects at the final visit.

    IMMRM adds the interaction terms evaluated at the covariate mean.
    """
    model = theta.model if spec is None else spec.model
    K = 1 if model is Model.ANCOVA else theta.K
    out = np.array([theta.beta[arm_effect_index(model, K, theta.J, j)] for j in range(1, theta.J + 1)])
    if model is Model.IMMRM and theta.p:
        xbar = np.asarray(xbar, dtype=float)
        for j in range(1, theta.J + 1):
            ix = [interaction_index(K, theta.J, theta.p, j, m) for m in range(theta.p)]
            out[j - 1] += theta.beta[ix] @ xbar
    return out


# ---------------------------------------------------------------- compiled problem

class _Cell:
    """Subjects sharing a covariance group and an observed pattern."""

    def __init__(self, g, pos, idx, Z, y):
        self.g = g
        self.pos = pos
        self.idx = idx
        self.n = idx.size
        self.Z = Z                      # (n, d, q)
        self.y = y                      # (n, d)
        n, d, q = Z.shape
        self.d = d
        Zf = Z.reshape(n, d * q)
        ZZ = Zf.T @ Zf                  # [(k,q),(l,r)]
        self.ZZ4 = ZZ.reshape(d, q, d, q)
        self.ZZ2 = np.ascontiguousarray(self.ZZ4.transpose(0, 2, 1, 3)).reshape(d * d, q * q)
        self.ZY = (Zf.T @ y).reshape(d, q, d)   # [k,q,l] = sum_i Z_ikq y_il
        self.YY = y.T @ y

    def rr(self, beta):
        """Residual cross-product sum for coefficients ``beta``."""
        R = np.tensordot(beta, self.ZY, axes=([0], [1]))      # R[l,k] = sum_i y_ik (Z_il beta)
        T = np.tensordot(self.ZZ4, beta, axes=([3], [0]))     # (d, q, d)
        G = np.tensordot(beta, T, axes=([0], [1]))            # (d, d)
        return self.YY - R - R.T + G

    def rr_batch(self, B):
        """``rr`` for each column of ``B`` (q, m) -> (m, d, d)."""
        d, q = self.d, B.shape[0]
        R = np.einsum("lqk,qm->mlk", self.ZY, B)
        T = (self.ZZ4.reshape(d * q * d, q) @ B).reshape(d, q, d, -1)
        G = np.einsum("kqlm,qm->mkl", T, B)
        return self.YY[None] - R - R.transpose(0, 2, 1) + G


def _chol_inv(S):
    """Inverse and log-determinant of a PD matrix; raises on failure."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance is not positive definite") from None
    Li = np.linalg.inv(L)
    return Li.T @ Li, 2.0 * float(np.sum(np.log(np.diag(L))))


class ModelProblem:
    """A dataset compiled against one working model.

    Parameters are handled as a flat vector ``(delta, beta, alpha_0, ...)``
    where each ``alpha_g`` is a log-Cholesky vector.  ``delta`` is present only
    for IMMRM.
    """

    def __init__(self, ds: TrialDataset, spec: WorkingModelSpec):
        self.ds, self.spec, self.model = ds, spec, spec.model
        design = encode_design(ds, spec)
        self.columns = design.columns
        self.visits = design.visits
        Z = design.tensor
        X, self.xnames = spec.select(ds)
        self.X = X
        self.xbar = X.mean(axis=0)
        self.n, self.K, self.q = Z.shape
        self.J, self.p = ds.J, X.shape[1]
        y = ds.outcomes[:, self.visits]
        self.mask = ds.mask[:, self.visits]
        y0 = np.where(self.mask, y, 0.0)
        immrm = self.model is Model.IMMRM
        self.group = ds.arm.copy() if immrm else np.zeros(self.n, dtype=np.int64)
        self.G = self.J + 1 if immrm else 1
        bits = masks_to_bits(self.mask)
        self.cells: list[_Cell] = []
        for g in range(self.G):
            in_g = self.group == g
            for b in np.unique(bits[in_g]):
                if b == 0:
                    continue
                idx = np.flatnonzero(in_g & (bits == b))
                pos = np.array([t for t in range(self.K) if (int(b) >> t) & 1])
                self.cells.append(_Cell(g, pos, idx, Z[idx][:, pos, :], y0[idx][:, pos]))
        self.Z = Z
        self.y0 = y0
        self.na = self.K * (self.K + 1) // 2
        self.nd = self.J if immrm else 0
        self.dim = self.nd + self.q + self.G * self.na
        self.sl_beta = slice(self.nd, self.nd + self.q)
        self.sl_alpha = [slice(self.nd + self.q + g * self.na, self.nd + self.q + (g + 1) * self.na)
                         for g in range(self.G)]
        self.effect_index = np.array([arm_effect_index(self.model, self.K, self.J, j)
                                      for j in range(1, self.J + 1)])
        if immrm:
            self.inter_index = np.array([[interaction_index(self.K, self.J, self.p, j, m)
                                          for m in range(self.p)] for j in range(1, self.J + 1)],
                                        dtype=np.int64).reshape(self.J, self.p)

    # -- packing
    def pack(self, delta, beta, alphas) -> np.ndarray:
        parts = ([np.asarray(delta, float)] if self.nd else []) + [np.asarray(beta, float)]
        return np.concatenate(parts + [np.asarray(a, float) for a in alphas])

    def unpack(self, theta):
        delta = theta[:self.nd] if self.nd else None
        return delta, theta[self.sl_beta], [theta[s] for s in self.sl_alpha]

    def sigmas(self, alphas):
        return [sigma_from_logchol(a, self.K)[0] for a in alphas]

    def to_parameters(self, theta) -> ParameterVector:
        delta, beta, alphas = self.unpack(theta)
        return ParameterVector(self.model, self.ds.K, self.J, self.p, beta.copy(),
                               tuple(self.sigmas(alphas)), None if delta is None else delta.copy())

    def from_parameters(self, pv: ParameterVector) -> np.ndarray:
        if pv.model is not self.model or pv.beta.size != self.q or len(pv.covariance) != self.G:
            raise InputError("parameter vector does not match the working model")
        alphas = []
        for S in pv.covariance:
            S = np.atleast_2d(np.asarray(S, float))
            if S.shape != (self.K, self.K):
                raise InputError(f"covariance must be {self.K}x{self.K}")
            alphas.append(logchol_from_sigma(check_pd(S)))
        delta = pv.delta if self.nd else None
        if self.nd and (delta is None or np.size(delta) != self.J):
            raise InputError("IMMRM parameters need a delta vector of length J")
        return self.pack(delta, pv.beta, alphas)

    def closed_form_delta(self, beta):
        out = beta[self.effect_index].copy()
        if self.model is Model.IMMRM and self.p:
            out += beta[self.inter_index] @ self.xbar
        return out

    # -- cell-level pieces
    def _cell_inverses(self, sigmas):
        res = []
        for c in self.cells:
            S = sigmas[c.g][np.ix_(c.pos, c.pos)]
            res.append(_chol_inv(S))
        return res

    def normal_equations(self, sigmas, inverses=None):
        inverses = inverses or self._cell_inverses(sigmas)
        A = np.zeros(self.q * self.q)
        b = np.zeros(self.q)
        for c, (V, _) in zip(self.cells, inverses):
            A += V.ravel() @ c.ZZ2
            b += np.einsum("kl,kql->q", V, c.ZY)
        return A.reshape(self.q, self.q), b

    def loglik(self, beta, sigmas, rrs=None) -> float:
        rrs = rrs if rrs is not None else [c.rr(beta) for c in self.cells]
        total = 0.0
        for c, RR in zip(self.cells, rrs):
            V, logdet = _chol_inv(sigmas[c.g][np.ix_(c.pos, c.pos)])
            total += c.n * logdet + np.sum(V * RR)
        return -0.5 * total

    def _group_loglik(self, g, a, rrs):
        S, _ = sigma_from_logchol(a, self.K)
        total = 0.0
        for c, RR in zip(self.cells, rrs):
            if c.g == g:
                V, logdet = _chol_inv(S[np.ix_(c.pos, c.pos)])
                total += c.n * logdet + np.sum(V * RR)
        return -0.5 * total

    def _alpha_score_info(self, g, a, rrs):
        S, _ = sigma_from_logchol(a, self.K)
        dS = dsigma_dalpha(a, self.K)
        grad = np.zeros(self.na)
        info = np.zeros((self.na, self.na))
        for c, RR in zip(self.cells, rrs):
            if c.g != g:
                continue
            V, _ = _chol_inv(S[np.ix_(c.pos, c.pos)])
            dSc = dS[:, c.pos][:, :, c.pos]
            M = V @ RR @ V - c.n * V
            grad += 0.5 * np.einsum("kl,alk->a", M, dSc)
            P = V @ dSc                                    # (na, d, d)
            info += 0.5 * c.n * np.einsum("aij,bji->ab", P, P)
        return grad, info

    # -- estimating functions
    def _cell_blocks(self, theta):
        """Yield (cell, beta rows, alpha rows) of the per-subject estimating functions."""
        delta, beta, alphas = self.unpack(theta)
        dSs = [dsigma_dalpha(a, self.K) for a in alphas]
        sig = self.sigmas(alphas)
        for c in self.cells:
            V, _ = _chol_inv(sig[c.g][np.ix_(c.pos, c.pos)])
            r = c.y - c.Z @ beta
            u = r @ V
            pb = np.matmul(u[:, None, :], c.Z)[:, 0, :]
            dSc = dSs[c.g][:, c.pos][:, :, c.pos]
            tr = np.einsum("kl,alk->a", V, dSc)
            uu = (u[:, :, None] * u[:, None, :]).reshape(c.n, -1)
            pa = 0.5 * (uu @ dSc.reshape(dSc.shape[0], -1).T - tr)
            yield c, pb, pa

    def _delta_rows(self, theta):
        delta, beta, _ = self.unpack(theta)
        lin = np.tile(beta[self.effect_index], (self.n, 1))
        if self.p:
            lin = lin + self.X @ beta[self.inter_index].T
        return lin - delta

    def psi(self, theta) -> np.ndarray:
        """Per-subject estimating functions, (n, dim)."""
        out = np.zeros((self.n, self.dim))
        for c, pb, pa in self._cell_blocks(theta):
            out[c.idx, self.sl_beta] = pb
            out[c.idx, self.sl_alpha[c.g]] = pa
        if self.nd:
            out[:, :self.nd] = self._delta_rows(theta)
        return out

    def psi_moments(self, theta):
        """Column means and root-mean-squares of ``psi`` without forming it."""
        s1 = np.zeros(self.dim)
        s2 = np.zeros(self.dim)
        for c, pb, pa in self._cell_blocks(theta):
            s1[self.sl_beta] += pb.sum(axis=0)
            s2[self.sl_beta] += np.einsum("ij,ij->j", pb, pb)
            s1[self.sl_alpha[c.g]] += pa.sum(axis=0)
            s2[self.sl_alpha[c.g]] += np.einsum("ij,ij->j", pa, pa)
        if self.nd:
            d = self._delta_rows(theta)
            s1[:self.nd] = d.sum(axis=0)
            s2[:self.nd] = np.einsum("ij,ij->j", d, d)
        return s1 / self.n, np.sqrt(s2 / self.n)

    def mean_psi(self, theta) -> np.ndarray:
        delta, beta, alphas = self.unpack(theta)
        out = np.zeros(self.dim)
        sig = self.sigmas(alphas)
        dSs = [dsigma_dalpha(a, self.K) for a in alphas]
        gb = np.zeros(self.q)
        for c in self.cells:
            V, _ = _chol_inv(sig[c.g][np.ix_(c.pos, c.pos)])
            gb += np.einsum("kl,kql->q", V, c.ZY) - (V.ravel() @ c.ZZ2).reshape(self.q, self.q) @ beta
            dSc = dSs[c.g][:, c.pos][:, :, c.pos]
            M = V @ c.rr(beta) @ V - c.n * V
            out[self.sl_alpha[c.g]] += 0.5 * np.einsum("kl,alk->a", M, dSc)
        out[self.sl_beta] = gb
        out /= self.n
        if self.nd:
            out[:self.nd] = self.closed_form_delta(beta) - delta
        return out

    def psi_rms(self, theta) -> np.ndarray:
        return self.psi_moments(theta)[1]

    def relative_gradient(self, theta, rms=None) -> float:
        """max_r |mean psi_r| / rms(psi_r); ``rms`` may be a cached scale."""
        if rms is None:
            mean, rms = self.psi_moments(theta)
        else:
            mean = self.mean_psi(theta)
        rel = np.where(rms > 0, np.abs(mean) / np.where(rms > 0, rms, 1.0), np.abs(mean))
        return float(rel.max())

    # -- design checks
    def observed_rows(self) -> np.ndarray:
        return self.Z[self.mask]

    def dependent_columns(self) -> list[str]:
        return _dependent_columns(self.observed_rows(), self.columns)


# ---------------------------------------------------------------- results

@dataclass(frozen=True)
class FitResult:
    """Fitted working model.

    Attributes
    ----------
    spec : WorkingModelSpec
    theta_hat : ParameterVector
    delta_hat : (J,) array
    xbar : (p,) array
        Mean of the adjusted covariates over all subjects.
    converged : bool
    iterations : int
    final_gradient_norm : float
        Relative max-norm of the mean estimating function at ``theta_hat``.
    loglik : float
    loglik_trace : tuple of float
        Log-likelihood after every block update.
    """

    spec: WorkingModelSpec
    theta_hat: ParameterVector
    delta_hat: np.ndarray
    xbar: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    loglik: float
    loglik_trace: tuple[float, ...] = ()
    columns: tuple[str, ...] = ()
    problem: ModelProblem | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.problem.n if self.problem is not None else 0

    def theta_flat(self) -> np.ndarray:
        return self.problem.from_parameters(self.theta_hat)


def _check_positivity(ds: TrialDataset):
    full = ds.mask.all(axis=1)
    for j in range(ds.J + 1):
        if not np.any(full & (ds.arm == j)):
            raise PositivityError(
                f"positivity violated: arm {j} has no subject observed at every visit")


def _initial_beta(prob: ModelProblem, how: str):
    q = prob.q
    for mode in ((how, "available_case") if how == "complete_case" else (how,)):
        A = np.zeros((q, q))
        b = np.zeros(q)
        for c in prob.cells:
            if mode == "complete_case" and c.d != prob.K:
                continue
            I = np.eye(c.d)
            A += (I.ravel() @ c.ZZ2).reshape(q, q)
            b += np.einsum("kl,kql->q", I, c.ZY)
        if np.any(A):
            ev = np.linalg.eigvalsh(A)
            if ev[0] > 1e-12 * ev[-1]:
                return np.linalg.solve(A, b)
    raise SingularDesignError("singular normal matrix; collinear columns: "
                              + ", ".join(prob.dependent_columns() or ["(undetermined)"]))


def _initial_sigma(prob: ModelProblem, g: int, beta) -> np.ndarray:
    K = prob.K
    full = [c for c in prob.cells if c.g == g and c.d == K]
    S = None
    if full:
        nf = sum(c.n for c in full)
        S = sum(c.rr(beta) for c in full) / nf
        S = 0.5 * (S + S.T)
        ev = np.linalg.eigvalsh(S)
        if ev[0] <= 1e-8 * max(ev[-1], 0.0):
            S = S + 1e-8 * max(np.trace(S), 1e-300) / K * np.eye(K)
            ev = np.linalg.eigvalsh(S)
        if not (ev[0] > 0 and ev[0] > 1e-8 * ev[-1]):
            S = None
    if S is None:                               # available-case variances
        ss, cnt = np.zeros(K), np.zeros(K)
        for c in prob.cells:
            if c.g == g:
                ss[c.pos] += np.diag(c.rr(beta))
                cnt[c.pos] += c.n
        v = np.where(cnt > 0, ss / np.maximum(cnt, 1), 1.0)
        S = np.diag(np.where(v > 0, v, 1.0))
    return S


def solve(ds: TrialDataset, spec: WorkingModelSpec, opts: SolverOptions | None = None,
          problem: ModelProblem | None = None) -> FitResult:
    """Maximise the observed-data likelihood by block-coordinate ascent.

    Each sweep: generalised least squares for beta given the covariance(s);
    one damped Fisher-scoring step per covariance in log-Cholesky coordinates;
    for IMMRM, delta from its closed form.  Stops when the relative max-norm
    of the mean estimating function drops below the tolerance.
    """
    opts = opts or SolverOptions()
    _check_positivity(ds)
    prob = problem or ModelProblem(ds, spec)
    beta = _initial_beta(prob, opts.initializer)
    alphas = [logchol_from_sigma(_initial_sigma(prob, g, beta)) for g in range(prob.G)]
    sig = prob.sigmas(alphas)
    ll = prob.loglik(beta, sig)
    trace = [ll]
    converged = False
    rel = math.inf
    it = 0
    checked = False
    scale = None
    for it in range(1, opts.max_iterations + 1):
        A, b = prob.normal_equations(sig)
        if not checked:
            ev = np.linalg.eigvalsh(A)
            if not ev[0] > 1e-12 * ev[-1]:
                raise SingularDesignError("singular weighted normal matrix; collinear columns: "
                                          + ", ".join(prob.dependent_columns() or ["(undetermined)"]))
            checked = True
        beta = np.linalg.solve(A, b)
        rrs = [c.rr(beta) for c in prob.cells]
        ll = prob.loglik(beta, sig, rrs)
        trace.append(ll)
        for g in range(prob.G):
            grad, info = prob._alpha_score_info(g, alphas[g], rrs)
            try:
                step = np.linalg.solve(info, grad)
            except np.linalg.LinAlgError:
                step = grad / max(np.abs(np.diag(info)).max(), 1e-300)
            base = prob._group_loglik(g, alphas[g], rrs)
            slack = 1e-13 * max(1.0, abs(ll))
            t = 1.0
            for _ in range(opts.max_halvings + 1):
                cand = alphas[g] + t * step
                try:
                    val = prob._group_loglik(g, cand, rrs)
                except NotPositiveDefiniteError:
                    val = -math.inf
                if np.isfinite(val) and val >= base - slack:
                    alphas[g] = cand
                    break
                t *= 0.5
        sig = prob.sigmas(alphas)
        ll = prob.loglik(beta, sig, rrs)
        trace.append(ll)
        delta = prob.closed_form_delta(beta) if prob.nd else None
        theta = prob.pack(delta, beta, alphas)
        # cheap screen with a cached scale; exact check only near convergence
        if scale is None:
            scale = prob.psi_rms(theta)
        rel = prob.relative_gradient(theta, scale)
        if rel < 100 * opts.gradient_tolerance:
            rel = prob.relative_gradient(theta)
        if rel < opts.gradient_tolerance:
            converged = True
            break
    delta = prob.closed_form_delta(beta) if prob.nd else None
    theta = prob.pack(delta, beta, alphas)
    pv = prob.to_parameters(theta)
    return FitResult(spec=spec, theta_hat=pv, delta_hat=extract_delta(pv, spec, prob.xbar),
                     xbar=prob.xbar.copy(), converged=converged, iterations=it,
                     final_gradient_norm=rel, loglik=ll, loglik_trace=tuple(trace),
                     columns=prob.columns, problem=prob)


# ---------------------------------------------------------------- public evaluators

def log_likelihood(theta: ParameterVector, ds: TrialDataset, spec: WorkingModelSpec) -> float:
    """Observed-data Gaussian log-likelihood, constants dropped.

    Sum over subjects with at least one modelled outcome of
    ``-0.5 * (log det(S_oo) + r_o' S_oo^{-1} r_o)``.
    """
    prob = ModelProblem(ds, spec)
    flat = prob.from_parameters(theta)
    _, beta, alphas = prob.unpack(flat)
    return prob.loglik(beta, [np.asarray(S, float) for S in theta.covariance])


def estimating_functions(theta: ParameterVector, ds: TrialDataset, spec: WorkingModelSpec) -> np.ndarray:
    """Per-subject estimating functions stacked as ``(n, dim)``.

    Columns follow ``(delta, beta, alpha_0, ...)``; the covariance rows are
    derivatives of the per-subject log-likelihood in log-Cholesky coordinates.
    """
    prob = ModelProblem(ds, spec)
    return prob.psi(prob.from_parameters(theta))


def estimating_function(theta: ParameterVector, i: int, ds: TrialDataset, spec: WorkingModelSpec) -> np.ndarray:
    return estimating_functions(theta, ds, spec)[i]
