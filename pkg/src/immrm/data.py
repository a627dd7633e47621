"""Trial data: in-memory representation, CSV ingestion, validation, design encoding."""
from __future__ import annotations

import csv
import enum
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .patterns import PatternDistribution, masks_to_bits


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrialDataset:
    """Wide-format longitudinal trial data, one row per subject.

    Attributes
    ----------
    arm : (n,) int array
        Treatment labels in ``0..J``; 0 is control.
    covariates : (n, p) float array
        Baseline covariates, including stratum dummies when strata are declared.
    outcomes : (n, K) float array
        Outcomes; NaN wherever ``mask`` is False.
    mask : (n, K) bool array
        True where the outcome was observed.
    J : int
        Number of non-control arms.
    stratum : (n,) int array or None
        Stratum labels (positive integers).
    ids : tuple of str or None
    covariate_names : tuple of str
    n_stratum_dummies : int
        Trailing covariate columns that were generated from ``stratum``.
    """

    arm: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    mask: np.ndarray
    J: int
    stratum: np.ndarray | None = None
    ids: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] = ()
    n_stratum_dummies: int = 0

    def __post_init__(self):
        arm = np.asarray(self.arm)
        if arm.ndim != 1 or arm.size == 0:
            raise InputError("dataset has zero subjects")
        if not np.issubdtype(arm.dtype, np.integer):
            if not np.all(np.equal(np.mod(arm, 1), 0)):
                raise InputError("arm labels must be integers")
        arm = arm.astype(np.int64)
        n = arm.size
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(n, 0)
        if X.ndim != 2 or X.shape[0] != n:
            raise InputError(f"covariates must have shape (n, p) with n={n}")
        mask = np.asarray(self.mask, dtype=bool)
        Y = np.asarray(self.outcomes, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != n or mask.shape != Y.shape:
            raise InputError("outcomes and mask must both have shape (n, K)")
        if Y.shape[1] < 1:
            raise InputError("need at least one visit")
        J = int(self.J)
        if J < 1:
            raise InputError("need at least one treatment arm besides control")
        bad = np.flatnonzero((arm < 0) | (arm > J))
        if bad.size:
            raise InputError(f"arm label {arm[bad[0]]} outside 0..{J} (subject index {bad[0]})")
        counts = np.bincount(arm, minlength=J + 1)
        if np.any(counts == 0):
            raise InputError(f"arm {int(np.flatnonzero(counts == 0)[0])} has no subjects")
        if not np.all(np.isfinite(X)):
            raise InputError("covariates must be finite")
        if not np.all(np.isfinite(Y[mask])):
            raise InputError("observed outcomes must be finite")
        Y = np.where(mask, Y, np.nan)
        S = None
        if self.stratum is not None:
            S = np.asarray(self.stratum).astype(np.int64)
            if S.shape != (n,):
                raise InputError("stratum must have one label per subject")
            if np.any(S < 1):
                raise InputError("stratum labels must be positive integers")
        names = tuple(self.covariate_names) or tuple(f"x{m + 1}" for m in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise InputError("covariate_names length does not match covariates")
        if self.ids is not None and len(self.ids) != n:
            raise InputError("ids length does not match n")
        object.__setattr__(self, "arm", _frozen(arm))
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "outcomes", _frozen(Y))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "stratum", None if S is None else _frozen(S))
        object.__setattr__(self, "covariate_names", names)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self) -> int:
        return self.arm.size

    @property
    def K(self) -> int:
        return self.outcomes.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def R(self) -> int:
        return 0 if self.stratum is None else int(np.unique(self.stratum).size)

    def arm_fractions(self) -> np.ndarray:
        return np.bincount(self.arm, minlength=self.J + 1) / self.n


def stratum_dummies(stratum: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """R-1 indicator columns, dropping the smallest stratum label."""
    levels = np.unique(stratum)
    cols = [(stratum == s).astype(float) for s in levels[1:]]
    D = np.column_stack(cols) if cols else np.zeros((stratum.size, 0))
    return D, [f"stratum_{s}" for s in levels[1:]]


@dataclass(frozen=True)
class CsvSchema:
    """Column names of a wide trial CSV.

    ``x_cols``/``y_cols`` default to every header matching ``x<digits>`` and
    ``y<digits>``, in numeric order.  ``J`` defaults to the largest arm label.
    """

    id_col: str = "id"
    arm_col: str = "arm"
    stratum_col: str | None = None
    x_cols: tuple[str, ...] | None = None
    y_cols: tuple[str, ...] | None = None
    J: int | None = None
    strata_in_covariates: bool = False


def _numbered(header, prefix):
    pat = re.compile(rf"^{prefix}(\d+)$")
    found = [(int(m.group(1)), h) for h in header if (m := pat.match(h))]
    return tuple(h for _, h in sorted(found))


def _parse_float(s: str, what: str, row: int) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"row {row}: malformed number {s!r} in column {what}") from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}: non-finite value {s!r} in column {what}")
    return v


def _parse_int(s: str, what: str, row: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise ParseError(f"row {row}: malformed integer {s!r} in column {what}") from None


def load_csv(path, schema: CsvSchema | None = None) -> TrialDataset:
    """Read a wide trial CSV.  Empty outcome cells are missing.

    Row numbers in error messages count the header as row 1.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = list(reader)
    x_cols = schema.x_cols if schema.x_cols is not None else _numbered(header, "x")
    y_cols = schema.y_cols if schema.y_cols is not None else _numbered(header, "y")
    if not y_cols:
        raise ParseError(f"{path}: no outcome columns")
    needed = [schema.id_col, schema.arm_col, *x_cols, *y_cols]
    if schema.stratum_col:
        needed.append(schema.stratum_col)
    missing = [c for c in needed if c not in header]
    if missing:
        raise ParseError(f"{path}: header lacks column(s) {', '.join(missing)}")
    dup = {h for h in header if header.count(h) > 1}
    if dup:
        raise ParseError(f"{path}: duplicated header column(s) {', '.join(sorted(dup))}")
    col = {h: k for k, h in enumerate(header)}
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: zero subjects")
    n, p, K = len(rows), len(x_cols), len(y_cols)
    ids, arm = [], np.empty(n, dtype=np.int64)
    X, Y = np.empty((n, p)), np.full((n, K), np.nan)
    mask = np.zeros((n, K), dtype=bool)
    strat = np.empty(n, dtype=np.int64) if schema.stratum_col else None
    seen: dict[str, int] = {}
    for i, r in enumerate(rows):
        row = i + 2
        if len(r) != len(header):
            raise ParseError(f"row {row}: expected {len(header)} fields, found {len(r)}")
        sid = r[col[schema.id_col]].strip()
        if sid in seen:
            raise ParseError(f"row {row}: duplicate id {sid!r} (first seen in row {seen[sid]})")
        seen[sid] = row
        ids.append(sid)
        a = _parse_int(r[col[schema.arm_col]].strip(), schema.arm_col, row)
        if a < 0 or (schema.J is not None and a > schema.J):
            hi = schema.J if schema.J is not None else "J"
            raise ParseError(f"row {row}: unknown arm label {a} (expected 0..{hi})")
        arm[i] = a
        for m, c in enumerate(x_cols):
            X[i, m] = _parse_float(r[col[c]].strip(), c, row)
        for t, c in enumerate(y_cols):
            s = r[col[c]].strip()
            if s != "":
                Y[i, t] = _parse_float(s, c, row)
                mask[i, t] = True
        if strat is not None:
            s = _parse_int(r[col[schema.stratum_col]].strip(), schema.stratum_col, row)
            if s < 1:
                raise ParseError(f"row {row}: stratum label must be a positive integer, got {s}")
            strat[i] = s
    J = schema.J if schema.J is not None else int(arm.max())
    names = list(x_cols)
    n_dummy = 0
    if strat is not None and not schema.strata_in_covariates:
        D, dnames = stratum_dummies(strat)
        X = np.hstack([X, D])
        names += dnames
        n_dummy = D.shape[1]
    return TrialDataset(arm=arm, covariates=X, outcomes=Y, mask=mask, J=J, stratum=strat,
                        ids=tuple(ids), covariate_names=tuple(names), n_stratum_dummies=n_dummy)


def write_csv(ds: TrialDataset, path, stratum_col: str = "stratum") -> None:
    """Write ``ds`` as a wide CSV readable by :func:`load_csv`.

    Auto-generated stratum dummies are dropped (the loader rebuilds them).
    """
    p_keep = ds.p - ds.n_stratum_dummies
    xnames = list(ds.covariate_names[:p_keep])
    header = ["id", "arm"] + ([stratum_col] if ds.stratum is not None else [])
    header += xnames + [f"y{t + 1}" for t in range(ds.K)]
    ids = ds.ids if ds.ids is not None else tuple(str(i + 1) for i in range(ds.n))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [ids[i], str(int(ds.arm[i]))]
            if ds.stratum is not None:
                row.append(str(int(ds.stratum[i])))
            row += [repr(float(v)) for v in ds.covariates[i, :p_keep]]
            row += [repr(float(ds.outcomes[i, t])) if ds.mask[i, t] else "" for t in range(ds.K)]
            w.writerow(row)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate`.  Flags only; callers decide what is fatal."""

    complete_cases_per_arm: tuple[int, ...]
    pattern_counts: dict[str, int]
    positivity_violated: bool
    arms_without_complete_case: tuple[int, ...]
    rank_deficient: bool
    collinear_columns: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not (self.positivity_violated or self.rank_deficient)


def _dependent_columns(M: np.ndarray, names) -> list[str]:
    """Columns that add nothing to the span of the columns before them."""
    out = []
    kept = np.zeros((M.shape[0], 0))
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    for k in range(M.shape[1]):
        trial = np.column_stack([kept, M[:, k]])
        s = np.linalg.svd(trial, compute_uv=False)
        if s.size and s[-1] <= 1e-10 * max(s[0], scale) * math.sqrt(M.shape[0]):
            out.append(names[k])
        else:
            kept = trial
    return out


def validate(ds: TrialDataset) -> ValidationReport:
    full = ds.mask.all(axis=1)
    cc = tuple(int(np.sum(full & (ds.arm == j))) for j in range(ds.J + 1))
    bits, counts = np.unique(masks_to_bits(ds.mask), return_counts=True)
    tally = {"".join("1" if (int(b) >> t) & 1 else "0" for t in range(ds.K)): int(c)
             for b, c in zip(bits, counts)}
    bad_arms = tuple(j for j, c in enumerate(cc) if c == 0)
    design = np.column_stack([np.ones(ds.n), ds.covariates])
    dep = _dependent_columns(design, ("intercept",) + ds.covariate_names)
    return ValidationReport(complete_cases_per_arm=cc, pattern_counts=tally,
                            positivity_violated=bool(bad_arms), arms_without_complete_case=bad_arms,
                            rank_deficient=bool(dep), collinear_columns=tuple(dep))


class Model(enum.Enum):
    ANCOVA = "ancova"
    MMRM_I = "mmrm1"
    MMRM_II = "mmrm2"
    IMMRM = "immrm"

    @property
    def label(self) -> str:
        return {"ancova": "ANCOVA", "mmrm1": "MMRM-I", "mmrm2": "MMRM-II", "immrm": "IMMRM"}[self.value]

    @classmethod
    def parse(cls, s) -> "Model":
        if isinstance(s, Model):
            return s
        key = str(s).strip().lower().replace("-", "").replace("_", "")
        aliases = {"ancova": "ancova", "mmrm1": "mmrm1", "mmrmi": "mmrm1",
                   "mmrm2": "mmrm2", "mmrmii": "mmrm2", "immrm": "immrm"}
        if key not in aliases:
            raise InputError(f"unknown model {s!r}; choose from ancova, mmrm1, mmrm2, immrm")
        return cls(aliases[key])


ALL_MODELS = (Model.ANCOVA, Model.MMRM_I, Model.MMRM_II, Model.IMMRM)


@dataclass(frozen=True)
class WorkingModelSpec:
    """Working model plus the covariate columns it adjusts for (None = all)."""

    model: Model
    covariate_columns: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "model", Model.parse(self.model))
        if self.covariate_columns is not None:
            cols = tuple(int(c) for c in self.covariate_columns)
            if len(set(cols)) != len(cols):
                raise InputError("covariate_columns has duplicates")
            object.__setattr__(self, "covariate_columns", cols)

    def select(self, ds: TrialDataset) -> tuple[np.ndarray, tuple[str, ...]]:
        if self.covariate_columns is None:
            return ds.covariates, ds.covariate_names
        cols = list(self.covariate_columns)
        if any(c < 0 or c >= ds.p for c in cols):
            raise InputError(f"covariate column index out of range 0..{ds.p - 1}")
        return ds.covariates[:, cols], tuple(ds.covariate_names[c] for c in cols)


def n_fixed_effects(model: Model, K: int, J: int, p: int) -> int:
    model = Model.parse(model)
    return {Model.ANCOVA: 1 + J + p, Model.MMRM_I: K * (1 + J) + p,
            Model.MMRM_II: K * (1 + J + p), Model.IMMRM: K * (1 + J + p + J * p)}[model]


@dataclass(frozen=True)
class DesignRow:
    """Fixed-effect regressors of one subject: row t multiplies beta at visit t."""

    matrix: np.ndarray


class Design(Sequence):
    """Stacked design of a working model.

    ``tensor[i]`` is subject i's regressor matrix with one row per modelled
    visit; ``visits`` maps those rows to outcome columns (ANCOVA models only
    the final visit).
    """

    def __init__(self, tensor: np.ndarray, columns: tuple[str, ...], visits: tuple[int, ...]):
        self.tensor = tensor
        self.columns = columns
        self.visits = visits

    def __len__(self):
        return self.tensor.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [DesignRow(m) for m in self.tensor[i]]
        return DesignRow(self.tensor[i])

    @property
    def n_columns(self) -> int:
        return self.tensor.shape[2]


def encode_design(ds: TrialDataset, spec: WorkingModelSpec) -> Design:
    X, xnames = spec.select(ds)
    n, K, J, p = ds.n, ds.K, ds.J, X.shape[1]
    A = np.zeros((n, J))
    for j in range(1, J + 1):
        A[:, j - 1] = ds.arm == j
    model = spec.model
    if model is Model.ANCOVA:
        T = np.concatenate([np.ones((n, 1)), A, X], axis=1)[:, None, :]
        cols = ("intercept",) + tuple(f"arm{j}" for j in range(1, J + 1)) + tuple(f"x:{s}" for s in xnames)
        return Design(T, cols, (K - 1,))
    q = n_fixed_effects(model, K, J, p)
    T = np.zeros((n, K, q))
    cols: list[str] = []
    off = 0
    for t in range(K):                          # visit intercepts
        T[:, t, off + t] = 1.0
    cols += [f"visit{t + 1}" for t in range(K)]
    off += K
    for t in range(K):                          # arm-by-visit, visit-major
        T[:, t, off + t * J: off + (t + 1) * J] = A
        cols += [f"arm{j}:visit{t + 1}" for j in range(1, J + 1)]
    off += K * J
    if model is Model.MMRM_I:
        T[:, :, off:off + p] = X[:, None, :]
        cols += [f"x:{s}" for s in xnames]
    else:
        for t in range(K):                      # covariate-by-visit
            T[:, t, off + t * p: off + (t + 1) * p] = X
            cols += [f"x:{s}:visit{t + 1}" for s in xnames]
        off += K * p
        if model is Model.IMMRM:                # arm-by-covariate-by-visit
            AX = (X[:, :, None] * A[:, None, :]).reshape(n, p * J)
            for t in range(K):
                T[:, t, off + t * J * p: off + (t + 1) * J * p] = AX
                cols += [f"arm{j}:x:{s}:visit{t + 1}" for s in xnames for j in range(1, J + 1)]
    assert T.shape[2] == len(cols) == q
    return Design(T, tuple(cols), tuple(range(K)))
