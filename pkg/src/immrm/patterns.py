"""Missing-pattern algebra.

A pattern is a binary vector over the ``K`` visits marking which outcomes were
observed.  Patterns are stored as integer bitmasks (bit ``t`` set when visit
``t`` is observed, 0-based), which keeps pattern distributions hashable and
cheap to tally.

The central object is the pattern precision

    V_m(S) = D_m (D_m' S D_m)^{-1} D_m'

where ``D_m`` selects the observed visits.  It is the precision of the
observed sub-vector embedded back into ``K x K`` with zeros elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import InputError, NotPositiveDefiniteError

# smallest eigenvalue must exceed this multiple of the largest
PD_RTOL = 1e-10


def mask_to_bits(mask) -> int:
    """Encode a 0/1 vector as a bitmask (visit t -> bit t)."""
    bits = 0
    for t, v in enumerate(np.asarray(mask).ravel()):
        if v:
            bits |= 1 << t
    return bits


def bits_to_mask(bits: int, K: int) -> np.ndarray:
    return np.array([(bits >> t) & 1 for t in range(K)], dtype=bool)


def masks_to_bits(masks: np.ndarray) -> np.ndarray:
    """Vectorised bitmask encoding of an ``(n, K)`` mask array."""
    masks = np.asarray(masks, dtype=bool)
    K = masks.shape[1]
    if K > 63:
        raise InputError("at most 63 visits are supported")
    weights = np.left_shift(np.int64(1), np.arange(K, dtype=np.int64))
    return masks.astype(np.int64) @ weights


def _coerce_bits(m, K: int | None) -> tuple[int, int]:
    if isinstance(m, MissingPattern):
        return m.bits, m.K
    if isinstance(m, (int, np.integer)) and not isinstance(m, bool):
        if K is None:
            raise InputError("K is required when a pattern is given as a bitmask")
        return int(m), K
    if isinstance(m, str):
        arr = [c == "1" for c in m.strip()]
    else:
        arr = np.asarray(m).ravel()
    return mask_to_bits(arr), len(arr)


@dataclass(frozen=True)
class MissingPattern:
    """Observed-visit pattern.

    Attributes
    ----------
    K : int
        Number of visits.
    bits : int
        Bitmask of observed visits.
    """

    K: int
    bits: int

    def __post_init__(self):
        if self.K < 1:
            raise InputError("a pattern needs at least one visit")
        if self.bits < 0 or self.bits >= (1 << self.K):
            raise InputError(f"bitmask {self.bits} out of range for K={self.K}")

    @classmethod
    def from_mask(cls, mask) -> "MissingPattern":
        bits, K = _coerce_bits(mask, None)
        return cls(K, bits)

    @property
    def mask(self) -> np.ndarray:
        return bits_to_mask(self.bits, self.K)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.K) if (self.bits >> t) & 1)

    @property
    def ones_count(self) -> int:
        return bin(self.bits).count("1")

    @property
    def is_empty(self) -> bool:
        return self.bits == 0

    @property
    def is_full(self) -> bool:
        return self.bits == (1 << self.K) - 1

    def label(self) -> str:
        return "".join("1" if v else "0" for v in self.mask)


@dataclass(frozen=True)
class PatternDistribution:
    """Probabilities (or empirical frequencies) of observed-visit patterns.

    Probabilities may sum to less than one; the remainder is the all-missing
    pattern.  The all-missing pattern can also be listed explicitly.
    """

    K: int
    probs: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for bits, p in self.probs.items():
            b, K = _coerce_bits(bits, self.K)
            if K != self.K or b >= (1 << self.K):
                raise InputError(f"pattern {bits!r} does not have {self.K} visits")
            p = float(p)
            if not np.isfinite(p) or p < 0:
                raise InputError(f"pattern probability must be >= 0, got {p}")
            if p > 0:
                clean[b] = clean.get(b, 0.0) + p
        total = sum(clean.values())
        if total > 1 + 1e-12:
            raise InputError(f"pattern probabilities sum to {total} > 1")
        object.__setattr__(self, "probs", dict(sorted(clean.items())))

    @classmethod
    def from_masks(cls, masks: np.ndarray) -> "PatternDistribution":
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[0] == 0:
            raise InputError("need a non-empty (n, K) mask array")
        bits, counts = np.unique(masks_to_bits(masks), return_counts=True)
        n = masks.shape[0]
        return cls(masks.shape[1], {int(b): c / n for b, c in zip(bits, counts)})

    def items(self) -> Iterator[tuple[MissingPattern, float]]:
        for bits, p in self.probs.items():
            yield MissingPattern(self.K, bits), p

    def prob(self, m) -> float:
        bits, _ = _coerce_bits(m, self.K)
        return self.probs.get(bits, 0.0)

    @property
    def total(self) -> float:
        return float(sum(self.probs.values()))

    @property
    def prob_full(self) -> float:
        return self.probs.get((1 << self.K) - 1, 0.0)

    def prob_observed(self, t: int) -> float:
        """Marginal P(M_t = 1), with ``t`` 0-based."""
        return float(sum(p for b, p in self.probs.items() if (b >> t) & 1))

    def prob_joint(self, t: int, s: int, obs_t: bool, obs_s: bool) -> float:
        return float(sum(p for b, p in self.probs.items()
                         if bool((b >> t) & 1) == obs_t and bool((b >> s) & 1) == obs_s))

    def marginalize(self, visits: Iterable[int]) -> "PatternDistribution":
        """Distribution of the sub-pattern on ``visits`` (0-based, in order)."""
        visits = list(visits)
        out: dict[int, float] = {}
        for b, p in self.probs.items():
            nb = 0
            for k, t in enumerate(visits):
                if (b >> t) & 1:
                    nb |= 1 << k
            out[nb] = out.get(nb, 0.0) + p
        return PatternDistribution(len(visits), out)

    def labelled(self) -> dict[str, float]:
        return {MissingPattern(self.K, b).label(): p for b, p in self.probs.items()}


def check_pd(S: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Return ``S`` symmetrised, or raise if it is not positive definite."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NotPositiveDefiniteError(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NotPositiveDefiniteError(f"{name} has non-finite entries")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max(initial=0.0))):
        raise NotPositiveDefiniteError(f"{name} is not symmetric")
    S = 0.5 * (S + S.T)
    if S.shape[0] == 0:
        return S
    ev = np.linalg.eigvalsh(S)
    if ev[-1] <= 0 or ev[0] <= PD_RTOL * ev[-1]:
        raise NotPositiveDefiniteError(
            f"{name} is not positive definite (eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})")
    return S


def selection_matrix(m, K: int | None = None) -> np.ndarray:
    """``K x n_m`` matrix whose columns pick out the observed visits."""
    bits, K = _coerce_bits(m, K)
    pat = MissingPattern(K, bits)
    if pat.is_empty:
        raise InputError("empty pattern has no selection matrix")
    return np.eye(K)[:, list(pat.positions)]


def _precision_unchecked(pos, sigma: np.ndarray) -> np.ndarray:
    K = sigma.shape[0]
    V = np.zeros((K, K))
    if len(pos):
        idx = np.asarray(pos)
        V[np.ix_(idx, idx)] = np.linalg.inv(sigma[np.ix_(idx, idx)])
    return V


def pattern_precision(m, sigma, allow_empty: bool = False) -> np.ndarray:
    """Pattern precision ``D (D' sigma D)^{-1} D'``.

    Parameters
    ----------
    m : MissingPattern, 0/1 sequence, or pattern string like ``"101"``
    sigma : (K, K) positive-definite matrix
    allow_empty : bool
        Return the zero matrix for the all-missing pattern instead of raising.
    """
    sigma = check_pd(sigma)
    bits, K = _coerce_bits(m, sigma.shape[0])
    if K != sigma.shape[0]:
        raise InputError(f"pattern has {K} visits but sigma is {sigma.shape[0]}x{sigma.shape[0]}")
    pat = MissingPattern(K, bits)
    if pat.is_empty and not allow_empty:
        raise InputError("empty pattern has no selection matrix")
    return _precision_unchecked(pat.positions, sigma)


def mean_pattern_precision(dist: PatternDistribution, sigma) -> np.ndarray:
    """``E[V_M(sigma)] = sum_m p_m V_m(sigma)``."""
    sigma = check_pd(sigma)
    if sigma.shape[0] != dist.K:
        raise InputError("pattern distribution and sigma disagree on K")
    out = np.zeros_like(sigma)
    for pat, p in dist.items():
        if not pat.is_empty:
            out += p * _precision_unchecked(pat.positions, sigma)
    return out


def mean_pattern_sandwich(dist: PatternDistribution, a, b) -> np.ndarray:
    """``E[V_M(a) b V_M(a)]`` for a symmetric ``b``."""
    a = check_pd(a)
    b = np.asarray(b, dtype=float)
    out = np.zeros_like(a)
    for pat, p in dist.items():
        if not pat.is_empty:
            V = _precision_unchecked(pat.positions, a)
            out += p * V @ b @ V
    return out


def pattern_tally(ds, arm: int | None = None) -> PatternDistribution:
    """Empirical pattern frequencies of a dataset, optionally within one arm."""
    masks = np.asarray(ds.mask, dtype=bool)
    if arm is not None:
        masks = masks[np.asarray(ds.arm) == arm]
        if masks.shape[0] == 0:
            raise InputError(f"no subjects in arm {arm}")
    return PatternDistribution.from_masks(masks)
