"""Temperature calibration of zero-shot class scores.

A single temperature ``T`` divides every logit before the softmax.  The
solver picks ``T`` so that the mean winning probability — averaged per
domain and then mixed half/half between source and target — hits a target
value ``tau``.  Sharpened probabilities become the soft teacher labels
used for distillation downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ClassMismatchError,
    EmptyDomainError,
    InfeasibleError,
    NonFiniteError,
    NotBracketedError,
    UnknownDomainTagError,
    UnknownSampleIdError,
)

DEFAULT_TAU = 0.9
PROB_FLOOR = 1e-12

MEAN_TOLERANCE = 1e-6
BRACKET_RELATIVE_WIDTH = 1e-9
MAX_ITERATIONS = 200

_DOMAIN_TAGS = ("source", "target")


def stable_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    t = float(temperature)
    if t <= 0.0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class LogitMatrix:
    """Raw per-sample class scores with ids and per-sample domain tags."""

    logits: np.ndarray
    sample_ids: tuple[str, ...]
    domains: tuple[str, ...]

    def __post_init__(self):
        logits = np.ascontiguousarray(np.asarray(self.logits, dtype=np.float64))
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "domains", tuple(self.domains))
        if logits.ndim != 2 or logits.shape[1] < 2:
            raise ClassMismatchError(
                f"logits must be n x K with K >= 2, got shape {logits.shape}"
            )
        if not np.isfinite(logits).all():
            raise NonFiniteError("logit matrix contains non-finite entries")
        n = logits.shape[0]
        if len(self.sample_ids) != n or len(self.domains) != n:
            raise ClassMismatchError(
                f"ids/domains length must match {n} rows, got "
                f"{len(self.sample_ids)}/{len(self.domains)}"
            )
        if len(set(self.sample_ids)) != n:
            raise ClassMismatchError("sample ids must be unique")
        for tag in self.domains:
            if tag not in _DOMAIN_TAGS:
                raise UnknownDomainTagError(f"unknown domain tag {tag!r}")

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class SoftLabelSet:
    """Row-stochastic adjusted predictions keyed by sample id."""

    probs: np.ndarray
    sample_ids: tuple[str, ...]
    temperature_used: float
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise ClassMismatchError(
                f"probs must be n x K with K >= 2, got shape {probs.shape}"
            )
        if len(self.sample_ids) != probs.shape[0]:
            raise ClassMismatchError(
                f"got {len(self.sample_ids)} ids for {probs.shape[0]} rows"
            )
        if len(set(self.sample_ids)) != probs.shape[0]:
            raise ClassMismatchError("sample ids must be unique")
        if not np.isfinite(probs).all():
            raise NonFiniteError("soft labels contain non-finite entries")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ClassMismatchError("soft label entries must lie in [0, 1]")
        sums = probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            worst = int(np.abs(sums - 1.0).argmax())
            raise ClassMismatchError(
                f"row {worst} sums to {sums[worst]!r}, expected 1 within 1e-9"
            )
        if float(self.temperature_used) <= 0.0:
            raise ValueError("temperature_used must be positive")
        object.__setattr__(
            self, "_index", {sid: i for i, sid in enumerate(self.sample_ids)}
        )

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]

    def rows_for(self, ids) -> np.ndarray:
        """Probability rows for ``ids``, in the requested order."""
        rows = np.empty((len(ids), self.probs.shape[1]), dtype=np.float64)
        for i, sid in enumerate(ids):
            idx = self._index.get(sid)
            if idx is None:
                raise UnknownSampleIdError(f"no soft label for sample id {sid!r}")
            rows[i] = self.probs[idx]
        return rows


@dataclass(frozen=True)
class CalibrationResult:
    temperature: float
    achieved_mean: float
    iterations: int


def _check_pair(source: LogitMatrix, target: LogitMatrix):
    if len(source) == 0 or len(target) == 0:
        raise EmptyDomainError(
            f"both domains need rows, got source={len(source)} target={len(target)}"
        )
    if source.n_classes != target.n_classes:
        raise ClassMismatchError(
            f"class counts differ: source K={source.n_classes}, "
            f"target K={target.n_classes}"
        )


def _mean_max_prob(logits: np.ndarray, temperature: float) -> float:
    return float(stable_softmax(logits, temperature).max(axis=1).mean())


def mean_winning_probability(
    source: LogitMatrix, target: LogitMatrix, temperature: float
) -> float:
    """Half/half mix of each domain's mean top softmax probability at ``temperature``."""
    _check_pair(source, target)
    return 0.5 * _mean_max_prob(source.logits, temperature) + 0.5 * _mean_max_prob(
        target.logits, temperature
    )


def _cold_limit(logits: np.ndarray) -> float:
    """Mean winning probability in the limit T -> 0+ (ties split the mass)."""
    multiplicity = (logits == logits.max(axis=1, keepdims=True)).sum(axis=1)
    return float(np.mean(1.0 / multiplicity))


def solve_temperature(
    source: LogitMatrix, target: LogitMatrix, tau: float = DEFAULT_TAU
) -> CalibrationResult:
    """Bisect for the temperature whose mean winning probability equals ``tau``.

    The bracket starts at (1e-3, 1e3) and expands by decades to at most
    (1e-12, 1e12).  Iteration stops once the achieved mean is within
    ``MEAN_TOLERANCE`` of ``tau`` *and* the bracket width has collapsed to
    ``BRACKET_RELATIVE_WIDTH`` relative to the answer, so the returned
    temperature itself is pinned, not just the constraint value.
    """
    _check_pair(source, target)
    tau = float(tau)
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")

    ceiling = 0.5 * _cold_limit(source.logits) + 0.5 * _cold_limit(target.logits)
    if ceiling <= tau:
        raise InfeasibleError(
            f"mean winning probability cannot exceed {ceiling:.6f} "
            f"(tied maxima), so tau={tau} is unreachable"
        )

    def gap(temperature: float) -> float:
        return mean_winning_probability(source, target, temperature) - tau

    lo, hi = 1e-3, 1e3
    while gap(lo) < 0.0:
        lo /= 10.0
        if lo < 1e-12:
            raise NotBracketedError(f"no temperature above 1e-12 reaches tau={tau}")
    while gap(hi) > 0.0:
        hi *= 10.0
        if hi > 1e12:
            raise NotBracketedError(f"no temperature below 1e12 reaches tau={tau}")

    mid = 0.5 * (lo + hi)
    achieved = mean_winning_probability(source, target, mid)
    iterations = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        mid = 0.5 * (lo + hi)
        achieved = mean_winning_probability(source, target, mid)
        tight = (hi - lo) <= BRACKET_RELATIVE_WIDTH * max(1.0, mid)
        if abs(achieved - tau) <= MEAN_TOLERANCE and tight:
            break
        if achieved > tau:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(
        temperature=float(mid), achieved_mean=float(achieved), iterations=iterations
    )


def sharpen(logits: LogitMatrix, temperature: float) -> SoftLabelSet:
    """Soft labels ``softmax(logits / temperature)``, floored away from {0, 1}."""
    probs = stable_softmax(logits.logits, temperature)
    probs = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return SoftLabelSet(
        probs=probs, sample_ids=logits.sample_ids, temperature_used=float(temperature)
    )
