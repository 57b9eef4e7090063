"""Conformal prediction with the posterior predictive density as conformity score.

For observed ``y_1..y_n`` and a candidate ``y_{n+1}`` the scores are
``c_i = score(y_i, others_i)`` where ``others_i`` is the sample with ``y_i``
replaced by the candidate, and ``c_{n+1} = score(y_{n+1}, y_1..y_n)``. The
candidate is accepted at level ``alpha = k/(n+1)`` when at least ``k`` of
``c_1..c_n`` are ``<= c_{n+1}``. Without ties this is "``c_{n+1}`` exceeds the
k-th smallest of ``c_1..c_{n+1}``"; ties count in the candidate's favour, so
coverage can only rise.

Scores are callables ``score(y_new, others)`` with ``others`` of shape
``(..., n)`` and ``y_new`` of shape ``(...)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .core import RegionResult, invert_membership_batch

__all__ = [
    "NormalPrior",
    "ConformalConfig",
    "TieWarning",
    "postpred_density",
    "PosteriorPredictiveScore",
    "neg_abs_dev_score",
    "conformity_vector",
    "conformal_member",
    "conformal_region",
    "conformal_regions",
    "exact_conditional_coverage",
    "level_for_alpha",
]

Score = Callable[[np.ndarray, np.ndarray], np.ndarray]


class TieWarning(UserWarning):
    """Ties among data or scores; coverage statements become conservative."""


@dataclass(frozen=True)
class NormalPrior:
    """``y_i | theta ~ N(theta, sigma2)`` with ``theta ~ N(m, lam sigma2)``."""

    m: float = 0.0
    lam: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.lam > 0):
            raise ValueError("sigma2 and lam must be positive")

    def predictive(self, total, n):
        """Posterior predictive mean and variance given ``n`` points summing to ``total``."""
        prior_prec = 0.0 if math.isinf(self.lam) else 1.0 / (self.lam * self.sigma2)
        prec = n / self.sigma2 + prior_prec
        mean = (np.asarray(total, dtype=float) / self.sigma2 + self.m * prior_prec) / prec
        return mean, self.sigma2 + 1.0 / prec


def postpred_density(y_new, sample, prior: NormalPrior = NormalPrior()):
    """Posterior predictive density of ``y_new`` given ``sample`` (last axis)."""
    sample = np.asarray(sample, dtype=float)
    if sample.shape[-1] < 1:
        raise ValueError("sample must be nonempty")
    mean, var = prior.predictive(sample.sum(axis=-1), sample.shape[-1])
    dens = np.exp(-0.5 * (np.asarray(y_new) - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)
    return float(dens) if np.ndim(dens) == 0 else dens


class PosteriorPredictiveScore:
    """Conformity score ``p(y_new | others)`` under a conjugate normal prior."""

    def __init__(self, prior: NormalPrior):
        self.prior = prior

    def __call__(self, y_new, others):
        return postpred_density(y_new, others, self.prior)

    def __repr__(self):
        return f"PosteriorPredictiveScore({self.prior})"


def neg_abs_dev_score(y_new, others):
    """Baseline score ``-|y_new - mean(others)|``."""
    return -np.abs(np.asarray(y_new, dtype=float) - np.asarray(others, dtype=float).mean(axis=-1))


@dataclass(frozen=True)
class ConformalConfig:
    data: tuple[float, ...]
    k_level: int
    prior: NormalPrior = NormalPrior()

    def __post_init__(self):
        object.__setattr__(self, "data", tuple(float(y) for y in self.data))
        n = len(self.data)
        if n < 1:
            raise ValueError("need at least one observation")
        if int(self.k_level) != self.k_level or not 0 <= self.k_level <= n:
            raise ValueError(f"k_level must be an integer in [0, {n}]")

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def alpha(self) -> Fraction:
        return Fraction(self.k_level, self.n + 1)

    @property
    def has_ties(self) -> bool:
        return len(set(self.data)) < self.n

    def score(self, kind: str | Score = "postpred") -> Score:
        if callable(kind):
            return kind
        if kind == "postpred":
            return PosteriorPredictiveScore(self.prior)
        if kind == "neg_abs_dev_baseline":
            return neg_abs_dev_score
        raise ValueError(f"unknown score {kind!r}")


def level_for_alpha(alpha: float, n: int) -> int:
    """The integer ``k`` with ``alpha = k/(n+1)``; raises naming the nearest feasible levels."""
    k = alpha * (n + 1)
    k_int = round(k)
    if abs(k - k_int) > 1e-9 or not 0 <= k_int <= n:
        lo = max(1, min(n, math.floor(k)))
        hi = max(1, min(n, math.ceil(k)))
        feasible = sorted({lo, hi})
        hint = ", ".join(f"{j}/{n + 1}={j / (n + 1):.6g}" for j in feasible)
        raise ValueError(f"alpha={alpha} is not of the form k/(n+1) with n={n}; nearest: {hint}")
    return int(k_int)


def _swap_matrix(data, candidates):
    """``others[..., i, :]`` = data with entry ``i`` replaced by the candidate."""
    data = np.asarray(data, dtype=float)
    cand = np.asarray(candidates, dtype=float)
    n = data.shape[-1]
    eye = np.eye(n, dtype=bool)
    base = np.broadcast_to(data[..., None, :], cand.shape + (n, n)) if data.ndim == 1 else np.broadcast_to(
        data[..., None, :], data.shape[:-1] + (n, n)
    )
    return np.where(eye, cand[..., None, None], base)


def conformity_vector(data, candidate, score: Score):
    """Scores ``(c_1, ..., c_{n+1})`` along the last axis; broadcasts over candidates.

    ``data`` has shape ``(n,)`` or ``(..., n)`` matching the candidates' shape.
    """
    data = np.asarray(data, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    others = _swap_matrix(data, cand)
    c_data = score(np.broadcast_to(data, others.shape[:-1]), others)
    c_new = score(cand, np.broadcast_to(data, cand.shape + data.shape[-1:]))
    return np.concatenate([c_data, np.asarray(c_new)[..., None]], axis=-1)


def conformal_member(data, candidate, k_level: int, score: Score):
    """Rank rule: at least ``k_level`` of ``c_1..c_n`` are ``<= c_{n+1}``."""
    c = conformity_vector(data, candidate, score)
    beaten = (c[..., :-1] <= c[..., -1:]).sum(axis=-1)
    out = beaten >= k_level
    return bool(out) if np.ndim(out) == 0 else out


def conformal_regions(data, k_level: int, score: Score, prior: NormalPrior, resolution: int = 2048):
    """Regions for each row of ``data`` (shape ``(m, n)``), inverted in one batch.

    Search windows are centred at the posterior predictive mean with the
    predictive standard deviation as width hint.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    centres, var = prior.predictive(data.sum(axis=-1), data.shape[-1])
    hints = np.full(data.shape[0], math.sqrt(var))

    def member(rows, ys):
        return conformal_member(data[rows], ys, k_level, score)

    return invert_membership_batch(member, centres, hints, resolution)


def conformal_region(
    cfg: ConformalConfig, score: str | Score = "postpred", resolution: int = 2048
) -> RegionResult:
    """The conformal prediction set for ``cfg.data`` at level ``1 - k/(n+1)``.

    ``k_level = 0`` accepts every candidate and raises
    :class:`~fabpred.core.UnboundedRegionError`.
    """
    res = conformal_regions(cfg.data, cfg.k_level, cfg.score(score), cfg.prior, resolution)[0]
    if cfg.has_ties:
        res.diagnostics["ties"] = True
    res.diagnostics["alpha"] = cfg.alpha
    return res


def exact_conditional_coverage(cfg: ConformalConfig, score: str | Score = "postpred", augmented_point: float = 0.0):
    """Conditional coverage given the multiset ``data + [augmented_point]``.

    Each of the ``n + 1`` values is in turn treated as the future point and
    the rest as the sample; the fraction accepted by the rank rule is
    returned as a :class:`~fractions.Fraction`. Scores do not depend on which
    value is held out, so they are computed once. Absent ties the result is
    exactly ``(n + 1 - k)/(n + 1)``; ties warn with :class:`TieWarning`.
    """
    fn = cfg.score(score)
    z = np.array(cfg.data + (float(augmented_point),))
    m = z.size
    others = np.array([np.delete(z, i) for i in range(m)])
    c = np.asarray(fn(z, others), dtype=float)
    if len(set(z.tolist())) < m or len(set(c.tolist())) < m:
        warnings.warn("ties among values or scores; coverage is conservative", TieWarning, stacklevel=2)
    accepted = sum(int((np.delete(c, j) <= c[j]).sum() >= cfg.k_level) for j in range(m))
    return Fraction(accepted, m)
