"""Model-independent pieces of FAB region construction.

* :func:`np_optimal_set` builds the Neyman-Pearson acceptance set on a finite
  outcome space.
* :func:`invert_membership` turns a membership predicate on the real line
  into a union of disjoint intervals.
* :func:`solve_critical_q` finds the two-sided critical value of a shifted
  normal or Student-t statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy import special

from .specfun import _bisect, norm_quantile

__all__ = [
    "FabError",
    "UnboundedRegionError",
    "FiniteTestProblem",
    "RegionResult",
    "np_optimal_set",
    "invert_membership",
    "invert_membership_batch",
    "solve_critical_q",
    "two_sided_mass",
]

DEFAULT_RESOLUTION = 2048
MAX_DOUBLINGS = 6


class FabError(Exception):
    """Numerical failure while building a region."""


class UnboundedRegionError(FabError):
    """Accepted points reach the edge of the largest search window."""


@dataclass(frozen=True)
class FiniteTestProblem:
    """Outcome labels with a probability mass ``p`` and a risk mass ``r``."""

    outcomes: tuple[Hashable, ...]
    p_mass: tuple[float, ...]
    r_mass: tuple[float, ...]
    target: float

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "p_mass", tuple(float(v) for v in self.p_mass))
        object.__setattr__(self, "r_mass", tuple(float(v) for v in self.r_mass))
        n = len(self.outcomes)
        if n < 1 or len(self.p_mass) != n or len(self.r_mass) != n:
            raise ValueError("outcomes, p_mass and r_mass must have equal length >= 1")
        if abs(math.fsum(self.p_mass) - 1.0) > 1e-12 or min(self.p_mass) < 0:
            raise ValueError("p_mass must be a probability vector")
        if min(self.r_mass) < 0:
            raise ValueError("r_mass must be nonnegative")
        if not 0.0 < self.target < 1.0:
            raise ValueError("target must lie in (0, 1)")

    def mass(self, labels) -> tuple[float, float]:
        """(P, R) mass of a set of labels."""
        idx = [i for i, o in enumerate(self.outcomes) if o in labels]
        return (
            math.fsum(self.p_mass[i] for i in idx),
            math.fsum(self.r_mass[i] for i in idx),
        )


@dataclass(frozen=True)
class RegionResult:
    """A prediction region: disjoint sorted intervals in 1-D, an area in 2-D.

    ``err_bound`` is the discretization uncertainty of ``total_measure``
    (zero for 1-D regions, whose endpoints are refined by bisection).
    """

    intervals: tuple[tuple[float, float], ...]
    total_measure: float
    n_evals: int
    err_bound: float = 0.0
    n_cells: int = 0
    n_components: int = 0
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def contiguous(self) -> bool:
        if self.intervals:
            return len(self.intervals) == 1
        return self.n_components == 1

    @property
    def empty(self) -> bool:
        return self.total_measure == 0.0

    def contains(self, y: float) -> bool:
        return any(lo < y < hi for lo, hi in self.intervals)


def np_optimal_set(problem: FiniteTestProblem) -> list:
    """Neyman-Pearson acceptance set ``{p > k r}`` on a finite outcome space.

    Outcomes enter in decreasing order of ``p/r`` (``r == 0`` with ``p > 0``
    first) until the accumulated P-mass reaches ``problem.target``; ties are
    broken by input order. The result has the smallest R-mass among all
    subsets whose P-mass is at least its own.
    """
    p = np.asarray(problem.p_mass)
    r = np.asarray(problem.r_mass)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(r > 0, p / np.where(r > 0, r, 1.0), np.where(p > 0, np.inf, 0.0))
    order = np.argsort(-ratio, kind="stable")
    chosen = []
    cum = 0.0
    for i in order:
        chosen.append(problem.outcomes[i])
        cum += p[i]
        if cum >= problem.target - 1e-12:
            break
    return chosen


def _as_vectorized(member, vectorized):
    if vectorized:
        return lambda ys: np.asarray(member(ys), dtype=bool)
    return lambda ys: np.fromiter((bool(member(float(y))) for y in ys.ravel()), bool, ys.size).reshape(
        ys.shape
    )


def invert_membership(
    member: Callable,
    center: float,
    half_width_hint: float,
    resolution: int = DEFAULT_RESOLUTION,
    vectorized: bool = True,
) -> RegionResult:
    """Compute ``{y : member(y)}`` as a union of disjoint open intervals.

    ``member`` is evaluated on ``resolution`` grid points spanning
    ``center +- 10 * half_width_hint``; the window doubles (at most six times)
    while either edge is accepted. Each accept/reject transition is refined
    by bisection to a bracket narrower than ``1e-9 * half_width_hint``.
    Acceptance slivers thinner than the grid spacing can be missed.

    With ``vectorized=True`` the predicate receives a float array and must
    return a boolean array of the same shape.
    """
    test = _as_vectorized(member, vectorized)
    return invert_membership_batch(lambda _, ys: test(ys), [center], [half_width_hint], resolution)[0]


def invert_membership_batch(
    member: Callable[[np.ndarray, np.ndarray], np.ndarray],
    centers: Sequence[float],
    hints: Sequence[float],
    resolution: int = DEFAULT_RESOLUTION,
) -> list[RegionResult]:
    """Row-wise :func:`invert_membership` for many predicates at once.

    ``member(rows, ys)`` receives an integer array of row indices and a float
    array of candidate values of the same shape, and returns whether each
    ``ys`` belongs to the region of its row.
    """
    centers = np.asarray(centers, dtype=float).ravel()
    hints = np.asarray(hints, dtype=float).ravel()
    if not np.all(hints > 0):
        raise ValueError("half_width_hint must be positive")
    if resolution < 3:
        raise ValueError("resolution must be at least 3")
    n_rows = centers.size
    half = 10.0 * hints
    steps = np.linspace(-1.0, 1.0, resolution)
    grid = np.empty((n_rows, resolution))
    acc = np.empty((n_rows, resolution), dtype=bool)
    n_evals = np.zeros(n_rows, dtype=np.int64)
    pending = np.arange(n_rows)
    for _ in range(MAX_DOUBLINGS + 1):
        grid[pending] = centers[pending, None] + half[pending, None] * steps
        rows = np.broadcast_to(pending[:, None], (pending.size, resolution))
        acc[pending] = np.asarray(member(rows, grid[pending]), dtype=bool)
        n_evals[pending] += resolution
        edge = acc[pending, 0] | acc[pending, -1]
        pending = pending[edge]
        if pending.size == 0:
            break
        half[pending] *= 2.0
    else:
        i = int(pending[0])
        raise UnboundedRegionError(
            f"accepted points at the edge of the window center={centers[i]:g} +- {half[i] / 2:g}"
        )

    row_idx, col = np.nonzero(acc[:, 1:] != acc[:, :-1])
    lo = grid[row_idx, col].copy()
    hi = grid[row_idx, col + 1].copy()
    entering = ~acc[row_idx, col]  # rejected -> accepted when moving right
    tol = 1e-9 * hints[row_idx]
    active = hi - lo > tol
    while np.any(active):
        sel = np.flatnonzero(active)
        mid = 0.5 * (lo[sel] + hi[sel])
        m = np.asarray(member(row_idx[sel], mid), dtype=bool)
        np.add.at(n_evals, row_idx[sel], 1)
        # keep each bracket straddling its transition
        go_right = m != entering[sel]
        lo[sel] = np.where(go_right, mid, lo[sel])
        hi[sel] = np.where(go_right, hi[sel], mid)
        active = hi - lo > tol
    edges = 0.5 * (lo + hi)

    results = []
    bounds = np.searchsorted(row_idx, np.arange(n_rows + 1))
    for i in range(n_rows):
        e = edges[bounds[i] : bounds[i + 1]]
        ent = entering[bounds[i] : bounds[i + 1]]
        intervals = tuple((float(a), float(b)) for a, b in zip(e[ent], e[~ent]))
        measure = math.fsum(b - a for a, b in intervals)
        results.append(RegionResult(intervals, measure, int(n_evals[i])))
    return results


def two_sided_mass(q, delta, df=None):
    """``F(q - delta) - F(-q - delta)`` for the standard normal (``df=None``)
    or Student-t CDF ``F``."""
    if df is None:
        return special.ndtr(q - delta) - special.ndtr(-q - delta)
    return special.stdtr(df, q - delta) - special.stdtr(df, -q - delta)


def solve_critical_q(delta, alpha: float, df: float | None = None):
    """Solve ``F(q - delta) - F(-q - delta) = 1 - alpha`` for ``q >= 0``.

    ``F`` is the standard normal CDF, or Student-t with ``df`` degrees of
    freedom when ``df`` is given. Vectorised over ``delta``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    delta = np.abs(np.asarray(delta, dtype=float))
    if df is None:
        reach = norm_quantile(1.0 - alpha / 4.0) + 10.0
    else:
        reach = float(special.stdtrit(df, 1.0 - alpha / 4.0)) + 10.0
    hi = delta + reach
    q = _bisect(lambda s: two_sided_mass(s, delta, df), np.zeros_like(hi), hi, 1.0 - alpha, ftol=1e-13)
    return float(q) if q.ndim == 0 else q
