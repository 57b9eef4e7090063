"""Normal, Student-t and noncentral chi-square distribution functions.

Elementary kernels (``ndtr``, ``gammainc``, ``stdtr``) come from
:mod:`scipy.special`. The noncentral chi-square CDF is a Poisson mixture of
central chi-square CDFs summed around the modal Poisson index, and every
quantile except the normal one is found by bracketed bisection.

All functions broadcast over numpy arrays and return Python floats for
scalar input.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "NoncentralChiSq",
    "norm_cdf",
    "norm_quantile",
    "chisq_cdf",
    "ncchisq_cdf",
    "ncchisq_quantile",
    "t_cdf",
    "t_quantile",
    "shifted_t_sq_quantile",
    "simulate_t_draws",
]

# omitted Poisson mass allowed in the noncentral series
POISSON_TAIL = 1e-14
MIN_MC_REPS = 10_000


class DomainError(ValueError):
    """Argument outside the domain of a distribution function."""


def _out(value):
    value = np.asarray(value)
    return float(value) if value.ndim == 0 else value


def _check_prob(u, name="u"):
    u = np.asarray(u, dtype=float)
    if not np.all((u > 0.0) & (u < 1.0)):
        raise DomainError(f"{name} must lie strictly inside (0, 1)")
    return u


def _check_df(df):
    df_arr = np.asarray(df, dtype=float)
    if not np.all(df_arr >= 1):
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")
    return df_arr


@dataclass(frozen=True)
class NoncentralChiSq:
    """Chi-square law with ``df`` degrees of freedom and noncentrality ``nc``."""

    df: int
    nc: float = 0.0

    def __post_init__(self):
        if int(self.df) != self.df or self.df < 1:
            raise DomainError(f"df must be a positive integer, got {self.df}")
        if not (self.nc >= 0.0 and np.isfinite(self.nc)):
            raise DomainError(f"nc must be finite and >= 0, got {self.nc}")

    def cdf(self, x):
        return ncchisq_cdf(x, self.df, self.nc)

    def quantile(self, u):
        return ncchisq_quantile(u, self.df, self.nc)


def norm_cdf(x):
    """Standard normal CDF."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("norm_cdf requires finite input")
    return _out(special.ndtr(x))


def norm_quantile(u):
    """Inverse of :func:`norm_cdf` on (0, 1)."""
    return _out(special.ndtri(_check_prob(u)))


def chisq_cdf(x, df):
    """Central chi-square CDF, via the regularized lower incomplete gamma."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("chi-square CDF requires x >= 0")
    return _out(special.gammainc(np.asarray(df, dtype=float) / 2.0, x / 2.0))


def _poisson_halfwidth(mean: float) -> int:
    # Window of Poisson indices around the mode holding all but POISSON_TAIL of
    # the mass; widened until the discarded mass is verifiably below the bound.
    # P(J < lo) = Q(lo, m) and P(J > hi) = P(hi + 1, m) for J ~ Poisson(m).
    k = int(np.ceil(8.0 * np.sqrt(mean))) + 16
    mode = int(np.floor(mean))
    while True:
        lo, hi = mode - k, mode + k
        left = special.gammaincc(lo, mean) if lo > 0 else 0.0
        if left + special.gammainc(hi + 1, mean) < POISSON_TAIL:
            return k
        k += k // 2


def _prepend(column, block):
    return np.concatenate([column[:, None], block], axis=1)


def _ncchisq_cdf_flat(x, df, nc, chunk=8192):
    # rows sorted by noncentrality so each chunk's Poisson window fits its rows
    order = np.argsort(nc, kind="stable")
    x, df, half_nc = x[order], df[order], nc[order] / 2.0
    out = np.empty_like(x)
    for start in range(0, x.size, chunk):
        sl = slice(start, start + chunk)
        xs, ms, dfs = x[sl], half_nc[sl], df[sl]
        central = ms == 0.0
        res = np.empty_like(xs)
        res[central] = special.gammainc(dfs[central] / 2.0, xs[central] / 2.0)
        nz = ~central
        if np.any(nz):
            xs, ms, dfs = xs[nz], ms[nz], dfs[nz]
            k = _poisson_halfwidth(float(ms.max()))
            j_lo = np.maximum(np.floor(ms) - k, 0.0)
            steps = np.arange(1, 2 * k + 1)[None, :]
            logw0 = special.xlogy(j_lo, ms) - ms - special.gammaln(j_lo + 1)
            w_steps = np.log(ms)[:, None] - np.log(j_lo[:, None] + steps)
            w = np.exp(_prepend(logw0, logw0[:, None] + np.cumsum(w_steps, axis=1)))
            # P(a + 1, h) = P(a, h) - h^a e^-h / Gamma(a + 1), starting from the
            # lowest shape in the window: one gammainc call per point.
            a0 = dfs / 2.0 + j_lo
            h = xs / 2.0
            p0 = special.gammainc(a0, h)
            with np.errstate(divide="ignore"):
                log_h = np.log(h)
            logt0 = special.xlogy(a0, h) - h - special.gammaln(a0 + 1.0)
            t_steps = log_h[:, None] - np.log(a0[:, None] + steps[:, :-1])
            log_terms = _prepend(logt0, logt0[:, None] + np.cumsum(t_steps, axis=1))
            drops = _prepend(np.zeros(xs.size), np.cumsum(np.exp(log_terms), axis=1))
            cdfs = np.clip(p0[:, None] - drops, 0.0, 1.0)
            res[nz] = np.clip((w * cdfs).sum(axis=1), 0.0, 1.0)
        out[sl] = res
    result = np.empty_like(out)
    result[order] = out
    return result


def ncchisq_cdf(x, df, nc=0.0):
    """Noncentral chi-square CDF.

    Sums ``Pois(j; nc/2) * P(chi2_{df+2j} <= x)`` over a window of ``j`` centred
    at the Poisson mode. The window is wide enough that the omitted Poisson
    mass, which bounds the truncation error, is below ``1e-14``.
    """
    x, df, nc = np.broadcast_arrays(
        np.asarray(x, dtype=float), _check_df(df), np.asarray(nc, dtype=float)
    )
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("ncchisq_cdf requires finite x >= 0")
    if np.any(nc < 0) or not np.all(np.isfinite(nc)):
        raise DomainError("noncentrality must be finite and >= 0")
    flat = _ncchisq_cdf_flat(x.ravel().copy(), df.ravel(), nc.ravel())
    return _out(flat.reshape(x.shape))


def _bisect(fun, lo, hi, target, ftol=1e-12, xtol=0.0, max_iter=200):
    """Vectorised bisection for an increasing ``fun`` with fun(lo) <= target <= fun(hi)."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    target = np.broadcast_to(target, lo.shape)
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = fun(mid)
        below = f < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        done = (np.abs(f - target) < ftol) | (hi - lo <= np.maximum(xtol, 4e-16 * np.abs(mid)))
        if np.all(done):
            break
    return mid


def ncchisq_quantile(u, df, nc=0.0):
    """Quantile of the noncentral chi-square law by bisection on its CDF."""
    u = _check_prob(u)
    u, df, nc = np.broadcast_arrays(u, _check_df(df), np.asarray(nc, dtype=float))
    if np.any(nc < 0):
        raise DomainError("noncentrality must be >= 0")
    shape = u.shape
    u, df, nc = u.ravel(), df.ravel(), nc.ravel()
    hi = nc + df + 40.0 * np.sqrt(nc + df)
    # extreme upper quantiles can sit beyond the default bracket
    for _ in range(60):
        short = ncchisq_cdf(hi, df, nc) < u
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    q = _bisect(lambda s: ncchisq_cdf(s, df, nc), np.zeros_like(hi), hi, u, ftol=1e-12)
    return _out(q.reshape(shape))


def t_cdf(x, df):
    """Student-t CDF with ``df`` degrees of freedom."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("t_cdf requires finite input")
    return _out(special.stdtr(_check_df(df), x))


def t_quantile(u, df):
    return _out(special.stdtrit(_check_df(df), _check_prob(u)))


@lru_cache(maxsize=32)
def simulate_t_draws(dim: int, df: int, reps: int, seed: int) -> np.ndarray:
    """Draws of ``L^{-1} G`` where ``L`` is the lower Cholesky factor of a
    ``Wishart(df, I)/df`` matrix and ``G ~ N(0, I)``.

    This is the law of the standardized prediction error when the scale
    matrix is estimated with ``df`` degrees of freedom; it does not depend
    on the true covariance. Returned array has shape ``(reps, dim)`` and is
    read-only because it is cached.
    """
    if df < dim:
        raise DomainError(f"need df >= dim for an invertible scale estimate ({df} < {dim})")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((reps, dim))
    # Bartlett decomposition: the lower Cholesky factor of Wishart(df, I) has
    # sqrt(chi2_{df - i}) on the diagonal and N(0, 1) entries below it.
    chol = np.zeros((reps, dim, dim))
    rows, cols = np.tril_indices(dim, -1)
    chol[:, rows, cols] = rng.standard_normal((reps, rows.size))
    diag = np.arange(dim)
    chol[:, diag, diag] = np.sqrt(rng.chisquare(df - diag, size=(reps, dim)))
    t = np.sqrt(df) * np.linalg.solve(chol, g[..., None])[..., 0]
    t.setflags(write=False)
    return t


def shifted_t_sq_quantile(b, u, df, reps=MIN_MC_REPS, seed=0):
    """Quantile ``u`` of ``||T + b||^2`` for the standardized t-type vector ``T``.

    For a one-dimensional shift ``T`` is Student-t with ``df`` degrees of
    freedom and the quantile solves
    ``F(sqrt(q) - b) - F(-sqrt(q) - b) = u`` by bisection. In higher
    dimensions it is the empirical quantile over ``reps`` seeded draws from
    :func:`simulate_t_draws`. A scalar ``b`` or a 1-D array of length one is
    treated as the one-dimensional case; a 2-D array of shape ``(m, 1)``
    returns ``m`` quantiles.
    """
    u = float(_check_prob(u))
    if int(reps) < MIN_MC_REPS:
        raise ValueError(f"reps must be >= {MIN_MC_REPS}, got {reps}")
    _check_df(df)
    b = np.asarray(b, dtype=float)
    dim = 1 if b.ndim == 0 else b.shape[-1]
    if dim == 1:
        shift = np.abs(b.reshape(b.shape[:-1] if b.ndim else ()))
        upper = shift + float(t_quantile(1.0 - (1.0 - u) / 2.0, df)) + 1.0

        def mass(s):
            return special.stdtr(df, s - shift) - special.stdtr(df, -s - shift)

        root = _bisect(mass, np.zeros_like(upper), upper, u, ftol=1e-13)
        return _out(root**2)
    t = simulate_t_draws(dim, int(df), int(reps), int(seed))
    if b.ndim == 1:
        return float(np.quantile(((t + b) ** 2).sum(axis=1), u))
    return np.array([np.quantile(((t + bi) ** 2).sum(axis=1), u) for bi in b])
