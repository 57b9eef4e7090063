"""FAB prediction intervals for a normal linear regression.

Predict ``Y ~ N(v'beta, sigma^2)`` from ``X ~ N_n(U beta, sigma^2 I)`` under the
prior ``beta ~ N_p(0, sigma^2 Psi^{-1})``. With ``S_psi = (U'U + Psi)^{-1}``,
``w_psi = 1 + v'S_psi v`` (``S_0``, ``w_0`` for ``Psi = 0``) and
``z = U'x + v y``, a value ``y`` is accepted when

    | (y - beta_ols'v)/(sigma sqrt(w_0)) + delta_z | <= q_z,
    delta_z = v'(S_0/w_0 - S_psi/w_psi) z sqrt(w_0)/sigma,

and ``q_z`` solves ``Phi(q - delta_z) - Phi(-q - delta_z) = 1 - alpha``. The
t-version replaces ``sigma`` by an estimate ``sigma_hat`` (``nu`` df) in the
first term and by an independent estimate ``sigma_tilde`` in ``delta``, with
Student-t critical values.

Membership is decided as ``F(|t| - delta) - F(-|t| - delta) <= 1 - alpha``,
equivalent to ``|t| <= q_z`` because the two-sided mass is increasing in ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .core import FabError, RegionResult, invert_membership_batch, solve_critical_q, two_sided_mass
from .specfun import norm_quantile, t_quantile

__all__ = [
    "RegressionFabConfig",
    "VarianceSplit",
    "ResidualBasis",
    "delta_reg",
    "statistic_forms",
    "fab_member_reg",
    "fab_member_reg_ridge",
    "fab_member_reg_t",
    "fab_interval_reg",
    "fab_interval_reg_t",
    "bayes_interval_reg",
    "equivariant_interval_reg",
    "split_variance_estimates",
    "default_split_df",
    "correlated_design",
]


@dataclass(frozen=True)
class RegressionFabConfig:
    """Design ``U`` (n x p), target covariates ``v``, prior precision ``Psi``.

    ``sigma2=None`` marks an estimated variance; the known-sigma operations
    then refuse to run. Cached: ``S0``, ``S_psi``, ``w0``, ``w_psi`` and the
    projections ``h0 = U S0 v`` and ``h_psi = U S_psi v`` that turn
    ``beta_ols'v`` and ``beta_psi'v`` into dot products with ``x``.
    """

    U: np.ndarray
    v: np.ndarray
    Psi: np.ndarray
    sigma2: float | None = 1.0
    alpha: float = 0.1
    S0: np.ndarray = field(init=False, repr=False, compare=False)
    S_psi: np.ndarray = field(init=False, repr=False, compare=False)
    w0: float = field(init=False, compare=False)
    w_psi: float = field(init=False, compare=False)
    h0: np.ndarray = field(init=False, repr=False, compare=False)
    h_psi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        n, p = U.shape
        v = np.asarray(self.v, dtype=float).reshape(p)
        Psi = np.asarray(self.Psi, dtype=float)
        if Psi.ndim == 0:
            Psi = Psi * np.eye(p)
        if Psi.shape != (p, p) or not np.allclose(Psi, Psi.T):
            raise FabError("Psi must be a symmetric p x p matrix")
        if np.linalg.eigvalsh(Psi).min() < -1e-12 * max(1.0, np.abs(Psi).max()):
            raise FabError("Psi must be positive semidefinite")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        gram = U.T @ U
        if np.linalg.matrix_rank(gram) < p:
            raise FabError("U must have full column rank")
        S0 = np.linalg.inv(gram)
        S_psi = np.linalg.inv(gram + Psi)
        values = {
            "U": U,
            "v": v,
            "Psi": Psi,
            "S0": S0,
            "S_psi": S_psi,
            "w0": float(1.0 + v @ S0 @ v),
            "w_psi": float(1.0 + v @ S_psi @ v),
            "h0": U @ (S0 @ v),
            "h_psi": U @ (S_psi @ v),
        }
        for name, val in values.items():
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_tau2(cls, U, v, tau2: float, sigma2: float | None = 1.0, alpha: float = 0.1):
        """Prior ``beta ~ N(0, tau2 I)``, i.e. ``Psi = I sigma^2/tau2`` (``sigma^2 = 1``
        when estimated); ``tau2 = inf`` gives ``Psi = 0``."""
        p = np.atleast_2d(U).shape[1]
        scale = 0.0 if math.isinf(tau2) else (1.0 if sigma2 is None else sigma2) / tau2
        return cls(U, v, scale * np.eye(p), sigma2=sigma2, alpha=alpha)

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def p(self) -> int:
        return self.U.shape[1]

    @property
    def sigma(self) -> float:
        if self.sigma2 is None:
            raise FabError("sigma2 is marked as estimated; use the t-version")
        return math.sqrt(self.sigma2)

    def with_v(self, v) -> RegressionFabConfig:
        return RegressionFabConfig(self.U, v, self.Psi, sigma2=self.sigma2, alpha=self.alpha)

    def ols_prediction(self, x):
        """``beta_ols'v`` for each row of ``x``."""
        return np.asarray(x, dtype=float) @ self.h0

    def ridge_prediction(self, x):
        """Posterior mean prediction ``beta_psi'v``."""
        return np.asarray(x, dtype=float) @ self.h_psi

    def _delta_unscaled(self, x, y):
        # v'(S0/w0 - S_psi/w_psi) z sqrt(w0), with v'S z = x'U S v + (w - 1) y
        y = np.asarray(y, dtype=float)
        a0 = (self.ols_prediction(x) + (self.w0 - 1.0) * y) / self.w0
        a_psi = (self.ridge_prediction(x) + (self.w_psi - 1.0) * y) / self.w_psi
        return (a0 - a_psi) * math.sqrt(self.w0)


def delta_reg(z, cfg: RegressionFabConfig, sigma: float | None = None):
    """``v'(S0/w0 - S_psi/w_psi) z sqrt(w0)/sigma`` for sufficient statistics ``z``."""
    sigma = cfg.sigma if sigma is None else sigma
    coef = cfg.v @ (cfg.S0 / cfg.w0 - cfg.S_psi / cfg.w_psi)
    out = np.asarray(z, dtype=float) @ coef * math.sqrt(cfg.w0) / sigma
    return float(out) if np.ndim(out) == 0 else out


def statistic_forms(x, y, cfg: RegressionFabConfig) -> tuple[float, float, float]:
    """The FAB statistic computed three algebraically equivalent ways.

    1. ``sqrt(w0)/sigma |y - v'S_psi z/w_psi|`` from the sufficient statistic;
    2. ``|(y - beta_ols'v)/(sigma sqrt(w0)) + delta_z|`` from least squares;
    3. ``|y - beta_psi'v| sqrt(w0)/(sigma w_psi)`` from the ridge estimate.
    """
    x = np.asarray(x, dtype=float)
    y = float(y)
    U, v, sigma = cfg.U, cfg.v, cfg.sigma
    z = U.T @ x + v * y
    form_z = math.sqrt(cfg.w0) / sigma * abs(y - v @ cfg.S_psi @ z / cfg.w_psi)
    beta_ols = np.linalg.solve(U.T @ U, U.T @ x)
    form_ols = abs((y - beta_ols @ v) / (sigma * math.sqrt(cfg.w0)) + delta_reg(z, cfg))
    beta_psi = np.linalg.solve(U.T @ U + cfg.Psi, U.T @ x)
    form_ridge = abs(y - beta_psi @ v) * math.sqrt(cfg.w0) / (sigma * cfg.w_psi)
    return form_z, form_ols, form_ridge


def _squeeze(out):
    out = np.asarray(out)
    return bool(out) if out.ndim == 0 else out


def fab_member_reg(x, y, cfg: RegressionFabConfig, method: str = "mass"):
    """Known-sigma FAB membership; ``x`` has shape ``(..., n)``, ``y`` shape ``(...)``.

    ``method="critical"`` solves for ``q_z`` explicitly and compares.
    """
    sigma = cfg.sigma
    delta = cfg._delta_unscaled(x, y) / sigma
    t = (np.asarray(y, dtype=float) - cfg.ols_prediction(x)) / (sigma * math.sqrt(cfg.w0)) + delta
    if method == "mass":
        return _squeeze(two_sided_mass(np.abs(t), delta) <= 1.0 - cfg.alpha)
    if method == "critical":
        return _squeeze(np.abs(t) <= solve_critical_q(delta, cfg.alpha))
    raise ValueError(f"unknown method {method!r}")


def fab_member_reg_ridge(x, y, cfg: RegressionFabConfig):
    """Membership through the ridge-centred form
    ``beta_psi'v - q sigma w_psi/sqrt(w0) < y < beta_psi'v + q sigma w_psi/sqrt(w0)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = x @ cfg.U + np.multiply.outer(y, cfg.v)
    q = solve_critical_q(delta_reg(z, cfg), cfg.alpha)
    centre = np.linalg.solve(cfg.U.T @ cfg.U + cfg.Psi, cfg.U.T @ x.T).T @ cfg.v
    half = q * cfg.sigma * cfg.w_psi / math.sqrt(cfg.w0)
    return _squeeze((centre - half < y) & (y < centre + half))


def fab_member_reg_t(x, y, cfg: RegressionFabConfig, sigma_hat2, nu, sigma_tilde2):
    """t-version membership with ``nu sigma_hat2/sigma^2 ~ chi2_nu`` and an
    independent ``sigma_tilde2`` for the shift. Estimates broadcast with ``y``."""
    s_hat = np.sqrt(np.asarray(sigma_hat2, dtype=float))
    delta = cfg._delta_unscaled(x, y) / np.sqrt(np.asarray(sigma_tilde2, dtype=float))
    t = (np.asarray(y, dtype=float) - cfg.ols_prediction(x)) / (s_hat * math.sqrt(cfg.w0)) + delta
    return _squeeze(two_sided_mass(np.abs(t), delta, df=nu) <= 1.0 - cfg.alpha)


def _rows(x, n):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, n), x.ndim == 1


def _invert(x, cfg, member, scale, resolution):
    xs, single = _rows(x, cfg.n)
    centres = cfg.ols_prediction(xs)
    hints = np.broadcast_to(np.asarray(scale, dtype=float) * math.sqrt(cfg.w0), centres.shape)
    out = invert_membership_batch(lambda r, ys: member(xs[r], ys, r), centres, hints, resolution)
    return out[0] if single else out


def fab_interval_reg(x, cfg: RegressionFabConfig, resolution: int = 2048):
    """Known-sigma FAB interval; a list of results when ``x`` has several rows."""
    return _invert(x, cfg, lambda xr, ys, r: fab_member_reg(xr, ys, cfg), cfg.sigma, resolution)


def fab_interval_reg_t(x, cfg, sigma_hat2, nu, sigma_tilde2, resolution: int = 2048):
    """t-version FAB interval. Estimates are scalars or one value per row of ``x``."""
    xs, _ = _rows(x, cfg.n)
    s_hat2 = np.broadcast_to(np.asarray(sigma_hat2, dtype=float), xs.shape[:1])
    s_tilde2 = np.broadcast_to(np.asarray(sigma_tilde2, dtype=float), xs.shape[:1])

    def member(xr, ys, r):
        return fab_member_reg_t(xr, ys, cfg, s_hat2[r], nu, s_tilde2[r])

    return _invert(x, cfg, member, np.sqrt(s_hat2), resolution)


def bayes_interval_reg(x, cfg: RegressionFabConfig):
    """Posterior predictive interval ``beta_psi'v +- Phi^{-1}(1 - alpha/2) sigma sqrt(w_psi)``."""
    centre = cfg.ridge_prediction(x)
    half = norm_quantile(1.0 - cfg.alpha / 2.0) * cfg.sigma * math.sqrt(cfg.w_psi)
    return centre - half, centre + half


def equivariant_interval_reg(x, cfg: RegressionFabConfig, sigma_hat2=None, nu=None):
    """Pivotal interval ``beta_ols'v +- c s sqrt(w0)``: ``c`` is a normal quantile
    with known sigma, a ``t_nu`` quantile when ``sigma_hat2`` is given."""
    centre = cfg.ols_prediction(x)
    if sigma_hat2 is None:
        half = norm_quantile(1.0 - cfg.alpha / 2.0) * cfg.sigma * math.sqrt(cfg.w0)
    else:
        half = t_quantile(1.0 - cfg.alpha / 2.0, nu) * np.sqrt(sigma_hat2) * math.sqrt(cfg.w0)
    return centre - half, centre + half


class VarianceSplit(NamedTuple):
    sigma_hat2: np.ndarray | float
    nu: int
    sigma_tilde2: np.ndarray | float
    tilde_df: int


class ResidualBasis:
    """Orthonormal basis of the orthogonal complement of ``col(U)``."""

    def __init__(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        n, p = U.shape
        q, _ = linalg.qr(U, mode="full")
        self.basis = q[:, p:]
        self.df = n - p

    def coordinates(self, x):
        return np.asarray(x, dtype=float) @ self.basis


def default_split_df(n: int, p: int) -> int:
    return min(4, (n - p) // 2)


def split_variance_estimates(x, U, split_df: int | None = None, basis: ResidualBasis | None = None):
    """Two independent variance estimates from the regression residuals of ``x`` on ``U``.

    The residual vector is expressed in an orthonormal basis of the
    complement of ``col(U)``; the first ``split_df`` squared coordinates
    average to ``sigma_tilde2`` and the remaining ``nu = n - p - split_df`` to
    ``sigma_hat2``. Each is ``sigma^2 chi2_df/df``, independent of each other
    and of ``U'x``. Rows of a 2-D ``x`` are treated as separate datasets.
    """
    basis = ResidualBasis(U) if basis is None else basis
    resid_df = basis.df
    if resid_df < 2:
        raise FabError(f"need n - p >= 2 residual degrees of freedom, have {resid_df}")
    split_df = default_split_df(basis.basis.shape[0], basis.basis.shape[0] - resid_df) if split_df is None else split_df
    if not 1 <= split_df <= resid_df - 1:
        raise FabError(f"split_df must lie in [1, {resid_df - 1}], got {split_df}")
    coords = basis.coordinates(x)
    sq = coords**2
    tilde = sq[..., :split_df].sum(axis=-1) / split_df
    nu = resid_df - split_df
    hat = sq[..., split_df:].sum(axis=-1) / nu
    if np.ndim(hat) == 0:
        hat, tilde = float(hat), float(tilde)
    return VarianceSplit(hat, nu, tilde, split_df)


def correlated_design(n: int = 100, p: int = 75, rho: float = 0.9, seed: int = 2) -> np.ndarray:
    """Design matrix with exchangeably correlated columns, each centred and
    scaled to unit variance. Columns share one latent factor with loading
    ``sqrt(rho)``, so population pairwise correlation is ``rho``."""
    rng = np.random.default_rng(seed)
    factor = rng.standard_normal((n, 1))
    U = math.sqrt(rho) * factor + math.sqrt(1.0 - rho) * rng.standard_normal((n, p))
    U = U - U.mean(axis=0)
    return U / U.std(axis=0)
