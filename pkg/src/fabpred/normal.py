"""FAB prediction regions for a multivariate normal mean.

Model: ``X ~ N_p(theta, k Sigma)`` and ``Y ~ N_p(theta, Sigma)`` independent,
prior ``theta ~ N_p(mu, lam Sigma)``. With ``z = (x + k y)/(1 + k)`` a value
``y`` is accepted when

    || Sigma^{-1/2} (x - y)/sqrt(k + 1) + delta_z ||^2 < chi2_{p, ||delta_z||^2, 1 - alpha}

where ``delta_z = Sigma^{-1/2} (mu - z) sqrt(v) / (v_lambda_x - v)``,
``v = k^2/(k + 1)`` and ``v_lambda_x = k + lam``. Setting ``lam = inf`` gives
``delta = 0`` and the pivotal (equivariant) region.

Because the noncentral chi-square CDF is continuous and increasing, the
acceptance test is evaluated as ``F(statistic; p, ||delta||^2) < 1 - alpha``,
which accepts exactly the same points as comparing with the quantile and
needs no root finding per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from .core import FabError, RegionResult, UnboundedRegionError, invert_membership
from .specfun import (
    DomainError,
    ncchisq_cdf,
    ncchisq_quantile,
    norm_quantile,
    shifted_t_sq_quantile,
)

__all__ = [
    "NormalFabConfig",
    "sufficient_point",
    "delta_z",
    "fab_statistic",
    "fab_member",
    "fab_member_posterior_form",
    "equivariant_member",
    "bayes_member",
    "pivotal_interval",
    "fab_interval_1d",
    "fab_region_2d",
    "inverse_root",
    "fab_member_estvar",
]


def _as_matrix(sigma, p):
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        return s * np.eye(p)
    if p == 1 and s.shape[-2:] != (1, 1):
        return s[..., None, None]
    if s.shape[-2:] != (p, p):
        raise ValueError(f"Sigma must be a scalar or a {p}x{p} matrix")
    return s


def inverse_root(sigma: np.ndarray) -> np.ndarray:
    """Inverse of the lower Cholesky factor of an SPD matrix (a Sigma^{-1/2})."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.allclose(sigma, np.swapaxes(sigma, -1, -2)):
        raise FabError("covariance matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise FabError("covariance matrix is not positive definite") from exc
    return np.linalg.inv(chol)


@dataclass(frozen=True)
class NormalFabConfig:
    """Parameters of the normal model and its conjugate prior.

    ``sigma`` is a positive scalar (meaning ``sigma * I``) or an SPD matrix.
    ``lam = math.inf`` requests the pivotal region. ``sigma_root`` optionally
    replaces the lower Cholesky factor by any ``B`` with ``B B^T = Sigma``.
    """

    p: int = 1
    k: float = 1.0
    sigma: float | np.ndarray = 1.0
    mu: float | np.ndarray = 0.0
    lam: float = 1.0
    alpha: float = 0.1
    sigma_root: np.ndarray | None = None
    Sigma: np.ndarray = field(init=False, repr=False, compare=False)
    root_inv: np.ndarray = field(init=False, repr=False, compare=False)
    mu_vec: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("p must be a positive integer")
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive (math.inf for the pivotal region)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        sig = _as_matrix(self.sigma, self.p)
        if sig.shape != (self.p, self.p):
            raise ValueError(f"Sigma must be a scalar or a {self.p}x{self.p} matrix")
        if self.sigma_root is None:
            root_inv = inverse_root(sig)
        else:
            root = np.asarray(self.sigma_root, dtype=float)
            if not np.allclose(root @ root.T, sig, rtol=1e-10, atol=1e-12):
                raise FabError("sigma_root does not factor Sigma")
            root_inv = np.linalg.inv(root)
            inverse_root(sig)  # validates positive definiteness
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (self.p,)).copy()
        for name, val in (("Sigma", sig), ("root_inv", root_inv), ("mu_vec", mu)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def infinite_lambda(self) -> bool:
        return math.isinf(self.lam)

    @property
    def v(self) -> float:
        """Conditional variance factor of X given Z: ``k^2/(k + 1)``."""
        return self.k**2 / (self.k + 1.0)

    @property
    def v_lambda_x(self) -> float:
        """Prior predictive variance factor of X: ``k + lam``."""
        return self.k + self.lam

    @property
    def v_lambda_y(self) -> float:
        """Posterior predictive variance factor of Y: ``(lam (k+1) + k)/(k + lam)``."""
        if self.infinite_lambda:
            return self.k + 1.0
        return (self.lam * (self.k + 1.0) + self.k) / (self.k + self.lam)

    @property
    def sigma_max(self) -> float:
        return float(np.sqrt(np.linalg.eigvalsh(self.Sigma).max()))

    def posterior_mean(self, x):
        """Posterior mean of theta given X = x."""
        x = np.asarray(x, dtype=float)
        if self.infinite_lambda:
            return x
        return (x / self.k + self.mu_vec / self.lam) / (1.0 / self.k + 1.0 / self.lam)


def _vec(a, p):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a[None]
    if a.shape[-1] != p:
        raise ValueError(f"expected trailing dimension {p}, got shape {a.shape}")
    return a


def _whiten(a, root_inv):
    # root_inv may carry leading batch axes that broadcast with those of a
    return np.einsum("...ij,...j->...i", root_inv, a)


def sufficient_point(x, y, k):
    """``z = (x + k y)/(1 + k)``."""
    return (np.asarray(x, dtype=float) + k * np.asarray(y, dtype=float)) / (1.0 + k)


def delta_z(z, cfg: NormalFabConfig, root_inv=None):
    """Shift vector ``Sigma^{-1/2} (mu - z) sqrt(v)/(v_lambda_x - v)``; zero when lam is infinite."""
    z = _vec(z, cfg.p)
    if cfg.infinite_lambda:
        return np.zeros_like(z)
    r = cfg.root_inv if root_inv is None else root_inv
    return _whiten(cfg.mu_vec - z, r) * math.sqrt(cfg.v) / (cfg.v_lambda_x - cfg.v)


def fab_statistic(x, y, cfg: NormalFabConfig):
    """Return ``(statistic, noncentrality)`` arrays for points (x, y)."""
    x, y = _vec(x, cfg.p), _vec(y, cfg.p)
    d = delta_z(sufficient_point(x, y, cfg.k), cfg)
    stat = (_whiten(x - y, cfg.root_inv) / math.sqrt(cfg.k + 1.0) + d) ** 2
    return stat.sum(axis=-1), (d**2).sum(axis=-1)


def _squeeze(out):
    out = np.asarray(out)
    return bool(out) if out.ndim == 0 else out


def fab_member(x, y, cfg: NormalFabConfig, method: str = "cdf"):
    """Whether ``y`` lies in the FAB region at ``x``; broadcasts over leading axes.

    ``method="quantile"`` compares the statistic with the explicitly computed
    noncentral quantile instead of testing ``CDF < 1 - alpha``.
    """
    stat, nc = fab_statistic(x, y, cfg)
    if method == "cdf":
        return _squeeze(np.asarray(ncchisq_cdf(stat, cfg.p, nc)) < 1.0 - cfg.alpha)
    if method == "quantile":
        return _squeeze(stat < np.asarray(ncchisq_quantile(1.0 - cfg.alpha, cfg.p, nc)))
    raise ValueError(f"unknown method {method!r}")


def fab_member_posterior_form(x, y, cfg: NormalFabConfig):
    """Same region written around the posterior mean:
    ``||Sigma^{-1/2}(y - theta_hat)||^2 (k+1)/v_lambda_y^2 < chi2_{p, ||delta||^2, 1-alpha}``."""
    x, y = _vec(x, cfg.p), _vec(y, cfg.p)
    resid = _whiten(y - cfg.posterior_mean(x), cfg.root_inv)
    stat = (resid**2).sum(axis=-1) * (cfg.k + 1.0) / cfg.v_lambda_y**2
    d = delta_z(sufficient_point(x, y, cfg.k), cfg)
    nc = (d**2).sum(axis=-1)
    return _squeeze(np.asarray(ncchisq_cdf(stat, cfg.p, nc)) < 1.0 - cfg.alpha)


def equivariant_member(x, y, cfg: NormalFabConfig):
    """Pivotal region ``||Sigma^{-1/2}(x - y)||^2/(k+1) < chi2_{p, 0, 1-alpha}``."""
    x, y = _vec(x, cfg.p), _vec(y, cfg.p)
    stat = (_whiten(x - y, cfg.root_inv) ** 2).sum(axis=-1) / (cfg.k + 1.0)
    return _squeeze(special.gammainc(cfg.p / 2.0, stat / 2.0) < 1.0 - cfg.alpha)


def bayes_member(x, y, cfg: NormalFabConfig):
    """Highest posterior predictive density region (no constant coverage)."""
    x, y = _vec(x, cfg.p), _vec(y, cfg.p)
    resid = _whiten(y - cfg.posterior_mean(x), cfg.root_inv)
    stat = (resid**2).sum(axis=-1) / cfg.v_lambda_y
    return _squeeze(special.gammainc(cfg.p / 2.0, stat / 2.0) < 1.0 - cfg.alpha)


def pivotal_interval(x: float, cfg: NormalFabConfig) -> tuple[float, float]:
    """``x +- sigma sqrt(k+1) Phi^{-1}(1 - alpha/2)`` for p = 1."""
    half = math.sqrt(float(cfg.Sigma[0, 0]) * (cfg.k + 1.0)) * norm_quantile(1.0 - cfg.alpha / 2.0)
    return (x - half, x + half)


def fab_interval_1d(x: float, cfg: NormalFabConfig, resolution: int = 2048) -> RegionResult:
    """FAB prediction set for p = 1, as a union of intervals in y."""
    if cfg.p != 1:
        raise ValueError("fab_interval_1d requires p = 1")
    x = float(x)
    xs = np.array([[x]])

    def member(ys):
        return fab_member(xs, np.asarray(ys)[..., None], cfg)

    hint = math.sqrt(float(cfg.Sigma[0, 0]) * (cfg.k + 1.0))
    return invert_membership(member, x, hint, resolution=resolution)


def fab_region_2d(
    x, cfg: NormalFabConfig, grid_n: int = 512, member=None, max_doublings: int = 6
) -> RegionResult:
    """Area of the p = 2 FAB region at ``x`` by counting accepted grid cells.

    The window is centred at ``x`` with half-width ``6 sigma_max sqrt(k+1)``
    and doubles while accepted cells touch its border. ``err_bound`` is the
    number of boundary cells (cells with a 4-neighbour of the other state)
    times the cell area. ``member`` defaults to :func:`fab_member`.
    """
    if cfg.p != 2:
        raise ValueError("fab_region_2d requires p = 2")
    member = fab_member if member is None else member
    x = _vec(x, 2).reshape(2)
    half = 6.0 * cfg.sigma_max * math.sqrt(cfg.k + 1.0)
    n_evals = 0
    for _ in range(max_doublings + 1):
        h = 2.0 * half / grid_n
        centers = -half + h * (np.arange(grid_n) + 0.5)
        g1, g2 = np.meshgrid(x[0] + centers, x[1] + centers, indexing="ij")
        ys = np.stack([g1.ravel(), g2.ravel()], axis=1)
        acc = np.asarray(member(x[None, :], ys, cfg)).reshape(grid_n, grid_n)
        n_evals += grid_n * grid_n
        border = acc[0, :].any() or acc[-1, :].any() or acc[:, 0].any() or acc[:, -1].any()
        if not border:
            break
        half *= 2.0
    else:
        raise UnboundedRegionError(f"2-D region at x={x.tolist()} touches the final window")
    cell = h * h
    n_cells = int(acc.sum())
    padded = np.pad(acc, 1, constant_values=False)
    mixed = (
        (padded[1:-1, 1:-1] != padded[:-2, 1:-1])
        | (padded[1:-1, 1:-1] != padded[2:, 1:-1])
        | (padded[1:-1, 1:-1] != padded[1:-1, :-2])
        | (padded[1:-1, 1:-1] != padded[1:-1, 2:])
    )
    _, n_components = ndimage.label(acc)
    return RegionResult(
        intervals=(),
        total_measure=n_cells * cell,
        n_evals=n_evals,
        err_bound=float(mixed.sum()) * cell,
        n_cells=n_cells,
        n_components=int(n_components),
        diagnostics={"cell_size": h, "half_width": half},
    )


def fab_member_estvar(
    theta_hat,
    sigma_hat,
    nu: int,
    y,
    tilde_sigma,
    cfg: NormalFabConfig,
    reps: int = 10_000,
    seed: int = 0,
):
    """Approximate FAB region when Sigma is estimated.

    ``theta_hat ~ N_p(theta, k Sigma)`` and ``nu * sigma_hat ~ Wishart(nu, Sigma)``
    are the observed data; ``tilde_sigma`` is an estimate independent of both
    (or fixed from prior knowledge) used only for the shift. The Sigma stored in
    ``cfg`` is ignored. The region compares

        || S^{-1/2} (x - y)/sqrt(k+1) + tilde_delta ||^2

    with the ``1 - alpha`` quantile of ``||T + tilde_delta||^2``, where
    ``S^{-1/2}`` inverts the lower Cholesky factor of ``sigma_hat``. ``T`` is
    Student-t with ``nu`` degrees of freedom for p = 1 (exact) and is
    simulated with ``reps`` seeded draws otherwise.

    Leading axes of ``theta_hat``, ``sigma_hat`` and ``y`` broadcast when p = 1.
    """
    p = cfg.p
    theta_hat, y = _vec(theta_hat, p), _vec(y, p)
    s_hat = np.asarray(sigma_hat, dtype=float)
    if p == 1 and (s_hat.ndim == 0 or s_hat.shape[-2:] != (1, 1)):
        s_hat = s_hat[..., None, None]
    if np.any(s_hat[..., 0, 0] <= 0):
        raise FabError("sigma_hat is not positive definite")
    r_hat = inverse_root(s_hat)
    r_tilde = inverse_root(_as_matrix(tilde_sigma, p))
    z = sufficient_point(theta_hat, y, cfg.k)
    d = delta_z(z, cfg, root_inv=r_tilde)
    e = np.einsum("...ij,...j->...i", r_hat, theta_hat - y) / math.sqrt(cfg.k + 1.0)
    stat = ((e + d) ** 2).sum(axis=-1)
    u = 1.0 - cfg.alpha
    if p == 1:
        # stat < q_b  <=>  P(|T + b| < sqrt(stat)) < u  (continuous, increasing)
        s = np.sqrt(stat)
        b = np.abs(d[..., 0])
        mass = special.stdtr(nu, s - b) - special.stdtr(nu, -s - b)
        return _squeeze(mass < u)
    if nu < p:
        raise DomainError("nu must be at least p")
    stat = np.atleast_1d(stat)
    d = d.reshape(-1, p)
    q = np.array([shifted_t_sq_quantile(di, u, nu, reps=reps, seed=seed) for di in d])
    return _squeeze((stat < q).reshape(np.shape(stat)) if stat.size > 1 else stat[0] < q[0])
