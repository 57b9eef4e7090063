"""Seeded Monte Carlo estimation of coverage and expected region size.

A *procedure* bundles a data-generating model with a prediction region
rule. It exposes

* ``draw(rng, theta) -> (X, Y)`` with one replicate per leading index of
  ``theta``;
* ``member(X, Y) -> bool array``: whether each ``Y`` lies in its region;
* ``measure(X) -> float array``: Lebesgue measure of each region;
* ``draw_theta(rng, size)``: parameter draws from the procedure's prior;
* ``params() -> dict``: a JSON-friendly description used for digests.

Replicates are simulated in fixed blocks; block ``b`` draws from
``SeedSequence([seed, b])``. Blocks run on a thread pool capped by the
``FAB_THREADS`` environment variable and are reassembled in block order,
and sums use :func:`math.fsum`, so results do not depend on the number of
workers.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conformal import (
    NormalPrior,
    PosteriorPredictiveScore,
    conformal_member,
    conformal_regions,
    neg_abs_dev_score,
)
from .core import FabError, UnboundedRegionError, invert_membership_batch
from .normal import (
    NormalFabConfig,
    bayes_member,
    equivariant_member,
    fab_member,
    fab_member_estvar,
    fab_region_2d,
)
from .regression import (
    RegressionFabConfig,
    ResidualBasis,
    fab_interval_reg,
    fab_interval_reg_t,
    fab_member_reg,
    fab_member_reg_t,
    split_variance_estimates,
)
from .specfun import ncchisq_quantile, norm_quantile, t_quantile

__all__ = [
    "SimReport",
    "NormalProcedure",
    "EstVarNormalProcedure",
    "RegressionProcedure",
    "ConformalProcedure",
    "estimate_coverage",
    "estimate_risk",
    "worker_count",
]

DEFAULT_BLOCK = 4096
Theta = np.ndarray | float | str | Callable


@dataclass(frozen=True)
class SimReport:
    estimate: float
    std_error: float
    n_reps: int
    seed: int
    quantity: str
    config_digest: str
    diagnostics: dict = field(default_factory=dict, compare=False)


def worker_count(n_blocks: int, threads: int | None = None) -> int:
    """Threads to use: ``threads``, else ``FAB_THREADS``, else the CPU count."""
    if threads is None:
        env = os.environ.get("FAB_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(threads), n_blocks))


def _digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _theta_label(theta):
    if isinstance(theta, str):
        return theta
    if callable(theta):
        return getattr(theta, "__name__", repr(theta))
    return np.asarray(theta, dtype=float).tolist()


def _resolve_theta(proc, theta, rng, size):
    if isinstance(theta, str):
        if theta != "prior":
            raise ValueError(f"theta must be an array, a callable or 'prior', got {theta!r}")
        return proc.draw_theta(rng, size)
    if callable(theta):
        return np.asarray(theta(rng, size), dtype=float)
    theta = np.asarray(theta, dtype=float)
    return np.broadcast_to(theta, (size,) + proc.theta_shape)


def _simulate(proc, theta, n_reps, seed, quantity, block_size, threads, one_block):
    if n_reps < 2:
        raise ValueError("n_reps must be at least 2")
    n_blocks = -(-n_reps // block_size)

    def run(b):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        size = min(block_size, n_reps - b * block_size)
        return np.asarray(one_block(rng, _resolve_theta(proc, theta, rng, size)), dtype=float)

    workers = worker_count(n_blocks, threads)
    if workers == 1:
        values = [run(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, range(n_blocks)))
    vals = np.concatenate(values)
    mean = math.fsum(vals) / n_reps
    var = math.fsum((vals - mean) ** 2) / (n_reps - 1)
    digest = _digest(
        {"procedure": type(proc).__name__, "params": proc.params(), "theta": _theta_label(theta),
         "quantity": quantity, "block": block_size}
    )
    return SimReport(mean, math.sqrt(var / n_reps), n_reps, int(seed), quantity, digest)


def estimate_coverage(proc, theta: Theta, n_reps: int, seed: int, *, block_size: int = DEFAULT_BLOCK,
                      threads: int | None = None) -> SimReport:
    """Monte Carlo estimate of ``P_theta(Y in A_X)`` with its binomial standard error.

    ``theta`` is a fixed parameter, ``"prior"`` for draws from the
    procedure's prior, or a callable ``(rng, size) -> thetas``.
    """

    def block(rng, thetas):
        X, Y = proc.draw(rng, thetas)
        return proc.member(X, Y)

    return _simulate(proc, theta, n_reps, seed, "coverage", block_size, threads, block)


def estimate_risk(proc, theta: Theta, n_reps: int, seed: int, *, block_size: int = 256,
                  threads: int | None = None) -> SimReport:
    """Monte Carlo estimate of the expected region measure ``E_theta[mu(A_X)]``.

    An unbounded region aborts the run with :class:`UnboundedRegionError`.
    """

    def block(rng, thetas):
        X, _ = proc.draw(rng, thetas)
        return proc.measure(X)

    try:
        return _simulate(proc, theta, n_reps, seed, "expected_measure", block_size, threads, block)
    except UnboundedRegionError as exc:
        raise UnboundedRegionError(f"estimate_risk({type(proc).__name__}): {exc}") from exc


# -- normal mean -----------------------------------------------------------


@dataclass(frozen=True)
class NormalProcedure:
    """Normal model ``X ~ N_p(theta, k Sigma)``, ``Y ~ N_p(theta, Sigma)``.

    ``kind`` selects the FAB region, the pivotal (equivariant) region or the
    highest posterior predictive density region. ``grid_n`` is the grid used
    for 2-D FAB areas.
    """

    cfg: NormalFabConfig
    kind: str = "fab"
    resolution: int = 1024
    grid_n: int = 128

    def __post_init__(self):
        if self.kind not in ("fab", "equivariant", "bayes"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == "bayes" and self.cfg.infinite_lambda:
            raise ValueError("the Bayes region needs a finite lambda")

    @property
    def theta_shape(self):
        return (self.cfg.p,)

    def params(self):
        c = self.cfg
        return {"kind": self.kind, "p": c.p, "k": c.k, "Sigma": c.Sigma.tolist(), "mu": c.mu_vec.tolist(),
                "lam": repr(c.lam), "alpha": c.alpha, "resolution": self.resolution, "grid_n": self.grid_n}

    def draw_theta(self, rng, size):
        if self.cfg.infinite_lambda:
            raise ValueError("cannot draw theta from a flat prior")
        g = rng.standard_normal((size, self.cfg.p))
        return self.cfg.mu_vec + math.sqrt(self.cfg.lam) * g @ self._chol.T

    @property
    def _chol(self):
        return np.linalg.cholesky(self.cfg.Sigma)

    def draw(self, rng, theta):
        theta = np.asarray(theta, dtype=float)
        L = self._chol
        gx = rng.standard_normal(theta.shape)
        gy = rng.standard_normal(theta.shape)
        return theta + math.sqrt(self.cfg.k) * gx @ L.T, theta + gy @ L.T

    def member(self, X, Y):
        rule = {"fab": fab_member, "equivariant": equivariant_member, "bayes": bayes_member}[self.kind]
        return np.asarray(rule(X, Y, self.cfg), dtype=bool)

    def _closed_measure(self, scale):
        c = self.cfg
        q = ncchisq_quantile(1.0 - c.alpha, c.p, 0.0)
        det = float(np.linalg.det(c.Sigma))
        if c.p == 1:
            return 2.0 * math.sqrt(q * scale * det)
        # volume of {u : u' Sigma^{-1} u < scale q} in p dimensions
        ball = math.pi ** (c.p / 2.0) / math.gamma(c.p / 2.0 + 1.0)
        return ball * (scale * q) ** (c.p / 2.0) * math.sqrt(det)

    def measure(self, X):
        c = self.cfg
        X = np.asarray(X, dtype=float)
        if self.kind == "equivariant" or (self.kind == "fab" and c.infinite_lambda):
            return np.full(X.shape[0], self._closed_measure(c.k + 1.0))
        if self.kind == "bayes":
            return np.full(X.shape[0], self._closed_measure(c.v_lambda_y))
        if c.p == 1:
            hint = math.sqrt(float(c.Sigma[0, 0]) * (c.k + 1.0))
            res = invert_membership_batch(
                lambda rows, ys: fab_member(X[rows], ys[..., None], c),
                X[:, 0], np.full(X.shape[0], hint), self.resolution,
            )
            return np.array([r.total_measure for r in res])
        if c.p == 2:
            return np.array([fab_region_2d(x, c, grid_n=self.grid_n).total_measure for x in X])
        raise FabError("FAB region measure is implemented for p <= 2")


@dataclass(frozen=True)
class EstVarNormalProcedure:
    """Scalar normal model with ``Sigma = sigma2`` estimated.

    Each replicate observes ``theta_hat ~ N(theta, k sigma2)``, an estimate
    ``sigma_hat2 ~ sigma2 chi2_nu/nu`` and an independent shift scale
    ``sigma_tilde2 ~ sigma2 chi2_tilde_df/tilde_df``. ``cfg.sigma`` is the true
    variance used for sampling only.
    """

    cfg: NormalFabConfig
    nu: int = 10
    tilde_df: int = 4
    resolution: int = 1024

    def __post_init__(self):
        if self.cfg.p != 1:
            raise ValueError("EstVarNormalProcedure supports p = 1")

    theta_shape = (1,)

    def params(self):
        c = self.cfg
        return {"k": c.k, "sigma2": float(c.Sigma[0, 0]), "mu": c.mu_vec.tolist(), "lam": repr(c.lam),
                "alpha": c.alpha, "nu": self.nu, "tilde_df": self.tilde_df}

    def draw_theta(self, rng, size):
        c = self.cfg
        s = math.sqrt(float(c.Sigma[0, 0]))
        return c.mu_vec + math.sqrt(c.lam) * s * rng.standard_normal((size, 1))

    def draw(self, rng, theta):
        theta = np.asarray(theta, dtype=float)
        n = theta.shape[0]
        s2 = float(self.cfg.Sigma[0, 0])
        x = theta[:, 0] + math.sqrt(self.cfg.k * s2) * rng.standard_normal(n)
        y = theta[:, 0] + math.sqrt(s2) * rng.standard_normal(n)
        s_hat = s2 * rng.chisquare(self.nu, n) / self.nu
        s_tilde = s2 * rng.chisquare(self.tilde_df, n) / self.tilde_df
        return np.stack([x, s_hat, s_tilde], axis=1), y

    def member(self, X, Y):
        out = fab_member_estvar(X[:, :1], X[:, 1], self.nu, Y[:, None], X[:, 2], self.cfg)
        return np.asarray(out, dtype=bool)

    def measure(self, X):
        c = self.cfg

        def member(rows, ys):
            x = X[rows]
            return fab_member_estvar(x[..., :1], x[..., 1], self.nu, ys[..., None], x[..., 2], c)

        hints = np.sqrt(X[:, 1] * (c.k + 1.0))
        res = invert_membership_batch(member, X[:, 0], hints, self.resolution)
        return np.array([r.total_measure for r in res])


# -- linear regression -----------------------------------------------------


@dataclass(frozen=True)
class RegressionProcedure:
    """``X ~ N_n(U beta, s^2 I)`` and ``Y ~ N(v'beta, s^2)`` with true noise variance ``noise_var``.

    ``kind``: ``fab`` (known sigma), ``fab_t`` (split variance estimates,
    ``split_df`` to the shift scale), ``equivariant`` (known sigma, or the
    ``t_{n-p}`` interval when ``cfg.sigma2`` is None) or ``bayes``.
    ``prior_tau2`` sets the prior ``beta ~ N(0, prior_tau2 I)`` used by
    ``theta="prior"``; it defaults to the one implied by ``cfg.Psi``.
    """

    cfg: RegressionFabConfig
    kind: str = "fab"
    noise_var: float = 1.0
    split_df: int | None = None
    prior_tau2: float | None = None
    resolution: int = 1024

    def __post_init__(self):
        if self.kind not in ("fab", "fab_t", "equivariant", "bayes"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind in ("fab", "bayes") and self.cfg.sigma2 is None:
            raise ValueError(f"kind={self.kind!r} needs a known sigma2 in the config")
        object.__setattr__(self, "_basis", ResidualBasis(self.cfg.U))

    @property
    def theta_shape(self):
        return (self.cfg.p,)

    def params(self):
        c = self.cfg
        return {"kind": self.kind, "U": _digest({"U": c.U.tolist()}), "v": c.v.tolist(),
                "Psi": _digest({"Psi": c.Psi.tolist()}), "sigma2": c.sigma2, "alpha": c.alpha,
                "noise_var": self.noise_var, "split_df": self.split_df, "prior_tau2": self.prior_tau2,
                "resolution": self.resolution}

    def draw_theta(self, rng, size):
        c = self.cfg
        if self.prior_tau2 is not None:
            return math.sqrt(self.prior_tau2) * rng.standard_normal((size, c.p))
        try:
            L = np.linalg.cholesky(np.linalg.inv(c.Psi) * self.noise_var)
        except np.linalg.LinAlgError as exc:
            raise ValueError("prior precision Psi must be positive definite to draw beta") from exc
        return rng.standard_normal((size, c.p)) @ L.T

    def draw(self, rng, theta):
        beta = np.asarray(theta, dtype=float)
        s = math.sqrt(self.noise_var)
        X = beta @ self.cfg.U.T + s * rng.standard_normal((beta.shape[0], self.cfg.n))
        Y = beta @ self.cfg.v + s * rng.standard_normal(beta.shape[0])
        return X, Y

    def _split(self, X):
        return split_variance_estimates(X, self.cfg.U, self.split_df, basis=self._basis)

    def _full_var(self, X):
        return (self._basis.coordinates(X) ** 2).sum(axis=-1) / self._basis.df

    def _equivariant_half(self, X):
        c = self.cfg
        u = 1.0 - c.alpha / 2.0
        if c.sigma2 is not None:
            return np.full(X.shape[0], norm_quantile(u) * c.sigma * math.sqrt(c.w0))
        return t_quantile(u, self._basis.df) * np.sqrt(self._full_var(X)) * math.sqrt(c.w0)

    def member(self, X, Y):
        c = self.cfg
        if self.kind == "fab":
            return np.asarray(fab_member_reg(X, Y, c), dtype=bool)
        if self.kind == "fab_t":
            sp = self._split(X)
            return np.asarray(fab_member_reg_t(X, Y, c, sp.sigma_hat2, sp.nu, sp.sigma_tilde2), dtype=bool)
        if self.kind == "equivariant":
            return np.abs(Y - c.ols_prediction(X)) < self._equivariant_half(X)
        half = norm_quantile(1.0 - c.alpha / 2.0) * c.sigma * math.sqrt(c.w_psi)
        return np.abs(Y - c.ridge_prediction(X)) < half

    def measure(self, X):
        c = self.cfg
        if self.kind == "fab":
            return np.array([r.total_measure for r in fab_interval_reg(np.atleast_2d(X), c, self.resolution)])
        if self.kind == "fab_t":
            sp = self._split(X)
            res = fab_interval_reg_t(np.atleast_2d(X), c, sp.sigma_hat2, sp.nu, sp.sigma_tilde2, self.resolution)
            return np.array([r.total_measure for r in res])
        if self.kind == "equivariant":
            return 2.0 * self._equivariant_half(X)
        return np.full(X.shape[0], 2.0 * norm_quantile(1.0 - c.alpha / 2.0) * c.sigma * math.sqrt(c.w_psi))


# -- conformal -------------------------------------------------------------


@dataclass(frozen=True)
class ConformalProcedure:
    """``n + 1`` i.i.d. draws ``N(theta, noise_var)``; the first ``n`` are the sample.

    ``score`` is ``"postpred"`` (posterior predictive density under
    ``prior``) or ``"neg_abs_dev_baseline"``. ``theta="prior"`` draws
    ``theta ~ N(prior.m, prior.lam prior.sigma2)``.
    """

    n: int
    k_level: int
    prior: NormalPrior = NormalPrior()
    score: str = "postpred"
    noise_var: float = 1.0
    resolution: int = 1024

    def __post_init__(self):
        if not 0 <= self.k_level <= self.n:
            raise ValueError(f"k_level must lie in [0, {self.n}]")
        if self.score not in ("postpred", "neg_abs_dev_baseline"):
            raise ValueError(f"unknown score {self.score!r}")

    theta_shape = ()

    def params(self):
        return {"n": self.n, "k": self.k_level, "prior": [self.prior.m, self.prior.lam, self.prior.sigma2],
                "score": self.score, "noise_var": self.noise_var, "resolution": self.resolution}

    def _score(self):
        return PosteriorPredictiveScore(self.prior) if self.score == "postpred" else neg_abs_dev_score

    def draw_theta(self, rng, size):
        p = self.prior
        return p.m + math.sqrt(p.lam * p.sigma2) * rng.standard_normal(size)

    def draw(self, rng, theta):
        theta = np.asarray(theta, dtype=float)
        ys = theta[:, None] + math.sqrt(self.noise_var) * rng.standard_normal((theta.shape[0], self.n + 1))
        return ys[:, :-1], ys[:, -1]

    def member(self, X, Y):
        return np.asarray(conformal_member(X, Y, self.k_level, self._score()), dtype=bool)

    def measure(self, X):
        res = conformal_regions(X, self.k_level, self._score(), self.prior, self.resolution)
        return np.array([r.total_measure for r in res])

