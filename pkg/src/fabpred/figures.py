"""Tidy tables behind the four figures: interval widths, 2-D areas,
expected volumes and regression Bayes risks.

Each table has one row per curve point. Defaults are sized to finish in
minutes on one core; ``fig4`` accepts ``full_scale=True`` to sweep every
row of the design with more replicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .normal import NormalFabConfig, fab_interval_1d, fab_region_2d
from .regression import RegressionFabConfig, correlated_design
from .simulate import NormalProcedure, RegressionProcedure, estimate_risk

__all__ = ["FigureTable", "figure_data", "FIGURES", "LAMBDAS"]

LAMBDAS = (0.1, 1.0, 10.0, 100.0, math.inf)
FIGURES = ("fig1", "fig2", "fig3", "fig4")


@dataclass(frozen=True)
class FigureTable:
    columns: tuple[str, ...]
    rows: list[tuple]
    settings: dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])


def _merge(defaults: dict, overrides: dict | None) -> dict:
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ValueError(f"unknown settings {sorted(unknown)}; allowed: {sorted(defaults)}")
    return {**defaults, **overrides}


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _fig1(s, seed):
    rows = []
    for lam in s["lambdas"]:
        cfg = NormalFabConfig(p=1, k=s["k"], sigma=s["sigma2"], mu=0.0, lam=lam, alpha=s["alpha"])
        for x in s["xs"]:
            rows.append((lam, float(x), fab_interval_1d(x, cfg, s["resolution"]).total_measure))
    return FigureTable(("lambda", "x", "width"), rows)


def _fig2(s, seed):
    rows = []
    for lam in s["lambdas"]:
        cfg = NormalFabConfig(p=2, k=s["k"], sigma=s["sigma2"], mu=0.0, lam=lam, alpha=s["alpha"])
        for r in s["norms"]:
            res = fab_region_2d([float(r), 0.0], cfg, grid_n=s["grid_n"])
            rows.append((lam, float(r), res.total_measure, res.err_bound))
    return FigureTable(("lambda", "norm_x", "area", "err_bound"), rows)


def _fig3(s, seed):
    rows = []
    for p in s["p_values"]:
        reps = s["reps_p1"] if p == 1 else s["reps_p2"]
        for i, lam in enumerate(s["lambdas"]):
            cfg = NormalFabConfig(p=p, k=s["k"], sigma=s["sigma2"], mu=0.0, lam=lam, alpha=s["alpha"])
            proc = NormalProcedure(cfg, "fab", resolution=s["resolution"], grid_n=s["grid_n"])
            for j, th in enumerate(s["thetas"]):
                theta = np.zeros(p)
                theta[0] = th
                rep = estimate_risk(proc, theta, reps, _sub_seed(seed, p, i, j))
                rows.append((p, lam, float(th), rep.estimate, rep.std_error))
    return FigureTable(("p", "lambda", "theta", "risk", "std_error"), rows)


def _fig4(s, seed):
    if s["full_scale"]:
        s = {**s, "n_rows": None, "reps": 1000}
    U = correlated_design(100, 75, rho=s["rho"], seed=s["design_seed"])
    n = U.shape[0]
    all_rows = np.arange(n)
    if s["n_rows"] is not None and s["n_rows"] < n:
        picked = np.sort(np.random.default_rng(s["design_seed"]).choice(n, s["n_rows"], replace=False))
    else:
        picked = all_rows
    curves = (("equivariant", None), ("tau_pi=tau", 1.0), ("tau_pi2=tau2/4", 0.25))
    rows = []
    for a, tau2 in enumerate(s["tau2s"]):
        acc = {name: ([], []) for name, _ in curves}
        for j in picked:
            # common random numbers: every curve sees the same (beta, X) draws
            sub = _sub_seed(seed, a, int(j))
            for name, factor in curves:
                cfg = RegressionFabConfig.from_tau2(
                    U, U[j], tau2 * (factor or 1.0), sigma2=None, alpha=s["alpha"]
                )
                kind = "equivariant" if factor is None else "fab_t"
                proc = RegressionProcedure(cfg, kind, noise_var=1.0, split_df=s["split_df"], prior_tau2=tau2,
                                           resolution=s["resolution"])
                rep = estimate_risk(proc, "prior", s["reps"], sub)
                acc[name][0].append(rep.estimate)
                acc[name][1].append(rep.std_error)
        for name, _ in curves:
            est, se = acc[name]
            rows.append((float(tau2), name, math.fsum(est) / len(est),
                         math.sqrt(math.fsum(e * e for e in se)) / len(se)))
    settings = {"rows_used": [int(j) for j in picked]}
    return FigureTable(("tau2", "curve", "risk", "std_error"), rows, settings)


_DEFAULTS = {
    "fig1": {"lambdas": LAMBDAS, "xs": tuple(np.round(np.arange(0.0, 6.0001, 0.25), 10)), "k": 1.0,
             "sigma2": 1.0, "alpha": 0.1, "resolution": 2048},
    "fig2": {"lambdas": LAMBDAS, "norms": tuple(float(r) for r in range(7)), "k": 1.0, "sigma2": 1.0,
             "alpha": 0.1, "grid_n": 512},
    "fig3": {"lambdas": LAMBDAS, "thetas": tuple(float(t) for t in range(7)), "p_values": (1, 2), "k": 1.0,
             "sigma2": 1.0, "alpha": 0.1, "reps_p1": 400, "reps_p2": 40, "resolution": 1024, "grid_n": 96},
    "fig4": {"tau2s": tuple(float(t) for t in np.round(np.logspace(-1, 1, 9), 10)), "n_rows": 25, "reps": 200,
             "rho": 0.9, "design_seed": 2, "split_df": 4, "alpha": 0.1, "resolution": 1024,
             "full_scale": False},
}
_BUILDERS = {"fig1": _fig1, "fig2": _fig2, "fig3": _fig3, "fig4": _fig4}


def figure_data(which: str, overrides: dict | None = None, seed: int = 0) -> FigureTable:
    """Tidy table for ``which`` in :data:`FIGURES`.

    ``overrides`` replaces entries of the figure's default settings; unknown
    keys raise ``ValueError``. The merged settings are returned in
    ``table.settings``.
    """
    if which not in _BUILDERS:
        raise ValueError(f"which must be one of {FIGURES}, got {which!r}")
    settings = _merge(_DEFAULTS[which], overrides)
    table = _BUILDERS[which](settings, seed)
    return FigureTable(table.columns, table.rows, {**settings, **table.settings, "seed": seed})
