import math

import numpy as np
import pytest
from scipy.special import gamma

from fabpred.conformal import NormalPrior
from fabpred.core import UnboundedRegionError
from fabpred.normal import NormalFabConfig
from fabpred.regression import RegressionFabConfig
from fabpred.simulate import (
    ConformalProcedure,
    EstVarNormalProcedure,
    NormalProcedure,
    RegressionProcedure,
    SimReport,
    estimate_coverage,
    estimate_risk,
    worker_count,
)
from fabpred.specfun import t_quantile

PIVOTAL_WIDTH = 4.652348614


@pytest.fixture(scope="module")
def fab1():
    return NormalProcedure(NormalFabConfig(lam=1.0))


class TestDeterminism:
    def test_identical_reports(self, fab1):
        a = estimate_coverage(fab1, 1.0, 20_000, seed=5)
        b = estimate_coverage(fab1, 1.0, 20_000, seed=5)
        assert a == b
        assert a.estimate != estimate_coverage(fab1, 1.0, 20_000, seed=6).estimate

    def test_thread_count_does_not_matter(self, fab1):
        a = estimate_coverage(fab1, 2.0, 20_000, seed=8, block_size=1000, threads=1)
        b = estimate_coverage(fab1, 2.0, 20_000, seed=8, block_size=1000, threads=4)
        assert abs(a.estimate - b.estimate) <= 1e-12 and a.std_error == pytest.approx(b.std_error, abs=1e-12)
        r1 = estimate_risk(fab1, 0.5, 600, seed=9, block_size=50, threads=1)
        r4 = estimate_risk(fab1, 0.5, 600, seed=9, block_size=50, threads=3)
        assert abs(r1.estimate - r4.estimate) <= 1e-12

    def test_env_cap(self, monkeypatch):
        monkeypatch.setenv("FAB_THREADS", "2")
        assert worker_count(10) == 2
        assert worker_count(1) == 1
        assert worker_count(10, threads=5) == 5

    def test_report_fields(self, fab1):
        rep = estimate_coverage(fab1, [0.0], 5000, seed=1)
        assert isinstance(rep, SimReport)
        assert (rep.n_reps, rep.seed, rep.quantity) == (5000, 1, "coverage")
        assert rep.std_error == pytest.approx(math.sqrt(rep.estimate * (1 - rep.estimate) / 4999), rel=1e-12)
        assert len(rep.config_digest) == 16
        other = estimate_coverage(NormalProcedure(NormalFabConfig(lam=2.0)), [0.0], 5000, seed=1)
        assert other.config_digest != rep.config_digest

    def test_bad_inputs(self, fab1):
        with pytest.raises(ValueError):
            estimate_coverage(fab1, 0.0, 1, seed=0)
        with pytest.raises(ValueError):
            estimate_coverage(fab1, "posterior", 100, seed=0)
        with pytest.raises(ValueError):
            NormalProcedure(NormalFabConfig(), kind="hpd")


class TestCoverage:
    def test_pivotal(self):
        proc = NormalProcedure(NormalFabConfig(lam=math.inf))
        for theta in (0.0, 40.0):
            rep = estimate_coverage(proc, theta, 100_000, seed=11)
            assert abs(rep.estimate - 0.9) < 3 * rep.std_error + 1e-3

    def test_fab_far_from_prior(self, fab1):
        rep = estimate_coverage(fab1, 5.0, 100_000, seed=12)
        assert abs(rep.estimate - 0.9) < 3 * rep.std_error

    def test_bayes_region_undercovers(self):
        rep = estimate_coverage(NormalProcedure(NormalFabConfig(lam=1.0), "bayes"), 5.0, 100_000, seed=13)
        assert rep.estimate < 0.9 - 3 * rep.std_error

    def test_prior_and_callable_theta(self, fab1):
        a = estimate_coverage(fab1, "prior", 50_000, seed=14)
        b = estimate_coverage(fab1, lambda rng, size: rng.standard_normal((size, 1)), 50_000, seed=14)
        for rep in (a, b):
            assert abs(rep.estimate - 0.9) < 3 * rep.std_error

    def test_two_dimensional(self):
        proc = NormalProcedure(NormalFabConfig(p=2, sigma=np.eye(2), lam=1.0))
        rep = estimate_coverage(proc, [3.0, -1.0], 100_000, seed=15)
        assert abs(rep.estimate - 0.9) < 3 * rep.std_error

    def test_regression_and_conformal(self):
        U = np.random.default_rng(0).standard_normal((20, 3))
        reg = RegressionProcedure(RegressionFabConfig.from_tau2(U, U[0], 1.0), "fab")
        assert abs(estimate_coverage(reg, [2.0, 0.0, -2.0], 50_000, seed=16).estimate - 0.9) < 0.008
        conf = ConformalProcedure(9, 1, NormalPrior())
        assert abs(estimate_coverage(conf, 1.0, 50_000, seed=17).estimate - 0.9) < 0.008


class TestRisk:
    def test_pivotal_closed_form(self):
        rep = estimate_risk(NormalProcedure(NormalFabConfig(lam=math.inf)), 0.3, 100, seed=0)
        assert rep.estimate == pytest.approx(PIVOTAL_WIDTH, abs=1e-6)
        assert rep.std_error == pytest.approx(0.0, abs=1e-12)
        eq = estimate_risk(NormalProcedure(NormalFabConfig(lam=1.0), "equivariant"), 0.3, 100, seed=0)
        assert eq.estimate == pytest.approx(PIVOTAL_WIDTH, abs=1e-6)

    def test_fab_trades_risk_across_theta(self, fab1):
        near = estimate_risk(fab1, 0.0, 400, seed=20)
        far = estimate_risk(fab1, 6.0, 400, seed=21)
        assert near.estimate + 3 * near.std_error < PIVOTAL_WIDTH
        assert far.estimate - 3 * far.std_error > PIVOTAL_WIDTH

    def test_fubini(self, fab1):
        joint = estimate_risk(fab1, "prior", 2000, seed=22)
        thetas = np.random.default_rng(23).standard_normal(50)
        parts = [estimate_risk(fab1, t, 40, seed=100 + i).estimate for i, t in enumerate(thetas)]
        nested = np.mean(parts)
        se = math.sqrt(joint.std_error**2 + np.var(parts, ddof=1) / len(parts))
        assert abs(nested - joint.estimate) < 3 * se

    def test_estimated_variance_width(self):
        proc = EstVarNormalProcedure(NormalFabConfig(lam=math.inf), nu=10)
        rep = estimate_risk(proc, 0.0, 400, seed=24)
        # E[sqrt(chi2_10/10)] times the t_10 pivotal width
        e_s = math.sqrt(2 / 10) * gamma(5.5) / gamma(5)
        expected = 2 * t_quantile(0.95, 10) * math.sqrt(2) * e_s
        assert abs(rep.estimate - expected) < 4 * rep.std_error

    def test_unbounded_aborts(self):
        with pytest.raises(UnboundedRegionError, match="ConformalProcedure"):
            estimate_risk(ConformalProcedure(4, 0), 0.0, 10, seed=0)
