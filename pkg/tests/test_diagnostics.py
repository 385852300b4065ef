import math

import numpy as np
import pytest

from readmix import diagnostics
from readmix.diagnostics import DiagnosticUnavailable


def ar1(rho, n, chains, seed):
    rng = np.random.default_rng(seed)
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains) / math.sqrt(1 - rho**2)
    eps = rng.standard_normal((chains, n))
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + eps[:, t]
    return x


class TestRhat:
    def test_exact_copies(self):
        # no between-chain variance: the estimator reduces to sqrt((n - 1) / n)
        half = np.random.default_rng(0).standard_normal(500)
        copies = np.tile(np.r_[half, half], (4, 1))
        assert diagnostics.rhat(copies) == pytest.approx(math.sqrt(499 / 500), abs=1e-12)

    def test_disjoint_chains(self):
        rng = np.random.default_rng(1)
        x = np.vstack([rng.normal(0, 1, 500), rng.normal(100, 1, 500)])
        assert diagnostics.rhat(x) > 5

    def test_well_mixed(self):
        x = np.random.default_rng(2).standard_normal((4, 1000))
        assert diagnostics.rhat(x) < 1.01

    def test_single_chain_unavailable(self):
        with pytest.raises(DiagnosticUnavailable):
            diagnostics.rhat(np.zeros(100))

    def test_constant(self):
        assert diagnostics.rhat(np.ones((4, 10))) == 1.0


class TestEss:
    def test_independent_draws(self):
        x = np.random.default_rng(3).standard_normal((4, 1000))
        assert abs(diagnostics.ess(x) / 4000 - 1) < 0.2

    def test_ar1(self):
        rho = 0.9
        x = ar1(rho, 5000, 4, seed=4)
        ratio = diagnostics.ess_mean(x) / x.size
        target = (1 - rho) / (1 + rho)
        assert abs(ratio / target - 1) < 0.3

    def test_constant_chain_is_nan(self):
        assert math.isnan(diagnostics.ess(np.full((2, 100), 3.0)))

    def test_single_chain_allowed(self):
        x = np.random.default_rng(5).standard_normal(800)
        assert 600 < diagnostics.ess(x) < 1000


class TestMcse:
    def test_mean_matches_iid_formula(self):
        x = np.random.default_rng(6).standard_normal((4, 2000))
        np.testing.assert_allclose(diagnostics.mcse_mean(x), 1 / math.sqrt(8000), rtol=0.15)

    def test_sd_positive(self):
        x = np.random.default_rng(7).standard_normal((4, 1000))
        assert 0 < diagnostics.mcse_sd(x) < 0.05

    def test_quantile_order_of_magnitude(self):
        x = np.random.default_rng(8).standard_normal((4, 1000))
        q = diagnostics.mcse_quantile(x, 0.5)
        # asymptotic sd of the iid median: sqrt(pi / 2 / n)
        assert 0.5 * math.sqrt(math.pi / 8000) < q < 2 * math.sqrt(math.pi / 8000)
