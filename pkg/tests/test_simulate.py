import math

import numpy as np
import pytest
from scipy import stats

from readmix.models import Family
from readmix.sampler import SamplerConfig
from readmix.simulate import (
    Design, DesignError, TrueParams, derive_seed, model_recovery, recovery_study, simulate,
    simulate_with_latent,
)

HET = dict(beta=6.0, delta=0.3, prob_hi=0.35, prob_lo=0.15, sigma_e=0.35, sigmap_e=0.6,
           sigma_u=0.2, sigma_w=0.1)
QUICK = SamplerConfig(n_chains=2, n_warmup=200, n_draws=200, seed=0)


def standard(beta_2=0.0, sigma_e=0.35, sigma_u=0.2, sigma_w=0.1):
    return TrueParams(Family.STANDARD, dict(beta_1=6.0, beta_2=beta_2, sigma_e=sigma_e,
                                            sigma_u=sigma_u, sigma_w=sigma_w))


class TestDesign:
    def test_latin_square(self):
        s, i, c = Design(4, 6).layout()
        assert s.size == 24
        for subj in range(4):
            assert set(c[s == subj]) == {1, -1}
        assert len(set(zip(s, i))) == 24

    def test_replicated_cells(self):
        s, i, c = Design(2, 2, trials_per_cell=3).layout()
        assert s.size == 12

    @pytest.mark.parametrize("args", [(0, 4), (4, 0), (1, 1), (2, 2, 0)])
    def test_invalid(self, args):
        with pytest.raises(DesignError):
            Design(*args)


class TestTrueParams:
    def test_missing(self):
        with pytest.raises(DesignError, match="sigmap_e"):
            TrueParams(Family.HETEROGENEOUS, {k: v for k, v in HET.items() if k != "sigmap_e"})

    @pytest.mark.parametrize("name, value", [("delta", -0.1), ("prob_hi", 1.2),
                                             ("sigma_e", 0.0), ("sigma_u", -1.0)])
    def test_out_of_range(self, name, value):
        with pytest.raises(DesignError):
            TrueParams(Family.HETEROGENEOUS, dict(HET, **{name: value}))

    def test_gamma_negative(self):
        with pytest.raises(DesignError):
            TrueParams(Family.PERCOLATION, dict(beta=6, gamma=0.0, prob_perc=0.3,
                                                sigma_e=0.3, sigma_u=0.1, sigma_w=0.1))

    def test_truth_adds_diffprob(self):
        assert TrueParams(Family.HETEROGENEOUS, HET).truth()["diffprob"] == pytest.approx(0.2)


class TestSimulate:
    def test_deterministic(self):
        p = TrueParams(Family.HETEROGENEOUS, HET)
        a = simulate(Family.HETEROGENEOUS, p, Design(10, 8), 42)
        b = simulate(Family.HETEROGENEOUS, p, Design(10, 8), 42)
        c = simulate(Family.HETEROGENEOUS, p, Design(10, 8), 43)
        assert a.fingerprint() == b.fingerprint() != c.fingerprint()

    def test_positive(self):
        d = simulate(Family.STANDARD, standard(sigma_e=3.0), Design(20, 20), 0)
        assert np.all(d.rt > 0)

    def test_family_mismatch(self):
        with pytest.raises(DesignError):
            simulate(Family.HOMOGENEOUS, TrueParams(Family.HETEROGENEOUS, HET), Design(), 0)

    def test_noise_free_limit(self):
        d = simulate(Family.STANDARD, standard(sigma_e=1e-12, sigma_u=0.0, sigma_w=0.0),
                     Design(5, 4), 1)
        np.testing.assert_allclose(d.rt, math.exp(6.0), rtol=1e-9)
        assert d.rt[0] == pytest.approx(403.4287934927351, rel=1e-9)

    def test_lognormal_mean(self):
        p = TrueParams(Family.STANDARD, dict(beta_1=6.0, beta_2=0.0, sigma_e=0.4,
                                             sigma_u=0.0, sigma_w=0.0))
        d = simulate(Family.STANDARD, p, Design(1000, 1000), 2)
        # mpmath: exp(6.08) = 437.0291947...
        se = d.rt.std() / math.sqrt(len(d))
        assert abs(d.rt.mean() - 437.0291947183914) < 3 * se

    def test_overwriting_without_mixing_is_standard(self):
        hom = TrueParams(Family.HOMOGENEOUS, dict(beta=6.0, delta=0.5, prob_hi=0.0, prob_lo=0.0,
                                                  sigma_e=0.35, sigma_u=0.0, sigma_w=0.0))
        a = simulate(Family.HOMOGENEOUS, hom, Design(100, 100), 3)
        b = simulate(Family.STANDARD, standard(sigma_u=0.0, sigma_w=0.0), Design(100, 100), 4)
        assert stats.ks_2samp(a.rt, b.rt).pvalue > 0.01

    def test_mixing_fraction(self):
        p = TrueParams(Family.HETEROGENEOUS, HET)
        d, z = simulate_with_latent(Family.HETEROGENEOUS, p, Design(100, 100), 5)
        minus = d.condition == -1
        n = int(minus.sum())
        lo, hi = stats.binomtest(int(z[minus].sum()), n).proportion_ci(0.99)
        assert lo <= 0.35 <= hi
        lo, hi = stats.binomtest(int(z[~minus].sum()), int((~minus).sum())).proportion_ci(0.99)
        assert lo <= 0.15 <= hi

    def test_percolation_only_in_plus_condition(self):
        p = TrueParams(Family.PERCOLATION, dict(beta=6, gamma=-0.2, prob_perc=0.5,
                                                sigma_e=0.3, sigma_u=0.1, sigma_w=0.1))
        d, z = simulate_with_latent(Family.PERCOLATION, p, Design(30, 30), 6)
        assert z[d.condition == -1].sum() == 0
        assert z[d.condition == 1].sum() > 0

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)


class TestRecovery:
    def test_report(self):
        rep = recovery_study(Family.STANDARD, standard(beta_2=-0.05), Design(12, 8), 2, QUICK,
                             seed=1)
        assert rep.n_replications == 2
        assert set(rep.coverage()) == {"beta_1", "beta_2", "sigma_e", "sigma_u", "sigma_w"}
        assert len(rep.max_rhat) == 2
        assert '"coverage"' in rep.to_json()

    def test_unconverged_are_excluded(self):
        rep = recovery_study(Family.STANDARD, standard(), Design(12, 8), 2, QUICK, seed=1,
                             rhat_threshold=0.5)
        assert rep.excluded == [0, 1]
        assert rep.n_used == 0

    def test_needs_replications(self):
        with pytest.raises(DesignError):
            recovery_study(Family.STANDARD, standard(), Design(), 0, QUICK)

    def test_zero_subject_variance(self):
        rep = recovery_study(Family.STANDARD, standard(sigma_u=0.0), Design(40, 24), 1,
                             SamplerConfig(n_warmup=500, n_draws=500), seed=3)
        assert rep.upper["sigma_u"][0] < 0.15

    def test_model_recovery_table(self):
        p = TrueParams(Family.HOMOGENEOUS, {k: v for k, v in HET.items() if k != "sigmap_e"})
        rec = model_recovery(Family.HOMOGENEOUS, p, Design(12, 8), QUICK, seed=2,
                             families=(Family.STANDARD, Family.PERCOLATION, Family.HOMOGENEOUS))
        pairs = [(r["model_a"], r["model_b"]) for r in rec.table()]
        assert pairs == [("standard", "hom-overwrite"), ("percolation", "hom-overwrite"),
                         ("standard", "percolation")]
        total = (rec.row("standard", "percolation").elpd_diff
                 + rec.row("percolation", "hom-overwrite").elpd_diff)
        assert abs(total - rec.row("standard", "hom-overwrite").elpd_diff) < 1e-9
