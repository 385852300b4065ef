"""Synthetic data from the four generative models, and recovery studies.

Simulated designs cross every subject with every item; conditions follow
an alternating Latin square so each subject sees each item in exactly one
condition.  The per-trial latent component (1 = shifted component:
overwriting slow-down, or percolation speed-up) is returned alongside the
dataset and never written into the CSV.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diagnostics
from .data import Dataset
from .loo import compare_all, elpd_loo
from .models import Family, ModelSpec, PriorConfig, diffprob, _PARAMETERS
from .sampler import SamplerConfig, sample

TABLE_ORDER = (Family.STANDARD, Family.PERCOLATION, Family.HOMOGENEOUS, Family.HETEROGENEOUS)

# Headline pairings first (standard-hom, percolation-hom, hom-het), then the rest.
TABLE_PAIRS = (
    (Family.STANDARD, Family.HOMOGENEOUS),
    (Family.PERCOLATION, Family.HOMOGENEOUS),
    (Family.HOMOGENEOUS, Family.HETEROGENEOUS),
    (Family.STANDARD, Family.PERCOLATION),
    (Family.STANDARD, Family.HETEROGENEOUS),
    (Family.PERCOLATION, Family.HETEROGENEOUS),
)


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Design:
    n_subjects: int = 40
    n_items: int = 24
    trials_per_cell: int = 1

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_items < 1 or self.trials_per_cell < 1:
            raise DesignError("design sizes must be positive")
        if self.n_subjects * self.n_items < 2:
            raise DesignError("a single subject x item cell cannot hold both conditions")

    def layout(self):
        """(subject, item, condition) arrays, subject-major, 0-based."""
        s, i, _ = np.meshgrid(np.arange(self.n_subjects), np.arange(self.n_items),
                              np.arange(self.trials_per_cell), indexing="ij")
        s = s.ravel()
        i = i.ravel()
        condition = np.where((s + i) % 2 == 0, 1, -1)
        return s, i, condition


@dataclass(frozen=True)
class TrueParams:
    """Constrained parameter values used to generate data.

    Boundary values are allowed for simulation (``sigma_u = 0``,
    probabilities of exactly 0 or 1, ``delta = 0``).
    """

    family: Family
    values: dict

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        names = [p[0] for p in _PARAMETERS[family]]
        missing = [n for n in names if n not in self.values]
        if missing:
            raise DesignError(f"missing true values for {', '.join(missing)}")
        v = {n: float(self.values[n]) for n in names}
        for name, kind, _ in _PARAMETERS[family]:
            x = v[name]
            if not math.isfinite(x):
                raise DesignError(f"{name} must be finite")
            if name in ("sigma_u", "sigma_w") and x < 0:
                raise DesignError(f"{name} must be >= 0")
            if name in ("sigma_e", "sigmap_e") and not x > 0:
                raise DesignError(f"{name} must be > 0")
            if name == "delta" and x < 0:
                raise DesignError("delta must be >= 0")
            if name == "gamma" and not x < 0:
                raise DesignError("gamma must be < 0")
            if kind == "unit" and not 0 <= x <= 1:
                raise DesignError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def __getitem__(self, name):
        return self.values[name]

    def truth(self):
        """True values of every reported quantity, including diffprob."""
        out = dict(self.values)
        if self.family.is_overwriting:
            out["diffprob"] = out["prob_hi"] - out["prob_lo"]
        return out


def simulate_with_latent(family, params: TrueParams, design: Design, seed):
    """Simulate a dataset; also return the per-trial latent component (0/1)."""
    family = Family(family)
    if params.family is not family:
        raise DesignError(f"parameters are for {params.family.value}, not {family.value}")
    rng = np.random.default_rng(seed)
    v = params.values
    subject, item, condition = design.layout()
    n = subject.size
    u = rng.normal(0.0, 1.0, design.n_subjects) * v["sigma_u"]
    w = rng.normal(0.0, 1.0, design.n_items) * v["sigma_w"]
    base = v["beta_1"] + v["beta_2"] * condition if family is Family.STANDARD else v["beta"]
    mu = base + u[subject] + w[item]

    if family is Family.STANDARD:
        prob = np.zeros(n)
        shift = 0.0
    elif family is Family.PERCOLATION:
        prob = np.where(condition == 1, v["prob_perc"], 0.0)
        shift = v["gamma"]
    else:
        prob = np.where(condition == 1, v["prob_lo"], v["prob_hi"])
        shift = v["delta"]
    component = (rng.random(n) < prob).astype(np.int8)

    sd = np.full(n, v["sigma_e"])
    if family is Family.HETEROGENEOUS:
        sd[component == 1] = v["sigmap_e"]
    log_rt = mu + shift * component + sd * rng.standard_normal(n)
    d = Dataset.from_arrays(subject, item, condition, np.exp(log_rt),
                            n_subjects=design.n_subjects, n_items=design.n_items)
    return d, component


def simulate(family, params: TrueParams, design: Design, seed) -> Dataset:
    return simulate_with_latent(family, params, design, seed)[0]


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Parameter recovery
# ---------------------------------------------------------------------------

@dataclass
class RecoveryReport:
    family: str
    truth: dict
    design: dict
    n_replications: int
    level: float
    covered: dict = field(default_factory=dict)        # name -> list[bool]
    posterior_mean: dict = field(default_factory=dict)  # name -> list[float]
    upper: dict = field(default_factory=dict)           # name -> list[float]
    max_rhat: list = field(default_factory=list)
    divergences: list = field(default_factory=list)
    n_post_warmup: int = 0
    excluded: list = field(default_factory=list)

    @property
    def n_used(self):
        return self.n_replications - len(self.excluded)

    def _kept(self, values):
        return [x for r, x in enumerate(values) if r not in self.excluded]

    def coverage(self):
        return {k: float(np.mean(self._kept(v))) for k, v in self.covered.items()}

    def covered_count(self):
        return {k: int(np.sum(self._kept(v))) for k, v in self.covered.items()}

    def bias(self):
        return {k: float(np.mean(self._kept(v)) - self.truth[k])
                for k, v in self.posterior_mean.items()}

    def to_dict(self):
        return {
            "family": self.family,
            "truth": self.truth,
            "design": self.design,
            "n_replications": self.n_replications,
            "n_excluded": len(self.excluded),
            "excluded": self.excluded,
            "level": self.level,
            "coverage": self.coverage(),
            "covered_count": self.covered_count(),
            "bias": self.bias(),
            "posterior_mean": self.posterior_mean,
            "max_rhat": self.max_rhat,
            "divergences": self.divergences,
            "n_post_warmup": self.n_post_warmup,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def fit_quantities(fit, spec):
    """Draws (chains, draws) of every reported named quantity."""
    out = {name: fit.get(name) for name in spec.parameter_names}
    if spec.family.is_overwriting:
        out["diffprob"] = diffprob(fit, spec)
    return out


def recovery_study(family, params: TrueParams, design: Design, n_replications,
                   cfg: SamplerConfig, seed=0, level=0.95, rhat_threshold=1.05,
                   priors=None, progress=None):
    """Simulate-and-fit ``n_replications`` times and score interval coverage.

    Replications whose worst R-hat over named parameters exceeds
    ``rhat_threshold`` are flagged and left out of coverage and bias.
    """
    family = Family(family)
    if n_replications < 1:
        raise DesignError("n_replications must be >= 1")
    truth = params.truth()
    report = RecoveryReport(family.value, truth, asdict(design), n_replications, level)
    tail = (1 - level) / 2
    for r in range(n_replications):
        d = simulate(family, params, design, derive_seed(seed, r, 0))
        spec = ModelSpec.for_data(family, d, priors)
        run_cfg = _with_seed(cfg, derive_seed(seed, r, 1))
        fit = sample(spec, d, run_cfg, store_loglik=False)
        quantities = fit_quantities(fit, spec)
        worst = 1.0
        for name, x in quantities.items():
            lo, hi = np.quantile(x, [tail, 1 - tail])
            report.covered.setdefault(name, []).append(bool(lo <= truth[name] <= hi))
            report.posterior_mean.setdefault(name, []).append(float(x.mean()))
            report.upper.setdefault(name, []).append(float(hi))
            if fit.n_chains > 1 and name != "diffprob":
                worst = max(worst, diagnostics.rhat(x))
        report.max_rhat.append(worst)
        report.divergences.append(int(fit.divergences().sum()))
        report.n_post_warmup = fit.n_samples
        if worst > rhat_threshold:
            report.excluded.append(r)
        if progress:
            progress(r, report)
    return report


def _with_seed(cfg, seed):
    return SamplerConfig(**{**asdict(cfg), "seed": seed})


# ---------------------------------------------------------------------------
# Model recovery
# ---------------------------------------------------------------------------

@dataclass
class ModelRecovery:
    truth_family: str
    dataset: Dataset
    fits: dict
    loo: dict
    rows: list

    def table(self):
        return [
            {"model_a": r.model_a, "model_b": r.model_b,
             "elpd_diff": r.elpd_diff, "se_diff": r.se_diff}
            for r in self.rows
        ]

    def row(self, a, b):
        a, b = Family(a).value, Family(b).value
        for r in self.rows:
            if (r.model_a, r.model_b) == (a, b):
                return r
        raise KeyError((a, b))


def model_recovery(truth_family, params: TrueParams, design: Design,
                   cfg: SamplerConfig, seed=0, priors=None, families=TABLE_ORDER):
    """Fit every family to one simulated dataset and compare them by PSIS-LOO."""
    d = simulate(truth_family, params, design, derive_seed(seed, 0))
    priors = priors or PriorConfig()
    fits, loo = {}, {}
    for k, fam in enumerate(families):
        fam = Family(fam)
        spec = ModelSpec.for_data(fam, d, priors)
        fits[fam.value] = sample(spec, d, _with_seed(cfg, derive_seed(seed, 1, k)))
        loo[fam.value] = elpd_loo(fits[fam.value])
    names = [Family(f).value for f in families]
    pairs = [(a.value, b.value) for a, b in TABLE_PAIRS if a.value in names and b.value in names]
    rows = compare_all(loo, pairs)
    return ModelRecovery(Family(truth_family).value, d, fits, loo, rows)
