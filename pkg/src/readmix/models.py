"""Hierarchical LogNormal reading-time models.

Four generative families share one crossed varying-intercepts structure,
``mu_ij = beta + u_i + w_j`` with ``u_i ~ Normal(0, sigma_u^2)`` and
``w_j ~ Normal(0, sigma_w^2)``:

* ``standard``: ``y ~ LogNormal(beta_1 + beta_2 * x + u_i + w_j, sigma_e)``.
* ``hom-overwrite``: in both conditions a two-component mixture of
  ``LogNormal(mu + delta, sigma_e)`` (slow, overwritten) and
  ``LogNormal(mu, sigma_e)``; the slow weight is ``prob_hi`` in condition
  -1 and ``prob_lo`` in condition +1.
* ``het-overwrite``: as above but the slow component has its own scale
  ``sigmap_e``.
* ``percolation``: condition +1 trials mix ``LogNormal(mu + gamma, sigma_e)``
  (gamma < 0) with weight ``prob_perc``; condition -1 trials are plain
  ``LogNormal(mu, sigma_e)``.

The latent component indicator is marginalized out.  Densities are
evaluated on an unconstrained vector laid out as
``[named parameters..., u_raw (I), w_raw (J)]`` with random effects
non-centered (``u = sigma_u * u_raw``).  Positive quantities use an
exponential transform, probabilities a logistic one and gamma a negated
exponential; ``delta`` is kept non-negative to break label switching.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit, log_expit

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


class ModelError(ValueError):
    """Configuration error: wrong dimensions or invalid parameter values."""


class NotApplicableError(ModelError):
    """A quantity was requested that the model family does not define."""


class Family(str, enum.Enum):
    STANDARD = "standard"
    HOMOGENEOUS = "hom-overwrite"
    HETEROGENEOUS = "het-overwrite"
    PERCOLATION = "percolation"

    @property
    def is_overwriting(self):
        return self in (Family.HOMOGENEOUS, Family.HETEROGENEOUS)


# name -> (transform, prior kind)
#   transform: location | real | positive | unit | negative | above_sigma_e
#   (location: offset + scale * z, see ModelSpec; above_sigma_e: sigma_e + exp(z),
#   orders the two component scales)
#   prior:     coef (Cauchy) | sd (half-Cauchy) | prob (Beta)
_PARAMETERS = {
    Family.STANDARD: (
        ("beta_1", "location", "coef"),
        ("beta_2", "real", "coef"),
        ("sigma_e", "positive", "sd"),
        ("sigma_u", "positive", "sd"),
        ("sigma_w", "positive", "sd"),
    ),
    Family.HOMOGENEOUS: (
        ("beta", "location", "coef"),
        ("delta", "positive", "coef"),
        ("prob_hi", "unit", "prob"),
        ("prob_lo", "unit", "prob"),
        ("sigma_e", "positive", "sd"),
        ("sigma_u", "positive", "sd"),
        ("sigma_w", "positive", "sd"),
    ),
    Family.HETEROGENEOUS: (
        ("beta", "location", "coef"),
        ("delta", "positive", "coef"),
        ("prob_hi", "unit", "prob"),
        ("prob_lo", "unit", "prob"),
        ("sigma_e", "positive", "sd"),
        ("sigmap_e", "above_sigma_e", "sd"),
        ("sigma_u", "positive", "sd"),
        ("sigma_w", "positive", "sd"),
    ),
    Family.PERCOLATION: (
        ("beta", "location", "coef"),
        ("gamma", "negative", "coef"),
        ("prob_perc", "unit", "prob"),
        ("sigma_e", "positive", "sd"),
        ("sigma_u", "positive", "sd"),
        ("sigma_w", "positive", "sd"),
    ),
}


@dataclass(frozen=True)
class PriorConfig:
    coef_scale: float = 2.5
    sd_scale: float = 2.5
    mix_alpha: float = 1.0
    mix_beta: float = 1.0

    def __post_init__(self):
        for name in ("coef_scale", "sd_scale", "mix_alpha", "mix_beta"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ModelError(f"prior {name} must be positive, got {value!r}")


@dataclass(frozen=True)
class ParameterVector:
    """A parameter point seen in both spaces.

    ``constrained`` maps each named parameter to a float and holds the
    varying intercepts as arrays under ``"u"`` and ``"w"``.
    """

    unconstrained: np.ndarray
    constrained: dict
    log_jacobian: float

    def __getitem__(self, name):
        return self.constrained[name]


# ---------------------------------------------------------------------------
# Scalar building blocks
# ---------------------------------------------------------------------------

def lognormal_logpdf(y, mu, sigma):
    """Log density of LogNormal(mu, sigma^2) at ``y`` (milliseconds)."""
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(y > 0)):
        raise ModelError("lognormal_logpdf requires y > 0")
    if np.any(~(sigma > 0)):
        raise ModelError("lognormal_logpdf requires sigma > 0")
    log_y = np.log(y)
    z = (log_y - mu) / sigma
    out = -log_y - np.log(sigma) - HALF_LOG_2PI - 0.5 * z * z
    return out if out.ndim else float(out)


def log_mix(lam, lp1, lp2):
    """``log(lam * exp(lp1) + (1 - lam) * exp(lp2))`` without overflow."""
    lam = np.asarray(lam, dtype=float)
    if np.any(~((lam >= 0) & (lam <= 1))):
        raise ModelError("mixing probability must lie in [0, 1]")
    lp1 = np.asarray(lp1, dtype=float)
    lp2 = np.asarray(lp2, dtype=float)
    with np.errstate(divide="ignore"):
        a = np.where(lam > 0, np.log(lam) + lp1, -np.inf)
        b = np.where(lam < 1, np.log1p(-lam) + lp2, -np.inf)
    out = np.logaddexp(a, b)
    return out if out.ndim else float(out)


def log_mix_grad(lam, lp1, lp2):
    """Partial derivatives of :func:`log_mix` w.r.t. (lam, lp1, lp2)."""
    total = log_mix(lam, lp1, lp2)
    w1 = np.exp(lp1 - total)
    w2 = np.exp(lp2 - total)
    return w1 - w2, lam * w1, (1 - lam) * w2


def _cauchy_logpdf(x, scale):
    return -math.log(math.pi * scale) - np.log1p((x / scale) ** 2)


def _cauchy_dlogpdf(x, scale):
    return -2.0 * x / (scale * scale + x * x)


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    family: Family
    n_subjects: int
    n_items: int
    priors: PriorConfig = field(default_factory=PriorConfig)
    location_offset: float = 0.0
    location_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n_subjects < 1 or self.n_items < 1:
            raise ModelError("model needs at least one subject and one item")
        if not (math.isfinite(self.location_offset) and self.location_scale > 0
                and math.isfinite(self.location_scale)):
            raise ModelError("location offset must be finite and scale positive")

    @classmethod
    def for_data(cls, family, d, priors=None):
        """Spec for ``d`` whose intercept is sampled as mean + sd * z of the
        log reading times, so random inits start inside the data range.  Only
        the sampling coordinates change; the prior stays on the intercept."""
        log_rt = np.asarray(d.log_rt, dtype=float)
        sd = float(log_rt.std()) if log_rt.size > 1 else 0.0
        return cls(Family(family), d.n_subjects, d.n_items, priors or PriorConfig(),
                   location_offset=float(log_rt.mean()),
                   location_scale=sd if sd > 0 else 1.0)

    # -- layout ------------------------------------------------------------

    @property
    def parameter_names(self):
        return tuple(p[0] for p in _PARAMETERS[self.family])

    @property
    def n_named(self):
        return len(_PARAMETERS[self.family])

    @property
    def dim(self):
        return self.n_named + self.n_subjects + self.n_items

    @property
    def draw_names(self):
        """Column names of stored (constrained) draws."""
        return (
            self.parameter_names
            + tuple(f"u[{k + 1}]" for k in range(self.n_subjects))
            + tuple(f"w[{k + 1}]" for k in range(self.n_items))
        )

    def _check(self, d):
        if d.n_subjects != self.n_subjects or d.n_items != self.n_items:
            raise ModelError(
                f"model expects {self.n_subjects} subjects and {self.n_items} items, "
                f"data has {d.n_subjects} and {d.n_items}"
            )

    # -- transforms --------------------------------------------------------

    def constrain(self, z) -> ParameterVector:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ModelError(f"expected vector of length {self.dim}, got shape {z.shape}")
        values = {}
        log_jac = 0.0
        for k, (name, kind, _) in enumerate(_PARAMETERS[self.family]):
            x = z[k]
            if kind == "location":
                values[name] = self.location_offset + self.location_scale * float(x)
                log_jac += math.log(self.location_scale)
            elif kind == "real":
                values[name] = float(x)
            elif kind == "positive":
                values[name] = math.exp(x)
                log_jac += x
            elif kind == "negative":
                values[name] = -math.exp(x)
                log_jac += x
            elif kind == "above_sigma_e":
                values[name] = values["sigma_e"] + math.exp(x)
                log_jac += x
            else:
                values[name] = float(expit(x))
                log_jac += float(log_expit(x) + log_expit(-x))
        i0 = self.n_named
        i1 = i0 + self.n_subjects
        values["u"] = values["sigma_u"] * z[i0:i1]
        values["w"] = values["sigma_w"] * z[i1:]
        return ParameterVector(z.copy(), values, log_jac)

    def unconstrain(self, values) -> ParameterVector:
        """Inverse of :meth:`constrain` from a mapping of constrained values."""
        z = np.empty(self.dim)
        for k, (name, kind, _) in enumerate(_PARAMETERS[self.family]):
            x = float(values[name])
            if kind == "location":
                z[k] = (x - self.location_offset) / self.location_scale
            elif kind == "real":
                z[k] = x
            elif kind == "positive":
                if not x > 0:
                    raise ModelError(f"{name} must be positive, got {x}")
                z[k] = math.log(x)
            elif kind == "negative":
                if not x < 0:
                    raise ModelError(f"{name} must be negative, got {x}")
                z[k] = math.log(-x)
            elif kind == "above_sigma_e":
                floor = float(values["sigma_e"])
                if not x > floor:
                    raise ModelError(f"{name} must exceed sigma_e = {floor}, got {x}")
                z[k] = math.log(x - floor)
            else:
                if not 0 < x < 1:
                    raise ModelError(f"{name} must lie in (0, 1), got {x}")
                z[k] = math.log(x) - math.log1p(-x)
        i0 = self.n_named
        i1 = i0 + self.n_subjects
        u = np.asarray(values.get("u", np.zeros(self.n_subjects)), dtype=float)
        w = np.asarray(values.get("w", np.zeros(self.n_items)), dtype=float)
        if u.shape != (self.n_subjects,) or w.shape != (self.n_items,):
            raise ModelError("random-effect vectors have the wrong length")
        z[i0:i1] = u / float(values["sigma_u"])
        z[i1:] = w / float(values["sigma_w"])
        return self.constrain(z)

    def constrain_draws(self, Z):
        """Map an (S, dim) array of unconstrained draws to (S, len(draw_names))."""
        Z = np.asarray(Z, dtype=float)
        out = np.empty_like(Z)
        for k, (_, kind, _) in enumerate(_PARAMETERS[self.family]):
            if kind == "location":
                out[:, k] = self.location_offset + self.location_scale * Z[:, k]
            elif kind == "real":
                out[:, k] = Z[:, k]
            elif kind == "positive":
                out[:, k] = np.exp(Z[:, k])
            elif kind == "negative":
                out[:, k] = -np.exp(Z[:, k])
            elif kind == "above_sigma_e":
                out[:, k] = out[:, self.parameter_names.index("sigma_e")] + np.exp(Z[:, k])
            else:
                out[:, k] = expit(Z[:, k])
        names = self.parameter_names
        i0 = self.n_named
        i1 = i0 + self.n_subjects
        out[:, i0:i1] = out[:, [names.index("sigma_u")]] * Z[:, i0:i1]
        out[:, i1:] = out[:, [names.index("sigma_w")]] * Z[:, i1:]
        return out

    # -- densities ---------------------------------------------------------

    def _terms(self, values, d, want_grad):
        """Pointwise log-likelihood and, optionally, partials w.r.t. the
        location vector and the family's scalar parameters."""
        fam = self.family
        log_y = d.log_rt
        u = np.asarray(values["u"], dtype=float)
        w = np.asarray(values["w"], dtype=float)
        x = d.condition
        if fam is Family.STANDARD:
            mu = values["beta_1"] + values["beta_2"] * x + u[d.subject] + w[d.item]
            s = values["sigma_e"]
            zz = (log_y - mu) / s
            ll = -log_y - math.log(s) - HALF_LOG_2PI - 0.5 * zz * zz
            if not want_grad:
                return ll, None
            gmu = zz / s
            return ll, {
                "mu": gmu,
                "beta_2": float(np.dot(gmu, x)),
                "log_sigma_e": float(np.dot(zz, zz)) - zz.size,
            }

        mu = values["beta"] + u[d.subject] + w[d.item]
        s_base = values["sigma_e"]
        if fam is Family.PERCOLATION:
            shift = values["gamma"]
            s_shift = s_base
            p = values["prob_perc"]
            mixed = x == 1
            prob = np.where(mixed, p, 0.0)
        else:
            shift = values["delta"]
            s_shift = values["sigmap_e"] if fam is Family.HETEROGENEOUS else s_base
            prob = np.where(x == 1, values["prob_lo"], values["prob_hi"])
            mixed = None

        z_base = (log_y - mu) / s_base
        z_shift = (log_y - mu - shift) / s_shift
        lp_base = -log_y - math.log(s_base) - HALF_LOG_2PI - 0.5 * z_base * z_base
        lp_shift = -log_y - math.log(s_shift) - HALF_LOG_2PI - 0.5 * z_shift * z_shift
        with np.errstate(divide="ignore"):
            a = np.log(prob) + lp_shift
            b = np.log1p(-prob) + lp_base
        ll = np.logaddexp(a, b)
        if not want_grad:
            return ll, None
        r = np.exp(a - ll)  # posterior weight of the shifted component
        q = 1.0 - r
        gmu = r * z_shift / s_shift + q * z_base / s_base
        g_shift = float(np.dot(r, z_shift)) / s_shift
        g_log_shift_sd = float(np.dot(r, z_shift * z_shift - 1.0))
        g_log_base_sd = float(np.dot(q, z_base * z_base - 1.0))
        r_minus_p = r - prob
        out = {"mu": gmu, "shift": g_shift}
        if fam is Family.HETEROGENEOUS:
            out["log_sigma_e"] = g_log_base_sd
            out["log_sigmap_e"] = g_log_shift_sd
        else:
            out["log_sigma_e"] = g_log_base_sd + g_log_shift_sd
        if fam is Family.PERCOLATION:
            out["logit_prob_perc"] = float(r_minus_p[mixed].sum())
        else:
            out["logit_prob_lo"] = float(r_minus_p[x == 1].sum())
            out["logit_prob_hi"] = float(r_minus_p[x == -1].sum())
        return ll, out

    def pointwise_loglik(self, theta, d):
        """Per-trial log-likelihood, aligned with the dataset's trial order.

        ``theta`` is a :class:`ParameterVector` or a mapping of constrained
        values (which may sit on a boundary such as ``delta = 0``).
        """
        self._check(d)
        values = theta.constrained if isinstance(theta, ParameterVector) else theta
        u = np.asarray(values["u"])
        w = np.asarray(values["w"])
        if u.shape != (self.n_subjects,) or w.shape != (self.n_items,):
            raise ModelError("random-effect vectors have the wrong length")
        missing = [n for n in self.parameter_names if n not in values]
        if missing:
            raise ModelError(f"missing parameters: {', '.join(missing)}")
        ll, _ = self._terms(values, d, want_grad=False)
        return ll

    def log_prior(self, theta):
        """Prior log density of constrained parameters (no Jacobian)."""
        values = theta.constrained if isinstance(theta, ParameterVector) else theta
        pr = self.priors
        total = 0.0
        for name, kind, prior in _PARAMETERS[self.family]:
            x = values[name]
            if kind == "above_sigma_e":
                # two exchangeable half-Cauchy scales restricted to one ordering
                total += LOG_2
            if prior == "coef":
                total += _cauchy_logpdf(x, pr.coef_scale)
            elif prior == "sd":
                total += LOG_2 + _cauchy_logpdf(x, pr.sd_scale)
            else:
                total += ((pr.mix_alpha - 1) * math.log(x)
                          + (pr.mix_beta - 1) * math.log1p(-x)
                          - betaln(pr.mix_alpha, pr.mix_beta))
        u_raw = np.asarray(values["u"]) / values["sigma_u"]
        w_raw = np.asarray(values["w"]) / values["sigma_w"]
        n_raw = u_raw.size + w_raw.size
        total += -0.5 * (np.dot(u_raw, u_raw) + np.dot(w_raw, w_raw)) - n_raw * HALF_LOG_2PI
        return float(total)

    def log_posterior(self, z, d):
        lp, _ = self._evaluate(z, d, want_grad=False)
        return lp

    def grad_log_posterior(self, z, d):
        _, g = self._evaluate(z, d, want_grad=True)
        return g

    def value_and_grad(self, z, d):
        return self._evaluate(z, d, want_grad=True)

    def _evaluate(self, z, d, want_grad):
        self._check(d)
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ModelError(f"expected vector of length {self.dim}, got shape {z.shape}")
        with np.errstate(all="ignore"):
            try:
                lp, grad = self._evaluate_unchecked(z, d, want_grad)
            except (OverflowError, ValueError, ZeroDivisionError):
                lp, grad = -math.inf, (np.full(self.dim, np.nan) if want_grad else None)
        if not math.isfinite(lp):
            lp = -math.inf
        return lp, grad

    def _evaluate_unchecked(self, z, d, want_grad):
        pv = self.constrain(z)
        values = pv.constrained
        ll, parts = self._terms(values, d, want_grad)
        lp = float(ll.sum()) + self.log_prior(values) + pv.log_jacobian
        if not want_grad:
            return lp, None

        pr = self.priors
        g = np.zeros(self.dim)
        i0 = self.n_named
        i1 = i0 + self.n_subjects
        u_raw = z[i0:i1]
        w_raw = z[i1:]
        sigma_u = values["sigma_u"]
        sigma_w = values["sigma_w"]
        g_u = np.bincount(d.subject, weights=parts["mu"], minlength=self.n_subjects)
        g_w = np.bincount(d.item, weights=parts["mu"], minlength=self.n_items)
        g[i0:i1] = sigma_u * g_u - u_raw
        g[i1:] = sigma_w * g_w - w_raw
        g_sum_mu = float(parts["mu"].sum())

        for k, (name, kind, prior) in enumerate(_PARAMETERS[self.family]):
            x = values[name]
            if name in ("beta", "beta_1"):
                gk = self.location_scale * (g_sum_mu + _cauchy_dlogpdf(x, pr.coef_scale))
            elif name == "beta_2":
                gk = parts["beta_2"] + _cauchy_dlogpdf(x, pr.coef_scale)
            elif name in ("delta", "gamma"):
                # d/dz of loglik + Cauchy prior + log|dx/dz| with x = +-exp(z)
                gk = x * (parts["shift"] + _cauchy_dlogpdf(x, pr.coef_scale)) + 1.0
            elif name == "sigma_u":
                gk = sigma_u * float(np.dot(u_raw, g_u))
                gk += x * _cauchy_dlogpdf(x, pr.sd_scale) + 1.0
            elif name == "sigma_w":
                gk = sigma_w * float(np.dot(w_raw, g_w))
                gk += x * _cauchy_dlogpdf(x, pr.sd_scale) + 1.0
            elif kind == "positive":  # sigma_e
                gk = parts["log_" + name] + x * _cauchy_dlogpdf(x, pr.sd_scale) + 1.0
            elif kind == "above_sigma_e":
                # sigmap_e = sigma_e + exp(z): chain rule reaches z_sigma_e too
                g_p = parts["log_" + name] / x + _cauchy_dlogpdf(x, pr.sd_scale)
                gk = g_p * (x - values["sigma_e"]) + 1.0
                g[self.parameter_names.index("sigma_e")] += g_p * values["sigma_e"]
            else:  # mixing probability on the logit scale, Beta prior + Jacobian
                gk = (parts["logit_" + name]
                      + pr.mix_alpha * (1.0 - x) - pr.mix_beta * x)
            g[k] += gk
        return lp, g

    def loglik_matrix(self, Z, d):
        """Pointwise log-likelihood for each row of an (S, dim) draw array."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.empty((Z.shape[0], len(d)))
        with np.errstate(all="ignore"):
            for s in range(Z.shape[0]):
                out[s] = self._terms(self.constrain(Z[s]).constrained, d, False)[0]
        return out


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------

def summarize_values(x):
    x = np.asarray(x, dtype=float).ravel()
    lo, hi = np.quantile(x, [0.025, 0.975])
    return {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
            "q2.5": float(lo), "q97.5": float(hi)}


def diffprob(draws, spec):
    """Per-draw ``prob_hi - prob_lo`` with shape (chains, draws)."""
    if not Family(spec.family).is_overwriting:
        raise NotApplicableError(f"diffprob is not defined for the {Family(spec.family).value} model")
    return draws.get("prob_hi") - draws.get("prob_lo")


def effect_summary(draws, spec, include_random_effects=False):
    """Posterior mean, sd and central 95% interval for each named parameter,
    plus ``diffprob`` for the overwriting families."""
    out = {name: summarize_values(draws.get(name)) for name in spec.parameter_names}
    if Family(spec.family).is_overwriting:
        out["diffprob"] = summarize_values(diffprob(draws, spec))
    if include_random_effects:
        for name in spec.draw_names[spec.n_named:]:
            out[name] = summarize_values(draws.get(name))
    return out
