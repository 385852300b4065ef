"""Split-chain convergence diagnostics.

Functions accept either a ``PosteriorDraws`` plus a parameter name, or a
(chains, draws) array directly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats


class DiagnosticUnavailable(ValueError):
    pass


def _as_chains(draws, param=None, min_chains=2):
    if param is not None:
        ary = draws.get(param)
    else:
        ary = draws
    ary = np.asarray(ary, dtype=float)
    if ary.ndim == 1:
        ary = ary[None, :]
    if ary.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    if ary.shape[0] < min_chains:
        raise DiagnosticUnavailable(f"needs at least {min_chains} chains")
    if ary.shape[1] < 4:
        raise DiagnosticUnavailable("needs at least 4 draws per chain")
    return ary


def split_chains(ary):
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def _rhat(ary):
    _, n = ary.shape
    chain_mean = ary.mean(axis=1)
    within = ary.var(axis=1, ddof=1).mean()
    between = n * chain_mean.var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else math.inf
    var_plus = (n - 1) / n * within + between / n
    return math.sqrt(var_plus / within)


def rhat(draws, param=None):
    """Split-chain potential scale reduction factor.

    With no between-chain variance this equals ``sqrt((n - 1) / n)`` for
    half-chains of length ``n``.
    """
    return _rhat(split_chains(_as_chains(draws, param)))


def _autocov(x):
    n = x.size
    x = x - x.mean()
    size = 2 ** math.ceil(math.log2(2 * n))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / n


def _ess(ary):
    """ESS of a (chains, draws) array via Geyer's initial monotone sequence."""
    m, n = ary.shape
    acov = np.array([_autocov(row) for row in ary])
    chain_mean = ary.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if not var_plus > 0:
        return math.nan

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    # enforce monotonically decreasing pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t + 1 : max_t + 2].sum()
    tau = max(tau, 1.0 / math.log10(m * n))
    return m * n / tau


def _z_scale(ary):
    ranks = stats.rankdata(ary, method="average").reshape(ary.shape)
    return stats.norm.ppf((ranks - 0.375) / (ary.size + 0.25))


def ess(draws, param=None):
    """Bulk effective sample size: rank-normalized split chains.

    A chain with no variation at all has no defined ESS; NaN is returned.
    """
    ary = _as_chains(draws, param, min_chains=1)
    if np.ptp(ary) == 0:
        return math.nan
    return _ess(_z_scale(split_chains(ary)))


def ess_mean(draws, param=None):
    """ESS for the posterior mean (split chains, no rank normalization)."""
    ary = _as_chains(draws, param, min_chains=1)
    if np.ptp(ary) == 0:
        return math.nan
    return _ess(split_chains(ary))


def mcse_mean(draws, param=None):
    ary = _as_chains(draws, param, min_chains=1)
    return float(ary.std(ddof=1) / math.sqrt(ess_mean(ary)))


def mcse_sd(draws, param=None):
    ary = _as_chains(draws, param, min_chains=1)
    sd = ary.std(ddof=1)
    centered = ary - ary.mean()
    e = min(ess_mean(centered), ess_mean(centered**2))
    return float(sd * math.sqrt(math.e * (1 - 1 / e) ** (e - 1) - 1))


def mcse_quantile(draws, prob, param=None):
    """MCSE of a quantile from the ESS of the indicator ``x <= q``."""
    ary = _as_chains(draws, param, min_chains=1)
    q = np.quantile(ary, prob)
    indicator = (ary <= q).astype(float)
    e = _ess(split_chains(indicator))
    flat = np.sort(ary.ravel())
    size = flat.size
    lo, hi = stats.beta.ppf([0.1586553, 0.8413447], e * prob + 1, e * (1 - prob) + 1)
    th1 = flat[int(np.clip(math.floor(lo * size), 0, size - 1))]
    th2 = flat[int(np.clip(math.ceil(hi * size), 0, size - 1))]
    return float((th2 - th1) / 2)


def summary_table(draws, names=None):
    """Per-parameter mean, sd, central 95% interval, R-hat and bulk ESS.

    R-hat is ``None`` for single-chain fits.
    """
    names = names or draws.names
    out = {}
    for name in names:
        x = draws.get(name)
        lo, hi = np.quantile(x, [0.025, 0.975])
        try:
            r = rhat(x)
        except DiagnosticUnavailable:
            r = None
        try:
            e = ess(x)
        except DiagnosticUnavailable:
            e = math.nan
        out[name] = {
            "mean": float(x.mean()),
            "sd": float(x.std(ddof=1)),
            "q2.5": float(lo),
            "q97.5": float(hi),
            "rhat": r,
            "ess_bulk": None if math.isnan(e) else float(e),
        }
    return out
