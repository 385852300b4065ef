"""Targets with known posteriors, used to validate the sampler and LOO."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class GaussianTarget:
    """Multivariate normal N(mean, cov) on an unconstrained space."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.dim = self.mean.size
        self.precision = np.linalg.inv(self.cov)
        self.draw_names = tuple(f"x[{k + 1}]" for k in range(self.dim))

    def value_and_grad(self, z, data=None):
        r = np.asarray(z) - self.mean
        g = -self.precision @ r
        return 0.5 * float(np.dot(r, g)), g

    def constrain_draws(self, Z):
        return np.asarray(Z, dtype=float).copy()


def standard_normal_target():
    return GaussianTarget([0.0], [[1.0]])


class NormalMeanModel:
    """``y_n ~ Normal(mu, sigma^2)`` with known sigma and ``mu ~ Normal(m0, s0^2)``.

    Data are a 1-D array of observations.  The posterior and every
    leave-one-out predictive density are available in closed form.
    """

    draw_names = ("mu",)
    dim = 1

    def __init__(self, sigma=1.0, prior_mean=0.0, prior_sd=10.0):
        self.sigma = float(sigma)
        self.prior_mean = float(prior_mean)
        self.prior_sd = float(prior_sd)

    def value_and_grad(self, z, y):
        mu = float(z[0])
        y = np.asarray(y, dtype=float)
        r = y - mu
        lp = (-0.5 * float(np.dot(r, r)) / self.sigma**2
              - 0.5 * ((mu - self.prior_mean) / self.prior_sd) ** 2)
        g = float(r.sum()) / self.sigma**2 - (mu - self.prior_mean) / self.prior_sd**2
        return lp, np.array([g])

    def constrain_draws(self, Z):
        return np.asarray(Z, dtype=float).copy()

    def loglik_matrix(self, Z, y):
        mu = np.asarray(Z, dtype=float)[:, :1]
        y = np.asarray(y, dtype=float)[None, :]
        z = (y - mu) / self.sigma
        return -math.log(self.sigma) - HALF_LOG_2PI - 0.5 * z * z

    # -- leave-one-out plumbing -------------------------------------------

    @staticmethod
    def n_obs(y):
        return len(y)

    @staticmethod
    def drop(y, i):
        return np.delete(np.asarray(y), i)

    @staticmethod
    def take(y, i):
        return np.asarray(y)[[i]]

    # -- closed forms ------------------------------------------------------

    def posterior(self, y):
        y = np.asarray(y, dtype=float)
        prec = 1.0 / self.prior_sd**2 + y.size / self.sigma**2
        mean = (self.prior_mean / self.prior_sd**2 + y.sum() / self.sigma**2) / prec
        return mean, math.sqrt(1.0 / prec)

    def loo_predictive_logpdf(self, y):
        """Exact ``log p(y_i | y_-i)`` for each observation."""
        y = np.asarray(y, dtype=float)
        out = np.empty(y.size)
        for i in range(y.size):
            m, s = self.posterior(np.delete(y, i))
            out[i] = stats.norm.logpdf(y[i], m, math.hypot(s, self.sigma))
        return out
