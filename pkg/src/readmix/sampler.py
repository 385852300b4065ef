"""No-U-turn Hamiltonian Monte Carlo with windowed warmup adaptation.

The transition is the multinomial variant of the no-U-turn sampler: the
trajectory doubles in a random direction until the generalized U-turn
criterion fails (checked across the merged tree and across the two
subtrees being merged), a leapfrog step produces an energy error above
``MAX_DELTA_H``, or ``max_tree_depth`` is reached.  The next state is drawn
from the trajectory with probability proportional to ``exp(-H)``, biased
towards the newest subtree at the top level.

Warmup adapts the step size by dual averaging towards ``target_accept``
and a diagonal inverse metric from the draw variances of a sequence of
doubling slow windows, framed by a fast initial (15%) and terminal (10%)
interval.

Any object providing ``dim``, ``draw_names``, ``value_and_grad(z, data)``
and ``constrain_draws(Z)`` can be sampled; ``loglik_matrix(Z, data)`` is
used when present to store per-trial log-likelihoods.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

MAX_DELTA_H = 1000.0
INIT_ATTEMPTS = 100


class SamplerError(RuntimeError):
    pass


class InitializationError(SamplerError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    init_radius: float = 2.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.n_warmup < 150:
            raise ValueError("n_warmup must be >= 150")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 1 <= self.max_tree_depth <= 15:
            raise ValueError("max_tree_depth must lie in [1, 15]")
        if not self.init_radius > 0:
            raise ValueError("init_radius must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class PosteriorDraws:
    """Post-warmup draws of one fit.

    ``values[c, s, k]`` is draw ``s`` of chain ``c`` for ``names[k]`` on the
    constrained scale; ``loglik[c, s, i]`` is trial ``i``'s log-likelihood
    under that draw.
    """

    names: tuple
    values: np.ndarray
    unconstrained: np.ndarray
    loglik: np.ndarray | None = None
    divergent: np.ndarray | None = None
    tree_depth: np.ndarray | None = None
    n_leapfrog: np.ndarray | None = None
    accept_stat: np.ndarray | None = None
    energy: np.ndarray | None = None
    step_size: np.ndarray | None = None
    inv_metric: np.ndarray | None = None
    warmup_divergences: np.ndarray | None = None
    max_tree_depth: int = 10
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.values.shape[0]

    @property
    def n_draws(self):
        return self.values.shape[1]

    @property
    def n_samples(self):
        return self.n_chains * self.n_draws

    def get(self, name):
        """Draws of one quantity as a (chains, draws) array."""
        try:
            k = self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}") from None
        return self.values[:, :, k]

    def divergences(self):
        """Post-warmup divergent transitions per chain."""
        if self.divergent is None:
            return np.zeros(self.n_chains, dtype=int)
        return self.divergent.sum(axis=1)

    def flat_loglik(self):
        """Log-likelihood as an (S, N) matrix, chains concatenated."""
        if self.loglik is None:
            raise ValueError("draws carry no pointwise log-likelihood")
        c, s, n = self.loglik.shape
        return self.loglik.reshape(c * s, n)


# ---------------------------------------------------------------------------
# Adaptation
# ---------------------------------------------------------------------------

class DualAveraging:
    """Step-size adaptation by dual averaging (gamma=0.05, t0=10, kappa=0.75)."""

    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, step_size, target):
        self.target = target
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat):
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


class WelfordVariance:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self):
        n = self.n
        var = self.m2 / (n - 1.0)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def warmup_windows(n_warmup, base_window=25):
    """Slow-window ``(start, end)`` iteration ranges for metric adaptation.

    The first 15% of warmup and the final 10% are fast intervals (step
    size only); windows in between double in length, the last one
    stretched to the terminal interval.
    """
    init = int(0.15 * n_warmup)
    term = int(0.1 * n_warmup)
    slow_end = n_warmup - term
    windows = []
    start = init
    size = base_window
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        windows.append((start, end))
        start = end
        size *= 2
    return windows


# ---------------------------------------------------------------------------
# Transition
# ---------------------------------------------------------------------------

class _Subtree:
    __slots__ = ("valid", "end", "proposal", "log_sum_weight", "rho",
                 "p_beg", "p_end", "p_sharp_beg", "p_sharp_end")


def _turning(p_sharp_minus, p_sharp_plus, rho):
    return not (np.dot(p_sharp_plus, rho) > 0 and np.dot(p_sharp_minus, rho) > 0)


class NUTSKernel:
    """Single-chain transition kernel with a diagonal metric."""

    def __init__(self, log_density_and_grad, dim, rng, max_tree_depth=10):
        self.f = log_density_and_grad
        self.dim = dim
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.step_size = 1.0
        self.inv_metric = np.ones(dim)
        self._reset_stats()

    def _reset_stats(self):
        self.n_leapfrog = 0
        self.sum_metro_prob = 0.0
        self.divergent = False

    def sample_momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def hamiltonian(self, logp, p):
        h = -logp + 0.5 * float(np.dot(p, self.inv_metric * p))
        return h if math.isfinite(h) else math.inf

    def leapfrog(self, q, p, grad, eps):
        p = p + 0.5 * eps * grad
        q = q + eps * self.inv_metric * p
        logp, grad = self.f(q)
        p = p + 0.5 * eps * grad
        return q, p, logp, grad

    def find_reasonable_step_size(self, q, logp, grad):
        """Double or halve the step size until one leapfrog step crosses an
        acceptance probability of 1/2."""
        log_half = math.log(0.5)
        eps = self.step_size

        def delta_h(eps):
            p = self.sample_momentum()
            h0 = self.hamiltonian(logp, p)
            _, p1, logp1, _ = self.leapfrog(q, p, grad, eps)
            return h0 - self.hamiltonian(logp1, p1)

        d = delta_h(eps)
        direction = 1 if d > log_half else -1
        for _ in range(200):
            d = delta_h(eps)
            if direction == 1 and not d > log_half:
                break
            if direction == -1 and not d < log_half:
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7:
                raise SamplerError("posterior is improper: step size diverged")
            if eps == 0:
                raise SamplerError("no acceptably small step size found")
        self.step_size = eps
        return eps

    def transition(self, q, logp, grad):
        """One NUTS iteration from ``q``; returns the new state and stats."""
        self._reset_stats()
        rng = self.rng
        p0 = self.sample_momentum()
        h0 = self.hamiltonian(logp, p0)
        p_sharp0 = self.inv_metric * p0

        fwd_end = (q, p0, logp, grad)
        bck_end = fwd_end
        sample = (q, logp, grad)

        p_fwd_bck = p_bck_fwd = p0
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = p_sharp0
        rho = p0.copy()
        log_sum_weight = 0.0
        depth = 0

        while depth < self.max_tree_depth:
            if rng.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
                tree = self._build_tree(depth, fwd_end, 1.0, h0)
                fwd_end = tree.end
                rho_fwd = tree.rho
                p_fwd_bck = tree.p_beg
                ps_fwd_bck, ps_fwd_fwd = tree.p_sharp_beg, tree.p_sharp_end
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
                tree = self._build_tree(depth, bck_end, -1.0, h0)
                bck_end = tree.end
                rho_bck = tree.rho
                p_bck_fwd = tree.p_beg
                ps_bck_fwd, ps_bck_bck = tree.p_sharp_beg, tree.p_sharp_end

            if not tree.valid:
                break
            depth += 1

            if tree.log_sum_weight > log_sum_weight:
                sample = tree.proposal
            elif rng.uniform() < math.exp(tree.log_sum_weight - log_sum_weight):
                sample = tree.proposal
            log_sum_weight = np.logaddexp(log_sum_weight, tree.log_sum_weight)

            rho = rho_bck + rho_fwd
            if (_turning(ps_bck_bck, ps_fwd_fwd, rho)
                    or _turning(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                    or _turning(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)):
                break

        accept = self.sum_metro_prob / max(self.n_leapfrog, 1)
        q_new, logp_new, grad_new = sample
        stats = {
            "accept_stat": accept,
            "tree_depth": depth,
            "n_leapfrog": self.n_leapfrog,
            "divergent": self.divergent,
            "energy": h0,
        }
        return q_new, logp_new, grad_new, stats

    def _build_tree(self, depth, start, sign, h0):
        if depth == 0:
            q, p, logp, grad = self.leapfrog(start[0], start[1], start[3],
                                             sign * self.step_size)
            self.n_leapfrog += 1
            h = self.hamiltonian(logp, p)
            if h - h0 > MAX_DELTA_H:
                self.divergent = True
            self.sum_metro_prob += 1.0 if h0 - h > 0 else math.exp(h0 - h)
            t = _Subtree()
            t.end = (q, p, logp, grad)
            t.proposal = (q, logp, grad)
            t.log_sum_weight = h0 - h
            t.rho = p
            t.p_beg = t.p_end = p
            t.p_sharp_beg = t.p_sharp_end = self.inv_metric * p
            t.valid = not self.divergent
            return t

        init = self._build_tree(depth - 1, start, sign, h0)
        if not init.valid:
            return init
        final = self._build_tree(depth - 1, init.end, sign, h0)
        if not final.valid:
            return final

        t = _Subtree()
        t.end = final.end
        t.log_sum_weight = np.logaddexp(init.log_sum_weight, final.log_sum_weight)
        if final.log_sum_weight > t.log_sum_weight:
            t.proposal = final.proposal
        elif self.rng.uniform() < math.exp(final.log_sum_weight - t.log_sum_weight):
            t.proposal = final.proposal
        else:
            t.proposal = init.proposal
        t.rho = init.rho + final.rho
        t.p_beg, t.p_sharp_beg = init.p_beg, init.p_sharp_beg
        t.p_end, t.p_sharp_end = final.p_end, final.p_sharp_end
        t.valid = not (
            _turning(t.p_sharp_beg, t.p_sharp_end, t.rho)
            or _turning(t.p_sharp_beg, final.p_sharp_beg, init.rho + final.p_beg)
            or _turning(init.p_sharp_end, t.p_sharp_end, final.rho + init.p_end)
        )
        return t


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def chain_rng(seed, chain):
    """Independent stream for ``chain``; unaffected by the number of chains."""
    return np.random.default_rng([int(seed), int(chain)])


def _initialize(f, dim, rng, radius):
    for _ in range(INIT_ATTEMPTS):
        q = rng.uniform(-radius, radius, size=dim)
        logp, grad = f(q)
        if math.isfinite(logp) and np.all(np.isfinite(grad)):
            return q, logp, grad
    raise InitializationError(
        f"no finite log density found in {INIT_ATTEMPTS} random initializations"
    )


def run_chain(model, data, cfg: SamplerConfig, chain: int):
    """Warm up and sample a single chain; returns a dict of arrays."""
    rng = chain_rng(cfg.seed, chain)

    def f(q):
        return model.value_and_grad(q, data)

    dim = model.dim
    q, logp, grad = _initialize(f, dim, rng, cfg.init_radius)
    kernel = NUTSKernel(f, dim, rng, cfg.max_tree_depth)
    kernel.find_reasonable_step_size(q, logp, grad)
    adapt = DualAveraging(kernel.step_size, cfg.target_accept)

    windows = warmup_windows(cfg.n_warmup)
    window_ends = {end: start for start, end in windows}
    in_window = np.zeros(cfg.n_warmup, dtype=bool)
    for start, end in windows:
        in_window[start:end] = True
    estimator = WelfordVariance(dim)
    warmup_div = 0

    for it in range(cfg.n_warmup):
        q, logp, grad, st = kernel.transition(q, logp, grad)
        warmup_div += st["divergent"]
        kernel.step_size = adapt.update(st["accept_stat"])
        if in_window[it]:
            estimator.add(q)
        if (it + 1) in window_ends:
            kernel.inv_metric = estimator.regularized()
            estimator = WelfordVariance(dim)
            kernel.find_reasonable_step_size(q, logp, grad)
            adapt.restart(kernel.step_size)
    kernel.step_size = adapt.final()

    n = cfg.n_draws
    Z = np.empty((n, dim))
    out = {
        "divergent": np.zeros(n, dtype=bool),
        "tree_depth": np.zeros(n, dtype=np.int64),
        "n_leapfrog": np.zeros(n, dtype=np.int64),
        "accept_stat": np.zeros(n),
        "energy": np.zeros(n),
    }
    for it in range(n):
        q, logp, grad, st = kernel.transition(q, logp, grad)
        Z[it] = q
        for key in out:
            out[key][it] = st[key]
    out["unconstrained"] = Z
    out["step_size"] = kernel.step_size
    out["inv_metric"] = kernel.inv_metric.copy()
    out["warmup_divergences"] = warmup_div
    return out


def sample(model, data, cfg: SamplerConfig | None = None, store_loglik=True):
    """Draw ``cfg.n_chains`` chains from ``model``'s posterior given ``data``.

    Results are a deterministic function of ``cfg.seed``; chains run in
    ``cfg.n_jobs`` worker processes when that is above one.
    """
    cfg = cfg or SamplerConfig()
    chains = range(cfg.n_chains)
    if cfg.n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(run_chain, [model] * cfg.n_chains,
                                    [data] * cfg.n_chains, [cfg] * cfg.n_chains, chains))
    else:
        results = [run_chain(model, data, cfg, c) for c in chains]

    Z = np.stack([r["unconstrained"] for r in results])
    C, S, D = Z.shape
    values = model.constrain_draws(Z.reshape(C * S, D)).reshape(C, S, -1)
    loglik = None
    if store_loglik and data is not None and hasattr(model, "loglik_matrix"):
        loglik = model.loglik_matrix(Z.reshape(C * S, D), data).reshape(C, S, -1)
    return PosteriorDraws(
        names=tuple(model.draw_names),
        values=values,
        unconstrained=Z,
        loglik=loglik,
        divergent=np.stack([r["divergent"] for r in results]),
        tree_depth=np.stack([r["tree_depth"] for r in results]),
        n_leapfrog=np.stack([r["n_leapfrog"] for r in results]),
        accept_stat=np.stack([r["accept_stat"] for r in results]),
        energy=np.stack([r["energy"] for r in results]),
        step_size=np.array([r["step_size"] for r in results]),
        inv_metric=np.stack([r["inv_metric"] for r in results]),
        warmup_divergences=np.array([r["warmup_divergences"] for r in results]),
        max_tree_depth=cfg.max_tree_depth,
        seed=cfg.seed,
    )
