"""Analytic ground truth and evaluation metrics.

Gaussian task: data ``x0 ~ N(mu0, sigma0^2 I)``, prior ``x1 ~ N(0, I)``,
interpolant ``x_t = (1 - t) x0 + t x1``.  Then ``x_t ~ N(m_t, s_t^2 I)`` with
``m_t = (1 - t) mu0`` and ``s_t^2 = (1 - t)^2 sigma0^2 + t^2``, and the
marginal velocity is the affine map

    u(x, t) = -mu0 + (t - (1 - t) sigma0^2) / s_t^2 * (x - m_t).

Its flow keeps the standardised deviation fixed, so
``psi(x, t, s) = m_s + (s_s / s_t) (x - m_t)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .network import ModelConfig, apply

EXACT_W2_CAP = 2048


# -- Gaussian task ------------------------------------------------------------

@dataclass
class GaussianTask:
    mu0: np.ndarray
    sigma0: float = 0.5

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=np.float64))
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")

    @property
    def dim(self):
        return self.mu0.size

    def mean(self, t):
        return (1.0 - np.asarray(t, dtype=np.float64))[..., None] * self.mu0

    def var(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (1.0 - t) ** 2 * self.sigma0 ** 2 + t ** 2

    def sample_data(self, rng, n):
        return self.mu0 + self.sigma0 * rng.standard_normal((n, self.dim))

    def sample_prior(self, rng, n):
        return rng.standard_normal((n, self.dim))

    def sample_marginal(self, rng, n, t):
        return self.mean(t) + math.sqrt(self.var(t)) * rng.standard_normal((n, self.dim))


def _safe_t(task, t):
    # the coefficients are singular only when s_t^2 -> 0 (sigma0 -> 0 at t = 0)
    t = np.asarray(t, dtype=np.float64)
    return np.where(task.var(t) < 1e-12, np.clip(t, 1e-6, 1 - 1e-6), t)


def gaussian_velocity(x, t, task: GaussianTask):
    """``E[x1 - x0 | x_t = x]``; ``t`` is a scalar or per-row array."""
    t = _safe_t(task, t)
    coef = (t - (1.0 - t) * task.sigma0 ** 2) / task.var(t)
    return -task.mu0 + coef[..., None] * (x - task.mean(t))


def gaussian_flowmap(x, t, s, task: GaussianTask):
    """Exact solution of ``dx/dr = u(x, r)`` from time ``t`` to time ``s``."""
    t = _safe_t(task, t)
    s = _safe_t(task, s)
    ratio = np.sqrt(task.var(s) / task.var(t))
    dev = x - task.mean(t)
    # written as an increment so that s == t returns x bit-exactly
    return x + (task.mean(s) - task.mean(t)) + (ratio - 1.0)[..., None] * dev


@dataclass
class GaussianMixtureTask:
    """Class-conditional data: class ``c`` is ``N(means[c], sigma0^2 I)``."""
    means: np.ndarray
    sigma0: float = 0.5
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, float)

    def component(self, c) -> GaussianTask:
        return GaussianTask(self.means[c], self.sigma0)

    def posterior_weights(self, x, t):
        """Class posterior ``p(c | x_t = x)`` for a single point ``x``."""
        var = self.component(0).var(t)
        m = (1.0 - t) * self.means
        logp = np.log(self.weights) - 0.5 * np.sum((x - m) ** 2, axis=-1) / var
        logp -= logp.max()
        p = np.exp(logp)
        return p / p.sum()

    def cond_velocity(self, x, t, c):
        return gaussian_velocity(x, t, self.component(c))

    def uncond_velocity(self, x, t):
        pi = self.posterior_weights(x, t)
        return sum(pi[c] * self.cond_velocity(x, t, c) for c in range(len(pi)))

    def sample_posterior_v(self, rng, x, t, c, n):
        """Draw ``v = x1 - x0`` from ``p(x0, x1 | x_t = x, c)``."""
        comp = self.component(c)
        var_t = comp.var(t)
        s2 = comp.sigma0 ** 2
        mean0 = comp.mu0 + (1.0 - t) * s2 / var_t * (x - comp.mean(t))
        var0 = s2 - ((1.0 - t) * s2) ** 2 / var_t
        x0 = mean0 + math.sqrt(max(var0, 0.0)) * rng.standard_normal((n, comp.dim))
        x1 = (x - (1.0 - t) * x0) / t
        return x1 - x0

    def sample_posterior_v_uncond(self, rng, x, t, n):
        pi = self.posterior_weights(x, t)
        cls = rng.choice(len(pi), size=n, p=pi)
        out = np.empty((n, self.means.shape[1]))
        for c in range(len(pi)):
            idx = np.flatnonzero(cls == c)
            if idx.size:
                out[idx] = self.sample_posterior_v(rng, x, t, c, idx.size)
        return out


def cfg_minimizer_check(task: GaussianMixtureTask, x, t, w, c, rng, pairs=100_000):
    """Empirical regression minimiser of the guided flow-matching target at fixed ``(x, t)``.

    The unconditional proxy is itself a regression minimiser, estimated from an
    independent set of unconditional pairs.  The target ``w v + (1 - w) u_hat``
    is then regressed over conditional pairs; the least-squares minimiser of a
    constant predictor is the sample mean.  Returns ``(estimate, se, closed_form)``.
    """
    v_unc = task.sample_posterior_v_uncond(rng, x, t, pairs)
    u_hat = v_unc.mean(axis=0)
    u_hat_se = v_unc.std(axis=0, ddof=1) / math.sqrt(pairs)
    v_c = task.sample_posterior_v(rng, x, t, c, pairs)
    y = w * v_c + (1.0 - w) * u_hat
    est = y.mean(axis=0)
    se = np.sqrt((w * v_c.std(axis=0, ddof=1)) ** 2 / pairs + ((1.0 - w) * u_hat_se) ** 2)
    closed = w * task.cond_velocity(x, t, c) + (1.0 - w) * task.uncond_velocity(x, t)
    return est, se, closed


# -- toy datasets ---------------------------------------------------------------

TOY_DATASETS = ("8-gaussians", "two-moons", "checkerboard")


def sample_toy(name, n, rng, with_labels=False):
    """2-D toy data; labels are the mixture component / moon / cell parity."""
    if name == "8-gaussians":
        angles = 2 * np.pi * np.arange(8) / 8
        centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        lab = rng.integers(0, 8, n)
        x = centers[lab] + 0.1 * rng.standard_normal((n, 2))
    elif name == "two-moons":
        lab = rng.integers(0, 2, n)
        a = np.pi * rng.uniform(size=n)
        x = np.where(lab[:, None] == 0,
                     np.stack([np.cos(a), np.sin(a)], 1),
                     np.stack([1 - np.cos(a), 0.5 - np.sin(a)], 1))
        x = 1.5 * (x - [0.5, 0.25]) + 0.05 * rng.standard_normal((n, 2))
    elif name == "checkerboard":
        x1 = rng.uniform(-2, 2, n)
        x2 = rng.uniform(0, 1, n) + rng.integers(0, 2, n) * 2.0 - 2.0
        x2 = x2 + np.floor(x1) % 2
        x = np.stack([x1, x2], 1)
        lab = ((np.floor(x1) + np.floor(x2)) % 2).astype(np.int64)
    else:
        raise ValueError(f"unknown toy dataset {name!r}; expected one of {TOY_DATASETS}")
    return (x, lab) if with_labels else x


def toy_label_count(name):
    return {"8-gaussians": 8, "two-moons": 2, "checkerboard": 2}[name]


# -- samplers -----------------------------------------------------------------

def sample_with_map(F, x1, n):
    """``x <- x + (s - t) F(x, t, s)`` over ``linspace(1, 0, n + 1)``; ``n`` calls to ``F``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ts = np.linspace(1.0, 0.0, n + 1)
    x = np.array(x1, dtype=np.float64)
    for t, s in zip(ts[:-1], ts[1:]):
        x = x + (s - t) * F(x, t, s)
    return x


def network_map(params, cfg: ModelConfig, labels=None, w=None, scaled=None, euler=False):
    """Wrap a parameter set as ``F(x, t, s)`` for :func:`sample_with_map`.

    ``euler`` evaluates the instantaneous velocity (second time equal to the
    first) at every step, which turns the sampler into plain Euler.
    """
    consts = ad.constants(params)
    scaled = cfg.use_scaled_param if scaled is None else scaled

    def F(x, t, s):
        n = x.shape[0]
        tt = np.full(n, t)
        delta = np.zeros(n) if euler else np.full(n, t - s)
        beta = None if w is None else np.broadcast_to(1.0 / np.asarray(w, float), (n,))
        lab = labels
        if cfg.conditional and lab is None:
            lab = np.full(n, cfg.null_label)
        with ad.no_grad():
            out = apply(consts, x, tt, delta, beta, lab, cfg).value
        if scaled and w is not None:
            out = out * np.broadcast_to(np.asarray(w, float), (n,))[:, None]
        return out

    return F


def sample_n_steps(params, x1, n, cfg: ModelConfig, labels=None, w=None, scaled=None):
    return sample_with_map(network_map(params, cfg, labels, w, scaled), x1, n)


def sample_euler(params, x1, n, cfg: ModelConfig, labels=None, w=None, scaled=None):
    return sample_with_map(network_map(params, cfg, labels, w, scaled, euler=True), x1, n)


# -- Wasserstein distance ---------------------------------------------------------

def w2_exact(a, b):
    """Exact 2-Wasserstein distance between equal-size empirical measures."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"exact W2 needs equal-size sets of the same dimension, got {a.shape} and {b.shape}")
    if a.shape[0] > EXACT_W2_CAP:
        raise ValueError(f"exact W2 is capped at {EXACT_W2_CAP} points")
    if a.shape[0] == 0:
        return 0.0
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(max(cost[rows, cols].mean(), 0.0))


def w2_sliced(a, b, rng, projections=256, grid=1000):
    """Sliced 2-Wasserstein distance; set sizes may differ."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    dirs = rng.standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    q = (np.arange(grid) + 0.5) / grid
    pa = _column_quantiles(a @ dirs.T, q)
    pb = _column_quantiles(b @ dirs.T, q)
    return math.sqrt(float(np.mean((pa - pb) ** 2)))


def _column_quantiles(x, q):
    # linear-interpolation quantiles of every column; much faster than np.quantile on wide inputs
    x = np.sort(x, axis=0)
    pos = q * (x.shape[0] - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, x.shape[0] - 1)
    frac = (pos - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[hi] * frac


def w2_distance(a, b, mode="exact", rng=None, **kw):
    if mode == "exact":
        return w2_exact(a, b)
    if mode == "sliced":
        return w2_sliced(a, b, rng if rng is not None else np.random.default_rng(0), **kw)
    raise ValueError(f"unknown W2 mode {mode!r}")


# -- displacement-error bound ---------------------------------------------------

@dataclass
class BoundResult:
    t: float
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    margin: float
    margin_se: float

    @property
    def holds(self):
        return self.margin >= -3.0 * self.margin_se

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def exact_map(task: GaussianTask):
    """Ground-truth map ``(f, df/ds)`` at per-row ``s``."""
    def fmap(x, t, s):
        psi = gaussian_flowmap(x, t, s, task)
        return psi - x, gaussian_velocity(psi, s, task)
    return fmap


def network_map_and_derivative(params, cfg: ModelConfig, chunk=4096):
    """Network map ``(f, df/ds)`` with ``f = (s - t) F`` at per-row ``s``."""
    consts = ad.constants(params)

    def fmap(x, t, s):
        fs, ds = [], []
        for i in range(0, x.shape[0], chunk):
            xs, ss = x[i:i + chunk], s[i:i + chunk]
            tt = np.full(xs.shape[0], t)
            lab = np.full(xs.shape[0], cfg.null_label) if cfg.conditional else None
            with ad.no_grad():
                F, dF = ad.jvp(lambda s_: apply(consts, xs, tt, tt - s_, None, lab, cfg), [ss], [np.ones_like(ss)])
            gap = (ss - t)[:, None]
            fs.append(gap * F.value)
            ds.append(F.value + gap * dF.value)
        return np.concatenate(fs), np.concatenate(ds)

    return fmap


def check_lemma1_bound(fmap, task: GaussianTask, t, mc_samples, rng, nodes=64) -> BoundResult:
    """Monte-Carlo estimate of both sides of the displacement-error bound at ``t``.

    lhs = E |f(x, t, 0) - (psi(x, t, 0) - x)|^2
    rhs = E int_0^t |d/ds f(x, t, s) - u(psi(x, t, s), s)|^2 ds

    with ``x ~ p_t``; the integral uses ``nodes``-point Gauss-Legendre
    quadrature.  The margin's standard error comes from paired differences.
    """
    if mc_samples < 2:
        raise ValueError("need at least two Monte-Carlo samples")
    x = task.sample_marginal(rng, mc_samples, t)
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    s_nodes = 0.5 * t * (gx + 1.0)
    weights = 0.5 * t * gw
    n = x.shape[0]
    f0, _ = fmap(x, t, np.zeros(n))
    lhs_i = np.sum((f0 - (gaussian_flowmap(x, t, 0.0, task) - x)) ** 2, axis=1)
    xs = np.repeat(x, nodes, axis=0)
    ss = np.tile(s_nodes, n)
    _, dfds = fmap(xs, t, ss)
    u = gaussian_velocity(gaussian_flowmap(xs, t, ss, task), ss, task)
    err = np.sum((dfds - u) ** 2, axis=1).reshape(n, nodes)
    rhs_i = err @ weights
    d = rhs_i - lhs_i
    root = math.sqrt(n)
    return BoundResult(float(t), float(lhs_i.mean()), float(lhs_i.std(ddof=1) / root),
                       float(rhs_i.mean()), float(rhs_i.std(ddof=1) / root),
                       float(d.mean()), float(d.std(ddof=1) / root))
