"""Time-pair samplers, CFG-weight samplers and label dropout.

Every sampler is vectorised over a batch and draws from an explicit
``numpy.random.Generator``; nothing here touches global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

SCHEMES = ("trunc", "clamp", "gap", "gap_star")
_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


@dataclass
class TimeSamplerConfig:
    scheme: str = "gap_star"
    mu_t: float = 0.4
    sigma_t: float = 1.0
    mu_g: float = -0.8
    sigma_g: float = 1.0
    mu_s: float = -0.4
    sigma_s: float = 1.0
    p_equal: float = 0.0  # fraction of pairs forced onto t == s

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown time scheme {self.scheme!r}; expected one of {SCHEMES}")
        for name in ("sigma_t", "sigma_g", "sigma_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.p_equal <= 1.0:
            raise ValueError("p_equal must lie in [0, 1]")
        return self


@dataclass
class CfgSamplerConfig:
    mode: str = "constant"  # "constant" or "random"
    w: float = 1.0
    w_min: float = 1.0
    w_max: float = 1.0
    dropout_p: float = 0.1

    def validate(self):
        if self.mode not in ("constant", "random"):
            raise ValueError(f"unknown cfg mode {self.mode!r}")
        if self.w < 1 or self.w_min < 1 or self.w_max < self.w_min:
            raise ValueError("need w >= 1 and 1 <= w_min <= w_max")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        return self


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream for one training step; makes resumption exact."""
    return np.random.default_rng([int(seed), int(step)])


def logit_normal(mu, sigma, rng, size=None):
    """``sigmoid(N(mu, sigma))`` kept inside the open interval (0, 1)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    z = rng.normal(mu, sigma, size)
    return np.clip(expit(z), _LO, _HI)


def truncated_logit_normal(mu, sigma, upper, rng):
    """Logit-normal conditioned on ``x <= upper`` via the inverse CDF.

    ``upper`` is an array; the returned draws share its shape.
    """
    upper = np.asarray(upper, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z_hi = (logit(np.clip(upper, 0.0, 1.0)) - mu) / sigma
    mass = ndtr(z_hi)
    u = rng.uniform(size=upper.shape) * mass
    x = expit(mu + sigma * ndtri(u))
    return np.minimum(x, upper)


def truncated_logit_normal_cdf(x, mu, sigma, upper):
    """CDF of :func:`truncated_logit_normal` (used as a test oracle)."""
    with np.errstate(divide="ignore"):
        num = ndtr((logit(np.clip(x, 0, 1)) - mu) / sigma)
        den = ndtr((logit(np.clip(upper, 0, 1)) - mu) / sigma)
    return np.where(x >= upper, 1.0, num / den)


def sample_pairs(cfg: TimeSamplerConfig, rng, n):
    """Draw ``n`` pairs; returns ``(t, s, s_fm)`` with ``0 <= s <= t <= 1``.

    ``s_fm`` is the time used by the flow-matching term: an independent
    draw under ``gap_star``, otherwise ``s`` itself.
    """
    scheme = cfg.scheme
    if scheme == "trunc":
        t = logit_normal(cfg.mu_t, cfg.sigma_t, rng, n)
        s = truncated_logit_normal(cfg.mu_s, cfg.sigma_s, t, rng)
    elif scheme == "clamp":
        t = logit_normal(cfg.mu_t, cfg.sigma_t, rng, n)
        s = np.minimum(logit_normal(cfg.mu_s, cfg.sigma_s, rng, n), t)
    elif scheme in ("gap", "gap_star"):
        g = logit_normal(cfg.mu_g, cfg.sigma_g, rng, n)
        s = truncated_logit_normal(cfg.mu_s, cfg.sigma_s, 1.0 - g, rng)
        t = np.minimum(s + g, 1.0)
    else:
        raise ValueError(f"unknown time scheme {scheme!r}")
    if cfg.p_equal > 0:
        same = rng.uniform(size=n) < cfg.p_equal
        s = np.where(same, t, s)
    if scheme == "gap_star":
        s_fm = logit_normal(cfg.mu_s, cfg.sigma_s, rng, n)
    else:
        s_fm = s.copy()
    return t, s, s_fm


def sample_pair(cfg: TimeSamplerConfig, rng):
    """Single ``(t, s)`` pair."""
    t, s, _ = sample_pairs(cfg, rng, 1)
    return float(t[0]), float(s[0])


def sample_cfg(cfg: CfgSamplerConfig, rng, labels, null_label):
    """Apply label dropout and draw guidance weights.

    ``labels`` of ``None`` means an unconditional task: every element is the
    null label with ``w = 1``.  Returns ``(labels_out, w)``.
    """
    if labels is None:
        return None, None
    labels = np.asarray(labels)
    n = labels.shape[0]
    drop = rng.uniform(size=n) < cfg.dropout_p
    if cfg.mode == "constant":
        w = np.full(n, float(cfg.w))
    else:
        beta = rng.uniform(1.0 / cfg.w_max, 1.0 / cfg.w_min, n)
        w = 1.0 / beta
    labels_out = np.where(drop, null_label, labels)
    w = np.where(drop, 1.0, w)
    return labels_out, w
