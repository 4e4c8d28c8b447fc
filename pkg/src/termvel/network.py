"""Two-time conditioned transformer ``F(x, t, t - s, c, beta)`` on flat vectors.

The input vector is lifted to ``num_tokens`` tokens of width ``hidden_dim``.
Every normalisation is a parameter-free RMSNorm; the six AdaLN modulation
vectors of each block are themselves RMS-normalised before use, and queries
and keys are RMS-normalised per head with a learnable scalar gain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import DEFAULT_TILE, attention, naive_attention
from .errors import ShapeError
from .params import ParamStore


@dataclass
class ModelConfig:
    input_dim: int = 2
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    num_tokens: int = 4
    mlp_ratio: int = 4
    eps_rmsnorm: float = 1e-6
    use_scaled_param: bool = False
    label_count: int = 0
    patchless: bool = True
    time_freq_dim: int = 32
    time_scale: float = 1000.0
    time_embed_init: str = "normal"  # "normal" -> N(0, 0.02); "spectral"
    qk_scale_init: float = 1.0
    attention: str = "fused"  # "fused" kernel or "naive" composite ops
    tile: int = DEFAULT_TILE

    def validate(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not self.eps_rmsnorm > 0:
            raise ValueError("eps_rmsnorm must be > 0")
        for name in ("input_dim", "hidden_dim", "num_heads", "num_tokens", "mlp_ratio", "tile"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0 or self.label_count < 0:
            raise ValueError("num_layers and label_count must be >= 0")
        if self.time_freq_dim < 2 or self.time_freq_dim % 2:
            raise ValueError("time_freq_dim must be an even number >= 2")
        if self.time_embed_init not in ("normal", "spectral"):
            raise ValueError(f"unknown time_embed_init {self.time_embed_init!r}")
        if self.attention not in ("fused", "naive"):
            raise ValueError(f"unknown attention backend {self.attention!r}")
        if not self.patchless:
            raise ValueError("only patchless (flat vector) inputs are supported")
        return self

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    @property
    def conditional(self):
        return self.label_count > 0

    @property
    def null_label(self):
        return self.label_count


@dataclass
class Conditioning:
    """Per-sample conditioning.  ``class_id`` of ``None`` means the null label."""
    t: np.ndarray
    delta: np.ndarray
    class_id: np.ndarray | None = None
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        self.delta = np.broadcast_to(np.asarray(self.delta, dtype=np.float64), self.t.shape).copy()
        if self.beta is None:
            self.beta = np.ones_like(self.t)
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), self.t.shape).copy()

    def validate(self, config: ModelConfig | None = None):
        t, d, b = self.t, self.delta, self.beta
        if np.any(d < 0) or np.any(d > t) or np.any(t > 1):
            raise ValueError("conditioning needs 0 <= delta <= t <= 1")
        if np.any(b <= 0) or np.any(b > 1):
            raise ValueError("beta = 1/w must lie in (0, 1]")
        if config is not None and self.class_id is not None:
            labels = np.asarray(self.class_id)
            if np.any(labels < 0) or np.any(labels > config.label_count):
                raise ValueError(f"class id out of range [0, {config.label_count}]")
        return self


# -- building blocks ----------------------------------------------------------

def rmsnorm_minus(x, eps=1e-6):
    """``x / sqrt(mean(x**2) + eps)`` over the last axis; no learnable gain."""
    return ad.rms_normalize(x, eps)


def rmsnorm_reference(x, eps=1e-6):
    """Same map built from elementary ops; a cross-check for the fused primitive."""
    x = ad.lift(x)
    ms = ad.mean(x * x, axis=-1, keepdims=True)
    return x * ad.power(ms + eps, -0.5)


def rmsnorm_jacobian(x, eps=1e-6):
    """Closed-form Jacobian of :func:`rmsnorm_minus` for a single vector."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    r = math.sqrt(float(x @ x) / d + eps)
    return np.eye(d) / r - np.outer(x, x) / (d * r ** 3)


def spectral_init(fan_in, fan_out, rng):
    """Gaussian matrix rescaled to unit spectral norm."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("spectral_init needs positive dims")
    w = rng.standard_normal((fan_in, fan_out))
    return w / np.linalg.norm(w, 2)


def linear(p, name, x):
    return x @ p[name + ".w"] + p[name + ".b"]


def qk_norm(q, k, q_scale, k_scale, eps=1e-6):
    """Per-head RMS normalisation of queries and keys times learnable gains."""
    return rmsnorm_minus(q, eps) * q_scale, rmsnorm_minus(k, eps) * k_scale


def modulation(p, name, c_act, chunks, cfg: ModelConfig):
    """Project the conditioning to ``chunks`` vectors, each RMS-normalised."""
    mod = linear(p, name, c_act)
    b = mod.shape[0]
    if mod.shape[-1] != chunks * cfg.hidden_dim:
        raise ShapeError(f"{name}: modulation width {mod.shape[-1]} is not {chunks} x {cfg.hidden_dim}")
    mod = rmsnorm_minus(mod.reshape(b, chunks, cfg.hidden_dim), cfg.eps_rmsnorm)
    return [mod[:, i:i + 1, :] for i in range(chunks)]


def adaln(x, scale, shift, eps=1e-6):
    """``RMSNorm(x) * scale + shift`` with already-normalised modulation vectors."""
    return rmsnorm_minus(x, eps) * scale + shift


def timestep_features(t, dim, scale):
    """Sinusoidal features of a ``(B,)`` node."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = ad.reshape(ad.lift(t), (-1, 1)) * (scale * freqs)[None, :]
    return ad.concat([ad.cos(args), ad.sin(args)], axis=-1)


# -- parameters ---------------------------------------------------------------

def init_params(cfg: ModelConfig, rng) -> ParamStore:
    cfg.validate()
    H, T, D = cfg.hidden_dim, cfg.num_tokens, cfg.input_dim
    p = ParamStore()

    def lin(name, fan_in, fan_out, kind="spectral"):
        if kind == "spectral":
            p[name + ".w"] = spectral_init(fan_in, fan_out, rng)
        elif kind == "normal":
            p[name + ".w"] = 0.02 * rng.standard_normal((fan_in, fan_out))
        else:
            p[name + ".w"] = np.zeros((fan_in, fan_out))
        p[name + ".b"] = np.zeros(fan_out)

    lin("embed.x", D, T * H)
    p["embed.tokens"] = 0.02 * rng.standard_normal((T, H))
    for key in _time_inputs(cfg):
        lin(f"embed.{key}.fc1", cfg.time_freq_dim, H, cfg.time_embed_init)
        lin(f"embed.{key}.fc2", H, H, cfg.time_embed_init)
    if cfg.conditional:
        p["embed.class"] = 0.02 * rng.standard_normal((cfg.label_count + 1, H))
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}"
        lin(pre + ".mod", H, 6 * H)
        lin(pre + ".attn.qkv", H, 3 * H)
        p[pre + ".attn.q_scale"] = np.full((cfg.num_heads, 1, 1), cfg.qk_scale_init)
        p[pre + ".attn.k_scale"] = np.full((cfg.num_heads, 1, 1), cfg.qk_scale_init)
        lin(pre + ".attn.proj", H, H)
        lin(pre + ".mlp.fc1", H, cfg.mlp_ratio * H)
        lin(pre + ".mlp.fc2", cfg.mlp_ratio * H, H)
    lin("final.mod", H, 2 * H)
    lin("final.out", T * H, D, "zero")
    return p


def _time_inputs(cfg):
    return ("t", "delta", "beta") if cfg.conditional else ("t", "delta")


# -- forward ------------------------------------------------------------------

def _attention_block(p, pre, h, cfg: ModelConfig):
    B, T, H = h.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    qkv = linear(p, pre + ".qkv", h).reshape(B, T, 3, nh, hd).transpose(2, 0, 3, 1, 4)
    q, k = qk_norm(qkv[0], qkv[1], p[pre + ".q_scale"], p[pre + ".k_scale"], cfg.eps_rmsnorm)
    v = qkv[2]
    if cfg.attention == "fused":
        o = attention(q, k, v, cfg.tile, cfg.tile)
    else:
        o = naive_attention(q, k, v)
    o = o.transpose(0, 2, 1, 3).reshape(B, T, H)
    return linear(p, pre + ".proj", o)


def _mlp(p, pre, h):
    return linear(p, pre + ".fc2", ad.silu(linear(p, pre + ".fc1", h)))


def embed_conditioning(p, t, delta, beta, labels, cfg: ModelConfig):
    c = None
    for key, val in zip(("t", "delta", "beta"), (t, delta, beta)):
        if key not in _time_inputs(cfg):
            continue
        feats = timestep_features(val, cfg.time_freq_dim, cfg.time_scale)
        e = linear(p, f"embed.{key}.fc2", ad.silu(linear(p, f"embed.{key}.fc1", feats)))
        c = e if c is None else c + e
    if cfg.conditional:
        if labels is None:
            raise ValueError("conditional model needs labels (use label_count for the null label)")
        labels = np.asarray(labels)
        if np.any(labels < 0) or np.any(labels > cfg.label_count):
            raise ValueError(f"class id out of range [0, {cfg.label_count}]")
        c = c + ad.take_rows(p["embed.class"], labels)
    return c


def apply(p, x, t, delta, beta=None, labels=None, cfg: ModelConfig = None, stats=None):
    """Network output ``F`` of shape ``(B, input_dim)``.

    ``p`` maps parameter paths to nodes or arrays; ``x`` is ``(B, input_dim)``;
    ``t``, ``delta`` and ``beta`` are ``(B,)`` and may carry tangents.  When
    ``stats`` is a dict it receives activation RMS measurements.
    """
    x = ad.lift(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected x of shape (B, {cfg.input_dim}), got {x.shape}")
    B = x.shape[0]
    if beta is None:
        beta = np.ones(B)
    H, T = cfg.hidden_dim, cfg.num_tokens
    eps = cfg.eps_rmsnorm

    h = linear(p, "embed.x", x).reshape(B, T, H) + p["embed.tokens"]
    c = embed_conditioning(p, t, delta, beta, labels, cfg)
    c_act = ad.silu(c)
    if stats is not None:
        stats["embed_rms"] = float(np.sqrt(np.mean(c.value ** 2)))
        stats["block_rms"] = []
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}"
        a1, b1, g1, a2, b2, g2 = modulation(p, pre + ".mod", c_act, 6, cfg)
        h = h + g1 * _attention_block(p, pre + ".attn", adaln(h, a1, b1, eps), cfg)
        h = h + g2 * _mlp(p, pre + ".mlp", adaln(h, a2, b2, eps))
        if stats is not None:
            stats["block_rms"].append(float(np.sqrt(np.mean(h.value ** 2))))
    a, b = modulation(p, "final.mod", c_act, 2, cfg)
    h = adaln(h, a, b, eps)
    return linear(p, "final.out", h.reshape(B, T * H))


def forward(p, x, cond: Conditioning, cfg: ModelConfig, stats=None):
    """Validated entry point: ``F(x, t, t - s, c, beta)`` for a :class:`Conditioning`."""
    cond.validate(cfg)
    labels = None
    if cfg.conditional:
        labels = np.full(cond.t.shape, cfg.null_label) if cond.class_id is None else cond.class_id
    return apply(p, x, cond.t, cond.delta, cond.beta, labels, cfg, stats)


def max_activation_rms(stats) -> float:
    vals = [stats.get("embed_rms", 0.0), *stats.get("block_rms", [])]
    return float(max(vals))


def empirical_lipschitz(p, cfg: ModelConfig, rng, pairs=64, scale=1.0):
    """Max of ``|F(x) - F(x')| / |x - x'|`` over random nearby input pairs at random times."""
    x = scale * rng.standard_normal((pairs, cfg.input_dim))
    dx = 1e-3 * rng.standard_normal((pairs, cfg.input_dim))
    t = rng.uniform(0, 1, pairs)
    delta = t * rng.uniform(0, 1, pairs)
    labels = np.full(pairs, cfg.null_label) if cfg.conditional else None
    with ad.no_grad():
        f0 = apply(p, x, t, delta, None, labels, cfg).value
        f1 = apply(p, x + dx, t, delta, None, labels, cfg).value
    return float(np.max(np.linalg.norm(f1 - f0, axis=1) / np.linalg.norm(dx, axis=1)))
