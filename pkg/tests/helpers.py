"""Finite-difference oracles and tiny model fixtures shared by the tests."""
import numpy as np

from termvel.network import ModelConfig, init_params


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def directional_diff(f, x, v, h=1e-5):
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def tiny_config(**kw):
    base = dict(hidden_dim=4, num_layers=1, num_heads=2, num_tokens=2, mlp_ratio=1,
                time_freq_dim=4, time_scale=1.0, tile=2)
    base.update(kw)
    return ModelConfig(**base)


def live_params(cfg, rng, out_scale=0.5):
    """Initialised parameters with a non-zero output layer (plain init outputs zero)."""
    p = init_params(cfg, rng)
    p["final.out.w"] = out_scale * rng.standard_normal(p["final.out.w"].shape)
    p["final.out.b"] = out_scale * rng.standard_normal(p["final.out.b"].shape)
    return p
