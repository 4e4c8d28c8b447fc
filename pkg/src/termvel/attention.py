"""Tiled scaled-dot-product attention with a fused JVP and a backward pass
through both the primal and tangent outputs.

All functions take ``(..., M, d)`` queries and ``(..., N, d)`` keys/values;
leading axes are independent (batch, head) slices and are carried through
every numpy call, so one tile loop serves all slices.  Nothing of size
``M x N`` is allocated: the forward keeps running softmax statistics per
query row, and the backward recomputes probability tiles from ``Q``, ``K``
and the cached log-sum-exp.

Notation per row ``i`` and column ``j``::

    z   = alpha * Q K^T              zdot = alpha * (Qdot K^T + Q Kdot^T)
    P   = exp(z - lse)               N    = zdot - mu / l
    O   = P V                        Odot = (P * N) V + P Vdot

``l`` and ``mu`` are the row sums of ``exp(z - m)`` and ``exp(z - m) * zdot``
against the same final running max ``m``; only their ratio is ever used, so
``mu / l`` is the softmax-weighted mean of ``zdot``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError, ShapeError

DEFAULT_TILE = 32


@dataclass
class AttnInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_dot: np.ndarray | None = None
    k_dot: np.ndarray | None = None
    v_dot: np.ndarray | None = None

    def __post_init__(self):
        q, k, v = self.q, self.k, self.v
        if q.ndim < 2 or k.ndim != q.ndim or v.ndim != q.ndim:
            raise ShapeError(f"attention operands need matching rank >= 2: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
            raise ShapeError(f"head dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"K and V lengths differ: {k.shape} vs {v.shape}")
        if q.shape[-2] == 0 or k.shape[-2] == 0:
            raise ShapeError("zero-length sequence")
        for name, primal in (("q_dot", q), ("k_dot", k), ("v_dot", v)):
            t = getattr(self, name)
            if t is not None and t.shape != primal.shape:
                raise ShapeError(f"{name} shape {t.shape} does not match {primal.shape}")

    @property
    def alpha(self):
        return 1.0 / math.sqrt(self.q.shape[-1])

    @property
    def has_tangent(self):
        return self.q_dot is not None or self.k_dot is not None or self.v_dot is not None

    def tangents_or_zero(self):
        return tuple(t if t is not None else np.zeros_like(p)
                     for t, p in ((self.q_dot, self.q), (self.k_dot, self.k), (self.v_dot, self.v)))


@dataclass
class AttnStats:
    """Per-query-row cache: exactly three values per row."""
    lse: np.ndarray  # log-sum-exp of the scaled logits, including the running max
    l: np.ndarray    # sum_j exp(z_ij - m_i)
    mu: np.ndarray   # sum_j exp(z_ij - m_i) * zdot_ij


@dataclass
class AttnGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dq_dot: np.ndarray
    dk_dot: np.ndarray
    dv_dot: np.ndarray

    def as_tuple(self):
        return self.dq, self.dk, self.dv, self.dq_dot, self.dk_dot, self.dv_dot


def _tiles(n, size):
    if size < 1:
        raise ValueError(f"tile size must be >= 1, got {size}")
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _rows(x, a, b):
    return x[..., a:b, :]


def _t(x):
    return np.swapaxes(x, -1, -2)


def _check_finite(inp: AttnInputs):
    for name in ("q", "k", "v", "q_dot", "k_dot", "v_dot"):
        arr = getattr(inp, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"attention input {name}")


def fused_forward(inp: AttnInputs, tile_m=DEFAULT_TILE, tile_n=DEFAULT_TILE):
    """Primal and tangent attention outputs in one online-softmax sweep.

    Returns ``(O, O_dot, stats)``; ``O_dot`` is ``None`` when no tangent was given.
    """
    _check_finite(inp)
    q, k, v = inp.q, inp.k, inp.v
    tangent = inp.has_tangent
    if tangent:
        qd, kd, vd = inp.tangents_or_zero()
    alpha = inp.alpha
    M, N = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]
    dtype = np.result_type(q, k, v)

    out = np.empty(lead + (M, v.shape[-1]), dtype=dtype)
    out_dot = np.empty_like(out) if tangent else None
    lse = np.empty(lead + (M,), dtype=dtype)
    l_all = np.empty_like(lse)
    mu_all = np.zeros_like(lse)
    col_tiles = _tiles(N, tile_n)

    for i0, i1 in _tiles(M, tile_m):
        qi = _rows(q, i0, i1)
        if tangent:
            qdi = _rows(qd, i0, i1)
        m = np.full(lead + (i1 - i0,), -np.inf, dtype=dtype)
        l = np.zeros_like(m)
        mu = np.zeros_like(m)
        acc = np.zeros(lead + (i1 - i0, v.shape[-1]), dtype=dtype)
        acc_dot = np.zeros_like(acc) if tangent else None
        for j0, j1 in col_tiles:
            kj, vj = _rows(k, j0, j1), _rows(v, j0, j1)
            z = alpha * (qi @ _t(kj))
            m_new = np.maximum(m, z.max(axis=-1))
            rescale = np.exp(m - m_new)
            p = np.exp(z - m_new[..., None])
            l = l * rescale + p.sum(axis=-1)
            acc = acc * rescale[..., None] + p @ vj
            if tangent:
                zd = alpha * (qdi @ _t(kj) + qi @ _t(_rows(kd, j0, j1)))
                pz = p * zd
                mu = mu * rescale + pz.sum(axis=-1)
                acc_dot = acc_dot * rescale[..., None] + pz @ vj + p @ _rows(vd, j0, j1)
            m = m_new
        o = acc / l[..., None]
        out[..., i0:i1, :] = o
        if tangent:
            out_dot[..., i0:i1, :] = acc_dot / l[..., None] - (mu / l)[..., None] * o
        lse[..., i0:i1] = m + np.log(l)
        l_all[..., i0:i1] = l
        mu_all[..., i0:i1] = mu
    return out, out_dot, AttnStats(lse, l_all, mu_all)


# -- backward -----------------------------------------------------------------
#
# Split into six passes.  Row-parallel passes (1, 3, 5) loop over query tiles
# on the outside; column-parallel passes (2, 4, 6) loop over key tiles.  Each
# pass recomputes its probability tiles from Q, K and stats.lse.

class _Tile:
    """Recomputed block quantities for query tile ``i`` and key tile ``j``."""

    __slots__ = ("p", "n", "a", "b", "c")

    def __init__(self, ctx, i0, i1, j0, j1):
        qi, kj = _rows(ctx.q, i0, i1), _rows(ctx.k, j0, j1)
        z = ctx.alpha * (qi @ _t(kj))
        self.p = np.exp(z - ctx.lse[..., i0:i1, None])
        zd = ctx.alpha * (_rows(ctx.qd, i0, i1) @ _t(kj) + qi @ _t(_rows(ctx.kd, j0, j1)))
        self.n = zd - ctx.mubar[..., i0:i1, None]
        g_dot = _rows(ctx.dod, i0, i1)
        self.a = g_dot @ _t(_rows(ctx.v, j0, j1))            # dOdot V^T
        self.b = g_dot @ _t(_rows(ctx.vd, j0, j1))           # dOdot Vdot^T
        self.c = _rows(ctx.do, i0, i1) @ _t(_rows(ctx.v, j0, j1))  # dO V^T


class _Ctx:
    def __init__(self, inp: AttnInputs, stats: AttnStats, d_out, d_out_dot, tile_m, tile_n):
        self.q, self.k, self.v = inp.q, inp.k, inp.v
        self.qd, self.kd, self.vd = inp.tangents_or_zero()
        self.alpha = inp.alpha
        self.lse = stats.lse
        self.mubar = stats.mu / stats.l
        self.do = d_out
        self.dod = d_out_dot if d_out_dot is not None else np.zeros_like(d_out)
        self.rows = _tiles(inp.q.shape[-2], tile_m)
        self.cols = _tiles(inp.k.shape[-2], tile_n)
        self.lead = inp.q.shape[:-2]
        # filled by step 1
        self.sigma1 = self.sigma2 = self.delta = None


def step1_preprocess(ctx: _Ctx):
    """Row sums Sigma1 = sum_j P A, Sigma2 = sum_j P (B + A N), and the primal
    D = sum_j P C (= rowsum(dO * O))."""
    M = ctx.q.shape[-2]
    s1 = np.zeros(ctx.lead + (M,), dtype=ctx.lse.dtype)
    s2, dd = np.zeros_like(s1), np.zeros_like(s1)
    for i0, i1 in ctx.rows:
        for j0, j1 in ctx.cols:
            t = _Tile(ctx, i0, i1, j0, j1)
            s1[..., i0:i1] += (t.p * t.a).sum(axis=-1)
            s2[..., i0:i1] += (t.p * (t.b + t.a * t.n)).sum(axis=-1)
            dd[..., i0:i1] += (t.p * t.c).sum(axis=-1)
    ctx.sigma1, ctx.sigma2, ctx.delta = s1, s2, dd


def _e_block(ctx, t, i0, i1):
    # gradient w.r.t. zdot: P * (A - Sigma1)
    return t.p * (t.a - ctx.sigma1[..., i0:i1, None])


def _g_block(ctx, t, i0, i1):
    # gradient w.r.t. z: tangent path P*[(A - S1) N + B - S2] plus primal P*(C - D)
    s1 = ctx.sigma1[..., i0:i1, None]
    s2 = ctx.sigma2[..., i0:i1, None]
    dd = ctx.delta[..., i0:i1, None]
    return t.p * ((t.a - s1) * t.n + t.b - s2 + t.c - dd)


def step2_dk_dot(ctx: _Ctx):
    """Column-parallel: dKdot and the Qdot-side part of dK."""
    dk_dot = np.zeros_like(ctx.k)
    dk1 = np.zeros_like(ctx.k)
    for j0, j1 in ctx.cols:
        for i0, i1 in ctx.rows:
            e = _t(_e_block(ctx, _Tile(ctx, i0, i1, j0, j1), i0, i1))
            dk_dot[..., j0:j1, :] += e @ _rows(ctx.q, i0, i1)
            dk1[..., j0:j1, :] += e @ _rows(ctx.qd, i0, i1)
    return ctx.alpha * dk_dot, ctx.alpha * dk1


def step3_dq_dot(ctx: _Ctx):
    """Row-parallel: dQdot and the Kdot-side part of dQ."""
    dq_dot = np.zeros_like(ctx.q)
    dq1 = np.zeros_like(ctx.q)
    for i0, i1 in ctx.rows:
        for j0, j1 in ctx.cols:
            e = _e_block(ctx, _Tile(ctx, i0, i1, j0, j1), i0, i1)
            dq_dot[..., i0:i1, :] += e @ _rows(ctx.k, j0, j1)
            dq1[..., i0:i1, :] += e @ _rows(ctx.kd, j0, j1)
    return ctx.alpha * dq_dot, ctx.alpha * dq1


def step4_dk(ctx: _Ctx, dk1):
    """Column-parallel: remaining dK through the softmax logits."""
    dk = np.zeros_like(ctx.k)
    for j0, j1 in ctx.cols:
        for i0, i1 in ctx.rows:
            g = _g_block(ctx, _Tile(ctx, i0, i1, j0, j1), i0, i1)
            dk[..., j0:j1, :] += _t(g) @ _rows(ctx.q, i0, i1)
    return dk1 + ctx.alpha * dk


def step5_dq(ctx: _Ctx, dq1):
    """Row-parallel: remaining dQ through the softmax logits."""
    dq = np.zeros_like(ctx.q)
    for i0, i1 in ctx.rows:
        for j0, j1 in ctx.cols:
            g = _g_block(ctx, _Tile(ctx, i0, i1, j0, j1), i0, i1)
            dq[..., i0:i1, :] += g @ _rows(ctx.k, j0, j1)
    return dq1 + ctx.alpha * dq


def step6_dv(ctx: _Ctx):
    """Column-parallel: dVdot = P^T dOdot and dV = (P*N)^T dOdot + P^T dO."""
    dv_dot = np.zeros_like(ctx.v)
    dv = np.zeros_like(ctx.v)
    for j0, j1 in ctx.cols:
        for i0, i1 in ctx.rows:
            t = _Tile(ctx, i0, i1, j0, j1)
            pt = _t(t.p)
            g_dot = _rows(ctx.dod, i0, i1)
            dv_dot[..., j0:j1, :] += pt @ g_dot
            dv[..., j0:j1, :] += _t(t.p * t.n) @ g_dot + pt @ _rows(ctx.do, i0, i1)
    return dv_dot, dv


def backward(inp: AttnInputs, stats: AttnStats, d_out, d_out_dot=None,
             tile_m=DEFAULT_TILE, tile_n=DEFAULT_TILE) -> AttnGrads:
    """Gradients of ``<dO, O> + <dOdot, Odot>`` w.r.t. Q, K, V and their tangents."""
    M = inp.q.shape[-2]
    lead = inp.q.shape[:-2]
    for name, arr in (("lse", stats.lse), ("l", stats.l), ("mu", stats.mu)):
        if arr.shape != lead + (M,):
            raise ShapeError(f"stats.{name} has shape {arr.shape}, expected {lead + (M,)}")
    expected = inp.q.shape[:-1] + (inp.v.shape[-1],)
    if d_out.shape != expected or (d_out_dot is not None and d_out_dot.shape != expected):
        raise ShapeError(f"output cotangent shape mismatch, expected {expected}")
    ctx = _Ctx(inp, stats, d_out, d_out_dot, tile_m, tile_n)
    step1_preprocess(ctx)
    dk_dot, dk1 = step2_dk_dot(ctx)
    dq_dot, dq1 = step3_dq_dot(ctx)
    dk = step4_dk(ctx, dk1)
    dq = step5_dq(ctx, dq1)
    dv_dot, dv = step6_dv(ctx)
    return AttnGrads(dq, dk, dv, dq_dot, dk_dot, dv_dot)


# -- naive reference ----------------------------------------------------------

def naive_forward(inp: AttnInputs):
    """Materialised softmax with the analytic JVP, all in plain numpy."""
    q, k, v = inp.q, inp.k, inp.v
    qd, kd, vd = inp.tangents_or_zero()
    a = inp.alpha
    z = a * (q @ _t(k))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    zd = a * (qd @ _t(k) + q @ _t(kd))
    pd = p * (zd - (p * zd).sum(axis=-1, keepdims=True))
    return p @ v, pd @ v + p @ vd


def _naive_graph(q, k, v, qd, kd, vd):
    a = 1.0 / math.sqrt(q.shape[-1])
    z = (q @ ad.transpose(k, _swap(k.ndim))) * a
    z = z - ad.stop_grad(ad.lift(z.value.max(axis=-1, keepdims=True)))
    e = ad.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    zd = (qd @ ad.transpose(k, _swap(k.ndim)) + q @ ad.transpose(kd, _swap(kd.ndim))) * a
    pd = p * (zd - (p * zd).sum(axis=-1, keepdims=True))
    return p @ v, pd @ v + p @ vd


def _swap(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def naive_oracle(inp: AttnInputs, d_out=None, d_out_dot=None):
    """Reference ``(O, Odot)`` and, if cotangents are given, all six gradients.

    The gradients come from reverse-mode autodiff over the explicit formula,
    independently of the tiled backward.
    """
    leaves = [ad.param(x) for x in (inp.q, inp.k, inp.v, *inp.tangents_or_zero())]
    o, od = _naive_graph(*leaves)
    if d_out is None:
        return o.value, od.value, None
    if d_out_dot is None:
        d_out_dot = np.zeros_like(d_out)
    loss = (o * d_out).sum() + (od * d_out_dot).sum()
    grads = ad.grad(loss, leaves)
    return o.value, od.value, AttnGrads(*grads)


# -- graph op -----------------------------------------------------------------

def attention(q, k, v, tile_m=DEFAULT_TILE, tile_n=DEFAULT_TILE) -> ad.Node:
    """Attention as an autodiff op backed by the fused kernel.

    When tangents are live, the primal and tangent outputs are produced by one
    kernel call and share one backward call.
    """
    q, k, v = ad.lift(q), ad.lift(k), ad.lift(v)
    live = ad._mode.tangent and any(n.tangent is not None for n in (q, k, v))
    if not live:
        inp = AttnInputs(q.value, k.value, v.value)
        o, _, stats = fused_forward(inp, tile_m, tile_n)

        def vjp(g):
            grads = backward(inp, stats, g, None, tile_m, tile_n)
            return grads.dq, grads.dk, grads.dv

        return ad.record("attention", o, (q, k, v), vjp)

    tans = [n.tangent if n.tangent is not None else ad.Node(np.zeros_like(n.value))
            for n in (q, k, v)]
    inp = AttnInputs(q.value, k.value, v.value, *(t.value for t in tans))
    o, o_dot, stats = fused_forward(inp, tile_m, tile_n)

    def vjp2(g):
        return backward(inp, stats, g[0], g[1], tile_m, tile_n).as_tuple()

    pair = ad.record("attention_jvp", np.stack([o, o_dot]), (q, k, v, *tans), vjp2)
    with ad._primal_only():
        out = pair[0]
        out.tangent = pair[1]
    return out


def naive_attention(q, k, v) -> ad.Node:
    """Attention from primitive graph ops; tangents follow the generic rules."""
    q, k, v = ad.lift(q), ad.lift(k), ad.lift(v)
    a = 1.0 / math.sqrt(q.shape[-1])
    z = (q @ ad.transpose(k, _swap(k.ndim))) * a
    z = z - ad.stop_grad(ad.lift(z.value.max(axis=-1, keepdims=True)))
    e = ad.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)) @ v
