"""Randomised oracle verification and latency/memory benchmark for the attention kernel."""
from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .attention import AttnInputs, backward, fused_forward, naive_forward, naive_oracle

GRAD_NAMES = ("dq", "dk", "dv", "dq_dot", "dk_dot", "dv_dot")
BENCH_COLUMNS = ("H", "S", "d", "latency_ms_fused", "latency_ms_naive", "peak_bytes_fused", "peak_bytes_naive")


def random_instance(rng, m, n, d, heads=(), zero_tangent=False, dtype=np.float64):
    """Inputs plus output cotangents ``(inp, d_out, d_out_dot)``."""
    def draw(rows):
        return rng.standard_normal((*heads, rows, d)).astype(dtype)

    q, k, v = draw(m), draw(n), draw(n)
    if zero_tangent:
        tangents = (np.zeros_like(q), np.zeros_like(k), np.zeros_like(v))
    else:
        tangents = (draw(m), draw(n), draw(n))
    inp = AttnInputs(q, k, v, *tangents)
    return inp, draw(m), draw(m)


@dataclass
class VerifyReport:
    trials: int
    max_err: dict = field(default_factory=dict)
    tolerance: float = 1e-10

    @property
    def worst(self):
        return max(self.max_err.values()) if self.max_err else 0.0

    @property
    def passed(self):
        return self.worst <= self.tolerance


def verify(seed=0, trials=100, max_len=64, dims=(4, 8, 16), tile=16, tolerance=1e-10) -> VerifyReport:
    """Compare the tiled kernel with the explicit-formula oracle on random shapes.

    Every fourth trial uses all-zero input tangents; sequence lengths are
    drawn independently, so most trials have ``M != N``.
    """
    rng = np.random.default_rng(seed)
    rep = VerifyReport(trials, {k: 0.0 for k in ("o", "o_dot", *GRAD_NAMES)}, tolerance)
    for i in range(trials):
        m, n = (int(x) for x in rng.integers(1, max_len + 1, 2))
        d = int(rng.choice(dims))
        inp, g, gd = random_instance(rng, m, n, d, zero_tangent=(i % 4 == 3))
        o, od, stats = fused_forward(inp, tile, tile)
        grads = backward(inp, stats, g, gd, tile, tile)
        o_ref, od_ref, ref = naive_oracle(inp, g, gd)
        errs = {"o": np.abs(o - o_ref).max(), "o_dot": np.abs(od - od_ref).max()}
        for name, a, b in zip(GRAD_NAMES, grads.as_tuple(), ref.as_tuple()):
            errs[name] = np.abs(a - b).max()
        for k, e in errs.items():
            rep.max_err[k] = max(rep.max_err[k], float(e))
    return rep


def peak_bytes(fn):
    """Peak traced allocation while running ``fn``; returns ``(result, bytes)``."""
    tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        base = tracemalloc.get_traced_memory()[0]
        out = fn()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return out, peak - base


def _fused_round(inp, g, gd, tile):
    _, _, stats = fused_forward(inp, tile, tile)
    return backward(inp, stats, g, gd, tile, tile)


def _naive_round(inp, g, gd):
    return naive_oracle(inp, g, gd)[2]


def bench_shape(heads, seq, d, rng, tile=64, dtype=np.float64, naive_cap_bytes=2 << 30, repeats=1):
    """One benchmark row; the naive path is skipped (``"OOM"``) above the cap.

    The naive estimate assumes about ten live ``S x S`` matrices per head.
    """
    inp, g, gd = random_instance(rng, seq, seq, d, heads=(heads,), dtype=dtype)
    row = {"H": heads, "S": seq, "d": d}
    t0 = time.perf_counter()
    for _ in range(repeats):
        _fused_round(inp, g, gd, tile)
    row["latency_ms_fused"] = 1e3 * (time.perf_counter() - t0) / repeats
    _, row["peak_bytes_fused"] = peak_bytes(lambda: _fused_round(inp, g, gd, tile))
    estimate = 10 * heads * seq * seq * np.dtype(dtype).itemsize
    if estimate > naive_cap_bytes:
        row["latency_ms_naive"] = "OOM"
        row["peak_bytes_naive"] = "OOM"
        return row
    if np.dtype(dtype) == np.float64:
        # outputs must agree before anything is timed
        o, od, _ = fused_forward(inp, tile, tile)
        o_ref, od_ref = naive_forward(inp)
        err = max(np.abs(o - o_ref).max(), np.abs(od - od_ref).max())
        if err > 1e-12:
            raise AssertionError(f"fused and naive outputs differ by {err:.3e} at H={heads} S={seq} d={d}")
    t0 = time.perf_counter()
    for _ in range(repeats):
        _naive_round(inp, g, gd)
    row["latency_ms_naive"] = 1e3 * (time.perf_counter() - t0) / repeats
    _, row["peak_bytes_naive"] = peak_bytes(lambda: _naive_round(inp, g, gd))
    return row


def bench(shapes, seed=0, **kw):
    """Rows for ``shapes``, a sequence of ``(H, S, d)``."""
    rng = np.random.default_rng(seed)
    return [bench_shape(h, s, d, rng, **kw) for h, s, d in shapes]


def write_bench_csv(rows, fh):
    w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.3f}" if isinstance(r[k], float) else r[k]) for k in BENCH_COLUMNS})


def parse_shapes(text):
    """``"1x128x64,8x1024x64"`` -> ``[(1, 128, 64), (8, 1024, 64)]``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"shape {item!r} is not HxSxd")
        h, s, d = (int(p) for p in parts)
        if min(h, s, d) < 1:
            raise ValueError(f"shape {item!r} has a non-positive extent")
        out.append((h, s, d))
    if not out:
        raise ValueError("no shapes given")
    return out
