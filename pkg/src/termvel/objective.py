"""Training objectives.

The map is ``f(x, t, s) = (s - t) * k * F(x, t, t - s, c, beta)`` with
``k = w`` under the scaled parameterisation and ``k = 1`` otherwise.  Its
s-derivative is taken with a forward-mode pass that stays on the reverse
graph, so the loss can be differentiated through it.

Parameter arguments are mappings from path to array or graph node.  The
student ``params`` is differentiated; ``params_sg`` (the stop-grad copy of the
student) and ``params_ema`` (the target) are only ever evaluated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError
from .network import ModelConfig, apply


@dataclass
class ObjectiveConfig:
    kind: str = "tvm"  # "tvm", "fm" or "meanflow"
    w2_weight_fm: bool = True  # weight the flow-matching term by 1/w^2 as well

    def validate(self):
        if self.kind not in ("tvm", "fm", "meanflow"):
            raise ValueError(f"unknown objective {self.kind!r}")
        return self


@dataclass
class Batch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    s: np.ndarray
    s_fm: np.ndarray | None = None
    labels: np.ndarray | None = None
    w: np.ndarray | None = None

    def __post_init__(self):
        n = self.x0.shape[0]
        if self.s_fm is None:
            self.s_fm = self.s
        if self.w is None:
            self.w = np.ones(n)

    def validate(self, null_label=None):
        t, s = self.t, self.s
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0 and x1 shapes differ")
        if np.any(s < 0) or np.any(s > t) or np.any(t > 1):
            raise ValueError("batch needs 0 <= s <= t <= 1")
        if np.any(self.w < 1):
            raise ValueError("guidance weights must be >= 1")
        if self.labels is not None and null_label is not None:
            if np.any(self.w[self.labels == null_label] != 1):
                raise ValueError("null label must carry w == 1")
        return self


@dataclass
class MapEval:
    f_ts: ad.Node
    dfds: ad.Node
    F_value: ad.Node


@dataclass
class LossTerms:
    terminal_term: float
    fm_term: float
    total: float
    loss: ad.Node  # differentiable total
    indicator_active: np.ndarray
    weight: np.ndarray
    per_element: np.ndarray

    def as_metrics(self):
        return {"terminal_term": self.terminal_term, "fm_term": self.fm_term, "total": self.total}


def interpolate(x0, x1, t):
    """``x_t = (1 - t) x0 + t x1`` and ``v = x1 - x0``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return (1.0 - t) * x0 + t * x1, x1 - x0


def cfg_fm_target(v, u_uncond, w):
    """``w v + (1 - w) u_uncond`` with ``w`` broadcast per row."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, *([1] * (np.ndim(v) - 1)))
    return w * v + (1.0 - w) * u_uncond


def _kappa(w, scaled):
    if not scaled or w is None:
        return None
    return np.asarray(w, dtype=np.float64)[:, None]


def _scale(node, kappa):
    return node if kappa is None else node * kappa


def _beta(w):
    return None if w is None else 1.0 / np.asarray(w, dtype=np.float64)


def eval_map_and_derivative(params, x_t, t, s, cfg: ModelConfig, labels=None, w=None, scaled=None):
    """Map value and its s-derivative; both stay reverse-differentiable."""
    scaled = cfg.use_scaled_param if scaled is None else scaled
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    kappa = _kappa(w, scaled)
    F, dF = ad.jvp(lambda s_: apply(params, x_t, t, t - s_, _beta(w), labels, cfg), [s], [np.ones_like(s)])
    gap = (s - t)[:, None]
    f = _scale(F * gap, kappa)
    dfds = _scale(F + dF * gap, kappa)
    return MapEval(f, dfds, F)


def velocity(params, x, t, cfg: ModelConfig, labels=None, w=None, scaled=None, stats=None):
    """Instantaneous velocity ``k * F(x, t, t)``."""
    scaled = cfg.use_scaled_param if scaled is None else scaled
    t = np.asarray(t, dtype=np.float64)
    F = apply(params, x, t, np.zeros_like(t), _beta(w), labels, cfg, stats)
    return _scale(F, _kappa(w, scaled))


def _frozen_velocity(params, x, t, cfg, labels, w, scaled):
    with ad.no_grad():
        return velocity(ad.constants(params), x, t, cfg, labels, w, scaled).value


def _null(cfg, n):
    return np.full(n, cfg.null_label) if cfg.conditional else None


def _cfg_target(params_ema, x_s, s, v, w, cfg, scaled):
    if w is None or np.all(w == 1):
        return v
    u_uncond = _frozen_velocity(params_ema, x_s, s, cfg, _null(cfg, len(s)), np.ones_like(s), scaled)
    return cfg_fm_target(v, u_uncond, w)


def _row_mse(diff):
    return ad.mean(diff * diff, axis=1)


def _check(where, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(where)


def _assemble(term_rows, fm_rows, ind, w, ocfg):
    weight = 1.0 / np.asarray(w, dtype=np.float64) ** 2
    fm_weight = weight if ocfg.w2_weight_fm else np.ones_like(weight)
    n = fm_rows.shape[0]
    terminal = ad.sum_(term_rows * (ind * weight)) * (1.0 / n)
    fm = ad.sum_(fm_rows * fm_weight) * (1.0 / n)
    _check("terminal_term", terminal.value)
    _check("fm_term", fm.value)
    total = terminal + fm
    per = term_rows.value * ind * weight + fm_rows.value * fm_weight
    return LossTerms(float(terminal.value), float(fm.value), float(total.value), total,
                     ind, weight, per)


def tvm_loss(params, params_sg, params_ema, batch: Batch, cfg: ModelConfig,
             ocfg: ObjectiveConfig | None = None, stats=None) -> LossTerms:
    """Terminal-velocity loss plus the (guided) flow-matching term.

    ``params_sg`` of ``None`` reuses the student's own map value under
    stop-grad, which is numerically the same copy without a second pass.
    The student's map pass and its flow-matching pass share one network call
    over the concatenated batch: the first half carries an s-tangent of one,
    the second half a zero tangent.
    """
    ocfg = ocfg or ObjectiveConfig()
    b = batch
    n = b.x0.shape[0]
    w = b.w
    kappa2 = _kappa(np.concatenate([w, w]), cfg.use_scaled_param)
    labels2 = None if b.labels is None else np.concatenate([b.labels, b.labels])
    x_t, _ = interpolate(b.x0, b.x1, b.t)
    x_f, v_f = interpolate(b.x0, b.x1, b.s_fm)

    t_all = np.concatenate([b.t, b.s_fm])
    s_all = np.concatenate([b.s, b.s_fm])
    tan = np.concatenate([np.ones(n), np.zeros(n)])
    x_all = np.concatenate([x_t, x_f])
    beta2 = _beta(np.concatenate([w, w]))
    F, dF = ad.jvp(lambda s_: apply(params, x_all, t_all, t_all - s_, beta2, labels2, cfg, stats),
                   [s_all], [tan])
    _check("network output", F.value)
    F_map, F_fm = F[:n], F[n:]
    kappa = None if kappa2 is None else kappa2[:n]
    gap = (b.s - b.t)[:, None]
    dfds = _scale(F_map + dF[:n] * gap, kappa)
    _check("dfds", dfds.value)

    if params_sg is None:
        f_sg = _scale(F_map * gap, kappa).value
    else:
        with ad.no_grad():
            f_sg = eval_map_and_derivative(ad.constants(params_sg), x_t, b.t, b.s, cfg, b.labels, w,
                                           cfg.use_scaled_param).f_ts.value
    u_tgt = _frozen_velocity(params_ema, x_t + f_sg, b.s, cfg, b.labels, w, cfg.use_scaled_param)
    ind = (b.t != b.s).astype(np.float64)
    term_rows = _row_mse(dfds - u_tgt)

    fm_tgt = _cfg_target(params_ema, x_f, b.s_fm, v_f, w, cfg, cfg.use_scaled_param)
    fm_rows = _row_mse(_scale(F_fm, kappa) - fm_tgt)
    return _assemble(term_rows, fm_rows, ind, w, ocfg)


def fm_loss(params, params_ema, batch: Batch, cfg: ModelConfig,
            ocfg: ObjectiveConfig | None = None, stats=None) -> LossTerms:
    """(Guided) flow matching at ``s_fm`` alone; the terminal term is zero."""
    ocfg = ocfg or ObjectiveConfig()
    b = batch
    x_f, v_f = interpolate(b.x0, b.x1, b.s_fm)
    u = velocity(params, x_f, b.s_fm, cfg, b.labels, b.w, cfg.use_scaled_param, stats)
    _check("network output", u.value)
    fm_tgt = _cfg_target(params_ema, x_f, b.s_fm, v_f, b.w, cfg, cfg.use_scaled_param)
    fm_rows = _row_mse(u - fm_tgt)
    zero = ad.lift(np.zeros(len(b.s_fm)))
    return _assemble(zero, fm_rows, np.zeros(len(b.s_fm)), b.w, ocfg)


def _meanflow_parts(params, params_ema, batch: Batch, cfg: ModelConfig, ocfg: ObjectiveConfig):
    b = batch
    x_t, v = interpolate(b.x0, b.x1, b.t)
    v = _cfg_target(params_ema, x_t, b.t, v, b.w, cfg, cfg.use_scaled_param)
    kappa = _kappa(b.w, cfg.use_scaled_param)
    s = b.s
    F, dF = ad.jvp(lambda x_, t_: _scale(apply(params, x_, t_, t_ - s, _beta(b.w), b.labels, cfg), kappa),
                   [x_t, b.t], [v, np.ones_like(b.t)])
    return x_t, v, F, dF


def meanflow_loss(params, params_ema, batch: Batch, cfg: ModelConfig,
                  ocfg: ObjectiveConfig | None = None) -> LossTerms:
    """Baseline: regress ``F`` on ``stop_grad(v + (s - t) dF/dt)``.

    The total derivative runs along ``(x, t) -> (v, 1)`` with ``s`` fixed.
    """
    ocfg = ocfg or ObjectiveConfig()
    b = batch
    _, v, F, dF = _meanflow_parts(params, params_ema, b, cfg, ocfg)
    target = v + (b.s - b.t)[:, None] * dF.value
    _check("meanflow target", target)
    rows = _row_mse(F - target)
    zero = ad.lift(np.zeros(len(b.t)))
    return _assemble(zero, rows, np.zeros(len(b.t)), np.ones(len(b.t)), ocfg)


def meanflow_loss_total_derivative(params, params_ema, batch: Batch, cfg: ModelConfig,
                                   ocfg: ObjectiveConfig | None = None) -> float:
    """Same loss value written as ``|d/dt f + v|^2`` with ``f = (s - t) F``."""
    ocfg = ocfg or ObjectiveConfig()
    b = batch
    x_t, v = interpolate(b.x0, b.x1, b.t)
    v = _cfg_target(params_ema, x_t, b.t, v, b.w, cfg, cfg.use_scaled_param)
    kappa = _kappa(b.w, cfg.use_scaled_param)
    s = b.s

    def f(x_, t_):
        F = _scale(apply(params, x_, t_, t_ - s, _beta(b.w), b.labels, cfg), kappa)
        return F * ad.reshape(ad.lift(s) - t_, (-1, 1))

    with ad.no_grad():
        _, df = ad.jvp(f, [x_t, b.t], [v, np.ones_like(b.t)])
    return float(np.mean((df.value + v) ** 2))


def compute_loss(params, params_ema, batch: Batch, cfg: ModelConfig, ocfg: ObjectiveConfig, stats=None):
    if ocfg.kind == "tvm":
        return tvm_loss(params, None, params_ema, batch, cfg, ocfg, stats)
    if ocfg.kind == "fm":
        return fm_loss(params, params_ema, batch, cfg, ocfg, stats)
    return meanflow_loss(params, params_ema, batch, cfg, ocfg)
