"""Training loop: batch assembly, Adam, two EMA copies, checkpoints, metrics."""
from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import OptimizerConfig, RunConfig
from .errors import CheckpointError, NonFiniteError, ShapeError
from .network import init_params, max_activation_rms
from .objective import Batch, compute_loss
from .oracles import GaussianTask, sample_toy
from .params import ParamStore, read_store, write_store
from .schedules import sample_cfg, sample_pairs, step_rng

STATE_MAGIC = b"TVMS"
STATE_VERSION = 1
METRIC_KEYS = ("step", "terminal_term", "fm_term", "total", "grad_norm", "max_activation_rms")


@dataclass
class TrainState:
    params: ParamStore
    ema_target: ParamStore
    ema_eval: ParamStore
    m: ParamStore
    v: ParamStore
    step: int = 0

    @classmethod
    def fresh(cls, params: ParamStore) -> "TrainState":
        return cls(params.copy(), params.copy(), params.copy(), params.zeros_like(), params.zeros_like(), 0)

    def check(self):
        for other in (self.ema_target, self.ema_eval, self.m, self.v):
            self.params.check_aligned(other)
        return self

    def stores(self):
        return (self.params, self.ema_target, self.ema_eval, self.m, self.v)


class TrainingAborted(RuntimeError):
    """Raised when a step produced a non-finite value; carries the last good checkpoint."""

    def __init__(self, cause: NonFiniteError, checkpoint):
        self.cause = cause
        self.checkpoint = checkpoint
        super().__init__(f"{cause}; last good checkpoint: {checkpoint}")


# -- optimizer and EMA --------------------------------------------------------

def ema_update(slow: ParamStore, fast, rate: float) -> ParamStore:
    """``rate * slow + (1 - rate) * fast`` per parameter.

    Written as ``slow + (1 - rate) * (fast - slow)`` so that equal inputs stay
    bit-identical; ``rate == 0`` copies ``fast`` exactly.
    """
    slow.check_aligned(fast)
    if rate == 0:
        return ParamStore((k, np.array(fast[k], dtype=np.float64)) for k in slow)
    return ParamStore((k, slow[k] + (1.0 - rate) * (np.asarray(fast[k]) - slow[k])) for k in slow)


def adam_update(params: ParamStore, grads, m: ParamStore, v: ParamStore, step: int, opt: OptimizerConfig):
    """One Adam step with bias correction; ``step`` counts from 1.

    Weight decay is decoupled (applied to the parameters directly).
    """
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    p_out, m_out, v_out = ParamStore(), ParamStore(), ParamStore()
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        mk = b1 * m[k] + (1.0 - b1) * g
        vk = b2 * v[k] + (1.0 - b2) * g * g
        update = (mk / c1) / (np.sqrt(vk / c2) + opt.eps)
        p = params[k]
        if opt.weight_decay:
            p = p - opt.lr * opt.weight_decay * p
        p_out[k] = p - opt.lr * update
        m_out[k], v_out[k] = mk, vk
    return p_out, m_out, v_out


# -- data ---------------------------------------------------------------------

def make_data_source(rc: RunConfig):
    """``(rng, n) -> (x0, labels or None)`` for the configured task."""
    task = rc.task
    if task.kind == "gaussian":
        g = GaussianTask(np.array(task.mu0), task.sigma0)
        return lambda rng, n: (g.sample_data(rng, n), None)

    def toy(rng, n):
        x, lab = sample_toy(task.name, n, rng, with_labels=True)
        return x, (lab if task.conditional else None)

    return toy


def make_batch(rc: RunConfig, data, rng) -> Batch:
    n = rc.run.batch
    x0, labels = data(rng, n)
    x1 = rng.standard_normal(x0.shape)
    labels, w = sample_cfg(rc.cfg, rng, labels, rc.model.null_label)
    t, s, s_fm = sample_pairs(rc.sampler, rng, n)
    return Batch(x0, x1, t, s, s_fm, labels, w)


# -- step -----------------------------------------------------------------------

def train_step(state: TrainState, rc: RunConfig, data, rng=None):
    """One optimizer step; returns ``(new_state, metrics)``.

    Raises :class:`NonFiniteError` (state untouched) if the loss or any
    gradient is not finite.
    """
    rng = rng if rng is not None else step_rng(rc.run.seed, state.step)
    batch = make_batch(rc, data, rng)
    nodes = ad.as_params(state.params)
    stats = {}
    terms = compute_loss(nodes, state.ema_target, batch, rc.model, rc.objective, stats)
    grads = ad.backward(terms.loss, nodes)
    sq = 0.0
    for k in state.params:
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {k}")
        sq += float(np.sum(g * g))
    step = state.step + 1
    params, m, v = adam_update(state.params, grads, state.m, state.v, step, rc.optimizer)
    new = TrainState(params, ema_update(state.ema_target, params, rc.ema.target),
                     ema_update(state.ema_eval, params, rc.ema.eval), m, v, step)
    metrics = {"step": step, **terms.as_metrics(), "grad_norm": math.sqrt(sq),
               "max_activation_rms": max_activation_rms(stats) if stats else 0.0}
    return new, metrics


# -- checkpoints ------------------------------------------------------------------

def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(STATE_MAGIC)
    buf.write(struct.pack("<IQ", STATE_VERSION, state.step))
    for store in state.stores():
        write_store(buf, store)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> TrainState:
    buf = io.BytesIO(data)
    if buf.read(4) != STATE_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    head = buf.read(12)
    if len(head) != 12:
        raise CheckpointError("truncated checkpoint header")
    version, step = struct.unpack("<IQ", head)
    if version != STATE_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stores = [read_store(buf) for _ in range(5)]
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    state = TrainState(*stores, step=step)
    try:
        return state.check()
    except ShapeError as e:
        raise CheckpointError(f"inconsistent checkpoint: {e}") from None


def save_checkpoint(state: TrainState, path):
    """Write atomically: a crash never leaves a partial file at ``path``."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(state))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return checkpoint_from_bytes(data)


# -- loop ---------------------------------------------------------------------

def format_metrics(metrics) -> str:
    return json.dumps({k: metrics[k] for k in METRIC_KEYS})


def initial_state(rc: RunConfig) -> TrainState:
    rng = np.random.default_rng([int(rc.run.seed), 2 ** 32 - 1])
    return TrainState.fresh(init_params(rc.model, rng))


def train(rc: RunConfig, state: TrainState | None = None, metrics_fh=None, checkpoint_dir=None,
          until: int | None = None, progress=None) -> TrainState:
    """Run steps ``state.step + 1 .. until`` (default ``rc.run.steps``).

    Checkpoints go to ``checkpoint_dir/step_N`` every ``checkpoint_every``
    steps and at the end; on a numerical abort the pre-step state is written
    and :class:`TrainingAborted` is raised.
    """
    data = make_data_source(rc)
    state = state if state is not None else initial_state(rc)
    until = rc.run.steps if until is None else until

    def ckpt(st):
        if checkpoint_dir is None:
            return None
        path = os.path.join(checkpoint_dir, f"step_{st.step}")
        save_checkpoint(st, path)
        return path

    if state.step == 0:
        ckpt(state)
    while state.step < until:
        try:
            state, metrics = train_step(state, rc, data)
        except NonFiniteError as e:
            raise TrainingAborted(e, ckpt(state)) from e
        if metrics_fh is not None and metrics["step"] % rc.run.log_every == 0:
            metrics_fh.write(format_metrics(metrics) + "\n")
        if progress is not None:
            progress(metrics)
        if state.step % rc.run.checkpoint_every == 0 or state.step == until:
            ckpt(state)
    return state
