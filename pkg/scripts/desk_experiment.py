"""Train TVM and a flow-matching baseline on 8-gaussians with the same budget.

Prints exact W2 to held-out data for TVM at 1, 2 and 4 steps and for the
baseline with 64 Euler steps, as JSON.

    python3 scripts/desk_experiment.py [--config scripts/configs/desk_8gaussians.ini] [--steps N]
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from termvel.cli import reference_samples
from termvel.config import load
from termvel.oracles import sample_euler, sample_n_steps, w2_distance
from termvel.trainer import train

HERE = Path(__file__).resolve().parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "desk_8gaussians.ini"))
    ap.add_argument("--steps", type=int, help="override [run] steps for both models")
    ap.add_argument("--count", type=int, default=1024, help="evaluation sample count (<= 2048)")
    ap.add_argument("--seed", type=int, default=0, help="evaluation seed")
    args = ap.parse_args(argv)

    rc = load(args.config)
    if args.steps is not None:
        rc.run.steps = args.steps
    ref = reference_samples(rc, args.count, args.seed)
    x1 = np.random.default_rng([args.seed, 11]).standard_normal((args.count, rc.task_dim()))
    out = {"steps": rc.run.steps}

    t0 = time.perf_counter()
    rc.objective.kind = "tvm"
    tvm = train(rc, progress=_progress("tvm", rc.run.steps))
    for k in (1, 2, 4):
        out[f"tvm_w2_nfe{k}"] = w2_distance(sample_n_steps(tvm.ema_eval, x1, k, rc.model), ref)
    out["tvm_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rc.objective.kind = "fm"
    fm = train(rc, progress=_progress("fm", rc.run.steps))
    out["fm_w2_euler64"] = w2_distance(sample_euler(fm.ema_eval, x1, 64, rc.model), ref)
    out["fm_seconds"] = time.perf_counter() - t0
    out["ratio_nfe1_to_fm64"] = out["tvm_w2_nfe1"] / out["fm_w2_euler64"]
    print(json.dumps(out, indent=2))


def _progress(name, total):
    every = max(1, total // 20)

    def cb(m):
        if m["step"] % every == 0:
            print(f"{name} step {m['step']}/{total} total={m['total']:.4f}", file=sys.stderr)
    return cb


if __name__ == "__main__":
    main()
