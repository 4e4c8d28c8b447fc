"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from . import config as config_mod
from .errors import CheckpointError, ConfigError, TermvelError
from .network import ModelConfig, init_params
from .oracles import (GaussianTask, check_lemma1_bound, network_map_and_derivative, sample_n_steps,
                      sample_toy, w2_distance)
from .trainer import TrainingAborted, format_metrics, load_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def num_workers():
    try:
        return max(1, int(os.environ.get("TVM_NUM_WORKERS", "1")))
    except ValueError:
        raise UsageError("TVM_NUM_WORKERS must be an integer") from None


@contextmanager
def run_lock(out_dir):
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out_dir} is locked by another run ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _load_config(path, seed=None):
    if path is None:
        rc = config_mod.RunConfig()
    else:
        try:
            rc = config_mod.load(path)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        except ConfigError as e:
            raise UsageError(f"{path}: {e}") from None
    if seed is not None:
        rc.run.seed = seed
    return rc


def _run_dir_config(checkpoint):
    """Config snapshot of the run a checkpoint belongs to (``run/checkpoints/step_N``)."""
    run_dir = os.path.dirname(os.path.dirname(os.path.abspath(checkpoint)))
    snap = os.path.join(run_dir, "config.snapshot")
    return snap if os.path.exists(snap) else None


# -- evaluation helpers ----------------------------------------------------------

def reference_samples(rc, n, seed):
    rng = np.random.default_rng([seed, 7])
    if rc.task.kind == "gaussian":
        return GaussianTask(np.array(rc.task.mu0), rc.task.sigma0).sample_data(rng, n)
    return sample_toy(rc.task.name, n, rng)


def generate(rc, params, n_steps, count, seed, w=None, class_id=None):
    rng = np.random.default_rng([seed, 11])
    x1 = rng.standard_normal((count, rc.task_dim()))
    labels = None
    if rc.model.conditional:
        cid = rc.model.null_label if class_id is None else class_id
        labels = np.full(count, cid)
    ws = None if w is None else np.full(count, float(w))
    return sample_n_steps(params, x1, n_steps, rc.model, labels, ws)


def eval_summary(rc, state, nfe=(1, 2, 4), seed=0):
    n = min(rc.task.eval_count, 2048)
    ref = reference_samples(rc, n, seed)
    out = {"step": state.step, "n": n}
    for k in nfe:
        out[f"w2_exact_nfe{k}"] = w2_distance(generate(rc, state.ema_eval, k, n, seed), ref)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_train(args):
    rc = _load_config(args.config, args.seed)
    out = args.output_dir or "run"
    for sub in ("checkpoints", "samples", "reports"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    with run_lock(out):
        state = None
        if args.checkpoint:
            state = _load_state(args.checkpoint)
        with open(os.path.join(out, "config.snapshot"), "w", encoding="utf-8") as fh:
            fh.write(config_mod.dumps(rc))
        metrics_path = os.path.join(out, "metrics.ndjson")
        _truncate_metrics(metrics_path, 0 if state is None else state.step)
        with open(metrics_path, "a", encoding="utf-8") as fh:
            try:
                state = train(rc, state, fh, os.path.join(out, "checkpoints"))
            except TrainingAborted as e:
                print(f"numerical abort: {e.cause}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
                return EXIT_NUMERIC
        summary = eval_summary(rc, state, seed=rc.run.seed) if not args.no_eval else {"step": state.step}
        with open(os.path.join(out, "reports", "train_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _truncate_metrics(path, step):
    """Keep metric lines up to ``step`` so a resumed run appends cleanly."""
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        keep = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] <= step]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(keep)


def _load_state(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise UsageError(str(e)) from None


def _model_config_for(args):
    cfg_path = args.config or _run_dir_config(args.checkpoint)
    if cfg_path is None:
        raise UsageError("no --config given and no config.snapshot beside the checkpoint")
    return _load_config(cfg_path, args.seed)


def cmd_sample(args):
    if args.n_steps < 1:
        raise UsageError("--n-steps must be >= 1")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    state = _load_state(args.checkpoint)
    rc = _model_config_for(args)
    params = getattr(state, args.weights)
    seed = rc.run.seed if args.seed is None else args.seed
    if args.class_id is not None and not 0 <= args.class_id <= rc.model.label_count:
        raise UsageError(f"--class must lie in [0, {rc.model.label_count}]")
    if args.count:
        xs = generate(rc, params, args.n_steps, args.count, seed, args.w, args.class_id)
    else:
        xs = np.zeros((0, rc.task_dim()))
    path = args.output
    if path is None:
        run_dir = os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint)))
        os.makedirs(os.path.join(run_dir, "samples"), exist_ok=True)
        path = os.path.join(run_dir, "samples", f"nfe{args.n_steps}_seed{seed}.csv")
    cls = "none" if args.class_id is None else args.class_id
    w = 1.0 if args.w is None else args.w
    write_samples(path, xs, f"n_steps={args.n_steps} w={w} class={cls} seed={seed}")
    print(path)
    return EXIT_OK


def write_samples(path, xs, header):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(xs.shape[1])])
        for row in xs:
            w.writerow([repr(float(v)) for v in row])


def read_samples(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from None
    rows = list(csv.reader(lines))
    if not rows:
        raise UsageError(f"{path}: missing column header")
    dim = len(rows[0])
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from None
    return data.reshape(-1, dim)


def cmd_eval(args):
    a = read_samples(args.samples)
    b = read_samples(args.reference)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimension mismatch: samples have {a.shape[1]} columns, reference {b.shape[1]}")
    seed = 0 if args.seed is None else args.seed
    if args.mode == "exact":
        if a.shape[0] != b.shape[0]:
            raise UsageError("exact W2 needs equal sample counts; use --mode sliced")
        report = {"w2_exact": w2_distance(a, b), "n": int(a.shape[0]), "seed": seed}
    else:
        report = {"w2_sliced": w2_distance(a, b, "sliced", np.random.default_rng(seed)),
                  "n": int(a.shape[0]), "seed": seed}
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_verify_kernel(args):
    from .kernelbench import verify
    rep = verify(0 if args.seed is None else args.seed, args.trials)
    for k, v in rep.max_err.items():
        print(f"{k:8s} max_abs_err={v:.3e}")
    print(f"{'PASS' if rep.passed else 'FAIL'} trials={rep.trials} worst={rep.worst:.3e} tol={rep.tolerance:g}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_bench_kernel(args):
    from .kernelbench import bench, parse_shapes, write_bench_csv
    try:
        shapes = parse_shapes(args.shapes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = bench(shapes, seed=0 if args.seed is None else args.seed,
                 dtype=np.dtype(args.dtype), naive_cap_bytes=int(args.naive_cap_mb) << 20)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            write_bench_csv(rows, fh)
    write_bench_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_check_bound(args):
    rc = _load_config(args.config, args.seed)
    if rc.task.kind != "gaussian":
        raise UsageError("check-bound needs a [task] kind = gaussian config")
    task = GaussianTask(np.array(rc.task.mu0), rc.task.sigma0)
    seed = rc.run.seed
    ts = [float(x) for x in args.t_values.split(",")]
    if args.checkpoint:
        models = [("checkpoint", _load_state(args.checkpoint).ema_eval)]
    else:
        models = [(f"draw{i}", _random_params(rc.model, seed, i)) for i in range(args.trials)]
    jobs = [(name, p, t) for name, p in models for t in ts]

    def run(job_index):
        name, p, t = jobs[job_index]
        rng = np.random.default_rng([seed, job_index])
        res = check_lemma1_bound(network_map_and_derivative(p, rc.model), task, t, args.mc_samples, rng, args.nodes)
        return name, res

    with ThreadPoolExecutor(num_workers()) as pool:
        results = list(pool.map(run, range(len(jobs))))
    ok = True
    lines = []
    for name, res in results:
        d = json.loads(res.to_json())
        d["model"] = name
        lines.append(json.dumps(d, sort_keys=True))
        ok &= res.holds
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    print(f"{'PASS' if ok else 'FAIL'} {len(results)} checks", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def _random_params(cfg: ModelConfig, seed, i):
    """Random network with a non-zero output layer, so the bound is not trivial."""
    rng = np.random.default_rng([seed, 1000 + i])
    p = init_params(cfg, rng)
    for k in ("final.out.w", "final.out.b"):
        p[k] = rng.standard_normal(p[k].shape) / np.sqrt(p[k].shape[0])
    return p


# -- parser ---------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="termvel", description="Terminal-velocity flow-map training toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run configuration (INI)")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--output-dir", help="run directory (default ./run)")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--no-eval", action="store_true", help="skip the final W2 summary")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-steps", type=int, default=1)
    p.add_argument("--count", type=int, default=1024)
    p.add_argument("--w", type=float, help="guidance weight")
    p.add_argument("--class", dest="class_id", type=int, help="class label (default: null label)")
    p.add_argument("--weights", choices=("params", "ema_target", "ema_eval"), default="ema_eval")
    p.add_argument("--output", help="CSV path (default: <run>/samples/...)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="2-Wasserstein distance between two sample files")
    common(p, config=False)
    p.add_argument("--samples", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mode", choices=("exact", "sliced"), default="exact")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-kernel", help="check the attention kernel against its oracle")
    common(p, config=False)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_verify_kernel)

    p = sub.add_parser("bench-kernel", help="latency and peak memory of the attention backward")
    common(p, config=False)
    p.add_argument("--shapes", default="1x128x64,8x128x64,1x1024x64,8x1024x64,1x4096x64",
                   help="comma list of HxSxd")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--naive-cap-mb", type=int, default=2048)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_bench_kernel)

    p = sub.add_parser("check-bound", help="Monte-Carlo check of the displacement-error bound")
    common(p)
    p.add_argument("--checkpoint", help="check a trained model instead of random draws")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--t-values", default="0.25,0.5,0.75,1.0")
    p.add_argument("--mc-samples", type=int, default=10000)
    p.add_argument("--nodes", type=int, default=64)
    p.add_argument("--output", help="NDJSON path")
    p.set_defaults(func=cmd_check_bound)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TermvelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
