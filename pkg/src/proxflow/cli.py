"""Command-line entry point: training, sampling, inversion, oracle
generation, evaluation, and gradient checking as reproducible runs.

Exit codes: 0 success, 1 usage error, 2 numerical failure. Failures print
one machine-readable JSON object on stderr. All files are UTF-8 CSV/JSON
with mandatory header rows.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import linalg, metrics, problems
from . import train as tr
from .conditional import cond_logdensity_batch, cond_sample, model_from_checkpoint
from .errors import ProxflowError
from .flow import flow_logdensity_batch, load_checkpoint

CHUNK = 4096

PRESETS = {
    "toy": dict(n=2, d=0, K=20, p=64, h=64, gamma=1.99, batch_b=200,
                epochs_e=20, steps_s=2000, lr_tau=1e-3),
    "circle": dict(n=2, d=1, K=20, p=64, h=64, gamma=1.99, batch_b=800,
                   epochs_e=20, steps_s=2000, lr_tau=1e-3),
    "mixture": dict(n=50, d=50, K=20, p=2, h=128, gamma=1.99, batch_b=200,
                    epochs_e=20, steps_s=2000, lr_tau=5e-3),
}

TRAIN_PROBLEMS = problems.TOY_NAMES + ("circle", "mixture")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def thread_cap():
    """PROXFLOW_THREADS caps internal parallel maps (default 1)."""
    try:
        return max(1, int(os.environ.get("PROXFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn, rows):
    """Ordered parallel map over fixed-size row chunks; chunking is
    independent of the thread count, so results are deterministic."""
    chunks = [rows[i:i + CHUNK] for i in range(0, len(rows), CHUNK)]
    if not chunks:
        return np.zeros((0,))
    workers = thread_cap()
    if workers == 1 or len(chunks) == 1:
        outs = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(fn, chunks))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# CSV interchange (comma separator, dot decimal, mandatory header)
# ---------------------------------------------------------------------------

def sample_header(d, n):
    return [f"y{i}" for i in range(d)] + [f"x{i}" for i in range(n)]


def write_csv(path, rows, header):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    os.replace(tmp, path)


def read_csv(path):
    """(header list, (rows, cols) float array); malformed input raises
    UsageError."""
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise UsageError(f"{path}: empty CSV")
    header = lines[0].split(",")
    data = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise UsageError(f"{path}: ragged row {ln!r}")
        try:
            data.append([float(v) for v in parts])
        except ValueError as exc:
            raise UsageError(f"{path}: non-numeric value ({exc})") from exc
    if not data:
        raise UsageError(f"{path}: CSV has a header but no rows")
    return header, np.asarray(data)


def _write_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_config(args):
    if args.config is None and args.preset is None:
        raise UsageError("train needs --config or --preset")
    payload = dict(PRESETS[args.preset]) if args.preset else {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"no such config: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                file_payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"bad config JSON: {exc}") from exc
        payload.update(file_payload)
    try:
        return tr.TrainConfig.from_json_dict(payload)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _make_sampler(args, config):
    if args.data:
        _, rows = read_csv(args.data)
        if rows.shape[1] != config.d + config.n:
            raise UsageError(
                f"data has {rows.shape[1]} columns, config needs "
                f"{config.d + config.n}")

        def sampler(rng, size):
            idx = rng.integers(0, rows.shape[0], size=size)
            return rows[idx]

        return sampler
    name = args.problem
    if name is None:
        raise UsageError("train needs --problem or --data")
    if name in problems.TOY_NAMES:
        if config.d != 0 or config.n != 2:
            raise UsageError(f"toy problem {name} needs n=2, d=0")
        return lambda rng, size: problems.sample_toy(name, size, rng)
    if name == "circle":
        if (config.d, config.n) != (1, 2):
            raise UsageError("circle needs n=2, d=1")
        spec = problems.circle_problem()
        return lambda rng, size: spec.sample_pairs(rng, size)
    if name == "mixture":
        if config.d != config.n:
            raise UsageError("mixture needs d = n")
        spec = problems.mixture_problem(
            n=config.n, rng=linalg.make_rng(args.problem_seed))
        return lambda rng, size: spec.sample_pairs(rng, size)
    raise UsageError(f"unknown problem {name!r}")


def cmd_train(args):
    config = _load_config(args)
    sampler = _make_sampler(args, config)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), config.to_dict())
    start = time.monotonic()
    ckpt, history = tr.train_loop(config, sampler, out_dir=args.out)
    wall = time.monotonic() - start
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "problem": args.problem or args.data,
        "problem_seed": args.problem_seed,
        "artifacts": {
            "checkpoint": os.path.join(args.out, "checkpoint.json"),
            "history": os.path.join(args.out, "history.csv"),
        },
        "wall_clock_s": wall,
        "version": __version__,
    }
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    print(f"trained {len(history)} steps, final loss {history[-1][1]:.4f}, "
          f"outputs in {args.out}")
    return 0


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"no such checkpoint: {path}")
    return model_from_checkpoint(load_checkpoint(path))


def _parse_cond(arg, d):
    if arg is None:
        raise UsageError("conditional checkpoint needs --cond")
    if os.path.exists(arg):
        _, rows = read_csv(arg)
        y = rows[0]
    else:
        try:
            y = np.array([float(v) for v in arg.split(",")])
        except ValueError as exc:
            raise UsageError(f"bad --cond value: {exc}") from exc
    if y.size != d:
        raise UsageError(f"--cond has {y.size} values, model needs {d}")
    return y


def cmd_sample(args):
    model = _load_model(args.ckpt)
    rng = linalg.make_rng(args.seed)
    if model.cond_dim:
        y = _parse_cond(args.cond, model.cond_dim)
        rows = cond_sample(model, y, args.count, rng)
    else:
        if args.cond is not None:
            raise UsageError("--cond given but the checkpoint is unconditional")
        rows = _chunked(lambda z: flow_sample_rows(model, z),
                        rng.standard_normal((args.count, model.dim)))
    write_csv(args.out, rows, sample_header(0, model.dim))
    print(f"wrote {rows.shape[0]} samples to {args.out}")
    return 0


def flow_sample_rows(model, z_rows):
    return model.inverse(z_rows.T).T


def cmd_density(args):
    model = _load_model(args.ckpt)
    _, rows = read_csv(args.infile)
    d = model.cond_dim
    if rows.shape[1] != d + model.dim:
        raise UsageError(
            f"input has {rows.shape[1]} columns, model needs {d + model.dim}")
    if d:
        def fn(chunk):
            out = np.empty(chunk.shape[0])
            for i, row in enumerate(chunk):
                out[i] = cond_logdensity_batch(model, row[:d],
                                               row[None, d:])[0]
            return out
        logps = _chunked(fn, rows)
    else:
        logps = _chunked(lambda c: flow_logdensity_batch(model, c), rows)
    write_csv(args.out, logps[:, None], ["logdensity"])
    print(f"wrote {logps.size} log-densities to {args.out}")
    return 0


def cmd_invert(args):
    model = _load_model(args.ckpt)
    _, rows = read_csv(args.infile)
    d = model.cond_dim
    if rows.shape[1] != d + model.dim:
        raise UsageError(
            f"input has {rows.shape[1]} columns, model needs {d + model.dim}")
    if d:
        out = np.empty((rows.shape[0], model.dim))
        for i, row in enumerate(rows):
            out[i] = model.inverse(row[:d], row[d:, None])[:, 0]
    else:
        out = _chunked(lambda c: model.inverse(c.T).T, rows)
    write_csv(args.out, out, sample_header(0, model.dim))
    print(f"wrote {out.shape[0]} preimages to {args.out}")
    return 0


def cmd_oracle(args):
    rng = linalg.make_rng(args.seed)
    if args.problem == "circle":
        if args.y is not None:
            raise UsageError(
                "the circle posterior has no analytic oracle; --y is only "
                "supported for the mixture problem")
        spec = problems.circle_problem()
        rows = spec.sample_pairs(rng, args.count)
        write_csv(args.out, rows, sample_header(spec.dim_y, spec.dim_x))
    elif args.problem == "mixture":
        spec = problems.mixture_problem(n=args.dim,
                                        rng=linalg.make_rng(args.problem_seed))
        if args.y is None:
            rows = spec.sample_pairs(rng, args.count)
            write_csv(args.out, rows, sample_header(spec.dim_y, spec.dim_x))
        else:
            y = np.array([float(v) for v in args.y.split(",")])
            if y.size != spec.dim_y:
                raise UsageError(f"--y needs {spec.dim_y} values")
            post = problems.mixture_posterior(spec, y)
            rows = problems.gmm_sample(post, args.count, rng)
            write_csv(args.out, rows, sample_header(0, spec.dim_x))
    else:
        raise UsageError(f"unknown oracle problem {args.problem!r}")
    print(f"wrote {rows.shape[0]} oracle rows to {args.out}")
    return 0


def cmd_eval(args):
    _, a = read_csv(args.a)
    _, b = read_csv(args.b)
    if args.metric == "w2":
        value = metrics.empirical_w2(a, b)
        report = {"metric": "w2", "value": value, "n": int(a.shape[0]),
                  "grid": None, "out_of_box": None}
    else:
        bins = (tuple(int(v) for v in args.grid.split(","))
                if args.grid else (64,) * a.shape[1])
        grid = metrics.GridSpec.from_reference(a, bins)
        value, info = metrics.empirical_kl_report(a, b, grid)
        report = {"metric": "kl", "value": value, "n": info["n_p"],
                  "grid": info["grid"], "out_of_box": info["out_of_box"]}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))
    return 0


def cmd_gradcheck(args):
    config = _load_config(args)
    rng = linalg.make_rng(config.seed)
    model = tr.build_model(config, rng)
    for blk in model.blocks:
        for layer in blk.phi.blocks:
            layer.t_param.tol = min(layer.t_param.tol, 1e-13)
            layer.t_param._projected = None
    batch = rng.standard_normal((min(config.batch_b, 8), config.d + config.n))
    tr.data_init_actnorms(model, batch)
    _, grads = tr.nll_loss(model, batch,
                           penalty_weight=config.penalty_weight)

    layout = tr.ParamLayout(model)
    flat0 = layout.pack()
    coords = rng.permutation(flat0.size)[:min(flat0.size, args.coords)]
    step = 1e-5
    fd = np.zeros(coords.size)
    for j, i in enumerate(coords):
        e = np.zeros_like(flat0)
        e[i] = step
        layout.apply(flat0 + e)
        up = tr.nll_loss(model, batch, penalty_weight=config.penalty_weight,
                         return_grads=False)
        layout.apply(flat0 - e)
        down = tr.nll_loss(model, batch, penalty_weight=config.penalty_weight,
                           return_grads=False)
        fd[j] = (up - down) / (2 * step)
    layout.apply(flat0)
    sub = grads[coords]
    rel = float(np.linalg.norm(sub - fd)
                / max(np.linalg.norm(fd), 1e-12))
    report = {"rel_error": rel, "coords_checked": int(coords.size),
              "tolerance": args.tol, "pass": rel <= args.tol}
    print(json.dumps(report))
    if not report["pass"]:
        raise ProxflowError(
            f"gradient check failed: rel error {rel:.3e} > {args.tol:g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="proxflow",
                     description="proximal residual flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a flow and write checkpoints")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="hyperparameter preset (overridden by --config keys)")
    p.add_argument("--problem", choices=TRAIN_PROBLEMS,
                   help="generate training data from a named problem")
    p.add_argument("--data", help="CSV of training rows instead of --problem")
    p.add_argument("--problem-seed", type=int, default=0,
                   help="seed for problem-instance parameters (mixture means)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("-n", "--count", type=int, required=True)
    p.add_argument("--cond", help="condition vector '0.1,0.2' or a CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("density", help="log-density of given points")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("invert", help="map latent rows back through the flow")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="problem/posterior reference samples")
    p.add_argument("--problem", required=True, choices=["circle", "mixture"])
    p.add_argument("--y", help="observation for the mixture posterior oracle")
    p.add_argument("-n", "--count", type=int, required=True)
    p.add_argument("--dim", type=int, default=50,
                   help="mixture state dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--problem-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="empirical KL / W2 between sample CSVs")
    p.add_argument("--metric", required=True, choices=["kl", "w2"])
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--grid", help="comma-separated bin counts (kl only)")
    p.add_argument("--out", help="write the report JSON here as well")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--coords", type=int, default=60,
                   help="number of parameter coordinates to probe")
    p.add_argument("--tol", type=float, default=1e-4)

    return parser


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "density": cmd_density,
    "invert": cmd_invert,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _error_json(kind, exc):
    return json.dumps({"error": kind, "type": type(exc).__name__,
                       "message": str(exc)})


def run(argv):
    """Execute one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(_error_json("usage", exc), file=sys.stderr)
        return 1
    except (ProxflowError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(_error_json("numerical", exc), file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
