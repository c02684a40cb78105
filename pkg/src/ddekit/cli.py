"""Command-line entry point: ``ddekit {generate,train,eval,gradcheck,mimap,bench}``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
Every invocation writes a JSON run manifest, including failed ones.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, DataFormatError, DdekitError
from .kernels import BACKEND, available_backends, resolve_threads

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SYSTEMS = ("logistic", "brusselator", "two-delay-map")
SERIES_FILE = "series.csv"


def _g(x) -> str:
    return f"{float(x):.9g}"


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


class RunManifest:
    """Command, resolved configuration, artifacts and timings of one invocation."""

    def __init__(self, command: str, argv: list[str]):
        self.data = {"command": command, "argv": argv, "version": __version__, "config": {},
                     "seed": None, "artifacts": {}, "timings": {}, "exit_status": None, "error": None}
        self._t0 = time.perf_counter()

    def artifact(self, name: str, path) -> None:
        self.data["artifacts"][name] = str(path)

    def timing(self, name: str, seconds: float) -> None:
        self.data["timings"][name] = round(seconds, 6)

    def write(self, path: Path, status: int, error: str | None = None) -> None:
        self.data["exit_status"] = status
        self.data["error"] = error
        self.data["timings"]["total_s"] = round(time.perf_counter() - self._t0, 6)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_text(path, json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


# generate

def cmd_generate(args, man: RunManifest) -> int:
    from .data import gen_brusselator, gen_logistic_dde, gen_two_delay_map, save_dataset

    out = Path(args.out)
    man.data["config"] = {"system": args.system, "n": args.n}
    if args.system == "two-delay-map":
        length = args.n or 200_000
        series = gen_two_delay_map(length, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["n,g"] + [f"{i},{v:.17g}" for i, v in enumerate(series)]
        _write_text(out / SERIES_FILE, "\n".join(lines) + "\n")
        meta = {"generator": "two_delay_map", "length": length, "seed": args.seed,
                "params": {"alpha": 0.2, "p1": 125, "p2": 200, "noise": 0.02, "burn_in": 5000,
                           "history": "uniform(0,1)", "sinc": "unnormalized sin(x)/x"}}
        _write_text(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        man.artifact("series", out / SERIES_FILE)
        print(f"series length={length} min={_g(series.min())} max={_g(series.max())} "
              f"mean={_g(series.mean())}")
        return EXIT_OK
    n = args.n or 64
    if args.system == "logistic":
        ds = gen_logistic_dde(n, args.seed)
    else:
        observed = tuple(int(i) for i in args.observed.split(","))
        ds = gen_brusselator(n, args.seed, observed=observed)
    save_dataset(ds, out)
    man.artifact("dataset", out)
    v = ds.values
    print(f"dataset {args.system} n_traj={ds.n_traj} n_times={ds.times.size} dt={_g(ds.dt)} "
          f"observed={list(ds.observed_indices)} min={_g(v.min())} max={_g(v.max())} mean={_g(v.mean())}")
    return EXIT_OK


# train

def _read_log(path: Path, n_delays: int):
    from .train import TrainLog

    log = TrainLog(n_delays)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read training log {path}: {exc}") from exc
    for r in rows[1:]:
        log.append(int(r[0]), float(r[1]), float(r[2]), int(r[3]), [float(x) for x in r[4:]])
    return log


def cmd_train(args, man: RunManifest) -> int:
    from .data import load_dataset
    from .train import TrainConfig, TrainState, Trainer, build_model

    cfg = TrainConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    man.data["config"] = cfg.to_dict()
    man.data["seed"] = cfg.seed
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path, log_path, model_path = out / "state.ckpt", out / "train_log.csv", out / "model.ckpt"

    model = build_model(cfg, ds.values.shape[2])
    state = log = None
    if args.resume and state_path.exists():
        state = TrainState.load(state_path)
        if state.params.size != model.n_params:
            raise ConfigurationError("checkpoint does not match the configured model")
        model = model.with_params(state.params)
        log = _read_log(log_path, model.n_delays)
        print(f"resuming at epoch {state.epoch}")
    trainer = Trainer(cfg, ds, model, args.backend, args.threads)

    def save(st, lg):
        st.save(state_path)
        lg.write_csv(log_path)

    def on_epoch(st, lg):
        if args.checkpoint_every and st.epoch % args.checkpoint_every == 0:
            save(st, lg)

    t = time.perf_counter()
    model, log, state = trainer.train(state, log, on_epoch)
    man.timing("train_s", time.perf_counter() - t)
    save(state, log)
    model.save(model_path, {"method": cfg.method, "observed_indices": list(ds.observed_indices)})
    for name, p in (("model", model_path), ("log", log_path), ("state", state_path)):
        man.artifact(name, p)
    man.data["result"] = {"final_train_mse": log.final_train_mse, "epochs": state.epoch,
                          "stopped": log.stopped, "delays": model.realized_delays().tolist()}
    print(f"epochs={state.epoch} stopped={log.stopped} final_train_mse={_g(log.final_train_mse)} "
          f"delays=[{', '.join(_g(t) for t in model.realized_delays())}]")
    return EXIT_OK


# eval

def evaluate(model, ds, method: str = "rk4", backend=None, threads=None):
    """Return ``(mse over samples after t0, predictions of shape (n_traj, n_times, d))``."""
    if ds.values.shape[2] != model.state_dim:
        raise ConfigurationError(f"checkpoint state dim {model.state_dim} does not match "
                                 f"{ds.values.shape[2]} data columns")
    ratio = ds.dt / model.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ConfigurationError(f"data step {ds.dt} is not a multiple of model dt {model.dt}")
    n_samples = ds.times.size - 1
    sol = model.predict_batch(ds.values[:, 0, :], stride * n_samples, float(ds.times[0]), method,
                              backend, threads)
    pred = np.swapaxes(sol.states[::stride], 0, 1)
    resid = pred[:, 1:] - ds.values[:, 1:]
    return float(np.mean(resid * resid)), pred


def cmd_eval(args, man: RunManifest) -> int:
    from .data import load_dataset
    from .model import NeuralDdeModel
    from .nn import load_params

    model = NeuralDdeModel.load(args.checkpoint)
    extra = load_params(args.checkpoint)[2].get("extra", {})
    method = args.method or extra.get("method", "rk4")
    ds = load_dataset(args.data)
    man.data["config"] = {"method": method, "checkpoint": str(args.checkpoint), "data": str(args.data)}
    mse, pred = evaluate(model, ds, method, args.backend, args.threads)
    man.data["result"] = {"test_mse": mse}
    if args.out:
        d = pred.shape[2]
        head = ["t"] + [f"pred_{i:04d}_y{j}" for i in range(pred.shape[0]) for j in range(d)]
        lines = [",".join(head)]
        for n, t in enumerate(ds.times):
            lines.append(",".join([_g(t)] + [_g(v) for v in pred[:, n, :].ravel()]))
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_text(out, "\n".join(lines) + "\n")
        man.artifact("predictions", out)
    print(f"test_mse={_g(mse)}")
    return EXIT_OK


# gradcheck

def cmd_gradcheck(args, man: RunManifest) -> int:
    from .gradcheck import RTOL, report_csv, run_gradcheck

    man.data["config"] = {"trials": args.trials, "inject_sign_flip": args.inject_sign_flip}
    results = run_gradcheck(args.seed, args.trials, args.backend, args.threads,
                            sign_flip=args.inject_sign_flip)
    text = report_csv(results)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_text(out, text)
        man.artifact("report", out)
    sys.stdout.write(text)
    worst_w = max(r.weight_err for r in results)
    worst_t = max((e for r in results for e in r.delay_errs), default=0.0)
    failed = [r.seed for r in results if not r.passed()]
    man.data["result"] = {"worst_weight_err": worst_w, "worst_delay_err": worst_t, "failed_seeds": failed}
    print(f"worst weights={_g(worst_w)} delays={_g(worst_t)} rtol={_g(RTOL)} "
          f"failed={len(failed)}/{len(results)}")
    return EXIT_OK if not failed else 1


# mimap

def load_series(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        path = path / SERIES_FILE
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read series {path}: {exc}") from exc
    if not rows or rows[0] not in (["n", "g"], ["g"]):
        raise DataFormatError(f"{path} must have header 'n,g' or 'g'")
    try:
        return np.array([float(r[-1]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"malformed row in {path}") from exc


def cmd_mimap(args, man: RunManifest) -> int:
    from .mi import mi_map

    man.data["config"] = {"plo": args.plo, "phi": args.phi, "stride": args.stride, "bins": args.bins}
    series = load_series(args.series)
    t = time.perf_counter()
    grid = mi_map(series, args.plo, args.phi, args.stride, args.bins)
    man.timing("mimap_s", time.perf_counter() - t)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["p1,p2,mi"] + [f"{p1},{p2},{_g(v)}" for p1, p2, v in grid.rows()]
    _write_text(out, "\n".join(lines) + "\n")
    man.artifact("mi", out)
    best = grid.argmax()
    man.data["result"] = {"argmax": best, "max_mi": float(grid.values.max())}
    pairs = " ".join(f"({p1},{p2})" for p1, p2 in best)
    print(f"argmax {pairs} mi={_g(grid.values.max())}")
    return EXIT_OK


# bench

def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def cmd_bench(args, man: RunManifest) -> int:
    from .bench import bench_csv, run_bench, speedups

    backends = args.backends.split(",") if args.backends else available_backends()
    for b in backends:
        if b not in available_backends():
            raise ConfigurationError(f"backend {b!r} is not available")
    cfg = {"dims": _ints(args.dims), "horizons": _floats(args.horizons), "n_delays": _ints(args.n_delays),
           "methods": args.method.split(","), "backends": backends, "reps": args.reps,
           "batch": args.batch, "dt": args.dt}
    man.data["config"] = cfg
    rows = run_bench(seed=args.seed, threads=args.threads, **cfg)
    text = bench_csv(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_text(out, text)
        man.artifact("bench", out)
    sys.stdout.write(text)
    for key, ratio in speedups(rows).items():
        print(f"speedup dim={key[0]} horizon={_g(key[1])} k={key[2]} {key[3]}: {ratio:.3g}x")
    return EXIT_OK


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddekit", description="Neural delay differential equations.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0; train: config value)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for batched solves (default DDEKIT_THREADS or 1)")
    common.add_argument("--backend", choices=("compiled", "python"), default=None,
                        help=f"kernel backend (default {BACKEND})")
    common.add_argument("--manifest", default=None, help="run manifest path")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--system", required=True, help="|".join(SYSTEMS))
    g.add_argument("--n", type=int, default=None,
                   help="trajectories (default 64) or series length for the map (default 200000)")
    g.add_argument("--observed", default="0", help="brusselator observed components, comma separated")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="fit a neural DDE")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/state.ckpt when present")
    t.add_argument("--checkpoint-every", type=int, default=10, help="epochs between state checkpoints")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="MSE and predictions of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None, help="predictions CSV")
    e.add_argument("--method", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite differences")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--out", default=None, help="report CSV")
    c.add_argument("--inject-sign-flip", action="store_true",
                   help="negate the adjoint gradient (the check must then fail)")
    c.set_defaults(fn=cmd_gradcheck)

    m = sub.add_parser("mimap", parents=[common], help="delayed mutual information over a lag grid")
    m.add_argument("--series", required=True, help="series CSV or a directory holding series.csv")
    m.add_argument("--plo", type=int, default=10)
    m.add_argument("--phi", type=int, default=300)
    m.add_argument("--stride", type=int, default=5)
    m.add_argument("--bins", type=int, default=16)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_mimap)

    b = sub.add_parser("bench", parents=[common], help="forward-pass wall time per backend")
    b.add_argument("--dims", default="1")
    b.add_argument("--horizons", default="5,10,20")
    b.add_argument("--n-delays", default="0,1,2")
    b.add_argument("--method", default="rk4", help="comma separated solver methods")
    b.add_argument("--backends", default=None, help="comma separated (default: all available)")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--dt", type=float, default=0.01)
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bench)
    return p


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out is None:
        return Path(f"ddekit_{args.command}_manifest.json")
    out = Path(out)
    if args.command in ("generate", "train"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    man = RunManifest(args.command, argv)
    status, error = EXIT_OK, None
    try:
        if args.command == "generate" and args.system not in SYSTEMS:
            raise ConfigurationError(f"unknown system {args.system!r}; choose from {', '.join(SYSTEMS)}")
        if args.command != "train" and args.seed is None:
            args.seed = 0
        man.data["seed"] = args.seed
        args.threads = resolve_threads(args.threads)
        man.data["threads"] = args.threads
        man.data["backend"] = args.backend or BACKEND
        status = args.fn(args, man)
    except DdekitError as exc:
        status, error = exc.exit_code, f"{type(exc).__name__}: {exc}"
    except OSError as exc:
        status, error = EXIT_IO, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"error: {error}", file=sys.stderr)
    try:
        man.write(_manifest_path(args), status, error)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        status = status or EXIT_IO
    return status


if __name__ == "__main__":
    sys.exit(main())
