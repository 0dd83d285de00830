"""Command-line experiment runner.

    sivism run --config run.json --out DIR [--seed N] [--quiet]
    sivism compare RUN_DIR ... [--reference DIR] [--out DIR]
    sivism bench CONFIG ... [--iterations N] [--out DIR]
    sivism check [--quiet]

Exit status: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import targets as T
from .baselines import (
    ElboConfig,
    HmcError,
    SgldConfig,
    init_elbo_state,
    sgld_run,
    sivi_step,
    sivi_train,
    uivi_step,
    uivi_train,
)
from .family import save_json
from .metrics import SampleSet, cov_rmse, knn_kl, read_samples, test_loglik, write_samples
from .trainer import MetricTrace, TrainConfig, TrainingAborted, init_state, outer_step, train

log = logging.getLogger("sivism")

METHODS = ("sivi_sm", "sivi", "uivi", "sgld")
TOY_NAMES = tuple(T.TOYS)
TARGET_NAMES = TOY_NAMES + ("gaussian", "logistic", "multinomial")

# annealing used for the two mixture toys when a config does not say otherwise
TOY_ANNEAL = {"multimodal": {"beta0": 0.2, "ramp_iterations": 25_000},
              "xshaped": {"beta0": 0.2, "ramp_iterations": 25_000}}

# optimizer schedule for every variational method on the 2-D toys
TOY_OPTIM = {"lr_phi": 3e-4, "lr_decay": 0.5, "lr_decay_every": 10_000}

TARGET_DEFAULTS = {
    "gaussian": {"mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
    "logistic": {"dataset": "waveform", "path": None, "n": 400, "data_seed": 0, "alpha": 0.01, "test_fraction": 0.0,
                 "standardize": True},
    "multinomial": {"dataset": "digits", "path": None, "n": None, "n_features": 20, "n_classes": 5,
                    "label_base": 0, "data_seed": 0, "test_fraction": 0.2, "standardize": False},
}

# architectures (and run length) per target family when the config leaves them out
ARCH_DEFAULTS = {
    "toy": {"z_dim": 3, "mu_hidden": [50, 50], "f_hidden": [128, 128]},
    "logistic": {"z_dim": 10, "mu_hidden": [100, 100], "f_hidden": [256, 256], "iterations": 20_000},
    "multinomial": {"z_dim": 100, "mu_hidden": [200, 200], "f_hidden": [256, 256]},
}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


class ConfigError(ValueError):
    def __init__(self, field_name, message, line=None):
        self.field = field_name
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}field '{field_name}': {message}")


@dataclass
class RunConfig:
    method: str
    target: dict
    seed: int
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def to_dict(self):
        return {"method": self.method, "target": self.target, "seed": self.seed,
                "train": self.train, "eval": self.eval}


# --- config parsing ---------------------------------------------------------------

def _line_of(text, key):
    if text is None:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _check_keys(given, allowed, prefix, text):
    for k in given:
        if k not in allowed:
            raise ConfigError(f"{prefix}{k}", f"unknown field (allowed: {', '.join(sorted(allowed))})", _line_of(text, k))


def _train_class(method):
    return {"sivi_sm": TrainConfig, "sivi": ElboConfig, "uivi": ElboConfig, "sgld": SgldConfig}[method]


def _target_kind(name):
    return "toy" if name in TOY_NAMES or name == "gaussian" else name


def resolve_config(raw, text=None):
    """Validate a parsed config document and fill every default; returns RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object", 1)
    _check_keys(raw, {"method", "target", "seed", "train", "eval"}, "", text)
    for req in ("method", "target", "seed"):
        if req not in raw:
            raise ConfigError(req, "missing required field")
    method = raw["method"]
    if method not in METHODS:
        raise ConfigError("method", f"must be one of {METHODS}, got {method!r}", _line_of(text, "method"))
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer", _line_of(text, "seed"))

    tgt = raw["target"]
    if isinstance(tgt, str):
        tgt = {"name": tgt}
    if not isinstance(tgt, dict) or "name" not in tgt:
        raise ConfigError("target.name", "missing required field", _line_of(text, "target"))
    name = tgt["name"]
    if name not in TARGET_NAMES:
        raise ConfigError("target.name", f"must be one of {TARGET_NAMES}, got {name!r}", _line_of(text, "name"))
    defaults = TARGET_DEFAULTS.get(name, {})
    _check_keys({k for k in tgt if k != "name"}, set(defaults), "target.", text)
    target = {"name": name, **defaults, **{k: v for k, v in tgt.items() if k != "name"}}

    tr = dict(raw.get("train", {}))
    cls = _train_class(method)
    allowed = {f.name for f in fields(cls)} - {"seed"}
    _check_keys(tr, allowed, "train.", text)
    kind = _target_kind(name)
    if method != "sgld":
        for k, v in ARCH_DEFAULTS[kind].items():
            if k in allowed:
                tr.setdefault(k, v)
        if name in TOY_NAMES:
            for k, v in TOY_OPTIM.items():
                tr.setdefault(k, v)
        if name in TOY_ANNEAL:
            tr.setdefault("anneal", TOY_ANNEAL[name])
        if method == "uivi":
            tr.setdefault("batch_size", 1)
        if method == "sivi" and kind == "logistic":
            tr.setdefault("L", 100)
    if tr.get("data_batch") is not None and kind not in ("logistic", "multinomial"):
        raise ConfigError("train.data_batch", f"data subsampling needs a regression target, not {name!r}",
                          _line_of(text, "data_batch"))
    try:
        obj = cls(**tr, **({} if method == "sgld" else {"seed": seed}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc
    resolved = obj.to_dict()
    if method != "sgld":
        resolved.pop("seed")

    ev = dict(raw.get("eval", {}))
    ev_defaults = {"n_samples": 10_000 if kind == "toy" else 8_000, "kl_reference": 100_000 if name in TOY_NAMES else 0}
    _check_keys(ev, set(ev_defaults), "eval.", text)
    ev = {**ev_defaults, **ev}
    for k, v in ev.items():
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise ConfigError(f"eval.{k}", "must be a non-negative integer", _line_of(text, k))
    if ev["n_samples"] < 2:
        raise ConfigError("eval.n_samples", "need at least 2 samples")
    return RunConfig(method, target, seed, resolved, ev)


def load_config(path, seed=None):
    with open(path) as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<json>", exc.msg, exc.lineno) from exc
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return resolve_config(raw, text)


# --- targets ----------------------------------------------------------------------

def _glm_data(spec):
    if spec["name"] == "logistic":
        if spec["dataset"] == "waveform":
            return T.load_waveform(spec["path"], n=spec["n"], seed=spec["data_seed"])
        if spec["dataset"] == "csv":
            return T.load_csv(spec["path"], n_classes=2)
        raise ConfigError("target.dataset", "logistic datasets: waveform, csv")
    if spec["dataset"] == "digits":
        return T.digits_dataset(spec["n"], seed=spec["data_seed"])
    if spec["dataset"] == "synthetic":
        return T.synthetic_multinomial(spec["n"] or 600, spec["n_features"], spec["n_classes"], seed=spec["data_seed"])
    if spec["dataset"] == "csv":
        return T.load_csv(spec["path"], label_base=spec["label_base"])
    raise ConfigError("target.dataset", "multinomial datasets: digits, synthetic, csv")


def build_target(spec):
    """(target, held-out dataset or None) from a resolved target spec."""
    name = spec["name"]
    if name in TOY_NAMES:
        return T.TOYS[name](), None
    if name == "gaussian":
        try:
            return T.GaussianTarget(spec["mean"], spec["cov"]), None
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ConfigError("target.cov", f"not a valid covariance for the given mean: {exc}") from exc
    try:
        data = _glm_data(spec)
    except OSError as exc:
        raise ConfigError("target.path", str(exc)) from exc
    test = None
    if spec["test_fraction"]:
        n_train = int(round(data.n * (1 - spec["test_fraction"])))
        data, test = data.split(n_train)
    if spec["standardize"]:
        # held-out rows reuse the training statistics
        test = None if test is None else test.standardized(data)
        data = data.standardized()
    if name == "logistic":
        return T.logistic_target(data, spec["alpha"]), test
    return T.multinomial_target(data), test


# --- run --------------------------------------------------------------------------

def _sample_rng(seed):
    return np.random.default_rng([int(seed), 2])


def _progress(quiet):
    if quiet:
        return None

    def cb(state, rec):
        keys = [k for k in ("sm_loss", "fnet_norm", "surrogate_elbo") if k in rec]
        msg = " ".join(f"{k}={rec[k]:.4g}" for k in keys)
        print(f"[{rec['iteration']}] {msg}", file=sys.stderr, flush=True)

    return cb


def _summary(cfg, target, test, samples, extra):
    out = {"method": cfg.method, "target": cfg.target["name"], "seed": cfg.seed, **extra}
    if cfg.eval["kl_reference"] and hasattr(target, "sample") and cfg.target["name"] in TOY_NAMES:
        ref = target.sample(cfg.eval["kl_reference"], np.random.default_rng([cfg.seed, 3]))
        out["knn_kl"] = knn_kl(ref, samples)
    if test is not None:
        out["test_loglik"] = test_loglik(samples, test)
    return out


def execute(cfg: RunConfig, out_dir, quiet=False):
    """Run one resolved config, writing artifacts under out_dir.  Returns the exit status."""
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "config-echo.json"), cfg.to_dict())
    target, test = build_target(cfg.target)
    trace_path = os.path.join(out_dir, "trace.jsonl")
    start = time.perf_counter()

    if cfg.method == "sgld":
        sc = SgldConfig(**cfg.train)
        res = sgld_run(target, sc, cfg.seed)
        samples = res.particles
        trace = MetricTrace([{"iteration": sc.iterations, "flagged": len(res.flagged),
                              "wall_time": time.perf_counter() - start}])
        trace.write(trace_path)
        save_json(os.path.join(out_dir, "checkpoint.json"),
                  {"particles": samples.tolist(), "flagged": res.flagged.tolist()})
        if res.snapshots:
            # pooled draws along the chains replace the final particle set
            samples = np.concatenate([np.delete(s, res.flagged, axis=0) for s in res.snapshots])
        elif len(res.flagged):
            samples = np.delete(samples, res.flagged, axis=0)
        extra = {"flagged": len(res.flagged)}
    else:
        if cfg.method == "sivi_sm":
            tc = TrainConfig(**cfg.train, seed=cfg.seed)
            state = init_state(target.dim, tc)
            runner = lambda: train(target, tc, state, _progress(quiet))
        else:
            tc = ElboConfig(**cfg.train, seed=cfg.seed)
            state = init_elbo_state(target.dim, tc)
            fn = sivi_train if cfg.method == "sivi" else uivi_train
            runner = lambda: fn(target, tc, state, _progress(quiet))
        try:
            runner()
        except (TrainingAborted, HmcError, FloatingPointError, np.linalg.LinAlgError) as exc:
            state.trace.append({"iteration": state.t, "error": f"{type(exc).__name__}: {exc}"})
            state.trace.write(trace_path)
            save_json(os.path.join(out_dir, "checkpoint.json"), state.to_dict())
            print(f"run failed at iteration {state.t}: {exc}", file=sys.stderr)
            return 1
        state.trace.write(trace_path)
        save_json(os.path.join(out_dir, "checkpoint.json"), state.to_dict())
        samples = state.family.sample(cfg.eval["n_samples"], _sample_rng(cfg.seed))
        last = state.trace[-1] if state.trace else {}
        extra = {"iterations": state.t, "skipped": state.skipped,
                 **{k: last[k] for k in ("sm_loss", "fnet_norm", "surrogate_elbo") if k in last}}

    write_samples(os.path.join(out_dir, "samples.csv"), SampleSet(samples, cfg.method, cfg.seed))
    extra["wall_time"] = time.perf_counter() - start
    summary = _summary(cfg, target, test, samples, extra)
    write_json(os.path.join(out_dir, "summary.json"), summary)
    if not quiet:
        print(json.dumps(summary, indent=1))
    return 0


# --- compare ----------------------------------------------------------------------

def _run_label(path):
    return os.path.basename(os.path.normpath(path))


def _echo(path):
    p = os.path.join(path, "config-echo.json")
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return json.load(fh)


def density_grid(samples, lo, hi, bins=60):
    """Normalized 2-D histogram as rows (x, y, density)."""
    H, xe, ye = np.histogram2d(samples[:, 0], samples[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]],
                               density=True)
    xc, yc = 0.5 * (xe[1:] + xe[:-1]), 0.5 * (ye[1:] + ye[:-1])
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), H.ravel()])


def compare_runs(run_dirs, reference=None, k=5, ref_samples=100_000):
    """Report dict comparing each run's samples.csv with a reference sample set.

    Without a reference directory, toy runs are compared with exact draws
    from their target.
    """
    runs = {_run_label(d): read_samples(os.path.join(d, "samples.csv")).data for d in run_dirs}
    dims = {lab: s.shape[1] for lab, s in runs.items()}
    if reference is not None:
        ref = read_samples(os.path.join(reference, "samples.csv")).data
        ref_label = _run_label(reference)
    else:
        names = {(_echo(d) or {}).get("target", {}).get("name") for d in run_dirs}
        if len(names) != 1 or next(iter(names)) not in TOY_NAMES:
            raise ValueError("no reference given and the runs do not share a toy target")
        name = next(iter(names))
        ref = T.TOYS[name]().sample(ref_samples, np.random.default_rng(12345))
        ref_label = f"{name}-exact"
    bad = [lab for lab, d in dims.items() if d != ref.shape[1]]
    if bad:
        raise ValueError(f"dimension mismatch with reference {ref_label} (dim {ref.shape[1]}): " +
                         ", ".join(f"{lab} (dim {dims[lab]})" for lab in bad))
    rows = []
    for lab, s in runs.items():
        rows.append({
            "run": lab,
            "n": int(s.shape[0]),
            "knn_kl": knn_kl(ref, s, k),
            "cov_rmse": cov_rmse(ref, s),
            "mean_delta": (s.mean(axis=0) - ref.mean(axis=0)).tolist(),
            "std_delta": (s.std(axis=0, ddof=1) - ref.std(axis=0, ddof=1)).tolist(),
        })
    return {"reference": ref_label, "reference_n": int(ref.shape[0]), "k": k, "rows": rows}, runs, ref


def format_report(report):
    head = f"{'run':<24}{'n':>9}{'knn_kl':>12}{'cov_rmse':>12}{'max|dmean|':>12}{'max|dstd|':>12}"
    lines = [f"reference: {report['reference']} (n={report['reference_n']}, k={report['k']})", head]
    for r in report["rows"]:
        lines.append(f"{r['run']:<24}{r['n']:>9}{r['knn_kl']:>12.5f}{r['cov_rmse']:>12.5f}"
                     f"{max(map(abs, r['mean_delta'])):>12.5f}{max(map(abs, r['std_delta'])):>12.5f}")
    return "\n".join(lines) + "\n"


def parse_report(path):
    with open(path) as fh:
        rep = json.load(fh)
    for key in ("reference", "reference_n", "k", "rows"):
        if key not in rep:
            raise ValueError(f"report {path} lacks {key!r}")
    return rep


def write_compare(out_dir, report, runs, ref):
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "report.json"), report)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(format_report(report))
    if ref.shape[1] == 2:
        allpts = np.vstack([ref, *runs.values()])
        lo, hi = np.percentile(allpts, 0.5, axis=0), np.percentile(allpts, 99.5, axis=0)
        sets = {report["reference"]: ref, **runs}
        for lab, s in sets.items():
            np.savetxt(os.path.join(out_dir, f"density-{lab}.csv"), density_grid(s, lo, hi),
                       fmt="%.17g", delimiter=",", header="x,y,density", comments="")


# --- bench ------------------------------------------------------------------------

def bench_config(cfg: RunConfig, iterations=200, warmup=10):
    """Median wall seconds per iteration after a warm-up window."""
    target, _ = build_target(cfg.target)
    times = []
    if cfg.method == "sgld":
        sc = SgldConfig(**{**cfg.train, "iterations": 1, "record_every": 0, "record_from": 0})
        x = None
        for i in range(warmup + iterations):
            t0 = time.perf_counter()
            x = sgld_run(target, sc, cfg.seed + i, init=x).particles
            if i >= warmup:
                times.append(time.perf_counter() - t0)
        return float(np.median(times))
    if cfg.method == "sivi_sm":
        tc = TrainConfig(**cfg.train, seed=cfg.seed)
        state, step = init_state(target.dim, tc), outer_step
    else:
        tc = ElboConfig(**cfg.train, seed=cfg.seed)
        state, step = init_elbo_state(target.dim, tc), (sivi_step if cfg.method == "sivi" else uivi_step)
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        step(state, target, tc)
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


# --- entry point ------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="sivism", description="Semi-implicit VI by minimax score matching.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train or sample from a JSON config")
    r.add_argument("--config", required=True, help="JSON run config")
    r.add_argument("--out", required=True, help="output directory for artifacts")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--quiet", action="store_true", help="no progress output")
    c = sub.add_parser("compare", help="compare run directories against a reference")
    c.add_argument("runs", nargs="+", help="run directories")
    c.add_argument("--reference", help="run directory whose samples.csv is the ground truth")
    c.add_argument("--out", help="write report.json, report.txt and density grids here")
    c.add_argument("--quiet", action="store_true")
    b = sub.add_parser("bench", help="seconds per iteration for each config")
    b.add_argument("configs", nargs="+", help="JSON run configs")
    b.add_argument("--iterations", type=int, default=200, help="timed iterations per config (>= 200)")
    b.add_argument("--seed", type=int, help="override the config seeds")
    b.add_argument("--out", help="write bench.json here")
    b.add_argument("--quiet", action="store_true")
    k = sub.add_parser("check", help="run the oracle battery")
    k.add_argument("--quiet", action="store_true")
    return p


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.seed)
            return execute(cfg, args.out, args.quiet)
        if args.command == "compare":
            report, runs, ref = compare_runs(args.runs, args.reference)
            if args.out:
                write_compare(args.out, report, runs, ref)
            if not args.quiet:
                print(format_report(report), end="")
            return 0
        if args.command == "bench":
            if args.iterations < 200:
                raise ConfigError("--iterations", "timing window must cover at least 200 iterations")
            rows = []
            for path in args.configs:
                cfg = load_config(path, args.seed)
                rows.append({"config": path, "method": cfg.method, "target": cfg.target["name"],
                             "batch_size": cfg.train.get("batch_size"),
                             "sec_per_iter": bench_config(cfg, args.iterations)})
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                write_json(os.path.join(args.out, "bench.json"), rows)
            if not args.quiet:
                for r in rows:
                    print(f"{r['config']:<40}{r['method']:<9}{str(r['batch_size']):>6}{r['sec_per_iter']:>12.6f}")
            return 0
        from .checks import run_checks

        return 0 if run_checks(verbose=not args.quiet) else 1
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
