"""Command-line interface: simulate, fit, sample, diagnose, bench, serve, worker."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.stats import invwishart

from .diagnostics import GROUPS, MarginalSummary, dev_stats, mmd2_u, mmd2_u_se
from .ep import CHANGE_KEYS, EPConfig, EPFailure, Posterior, fit
from .expfam import ImproperError
from .model import DataError, Likelihood, ModelSpec, PriorSpec, SimConfig, load_dataset, rng_for, simulate_dataset, write_dataset
from .sparse import SparseGlobal

log = logging.getLogger("epmixed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROTOCOL = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def fmt(v) -> str:
    """Shortest repr that round-trips a binary64 value (at most 17 significant digits)."""
    return repr(float(v))


# ---------------------------------------------------------------------------
# configuration


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"'{where}' must be an object")
    if key not in d:
        raise ConfigError(f"missing config field '{where + '.' if where else ''}{key}'")
    return d[key]


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _require(cfg, "likelihood", "")
    _require(cfg, "seed", "")
    try:
        Likelihood(cfg["likelihood"])
    except ValueError:
        raise ConfigError(f"unknown likelihood {cfg['likelihood']!r}") from None
    cfg["_dir"] = str(Path(path).resolve().parent)
    return cfg


def _resolve(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


def ep_config(cfg: dict, args) -> EPConfig:
    opts = dict(cfg.get("ep", {}))
    unknown = set(opts) - set(EPConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown ep fields {sorted(unknown)}")
    opts["seed"] = _seed(cfg, args)
    if getattr(args, "schedule", None):
        opts["schedule"] = args.schedule
    try:
        return EPConfig(**opts)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"ep: {e}") from None


def _seed(cfg, args):
    seed = args.seed if getattr(args, "seed", None) is not None else cfg["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return seed


def model_spec(cfg: dict, P: int, Q: int) -> ModelSpec:
    lik = Likelihood(cfg["likelihood"])
    pri = cfg.get("priors", "default")
    try:
        if pri == "default":
            priors = PriorSpec.default(lik, P, Q)
        else:
            keys = ["mu_beta", "Sigma_beta", "Psi_Sigma", "nu_Sigma"]
            if lik is Likelihood.ZIP:
                keys += ["mu_lambda", "sigma_lambda"]
            priors = PriorSpec(**{k: _require(pri, k, "priors") for k in keys})
        spec = ModelSpec(lik, priors)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"priors: {e}") from None
    if spec.P != P or spec.Q != Q:
        raise ConfigError(f"priors give P={spec.P}, Q={spec.Q} but the data have P={P}, Q={Q}")
    return spec


def sim_config(cfg: dict, seed: int) -> SimConfig:
    sim = _require(cfg, "simulate", "")
    lik = Likelihood(cfg["likelihood"])
    try:
        return SimConfig(
            likelihood=lik,
            n_groups=int(_require(sim, "n_groups", "simulate")),
            obs_per_group=int(sim.get("obs_per_group", 10)),
            beta_true=_require(sim, "beta", "simulate"),
            Sigma_true=_require(sim, "Sigma", "simulate"),
            seed=seed,
            lambda_true=_require(sim, "lambda", "simulate") if lik is Likelihood.ZIP else None,
            trials=int(sim.get("trials", 1)),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"simulate: {e}") from None


def load_data(cfg: dict):
    path = _resolve(cfg, _require(cfg, "data", ""))
    try:
        return load_dataset(path, cfg["likelihood"])
    except OSError as e:
        raise ConfigError(f"cannot read data {path}: {e}") from None


# ---------------------------------------------------------------------------
# artifact writers


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _json_float(obj):
    """Recursively convert arrays/floats so that ``json`` writes repr floats."""
    if isinstance(obj, np.ndarray):
        return _json_float(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_json_float(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _json_float(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_float(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_fit_artifacts(post: Posterior, out: Path, likelihood: str):
    out.mkdir(parents=True, exist_ok=True)
    labels, mean, sd = post.summary()
    _write_csv(out / "summary.csv", ["component", "mean", "sd"],
               [[s, fmt(m), fmt(v)] for s, m, v in zip(labels, mean, sd)])
    _dump_json(out / "sigma.json", {"Psi": post.sigma.Psi, "nu": post.sigma.nu})
    _write_csv(out / "trace.csv", ["pass", *CHANGE_KEYS],
               [[t["pass"]] + [fmt(t[k]) for k in CHANGE_KEYS] for t in post.trace])
    _write_csv(out / "timing.csv", ["pass", "seconds"], [[t["pass"], fmt(t["seconds"])] for t in post.trace])
    _dump_json(out / "skips.json", {**post.skips, "passes": post.passes, "converged": bool(post.converged)})
    _dump_json(out / "posterior.json", {
        "likelihood": likelihood,
        "theta_labels": post.theta_labels(),
        "theta": json.loads(post.theta.to_json()),
        "sigma": {"Psi": post.sigma.Psi, "nu": post.sigma.nu},
    })


def load_posterior(path):
    path = Path(path)
    if path.is_dir():
        path = path / "posterior.json"
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        g = SparseGlobal.from_json(json.dumps(raw["theta"]))
        Psi = np.asarray(raw["sigma"]["Psi"], dtype=float)
        return raw["theta_labels"], g, Psi, float(raw["sigma"]["nu"])
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot load posterior {path}: {e}") from None


def sigma_labels(Q):
    return [f"Sigma[{i + 1},{j + 1}]" for i in range(Q) for j in range(i + 1)]


def draw_samples(g: SparseGlobal, Psi, nu, n: int, seed: int):
    """``n`` joint draws of ``theta`` (from ``q1``) and ``vech(Sigma)`` (from ``q2``)."""
    rng = rng_for(seed, "sample")
    theta = g.sample(rng.standard_normal((n, g.dim)))
    Q = Psi.shape[0]
    S = invwishart(df=nu, scale=Psi).rvs(size=n, random_state=rng)
    S = np.asarray(S).reshape(n, Q, Q)
    ii, jj = zip(*[(i, j) for i in range(Q) for j in range(i + 1)])
    return np.hstack([theta, S[:, ii, jj]])


def read_table(path):
    """Read a labelled CSV; returns ``(header, float array)``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: no data rows")
    return rows[0], rows[1:]


def read_marginals(path):
    """A summary CSV (``component,mean,sd``) or a samples CSV (one column per component)."""
    header, body = read_table(path)
    try:
        if header[:3] == ["component", "mean", "sd"]:
            return MarginalSummary([r[0] for r in body], [float(r[1]) for r in body], [float(r[2]) for r in body]), None
        draws = np.array([[float(v) for v in r] for r in body])
    except (ValueError, IndexError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return MarginalSummary.from_samples(header, draws), draws


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    cfg = load_config(args.config)
    sim = sim_config(cfg, _seed(cfg, args))
    data, truth = simulate_dataset(sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out / "data.csv")
    _dump_json(out / "truth.json", truth)
    print(f"wrote {data.N} observations in {data.L} groups to {out / 'data.csv'}")


def _fit_local_or_served(cfg, args, serve=None, workers=1):
    data = load_data(cfg)
    spec = model_spec(cfg, data.P, data.Q)
    epc = ep_config(cfg, args)
    if serve:
        from .distributed import serve_central

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        post = serve_central(serve, data, spec, epc, workers, dump_path=out / "partial_state.json",
                             on_listen=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True))
    else:
        post = fit(data, spec, epc, on_pass=lambda st: log.info("pass %d", st.passes))
    write_fit_artifacts(post, Path(args.out), data.likelihood.value)
    print(f"{post.passes} passes, converged={post.converged}, skipped sites={post.total_skips}; wrote {args.out}")


def cmd_fit(args):
    cfg = load_config(args.config)
    _fit_local_or_served(cfg, args, serve=args.serve, workers=args.workers)


def cmd_serve(args):
    cfg = load_config(args.config)
    _fit_local_or_served(cfg, args, serve=args.serve, workers=args.workers)


def cmd_worker(args):
    from .distributed import run_worker

    run_worker(args.connect, backend=args.backend)


def cmd_sample(args):
    labels, g, Psi, nu = load_posterior(args.posterior)
    if args.draws < 1:
        raise ConfigError("--draws must be positive")
    seed = 0 if args.seed is None else args.seed
    draws = draw_samples(g, Psi, nu, args.draws, seed)
    header = list(labels) + sigma_labels(Psi.shape[0])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(args.out, header, ([fmt(v) for v in row] for row in draws))
    print(f"wrote {args.draws} draws to {args.out}")


def cmd_diagnose(args):
    approx, adraws = read_marginals(args.approx)
    ref, rdraws = read_marginals(args.ref)
    if rdraws is None:
        raise ConfigError("--ref must be a samples CSV")
    group_sets = [None] + [[g] for g in (args.groups.split(",") if args.groups else GROUPS)]
    rows = []
    for gs in group_sets:
        name = "all" if gs is None else gs[0]
        try:
            st = dev_stats(approx, ref, gs)
        except ValueError as e:
            if gs is not None and "no components" in str(e):
                continue
            raise ConfigError(str(e)) from None
        rows.append([name, *map(fmt, st.as_tuple())])
    header = ["group", "dev_mu", "adev_mu", "dev_sigma", "adev_sigma"]
    if adraws is not None:
        order = [approx.labels.index(s) for s in ref.labels]
        m = min(args.mmd_m, adraws.shape[0], rdraws.shape[0])
        x, y = rdraws[-m:], adraws[:m, order]
        header += ["mmd2_u", "mmd2_u_se"]
        rows = [r + ([fmt(mmd2_u(x, y)), fmt(mmd2_u_se(x, y))] if r[0] == "all" else ["", ""]) for r in rows]
    _write_csv(args.out, header, rows)
    for r in rows:
        print(",".join(r))


def cmd_bench(args):
    from .bench import aggregate, linear_r2, run_bench, scaling_ratio

    models = args.models.split(",")
    for m in models:
        Likelihood(m)
    grid = [int(v) for v in args.grid.split(",")]
    dense_grid = [int(v) for v in args.dense_grid.split(",")] if args.dense_grid else grid
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    timings = run_bench(models, grid, dense_grid, reps=args.reps, passes=args.passes,
                        dense_passes=args.dense_passes, seed=args.seed or 0,
                        on_result=lambda t: log.info("%s %s L=%d rep=%d %.3fs", t.model, t.method, t.L, t.rep, t.seconds))
    _write_csv(out, ["model", "method", "L", "rep", "passes", "seconds"],
               [[t.model, t.method, t.L, t.rep, t.passes, fmt(t.seconds)] for t in timings])
    rows = aggregate(timings)
    summary = out.with_name(out.stem + "_summary.csv")
    _write_csv(summary, list(rows[0]), [[fmt(v) if isinstance(v, float) else v for v in r.values()] for r in rows])
    for m in models:
        sp = [r for r in rows if r["model"] == m and r["method"] == "EP-S"]
        line = f"{m}: EP-S R2={linear_r2([r['L'] for r in sp], [r['mean_seconds_per_pass'] for r in sp]):.4f}"
        for method in ("EP-S", "EP-NS"):
            try:
                line += f" {method} 800/400={scaling_ratio(rows, m, method):.2f}"
            except KeyError:
                pass
        print(line)


def build_parser():
    p = argparse.ArgumentParser(prog="epmixed", description="Sparse expectation propagation for GLMMs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    for name, func in (("fit", cmd_fit), ("serve", cmd_serve)):
        f = sub.add_parser(name, help="fit a model" if name == "fit" else "fit as the central node of a distributed run")
        f.add_argument("--config", required=True)
        f.add_argument("--out", required=True, help="output directory")
        f.add_argument("--seed", type=int)
        f.add_argument("--schedule", choices=("sequential", "parallel"))
        f.add_argument("--serve", metavar="ADDR", required=name == "serve", help="HOST:PORT to listen on")
        f.add_argument("--workers", type=int, default=1)
        f.set_defaults(func=func)

    w = sub.add_parser("worker", help="run a worker for a distributed fit")
    w.add_argument("--connect", metavar="ADDR", required=True)
    w.add_argument("--backend", choices=("cython", "python"))
    w.set_defaults(func=cmd_worker)

    sm = sub.add_parser("sample", help="draw from a fitted approximation")
    sm.add_argument("--posterior", required=True, help="fit output directory or posterior.json")
    sm.add_argument("--draws", type=int, default=1000)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--out", required=True, help="samples CSV")
    sm.set_defaults(func=cmd_sample)

    d = sub.add_parser("diagnose", help="accuracy metrics against reference samples")
    d.add_argument("--approx", required=True, help="summary or samples CSV")
    d.add_argument("--ref", required=True, help="reference samples CSV")
    d.add_argument("--groups", help=f"comma-separated subset of {','.join(GROUPS)}")
    d.add_argument("--mmd-m", type=int, default=1000)
    d.add_argument("--out", required=True, help="metrics CSV")
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench", help="time EP-S and EP-NS over a grid of group counts")
    b.add_argument("--models", default="binomial,zip")
    b.add_argument("--grid", default=",".join(str(v) for v in range(100, 1000, 100)))
    b.add_argument("--dense-grid", help="grid for EP-NS (defaults to --grid)")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--passes", type=int, default=10)
    b.add_argument("--dense-passes", type=int, default=1)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="timing CSV")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .distributed import ProtocolError

    try:
        args.func(args)
    except (ConfigError, DataError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EPFailure, ImproperError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ProtocolError, ConnectionError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
