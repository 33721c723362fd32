"""Command-line entry point: fit, predict, simulate, and benchmark.

Settings resolve in three layers: built-in defaults, then a key=value
config file, then command-line flags.  Every output file begins with
comment lines carrying the seed and a hash of the resolved settings, so any
artifact can be regenerated from its own header.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluate, io, simdata
from .gp import NumericsError
from .sampler import Hyperparams, VARIANTS, resolve_variant


class ConfigError(ValueError):
    """Raised for any user-input problem; maps to exit code 1."""


@dataclass
class RunConfig:
    input: str = None
    outdir: str = "gptrees-out"
    out: str = None
    posterior: str = None
    target: str = "y"
    categorical: tuple = ()
    ignore_columns: tuple = ()
    gp_columns: tuple = None
    rotation_columns: tuple = None
    variant: str = "D"
    variants: tuple = ("A", "B", "C", "D")
    n_trees: int = 10
    n_mcmc: int = 2000
    n_burnin: int = 500
    k: float = 2.0
    kappa: float = 0.3
    tau_quantile: float = 0.9
    interval_draws: int = 10
    min_leaf: int = 1
    level: float = 0.95
    seed: int = 0
    verbose: bool = False
    repetitions: int = 5
    folds: int = 5
    workers: int = None
    generator: str = None
    n: int = 100
    p: int = 5
    grid_resolution: int = 50

    def hyperparams(self) -> Hyperparams:
        try:
            return Hyperparams(
                n_trees=self.n_trees, k=self.k, kappa=self.kappa,
                tau_quantile=self.tau_quantile, n_mcmc=self.n_mcmc,
                n_burnin=self.n_burnin, n_interval_draws=self.interval_draws,
                min_leaf=self.min_leaf)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        # output locations do not shape the artifact contents, so the same
        # settings written elsewhere hash (and reproduce) identically
        payload = {k: v for k, v in asdict(self).items() if k not in ("out", "outdir")}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:12]


_LIST_FIELDS = {"categorical", "ignore_columns", "gp_columns", "rotation_columns",
                "variants"}
_INT_FIELDS = {"n_trees", "n_mcmc", "n_burnin", "interval_draws", "min_leaf",
               "seed", "repetitions", "folds", "workers", "n", "p",
               "grid_resolution"}
_FLOAT_FIELDS = {"k", "kappa", "tau_quantile", "level"}
_BOOL_FIELDS = {"verbose"}


def _coerce(key: str, value: str):
    if key in _LIST_FIELDS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    if key in _BOOL_FIELDS:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


def read_config_file(path) -> dict:
    """Plain key=value settings; '#' starts a comment, keys match the flags."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{line_no}: unknown setting {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError:
            raise ConfigError(f"{path}:{line_no}: bad value for {key!r}: {value!r}")
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file, then explicit flags."""
    settings = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            settings[f.name] = flag_value
    cfg = RunConfig(**settings)
    if cfg.workers is None:
        env = os.environ.get("GPTREES_WORKERS")
        cfg.workers = int(env) if env else (os.cpu_count() or 1)
    return cfg


def _add_common(parser):
    parser.add_argument("--config", help="key=value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--verbose", action="store_const", const=True)
    parser.add_argument("--outdir")


def _add_model_flags(parser):
    parser.add_argument("--variant", choices=sorted(VARIANTS))
    parser.add_argument("--trees", dest="n_trees", type=int)
    parser.add_argument("--mcmc", dest="n_mcmc", type=int)
    parser.add_argument("--burnin", dest="n_burnin", type=int)
    parser.add_argument("--k", type=float)
    parser.add_argument("--kappa", type=float)
    parser.add_argument("--tau-quantile", dest="tau_quantile", type=float)
    parser.add_argument("--interval-draws", dest="interval_draws", type=int)
    parser.add_argument("--min-leaf", dest="min_leaf", type=int)


def _add_data_flags(parser):
    parser.add_argument("--input")
    parser.add_argument("--target")
    parser.add_argument("--categorical", type=lambda s: _coerce("categorical", s))
    parser.add_argument("--ignore-columns", dest="ignore_columns",
                        type=lambda s: _coerce("ignore_columns", s))
    parser.add_argument("--gp-columns", dest="gp_columns",
                        type=lambda s: _coerce("gp_columns", s))
    parser.add_argument("--rotation-columns", dest="rotation_columns",
                        type=lambda s: _coerce("rotation_columns", s))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default; 2 is reserved for numeric failures
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="gptrees",
                     description="Sum-of-trees regression with GP leaves")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write the posterior stream")
    _add_common(p_fit)
    _add_model_flags(p_fit)
    _add_data_flags(p_fit)

    p_pred = sub.add_parser("predict", help="predict from a saved posterior")
    _add_common(p_pred)
    p_pred.add_argument("--posterior")
    p_pred.add_argument("--input")
    p_pred.add_argument("--out")
    p_pred.add_argument("--level", type=float)
    p_pred.add_argument("--interval-draws", dest="interval_draws", type=int)

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_common(p_sim)
    p_sim.add_argument("--generator", choices=("benchmark", "friedman"))
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--p", type=int)
    p_sim.add_argument("--out")

    p_bench = sub.add_parser("benchmark", help="repeated k-fold CV over variants")
    _add_common(p_bench)
    _add_model_flags(p_bench)
    _add_data_flags(p_bench)
    p_bench.add_argument("--generator", choices=("benchmark", "friedman"))
    p_bench.add_argument("--n", type=int)
    p_bench.add_argument("--p", type=int)
    p_bench.add_argument("--variants", type=lambda s: _coerce("variants", s))
    p_bench.add_argument("--repetitions", type=int)
    p_bench.add_argument("--folds", type=int)
    p_bench.add_argument("--workers", type=int)
    p_bench.add_argument("--grid-resolution", dest="grid_resolution", type=int)
    return parser


def _fmt(v) -> str:
    """Shortest round-trip decimal text for a float value."""
    return repr(float(v))


def _header_lines(cfg: RunConfig) -> list:
    return [f"# seed={cfg.seed}", f"# config={cfg.config_hash()}"]


def _write_csv(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _resolve_columns(cfg: RunConfig, dataset: io.Dataset):
    """Map configured column names onto indices, validating against the schema."""
    names = dataset.schema.names
    for col in cfg.categorical:
        if col not in names:
            raise ConfigError(f"categorical column {col!r} not in the dataset")

    def resolve(cols, role):
        if cols is None:
            return None
        idx = []
        for col in cols:
            if col not in names:
                raise ConfigError(f"{role} column {col!r} not in the dataset")
            j = names.index(col)
            if j not in dataset.continuous_cols:
                raise ConfigError(f"{role} column {col!r} is not continuous")
            idx.append(j)
        return tuple(idx)

    return resolve(cfg.gp_columns, "GP"), resolve(cfg.rotation_columns, "rotation")


def _load_input(cfg: RunConfig, schema=None) -> io.Dataset:
    if not cfg.input:
        raise ConfigError("an --input CSV is required")
    if not Path(cfg.input).exists():
        raise ConfigError(f"input file {cfg.input!r} does not exist")
    try:
        return io.load_csv(cfg.input, None if schema else cfg.target,
                           categorical_columns=cfg.categorical, schema=schema,
                           ignore_columns=cfg.ignore_columns)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_fit(cfg: RunConfig) -> int:
    hp = cfg.hyperparams()
    dataset = _load_input(cfg)
    gp_cols, rot_cols = _resolve_columns(cfg, dataset)
    if dataset.rejected:
        print(f"rejected {len(dataset.rejected)} row(s); first: "
              f"line {dataset.rejected[0][0]} ({dataset.rejected[0][1]})",
              file=sys.stderr)

    draws = evaluate.fit_model(dataset, hp, cfg.variant, cfg.seed,
                               gp_cols=gp_cols, rot_cols=rot_cols,
                               verbose=cfg.verbose)

    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    io.save_draws(draws, outdir / "posterior.jsonl", config_hash=cfg.config_hash())
    header = _header_lines(cfg)
    _write_csv(outdir / "tau_trace.csv", header, ["iteration", "tau"],
               [(i + 1, _fmt(t)) for i, t in enumerate(draws.tau_trace)])
    _write_csv(outdir / "acceptance.csv", header,
               ["move", "proposed", "accepted", "rate"],
               [(kind, c["proposed"], c["accepted"],
                 _fmt(c["accepted"] / c["proposed"]) if c["proposed"] else "nan")
                for kind, c in draws.acceptance.items()])

    depths = [t.max_depth() for d in draws.draws for t in d.trees]
    hist = np.bincount(depths)
    with open(outdir / "summary.txt", "w") as fh:
        fh.write("\n".join(header) + "\n")
        fh.write(f"variant={draws.variant} n={dataset.n} p={dataset.p} "
                 f"draws={draws.n_draws}\n")
        fh.write(f"median_tau={np.median(draws.tau_trace[hp.n_burnin:]):.6g}\n")
        fh.write("depth_histogram=" + ",".join(f"{d}:{c}" for d, c in enumerate(hist)) + "\n")
        for kind, rate in draws.acceptance_rates().items():
            fh.write(f"acceptance_{kind}={rate:.4f}\n")
    print(f"wrote {outdir}/posterior.jsonl ({draws.n_draws} draws)")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.posterior:
        raise ConfigError("a --posterior stream is required")
    if not Path(cfg.posterior).exists():
        raise ConfigError(f"posterior file {cfg.posterior!r} does not exist")
    if not 0.0 <= cfg.level < 1.0:
        raise ConfigError("interval level must lie in [0, 1)")
    try:
        draws = io.load_draws(cfg.posterior)
    except IOError as exc:
        raise ConfigError(str(exc)) from None
    dataset = _load_input(cfg, schema=draws.schema)
    if dataset.unknown_levels:
        print(f"{dataset.unknown_levels} unknown categorical level(s) routed "
              "to the right child", file=sys.stderr)

    pred = evaluate.predict_dataset(draws, dataset, Q=cfg.interval_draws,
                                    seed=cfg.seed)
    lo, hi = pred.intervals(cfg.level)
    out = cfg.out or str(Path(cfg.outdir) / "predictions.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, _header_lines(cfg), ["row", "mean", "lower", "upper"],
               [(i, _fmt(pred.mean[i]), _fmt(lo[i]), _fmt(hi[i]))
                for i in range(pred.n_rows)])
    print(f"wrote {out} ({pred.n_rows} rows)")
    return 0


def _generate(cfg: RunConfig):
    if cfg.generator == "benchmark":
        spec = simdata.BenchmarkSpec(n=cfg.n, seed=cfg.seed)
        X, y, truth = simdata.gen_benchmark(spec)
    elif cfg.generator == "friedman":
        try:
            spec = simdata.FriedmanSpec(n=cfg.n, p=cfg.p, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        X, y, truth = simdata.gen_friedman(spec)
    else:
        raise ConfigError(f"unknown generator {cfg.generator!r}")
    return spec, X, y, truth


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.generator:
        raise ConfigError("--generator is required (benchmark or friedman)")
    if cfg.n < 2:
        raise ConfigError("--n must be at least 2")
    spec, X, y, truth = _generate(cfg)
    out = cfg.out or str(Path(cfg.outdir) / f"{cfg.generator}.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    cols = [f"x{j + 1}" for j in range(X.shape[1])] + ["y", "truth"]
    rows = [[_fmt(v) for v in row] + [_fmt(yy), _fmt(tt)]
            for row, yy, tt in zip(X, y, truth)]
    _write_csv(out, _header_lines(cfg), cols, rows)
    meta = {"generator": cfg.generator, "seed": cfg.seed, "spec": asdict(spec),
            "config": cfg.config_hash()}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {out} (+ sidecar metadata)")
    return 0


def cmd_benchmark(cfg: RunConfig) -> int:
    hp = cfg.hyperparams()
    if cfg.folds < 2:
        raise ConfigError("--folds must be at least 2")
    variants = []
    for v in cfg.variants:
        try:
            variants.append(resolve_variant(v).letter)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    gp_cols = rot_cols = None
    if cfg.generator:
        _spec, X, y, _truth = _generate(cfg)
        dataset = io.from_arrays(X, y)
    else:
        dataset = _load_input(cfg)
        gp_cols, rot_cols = _resolve_columns(cfg, dataset)

    report = evaluate.cross_validate(
        dataset, hp, variants, repetitions=cfg.repetitions, folds=cfg.folds,
        rng=np.random.default_rng(cfg.seed), n_jobs=max(1, cfg.workers),
        gp_cols=gp_cols, rot_cols=rot_cols, verbose=cfg.verbose)

    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    header = _header_lines(cfg)
    long_rows = []
    for row in report.rows:
        long_rows.append((row.repetition, row.fold, row.variant, "rmse", _fmt(row.rmse)))
        long_rows.append((row.repetition, row.fold, row.variant, "crps", _fmt(row.crps)))
    _write_csv(outdir / "cv_results.csv", header,
               ["repetition", "fold", "variant", "metric", "value"], long_rows)

    medians = report.medians()
    rank_rmse = report.mean_ranks("rmse")
    rank_crps = report.mean_ranks("crps")
    _write_csv(outdir / "cv_summary.csv", header,
               ["variant", "median_rmse", "median_crps", "mean_rank_rmse",
                "mean_rank_crps"],
               [(v, _fmt(medians[v]["rmse"]), _fmt(medians[v]["crps"]),
                 _fmt(rank_rmse[v]), _fmt(rank_crps[v])) for v in report.variants])

    # one full-data fit powers the plotting artifacts
    fit_seed = cfg.seed + 1
    draws = evaluate.fit_model(dataset, hp, cfg.variant, fit_seed,
                               gp_cols=gp_cols, rot_cols=rot_cols,
                               verbose=cfg.verbose)
    if resolve_variant(cfg.variant).gp_leaves:
        rows = []
        for i, draw in enumerate(draws.draws):
            mins = draw.lengthscales.min(axis=0)
            var_names = [dataset.schema.names[j] for j in draws.gp_cols]
            rows.extend((i, name, _fmt(v)) for name, v in zip(var_names, mins))
        _write_csv(outdir / "min_lengthscale.csv", header,
                   ["draw", "variable", "min_lengthscale"], rows)
    if cfg.generator == "benchmark":
        g = cfg.grid_resolution
        axis = np.linspace(-1.0, 1.0, g)
        xx, yy = np.meshgrid(axis, axis)
        grid = np.column_stack([xx.ravel(), yy.ravel()])
        pred = evaluate.predict(draws, draws.transform.transform_x(grid),
                                seed=fit_seed)
        _write_csv(outdir / "surface_grid.csv", header, ["x1", "x2", "mean"],
                   [(_fmt(a), _fmt(b), _fmt(m))
                    for (a, b), m in zip(grid, pred.mean)])
    print(f"wrote CV report for variants {','.join(report.variants)} to {outdir}/")
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
