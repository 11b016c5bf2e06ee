"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``) whose keys are
the long flag names with dashes replaced by underscores; flags given on the
command line win.  Results go to ``--out`` (or stdout) as JSON with 17
significant digits; tables for people are CSV with 4.

Exit codes: 0 ok, 2 configuration, 3 data, 4 solver, 5 metric failure
threshold exceeded.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, Dataset, NoiseModel, normalize, median_direction, read_csv, write_csv
from .data import ScaleInfo, parse_direction, direction_from_angle, Direction
from .estimators import EstimationError, EstimatorSpec, ESTIMATOR_KINDS, BOUND_KINDS, model_from_dict
from .estimators import fit_cnls_d_isoquant
from .evaluation import FoldError, MetricError, directional_mse, isoquant_radial_mse, kfold_mse, radial_mse
from .qp import QpError
from .simulation import PROFILES, AngleDist, DgpSpec, ExperimentError, build_profile, gen_isoquant_2d
from .simulation import gen_isoquant_3d, gen_linear, replication_rng, run_grid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER, EXIT_METRIC = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    """Inconsistent or missing configuration."""


# ------------------------------------------------------------ output helpers

def dumps(obj, indent: int = 0) -> str:
    """JSON with floats at 17 significant digits and non-finite floats as null."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) or v is None for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format(v, ".17g") if math.isfinite(v) else "null"
    return json.dumps(obj)


def _emit(obj, out):
    text = dumps(obj) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def table_csv(table: dict, scaled: bool = True) -> str:
    """Render an experiment table; values are multiplied by its scale."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(table["row_header"])
    w.writerow(header + list(table["columns"]))
    scale = table.get("scale", 1.0) if scaled else 1.0
    for label, row in zip(table["row_labels"], table["values"]):
        parts = str(label).split("|") if len(header) > 1 else [label]
        cells = ["" if v is None or not math.isfinite(v) else format(v * scale, ".4g") for v in row]
        w.writerow(parts + cells)
    return buf.getvalue()


# ------------------------------------------------------------ config

def _merge(args, parser):
    """Fill unset flags from the JSON config, then from parser defaults."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    known = {a.dest for a in parser._actions}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for a in parser._actions:
        if a.dest in ("help", "config", "command", "func"):
            continue
        if getattr(args, a.dest, None) is None:
            setattr(args, a.dest, cfg.get(a.dest, _DEFAULTS.get(a.dest)))
    return args


_DEFAULTS = {
    "n": 100, "lam": 0.1, "noise": "random", "seed": 0, "test": "truth", "angle_dist": "uniform",
    "estimator": "cnls_d", "direction": "median", "bound_kind": "coefficients", "metric": "radial",
    "k": 5, "replications": 100, "threads": 1, "tol": 1e-8, "prefix": "", "out_dir": ".",
    "percentiles": [25, 50, 75], "ratios": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], "held_percentile": 50.0,
    "estimators": ["cnls_d", "quadratic"], "lenient": False,
}


def _parse_direction_arg(value):
    """``median``, an angle in radians, or comma-separated components."""
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    if text == "median":
        return "median"
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse direction {value!r}") from exc
    return parts[0] if len(parts) == 1 else parts


def _spec(args, kind=None) -> EstimatorSpec:
    try:
        return EstimatorSpec(kind or args.estimator, _parse_direction_arg(args.direction),
                             args.slope_bound, args.bound_kind)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise ConfigError(f"--{name.replace('_', '-')} is required")


# ------------------------------------------------------------ subcommands

def cmd_simulate(args):
    _need(args, "kind")
    kind = {"linear": "linear_2d", "isoquant2d": "isoquant_2d", "isoquant3d": "isoquant_3d"}.get(args.kind, args.kind)
    if args.noise == "fixed" and args.noise_angle is None:
        raise ConfigError("fixed noise needs --noise-angle")
    try:
        noise = NoiseModel(args.noise, args.lam, angle=args.noise_angle)
        dist = AngleDist(args.angle_dist, *(v for v in (args.dist_a, args.dist_b) if v is not None))
        spec = DgpSpec(kind, n=args.n, lam=args.lam, noise=noise, angle_dist=dist, n_test=args.n_test)
    except (DataError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    rng = replication_rng(args.seed, spec.cell_key(), 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "linear_2d":
        train, test, truth = gen_linear(spec, rng, test=args.test, return_truth=True)
    else:
        gen = gen_isoquant_2d if kind == "isoquant_2d" else gen_isoquant_3d
        tr, te, tt = gen(spec, rng, return_truth=True)
        empty = np.zeros((tr.shape[0], 0))
        train, truth = Dataset(empty, tr), Dataset(empty, tt)
        test = Dataset(np.zeros((te.shape[0], 0)), te)
    paths = {name: out / f"{args.prefix}{name}.csv" for name in ("train", "test", "train_truth")}
    write_csv(train, paths["train"])
    write_csv(test, paths["test"])
    write_csv(truth, paths["train_truth"])
    meta = {"dgp": spec.canonical(), "seed": args.seed, "cell_key": spec.cell_key(),
            "test": args.test if kind == "linear_2d" else "truth",
            "files": {k: v.name for k, v in paths.items()}}
    _emit(meta, out / f"{args.prefix}meta.json")
    return meta


def _fit_payload(data: Dataset, args):
    """Fit per the estimator flags; median directions are fitted in normalized units."""
    spec = _spec(args)
    isoquant = data.cost is None and data.d == 0
    if isoquant:
        if spec.kind != "cnls_d" or not isinstance(spec.direction, list):
            raise ConfigError("output-only data need --estimator cnls_d with explicit --direction components")
        model = fit_cnls_d_isoquant(data.outputs, Direction.outputs(spec.direction), tol=args.tol)
        return model, {"space": "original"}
    space = "normalized" if (args.normalize or spec.direction == "median") else "original"
    if space == "normalized":
        norm = normalize(data, strict=True)
        model = spec.fit(norm.data, tol=args.tol)
        extra = {"space": space, "scale_info": norm.scale_info.as_dict()}
        if spec.direction == "median" and spec.needs_direction:
            extra["median_raw"] = median_direction(norm).raw.tolist()
        return model, extra
    return spec.fit(data, tol=args.tol), {"space": space}


def cmd_estimate(args):
    _need(args, "data")
    data = read_csv(args.data)
    model, extra = _fit_payload(data, args)
    payload = model.to_dict()
    payload.update(extra)
    payload["estimator"] = _spec(args).as_dict()
    _emit(payload, args.out)
    return payload


def _load_model(path):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    if not isinstance(payload, dict) or "kind" not in payload:
        raise DataError(f"{path}: not a model file")
    return payload, model_from_dict(payload)


def cmd_evaluate(args):
    _need(args, "model", "test")
    payload, model = _load_model(args.model)
    test = read_csv(args.test)
    space = payload.get("space", "original")
    scale = None if "scale_info" not in payload else ScaleInfo.from_dict(payload["scale_info"])
    if args.metric == "isoquant":
        rep = isoquant_radial_mse(model, test.outputs, strict=not args.lenient)
    elif args.metric == "radial":
        if scale is None:
            if not args.train:
                raise ConfigError("radial MSE of an original-units model needs --train for the scale")
            scale = normalize(read_csv(args.train), strict=True).scale_info
        rep = radial_mse(model, test, scale, model_space=space, strict=not args.lenient)
    elif args.metric == "directional":
        _need(args, "mse_direction")
        g = _parse_direction_arg(args.mse_direction)
        direction = direction_from_angle(g) if isinstance(g, float) else parse_direction(g, test)
        if space == "normalized":
            test = normalize(test, scale_info=scale).data
        rep = directional_mse(model, test, direction, strict=not args.lenient)
    else:
        raise ConfigError(f"unknown metric {args.metric!r}")
    out = rep.to_dict()
    if args.csv:
        Path(args.csv).write_text(rep.csv_row(header=True), encoding="utf-8")
    _emit(out, args.out)
    return out


def cmd_kfold(args):
    _need(args, "data")
    data = read_csv(args.data)
    kinds = args.estimators if isinstance(args.estimators, list) else str(args.estimators).split(",")
    results = {}
    for kind in kinds:
        if kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"unknown estimator {kind!r}")
        rep = kfold_mse(data, args.k, _spec(args, kind), metric="radial", seed=args.seed,
                        strict=not args.lenient)
        results[kind] = rep.to_dict()
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(["estimator", "kfold_mse"] + [f"fold{f + 1}" for f in range(args.k)] + ["failures"])
    for kind, r in results.items():
        fails = sum(f["failures"] for f in r["folds"])
        w.writerow([kind, format(r["value"], ".4g")] + [format(v, ".4g") for v in r["fold_values"]] + [fails])
    if args.csv:
        Path(args.csv).write_text(rows.getvalue(), encoding="utf-8")
    out = {"k": args.k, "seed": args.seed, "results": results}
    _emit(out, args.out)
    return out


def cmd_analyze(args):
    from .analysis import marginal_cost_table, mpss_table

    _need(args, "data", "scanned")
    data = read_csv(args.data)
    if data.cost is None:
        raise DataError("analysis needs cost data (column c)")
    scanned = [int(v) - 1 for v in (args.scanned if isinstance(args.scanned, list) else str(args.scanned).split(","))]
    if len(scanned) != 2 or not all(0 <= q < data.Q for q in scanned):
        raise ConfigError("--scanned needs two output numbers between 1 and Q")
    if args.model:
        payload, model = _load_model(args.model)
        if payload.get("space", "original") != "original":
            raise ConfigError("analysis needs a model fitted in original units (estimate without --normalize)")
    else:
        args.normalize = False
        if _parse_direction_arg(args.direction) == "median":
            # direction from the normalized data, fit in original units
            norm = normalize(data, strict=True)
            g = median_direction(norm).direction
            args.direction = g.to_original_units(norm.scale_info).vector.tolist()
        model, _ = _fit_payload(data, args)
    mc_output = scanned[0] if args.mc_output is None else int(args.mc_output) - 1
    models = {args.estimator if not args.model else payload["kind"]: model}
    out = {
        "mpss": mpss_table(models, data, scanned, args.ratios, args.held_percentile),
        "marginal_cost": marginal_cost_table(models, data, scanned, mc_output, args.percentiles,
                                             args.held_percentile),
        "scanned": [q + 1 for q in scanned], "mc_output": mc_output + 1,
    }
    _emit(out, args.out)
    return out


def cmd_check_convexity(args):
    from .multidir import GroupAssignment, check_condition, detect_violations, distance_beyond

    _need(args, "model")
    payload, _ = _load_model(args.model)
    if payload.get("kind") != "cnls_d":
        raise ConfigError("convexity checks need a CNLS-d model")
    _need(args, "data")
    data = read_csv(args.data)
    Y = data.outputs
    e = np.asarray(payload["residuals"], dtype=float)
    if e.size != Y.shape[0]:
        raise DataError("model and data have different numbers of observations")
    if "groups" in payload:
        groups = np.asarray(payload["groups"], dtype=int)
        dirs = np.array([payload["group_directions"][str(k)] for k in range(groups.max() + 1)])
    else:
        groups = np.zeros(e.size, dtype=int)
        dirs = np.atleast_2d(Direction.from_dict(payload["direction"]).vector)
    if dirs.shape[1] != Y.shape[1]:
        raise DataError("convexity checks are defined for output-only (isoquant) models")
    assign = GroupAssignment(groups, dirs)
    fitted = Y + e[:, None] * assign.per_observation()
    report = detect_violations(fitted, groups)
    _, holds = check_condition(-e, assign)
    out = {"violations": report.to_dict(), "condition_holds": holds}
    _emit(out, args.out)
    return out


def cmd_experiment(args):
    _need(args, "profile")
    if args.profile not in PROFILES:
        raise ConfigError(f"unknown profile {args.profile!r}; known: {', '.join(PROFILES)}")
    grid = build_profile(args.profile, replications=args.replications, seed=args.seed, n=args.n)
    progress = None
    if args.progress:
        def progress(done, total):
            print(f"\r{done}/{total}", end="", file=sys.stderr, flush=True)
    report = run_grid(grid, threads=args.threads, progress=progress)
    if args.progress:
        print(file=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, table in report.tables.items():
        path = out / f"{name}.csv"
        path.write_text(table_csv(table), encoding="utf-8")
        files.append(str(path))
    sidecar = report.to_dict()
    sidecar["files"] = files
    sidecar["scaling"] = {name: t["scale"] for name, t in report.tables.items()}
    _emit(sidecar, out / f"{args.profile}.json")
    if report.failed_cells:
        raise ExperimentError(f"cells {report.failed_cells} exceeded the replication failure budget: "
                              f"{report.meta.get('first_errors')}")
    return sidecar


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sddf", description="Directional distance function frontier estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default values for any flag")
        sp.add_argument("--out", help="write JSON here instead of stdout")
        sp.add_argument("--seed", type=int)
        return sp

    def estimator_flags(sp):
        sp.add_argument("--estimator", choices=ESTIMATOR_KINDS)
        sp.add_argument("--direction", help="'median', an angle in radians, or comma-separated components")
        sp.add_argument("--slope-bound", type=float)
        sp.add_argument("--bound-kind", choices=BOUND_KINDS)
        sp.add_argument("--normalize", action="store_true", default=None,
                        help="fit on min-max normalized data")
        sp.add_argument("--tol", type=float)

    s = common(sub.add_parser("simulate", help="generate a train/test CSV pair"))
    s.add_argument("--kind", choices=["linear", "isoquant2d", "isoquant3d"])
    s.add_argument("--n", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--noise", choices=["random", "fixed"])
    s.add_argument("--noise-angle", type=float)
    s.add_argument("--angle-dist", choices=["uniform", "normal", "gamma"])
    s.add_argument("--dist-a", type=float, help="uniform low, normal mean, or gamma shape")
    s.add_argument("--dist-b", type=float, help="uniform high, normal sd, or gamma scale")
    s.add_argument("--test", choices=["truth", "noisy"])
    s.add_argument("--out-dir")
    s.add_argument("--prefix")
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("estimate", help="fit a frontier and write its JSON"))
    s.add_argument("--data")
    estimator_flags(s)
    s.set_defaults(func=cmd_estimate)

    s = common(sub.add_parser("evaluate", help="MSE of a fitted model on a test CSV"))
    s.add_argument("--model")
    s.add_argument("--test")
    s.add_argument("--train", help="training CSV supplying the normalization scale")
    s.add_argument("--metric", choices=["radial", "directional", "isoquant"])
    s.add_argument("--mse-direction")
    s.add_argument("--csv", help="also write a one-row CSV summary")
    s.add_argument("--lenient", action="store_true", default=None,
                   help="exclude and count rays with no crossing instead of failing above 1%%")
    s.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("kfold", help="K-fold radial MSE for several estimators"))
    s.add_argument("--data")
    s.add_argument("--k", type=int)
    s.add_argument("--estimators", help="comma-separated estimator kinds")
    estimator_flags(s)
    s.add_argument("--csv")
    s.add_argument("--lenient", action="store_true", default=None,
                   help="exclude and count rays with no crossing instead of failing above 1%%")
    s.set_defaults(func=cmd_kfold)

    s = common(sub.add_parser("analyze", help="MPSS and marginal-cost tables on a cost frontier"))
    s.add_argument("--data")
    s.add_argument("--model", help="model JSON fitted in original units (else fit here)")
    estimator_flags(s)
    s.add_argument("--scanned", help="two 1-based output numbers, e.g. 4,2")
    s.add_argument("--ratios", type=lambda v: [float(x) for x in v.split(",")])
    s.add_argument("--percentiles", type=lambda v: [float(x) for x in v.split(",")])
    s.add_argument("--held-percentile", type=float)
    s.add_argument("--mc-output", type=int, help="1-based output for marginal costs")
    s.set_defaults(func=cmd_analyze)

    s = common(sub.add_parser("check-convexity", help="shape-violation counts of an isoquant fit"))
    s.add_argument("--model")
    s.add_argument("--data")
    s.set_defaults(func=cmd_check_convexity)

    s = common(sub.add_parser("experiment", help="run a bundled Monte Carlo profile"))
    s.add_argument("--profile", choices=PROFILES)
    s.add_argument("--replications", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--progress", action="store_true", default=None)
    s.set_defaults(func=cmd_experiment)
    return p


def _exit_code(exc) -> int:
    if isinstance(exc, FoldError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, MetricError):
        return EXIT_METRIC
    if isinstance(exc, (EstimationError, QpError, ExperimentError)):
        return EXIT_SOLVER
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _merge(args, sub)
        args.func(args)
    except (ConfigError, DataError, OSError, EstimationError, QpError, MetricError, FoldError,
            ExperimentError) as exc:
        code = _exit_code(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        sys.stderr.write(json.dumps(err) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
