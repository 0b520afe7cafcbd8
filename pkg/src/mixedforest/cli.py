"""Command-line front end.

    mixedforest simulate   --dim low --scheme stochastic --seed 1 --out data.csv
    mixedforest fit        --data data.csv --method smerf --kernel bm --seed 7 --out model.json
    mixedforest predict    --model model.json --queries q.csv --out pred.csv
    mixedforest evaluate   --methods merf,reemforest --replicates 20 --out-bias bias.csv
    mixedforest importance --model model.json --data data.csv --out vi.csv
    mixedforest stability  --dim high --mtry-values 100,600 --etas 0,5,10 --out stab.csv

Every output begins with '# ' metadata lines (tool version, seed, resolved
configuration). Failures print one ``error: <kind>: <message>`` line on
stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import __version__
from .data import CsvSchema, group_rows, read_long_csv, IndividualBlock, LongitudinalDataset, write_dataset
from .forest import importance_ranking
from .em import METHODS, MethodSpec, fit, model_importance, select_alpha
from .kernels import parse_kernel
from .prediction import predict_rows
from .serialize import load_model, save_model, write_trace
from . import simulation as sim

THREADS_ENV = "MIXEDFOREST_THREADS"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _header(args, extra: dict | None = None) -> list[str]:
    # output locations and the thread count do not affect results
    skip = {"func", "config", "threads", "out", "truth", "trace", "out_bias", "out_errors"}
    cfg = {k: v for k, v in vars(args).items() if k not in skip}
    lines = [f"mixedforest {__version__}", f"seed={args.seed}",
             "config=" + json.dumps(cfg, sort_keys=True, default=str)]
    if extra:
        lines.append("resolved=" + json.dumps(extra, sort_keys=True, default=str))
    return lines


def _write_rows(path, header_lines, columns, rows):
    with _open_out(path) as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _schema(args) -> CsvSchema:
    if getattr(args, "schema", None):
        with open(args.schema) as fh:
            return CsvSchema.parse(fh.read())
    return CsvSchema()


def _load(args):
    with open(args.data) as fh:
        ids, times, y, Z, X, zcols, xcols = read_long_csv(fh, _schema(args))
    blocks = [IndividualBlock(i, times[r], X[r], Z[r], y[r]) for i, r in group_rows(ids, times).items()]
    return LongitudinalDataset(tuple(blocks)), xcols


def _sim_config(args) -> sim.SimulationConfig:
    kw = dict(scheme=args.scheme, seed=args.seed, design_seed=args.design_seed, n=args.n)
    if args.dim == "low":
        return sim.SimulationConfig.low(**kw)
    if args.full_scale:
        return sim.SimulationConfig.full_scale(**kw)
    return sim.SimulationConfig.high(p=args.p, group_size=args.group_size, **kw)


def _method_spec(args, name: str, p: int, dim: str | None = None) -> MethodSpec:
    kernel = parse_kernel(args.kernel) if args.kernel else None
    mtry = args.mtry
    if mtry is None and METHODS[name][0] == "forest":
        mtry = p if dim == "low" else None  # None resolves to ceil(3p/4)
    return MethodSpec.from_name(
        name, kernel=kernel, seed=args.seed, n_trees=args.trees, mtry=mtry,
        min_node_size=args.min_node_size, bootstrap_unit=args.bootstrap_unit,
        max_iter=args.max_iter, rel_tol=args.rel_tol, sigma2_update=args.sigma2_update,
        threads=args.threads)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> None:
    cfg = _sim_config(args)
    data = sim.simulate(cfg)
    header = _header(args, {"simulation": cfg.to_dict()})
    with _open_out(args.out) as fh:
        write_dataset(data.dataset, fh, header)
    truth_path = args.truth or (None if args.out in (None, "-") else args.out + ".truth.json")
    if truth_path:
        truth = {
            "tool_version": __version__, "config": cfg.to_dict(),
            "f": [f.tolist() for f in data.f], "b": data.b.tolist(), "z": data.z.tolist(),
            "omega": [o.tolist() for o in data.omega], "eps": [e.tolist() for e in data.eps],
            "groups": data.groups.tolist(),
            "mean_subsets": [data.mean.first.tolist(), data.mean.second.tolist()],
        }
        with open(truth_path, "w") as fh:
            json.dump(truth, fh)


def cmd_fit(args) -> None:
    dataset, _ = _load(args)
    dim = "low" if dataset.p <= dataset.N else "high"
    spec = _method_spec(args, args.method, dataset.p, dim)
    if args.alpha_grid:
        _, model = select_alpha(dataset, spec, args.alpha_grid)
    else:
        model = fit(dataset, spec)
    header = _header(args, {"spec": spec.to_dict()})
    meta = {"header": header}
    with _open_out(args.out) as fh:
        save_model(model, fh, meta)
    if args.trace:
        with _open_out(args.trace) as fh:
            write_trace(model, fh, header)


def cmd_predict(args) -> None:
    with open(args.model) as fh:
        model = load_model(fh)
    with open(args.queries) as fh:
        ids, times, _, Z, X, _, _ = read_long_csv(fh, _schema(args), with_response=False)
    y_hat = predict_rows(model, ids, times, X, Z, require_known=args.require_known)
    rows = [(i, float(t), float(v)) for i, t, v in zip(ids, times, y_hat)]
    _write_rows(args.out, _header(args), ["id", "time", "y_hat"], rows)


def cmd_evaluate(args) -> None:
    cfg = _sim_config(args)
    methods = args.methods
    specs = {m: _method_spec(args, m, cfg.p, args.dim) for m in methods if m != "rf"}
    header = _header(args, {"simulation": cfg.to_dict(),
                            "specs": {m: s.to_dict() for m, s in specs.items()}})
    if args.replicates > 0 and args.out_bias:
        design = sim.evaluation_design(cfg)
        rows = []
        for m in methods:
            if m == "rf":
                continue
            fits = []
            for r in range(args.replicates):
                data = sim.simulate(dataclasses.replace(cfg, seed=cfg.seed + r))
                fits.append(fit(data.dataset, dataclasses.replace(specs[m], seed=cfg.seed + r)))
            rep = sim.squared_bias_report(fits, design, cfg.truth, cfg.stochastic)
            rows.append((m, rep["bias2_f"], rep["bias2_B"], rep["bias2_gamma2"], rep["bias2_sigma2"]))
        _write_rows(args.out_bias, header,
                    ["method", "bias2_f", "bias2_B", "bias2_gamma2", "bias2_sigma2"], rows)
    if args.splits > 0 and args.out_errors:
        dataset = _load(args)[0] if args.data else sim.simulate(cfg).dataset
        rows = []
        for m in methods:
            if m == "rf":
                pred = sim.rf_predictor(args.trees, args.mtry, args.min_node_size)
            else:
                pred = sim.em_predictor(specs[m])
            errs = sim.split_errors(dataset, pred, args.splits, args.holdout, seed=args.seed)
            rows.extend((m, k + 1, float(e)) for k, e in enumerate(errs))
        _write_rows(args.out_errors, header, ["method", "split", "test_mse"], rows)


def cmd_importance(args) -> None:
    with open(args.model) as fh:
        model = load_model(fh)
    dataset, xcols = _load(args)
    if tuple(dataset.ids) != tuple(model.ids):
        raise CliError("data: individuals differ from those the model was fit on")
    vi = model_importance(model, dataset, args.seed)
    order = importance_ranking(vi)
    rows = [(xcols[j], float(vi[j])) for j in order]
    _write_rows(args.out, _header(args), ["variable", "importance"], rows)


def cmd_stability(args) -> None:
    cfg = _sim_config(args)
    dataset = _load(args)[0] if args.data else sim.simulate(cfg).dataset
    spec = _method_spec(args, args.method, dataset.p, args.dim)
    rows = sim.stability_sweep(dataset, spec, args.mtry_values, args.etas, n_runs=args.runs,
                               top_k=args.top_k, seed=args.seed)
    _write_rows(args.out, _header(args, {"spec": spec.to_dict()}), ["eta", "mtry", "mean_score"],
                [(e, m, float(s)) for e, m, s in rows])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads for tree growing (default ${THREADS_ENV} or 1)")
    p.add_argument("--config", help="JSON file of flag defaults (keys are flag names with '_')")


def _add_sim(p):
    p.add_argument("--dim", choices=["low", "high"], default="low")
    p.add_argument("--scheme", choices=["non_stochastic", "stochastic"], default="non_stochastic")
    p.add_argument("--n", type=int, default=17)
    p.add_argument("--p", type=int, default=800)
    p.add_argument("--group-size", type=int, default=27)
    p.add_argument("--full-scale", action="store_true", help="p=8000, group size 266")
    p.add_argument("--design-seed", type=int, default=0)


def _add_method(p, method_default="merf"):
    p.add_argument("--kernel", default=None, help="none | bm | fbm:h=<v> | ou:alpha=<v>")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--mtry", type=int, default=None)
    p.add_argument("--min-node-size", type=int, default=5)
    p.add_argument("--bootstrap-unit", choices=["observation", "individual"], default="observation")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--rel-tol", type=float, default=1e-3)
    p.add_argument("--sigma2-update", choices=["conditional", "printed"], default="conditional")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixedforest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mixedforest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a benchmark dataset")
    _add_common(p)
    _add_sim(p)
    p.add_argument("--out", default="-")
    p.add_argument("--truth", help="ground-truth JSON (default <out>.truth.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one of the eight methods")
    _add_common(p)
    _add_method(p)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", help="key=value column-naming file")
    p.add_argument("--method", choices=sorted(METHODS), default="merf")
    p.add_argument("--alpha-grid", type=_csv_list(float), help="grid for the kernel parameter")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="log-likelihood trace CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict responses for query rows")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--schema")
    p.add_argument("--require-known", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="squared biases and split test errors")
    _add_common(p)
    _add_sim(p)
    _add_method(p)
    p.add_argument("--methods", type=_csv_list(str), default=["merf", "reemforest"])
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--splits", type=int, default=20)
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--data", help="dataset for the split errors (default: simulate one)")
    p.add_argument("--schema")
    p.add_argument("--out-bias", default="-")
    p.add_argument("--out-errors")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("importance", help="permutation importance of a fitted forest")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("stability", help="importance-ranking stability across mtry")
    _add_common(p)
    _add_sim(p)
    _add_method(p)
    p.add_argument("--method", choices=sorted(METHODS), default="reemforest")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--mtry-values", type=_csv_list(int), required=True)
    p.add_argument("--etas", type=_csv_list(int), default=[0, 1, 2, 5, 10, 20])
    p.add_argument("--runs", type=int, default=31)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_stability)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            defaults = json.load(fh)
        if not isinstance(defaults, dict):
            raise CliError("config: expected a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise CliError(f"config: unknown keys {sorted(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for name in ("methods",):
        for m in getattr(args, name, None) or []:
            if m != "rf" and m not in METHODS:
                raise CliError(f"usage: unknown method {m!r}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
