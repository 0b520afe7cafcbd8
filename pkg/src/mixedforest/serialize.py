"""JSON model files and likelihood-trace CSVs."""

from __future__ import annotations

import csv
import json
from typing import TextIO

import numpy as np

from .cart import RegressionTree
from .data import VarianceComponents
from .em import FittedModel, MethodSpec
from .forest import NODE_FIELDS, Forest
from .kernels import parse_kernel

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _mean_model_dict(m) -> dict:
    d = {f: getattr(m, f).tolist() for f in NODE_FIELDS}
    d.update(p=m.p, mtry=m.mtry, inbag=m.inbag.tolist())
    if isinstance(m, Forest):
        d.update(kind="forest", n_nodes=m.n_nodes.tolist(), n_leaves=m.n_leaves.tolist(),
                 master_seed=m.master_seed)
    else:
        d.update(kind="tree", n_leaves=m.n_leaves)
    return d


def _mean_model_from(d: dict):
    dtypes = {"feature": np.int64, "left": np.int64, "right": np.int64, "leaf_id": np.int64,
              "threshold": float, "value": float, "gain": float}
    arrs = {f: np.array(d[f], dtype=dtypes[f]) for f in NODE_FIELDS}
    inbag = np.array(d["inbag"], dtype=np.int64)
    if d["kind"] == "forest":
        return Forest(**arrs, n_nodes=np.array(d["n_nodes"], np.int64),
                      n_leaves=np.array(d["n_leaves"], np.int64), inbag=inbag,
                      p=d["p"], mtry=d["mtry"], master_seed=d.get("master_seed"))
    if d["kind"] == "tree":
        return RegressionTree(**arrs, n_leaves=d["n_leaves"], p=d["p"], mtry=d["mtry"], inbag=inbag)
    raise ModelFormatError(f"unknown mean model kind {d['kind']!r}")


def model_to_dict(model: FittedModel, metadata: dict | None = None) -> dict:
    from . import __version__

    return {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "metadata": metadata or {},
        "method": model.method,
        "spec": model.spec.to_dict(),
        "kernel": str(model.kernel),
        "mean_model": _mean_model_dict(model.mean_model),
        "ids": list(model.ids),
        "times": [t.tolist() for t in model.times],
        "b_hat": model.b_hat.tolist(),
        "omega_hat": [o.tolist() for o in model.omega_hat],
        "vc": model.vc.to_dict(),
        "vc_trace": [v.to_dict() for v in model.vc_trace],
        "loglik_trace": model.loglik_trace.tolist(),
        "iterations": model.iterations,
        "converged": model.converged,
        "f_hat": model.f_hat.tolist(),
        "alpha_hat": model.alpha_hat,
        "seed_entropy": model.seed_entropy,
    }


def model_from_dict(d: dict) -> FittedModel:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version!r}")
    try:
        return FittedModel(
            method=d["method"], spec=MethodSpec.from_dict(d["spec"]),
            mean_model=_mean_model_from(d["mean_model"]), ids=tuple(d["ids"]),
            times=[np.array(t, dtype=float) for t in d["times"]],
            b_hat=np.array(d["b_hat"], dtype=float).reshape(len(d["ids"]), -1),
            omega_hat=[np.array(o, dtype=float) for o in d["omega_hat"]],
            vc=VarianceComponents.from_dict(d["vc"]), kernel=parse_kernel(d["kernel"]),
            loglik_trace=np.array(d["loglik_trace"], dtype=float),
            vc_trace=[VarianceComponents.from_dict(v) for v in d["vc_trace"]],
            iterations=d["iterations"], converged=d["converged"],
            f_hat=np.array(d["f_hat"], dtype=float), alpha_hat=d["alpha_hat"],
            seed_entropy=d["seed_entropy"])
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks field {exc.args[0]!r}") from None


def save_model(model: FittedModel, stream: TextIO, metadata: dict | None = None) -> None:
    json.dump(model_to_dict(model, metadata), stream)


def load_model(stream: TextIO) -> FittedModel:
    try:
        d = json.load(stream)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ModelFormatError("model file must hold a JSON object")
    return model_from_dict(d)


def write_trace(model: FittedModel, stream: TextIO, header_lines=()) -> None:
    for line in header_lines:
        stream.write(f"# {line}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["iteration", "loglik"])
    for r, ll in enumerate(model.loglik_trace, start=1):
        w.writerow([r, repr(float(ll))])
