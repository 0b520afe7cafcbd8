"""Response prediction at arbitrary times for known and new individuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetError, LongitudinalDataset
from .em import FittedModel
from .kernels import KernelError, KernelSpec, kernel_cross


@dataclass(frozen=True)
class PredictionQuery:
    id: str
    x: np.ndarray
    z: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).ravel())
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).ravel())
        object.__setattr__(self, "t", float(self.t))


def interpolate_omega(times, omega_hat, t, kernel: KernelSpec):
    """Serial-correlation estimate at time(s) ``t`` from its values at ``times``.

    Inside the observed range this is linear interpolation between the two
    bracketing estimates. Outside it, the conditional mean given the nearest
    estimate: K(t, t_1) / K(t_1, t_1) * omega(t_1) before the first time and
    the same with t_n after the last.
    """
    if not kernel.stochastic:
        raise KernelError("no serial-correlation process under kernel 'none'")
    times = np.asarray(times, dtype=float)
    omega_hat = np.asarray(omega_hat, dtype=float)
    if times.size == 0 or times.shape != omega_hat.shape:
        raise ValueError("omega_hat must be a nonempty path matching its times")
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(ts.size)
    first, last = times[0], times[-1]
    for k, s in enumerate(ts):
        j = int(np.searchsorted(times, s))
        if j < times.size and times[j] == s:
            out[k] = omega_hat[j]
        elif s < first or s > last:
            anchor, w = (first, omega_hat[0]) if s < first else (last, omega_hat[-1])
            denom = kernel_cross(kernel, anchor, anchor)
            if denom == 0:
                raise KernelError(f"K({anchor}, {anchor}) = 0; cannot extrapolate")
            out[k] = kernel_cross(kernel, s, anchor) / denom * w
        else:
            lo, hi = times[j - 1], times[j]
            out[k] = ((hi - s) * omega_hat[j - 1] + (s - lo) * omega_hat[j]) / (hi - lo)
    return float(out[0]) if scalar else out


def _check_dims(model: FittedModel, x: np.ndarray, z: np.ndarray) -> None:
    if x.shape[-1] != model.p:
        raise DatasetError(f"expected {model.p} covariates, got {x.shape[-1]}")
    if z.shape[-1] != model.q:
        raise DatasetError(f"expected {model.q} random-effect columns, got {z.shape[-1]}")


def predict_outcome(model: FittedModel, query: PredictionQuery, require_known: bool = False) -> float:
    """f(X(t)) + Z(t) b_i + omega_i(t); the population mean f(X(t)) for new individuals."""
    _check_dims(model, query.x, query.z)
    if model.kernel.needs_positive_times and query.t <= 0:
        raise KernelError("query time must be positive for this kernel")
    f = float(model.predict_mean(query.x[None, :])[0])
    k = model.index.get(query.id)
    if k is None:
        if require_known:
            raise DatasetError(f"unknown individual {query.id!r}")
        return f
    y = f + float(query.z @ model.b_hat[k])
    if model.kernel.stochastic:
        y += interpolate_omega(model.times[k], model.omega_hat[k], query.t, model.kernel)
    return y


def predict_rows(model: FittedModel, ids, times, X, Z, require_known: bool = False) -> np.ndarray:
    """Vectorised ``predict_outcome`` over stacked query rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    times = np.asarray(times, dtype=float)
    ids = [str(i) for i in ids]
    if not (len(ids) == times.size == X.shape[0] == Z.shape[0]):
        raise DatasetError("query columns have different lengths")
    _check_dims(model, X, Z)
    if model.kernel.needs_positive_times and np.any(times <= 0):
        raise KernelError("query times must be positive for this kernel")
    out = model.predict_mean(X).copy()
    rows: dict[int, list[int]] = {}
    for r, i in enumerate(ids):
        k = model.index.get(i)
        if k is None:
            if require_known:
                raise DatasetError(f"unknown individual {i!r}")
            continue
        rows.setdefault(k, []).append(r)
    for k, rs in rows.items():
        rs = np.array(rs)
        out[rs] += Z[rs] @ model.b_hat[k]
        if model.kernel.stochastic:
            out[rs] += interpolate_omega(model.times[k], model.omega_hat[k], times[rs], model.kernel)
    return out


def predict_dataset(model: FittedModel, dataset: LongitudinalDataset) -> np.ndarray:
    """Predictions for every stacked row of ``dataset`` (responses are ignored)."""
    return predict_rows(model, np.repeat(dataset.ids, [b.n_obs for b in dataset.individuals]),
                        dataset.times, dataset.X, dataset.Z)
