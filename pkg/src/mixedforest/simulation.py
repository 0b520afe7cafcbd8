"""Simulated longitudinal benchmarks and their metrics.

Covariates follow six temporal group behaviours plus Gaussian noise
variables; outcomes add a random intercept and slope on an exogenous
``z_i ~ U[0, 3]``, optionally a Brownian path, and measurement noise.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import (IndividualBlock, LongitudinalDataset, VarianceComponents, split_train_test)
from .em import FittedModel, MethodSpec, fit, model_importance
from .forest import fit_forest, importance_ranking
from .prediction import predict_dataset

N_GROUPS = 6
COVARIATE_NOISE_VAR = 0.4
NOISE_VARIABLE_VAR = 3.0
SUBSET_SIZE = 20


def temporal_mean(group: int, t):
    """Mean trajectory of temporal group 1..6 at time(s) t."""
    t = np.asarray(t, dtype=float)
    if group == 1:
        if np.any(t == 0):
            raise ValueError("group 1 trajectory is undefined at t = 0")
        return 2.44 - 0.04 * (t - 3 * (t - 6) ** 2 / t)
    if group == 2:
        return 0.5 * t - 0.1 * (t - 5) ** 2
    if group == 3:
        return 0.25 * t - 0.05 * (t - 6) ** 2
    if group == 4:
        return np.cos((t - 1) / 3)
    if group == 5:
        return 0.1 * t + np.sin(0.6 * t + 1.3)
    if group == 6:
        return -0.1 * t ** 2
    raise ValueError(f"group must be in 1..6, got {group}")


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 17
    n_i_range: tuple[int, int] = (8, 11)
    p: int = 6
    group_size: int = 1
    scheme: str = "non_stochastic"
    dimension: str = "low"
    B: tuple[tuple[float, ...], ...] = ((0.5, 0.6), (0.6, 3.0))
    gamma2: float = 0.8
    sigma2: float = 0.5
    time_grid: tuple[float, ...] = tuple(float(t) for t in range(1, 13))
    seed: int = 0  # outcome randomness: random effects, serial process, noise
    design_seed: int = 0  # covariate design: times, offsets zeta, covariates, mean subsets

    def __post_init__(self):
        if self.scheme not in ("non_stochastic", "stochastic"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dimension not in ("low", "high"):
            raise ValueError(f"unknown dimension {self.dimension!r}")
        if self.dimension == "low" and (self.p != 6 or self.group_size != 1):
            raise ValueError("low dimension means p = 6 with one variable per group")
        if N_GROUPS * self.group_size > self.p:
            raise ValueError("6 * group_size must not exceed p")
        if self.dimension == "high" and self.group_size < SUBSET_SIZE:
            raise ValueError("high dimension needs at least 20 variables in groups 1 and 2")
        lo, hi = self.n_i_range
        if not 1 <= lo <= hi <= len(self.time_grid):
            raise ValueError("n_i_range must fit inside the time grid")
        if min(self.time_grid) <= 0:
            raise ValueError("measurement times must be positive")

    @classmethod
    def low(cls, scheme="non_stochastic", seed=0, **kw) -> "SimulationConfig":
        return cls(p=6, group_size=1, scheme=scheme, dimension="low", seed=seed, **kw)

    @classmethod
    def high(cls, scheme="non_stochastic", seed=0, p=800, group_size=27, **kw) -> "SimulationConfig":
        return cls(p=p, group_size=group_size, scheme=scheme, dimension="high", seed=seed, **kw)

    @classmethod
    def full_scale(cls, scheme="non_stochastic", seed=0, **kw) -> "SimulationConfig":
        return cls.high(scheme, seed, p=8000, group_size=266, **kw)

    @property
    def stochastic(self) -> bool:
        return self.scheme == "stochastic"

    @property
    def truth(self) -> VarianceComponents:
        return VarianceComponents(np.array(self.B), self.gamma2 if self.stochastic else 0.0, self.sigma2)

    def group_labels(self) -> np.ndarray:
        """Temporal group (1..6) of every covariate, 0 for noise variables."""
        labels = np.zeros(self.p, dtype=int)
        labels[:N_GROUPS * self.group_size] = np.repeat(np.arange(1, N_GROUPS + 1), self.group_size)
        return labels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MeanFunction:
    """f(x) = 1.3 a(x)^2 + 2 |c(x)|^(1/2), with a, c single variables or 20-variable means."""

    first: np.ndarray
    second: np.ndarray

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = X[:, self.first].mean(axis=1)
        c = X[:, self.second].mean(axis=1)
        return 1.3 * a ** 2 + 2 * np.sqrt(np.abs(c))


def _design_streams(config: SimulationConfig) -> dict[str, np.random.Generator]:
    names = ("subsets", "zeta", "times", "covariates", "evaluation")
    children = np.random.SeedSequence(config.design_seed).spawn(len(names))
    return {k: np.random.default_rng(c) for k, c in zip(names, children)}


def mean_function(config: SimulationConfig) -> MeanFunction:
    if config.dimension == "low":
        return MeanFunction(np.array([0]), np.array([1]))
    rng = _design_streams(config)["subsets"]
    gs = config.group_size
    first = np.sort(rng.choice(gs, SUBSET_SIZE, replace=False))
    second = np.sort(gs + rng.choice(gs, SUBSET_SIZE, replace=False))
    return MeanFunction(first, second)


def group_offsets(config: SimulationConfig, rng=None) -> np.ndarray:
    """zeta_k ~ N(0, 1), one shift per temporal covariate."""
    rng = _design_streams(config)["zeta"] if rng is None else rng
    return rng.normal(0.0, 1.0, size=N_GROUPS * config.group_size)


def simulate_times(config: SimulationConfig, rng) -> list[np.ndarray]:
    """n_i ~ U{lo..hi} distinct sorted times drawn from the time grid."""
    grid = np.asarray(config.time_grid, dtype=float)
    lo, hi = config.n_i_range
    sizes = rng.integers(lo, hi + 1, size=config.n)
    return [np.sort(rng.choice(grid, size=k, replace=False)) for k in sizes]


def simulate_covariates(config: SimulationConfig, times: Sequence[np.ndarray], rng,
                        zeta: np.ndarray | None = None):
    """Covariate blocks and group labels.

    Temporal covariate k: C_g(t) + zeta_k + e with zeta_k ~ N(0, 1) shared by
    all individuals and e ~ N(0, 0.4) drawn per entry. Remaining covariates
    are i.i.d. N(0, 3). ``zeta`` defaults to the design's offsets.
    """
    labels = config.group_labels()
    n_temporal = N_GROUPS * config.group_size
    zeta = group_offsets(config) if zeta is None else np.asarray(zeta, dtype=float)
    blocks = []
    for t in times:
        Xi = np.empty((t.size, config.p))
        trend = np.column_stack([temporal_mean(g, t) for g in labels[:n_temporal]])
        Xi[:, :n_temporal] = trend + zeta + rng.normal(0.0, math.sqrt(COVARIATE_NOISE_VAR),
                                                        size=(t.size, n_temporal))
        Xi[:, n_temporal:] = rng.normal(0.0, math.sqrt(NOISE_VARIABLE_VAR),
                                        size=(t.size, config.p - n_temporal))
        blocks.append(Xi)
    return blocks, labels


def brownian_path(times: np.ndarray, gamma2: float, rng) -> np.ndarray:
    """Exact Brownian values at ``times`` with Var(w(t)) = gamma2 t, w(0) = 0."""
    dt = np.diff(np.concatenate([[0.0], times]))
    return np.cumsum(rng.normal(0.0, 1.0, size=times.size) * np.sqrt(gamma2 * dt))


@dataclass(eq=False)
class SimulatedDataset:
    dataset: LongitudinalDataset
    config: SimulationConfig
    f: list[np.ndarray]
    b: np.ndarray
    z: np.ndarray
    omega: list[np.ndarray]
    eps: list[np.ndarray]
    groups: np.ndarray
    mean: MeanFunction


def simulate_outcome(times, covariates, config: SimulationConfig, rng) -> SimulatedDataset:
    B = np.array(config.B)
    mean = mean_function(config)
    b = rng.multivariate_normal(np.zeros(2), B, size=config.n)
    z = rng.uniform(0.0, 3.0, size=config.n)
    blocks, fs, omegas, epss = [], [], [], []
    for i, (t, Xi) in enumerate(zip(times, covariates)):
        f = mean(Xi)
        om = brownian_path(t, config.gamma2, rng) if config.stochastic else np.zeros(t.size)
        eps = rng.normal(0.0, math.sqrt(config.sigma2), size=t.size)
        y = f + b[i, 0] + z[i] * b[i, 1] + om + eps
        Zi = np.column_stack([np.ones(t.size), np.full(t.size, z[i])])
        blocks.append(IndividualBlock(str(i + 1), t, Xi, Zi, y))
        fs.append(f)
        omegas.append(om)
        epss.append(eps)
    return SimulatedDataset(LongitudinalDataset(tuple(blocks)), config, fs, b, z, omegas, epss,
                            config.group_labels(), mean)


def simulate_design(config: SimulationConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Measurement times and covariates; a function of ``design_seed`` only."""
    streams = _design_streams(config)
    times = simulate_times(config, streams["times"])
    X, _ = simulate_covariates(config, times, streams["covariates"])
    return times, X


def simulate(config: SimulationConfig) -> SimulatedDataset:
    times, X = simulate_design(config)
    return simulate_outcome(times, X, config, np.random.default_rng(config.seed))


# --------------------------------------------------------------------------
# squared bias
# --------------------------------------------------------------------------


def default_eval_grid(n_points: int = 20) -> np.ndarray:
    return np.linspace(1.25, 11.75, n_points)


@dataclass(eq=False)
class EvaluationDesign:
    """Covariates X_i(t) on a fixed time grid, shared by all replicates."""

    grid: np.ndarray
    X: np.ndarray
    f: np.ndarray


def evaluation_design(config: SimulationConfig, grid=None) -> EvaluationDesign:
    """Covariates of the design's n individuals at the grid times."""
    grid = default_eval_grid() if grid is None else np.asarray(grid, dtype=float)
    X, _ = simulate_covariates(config, [grid] * config.n, _design_streams(config)["evaluation"])
    X = np.vstack(X)
    return EvaluationDesign(grid, X, mean_function(config)(X))


def squared_biases(f_preds, f_true, B_hats, gamma2_hats, sigma2_hats,
                   truth: VarianceComponents) -> dict:
    """Squared biases of the across-replicate mean estimates."""
    f_preds = np.atleast_2d(np.asarray(f_preds, dtype=float))
    if f_preds.shape[0] == 0:
        raise ValueError("no replicates")
    f_bar = f_preds.mean(axis=0)
    B_bar = np.mean(np.asarray(B_hats, dtype=float), axis=0)
    return {
        "bias2_f": float(np.mean((f_bar - np.asarray(f_true)) ** 2)),
        "bias2_B": float(np.mean((B_bar - truth.B) ** 2)),
        "bias2_gamma2": float((np.mean(gamma2_hats) - truth.gamma2) ** 2),
        "bias2_sigma2": float((np.mean(sigma2_hats) - truth.sigma2) ** 2),
    }


def squared_bias_report(fits: Sequence[FittedModel], design: EvaluationDesign,
                        truth: VarianceComponents, stochastic: bool | None = None) -> dict:
    if not fits:
        raise ValueError("no replicates")
    grid = set(np.asarray(design.grid).tolist())
    for m in fits:
        if any(grid.intersection(t.tolist()) for t in m.times):
            raise ValueError("evaluation grid overlaps measurement times")
    report = squared_biases([m.predict_mean(design.X) for m in fits], design.f,
                            [m.vc.B for m in fits], [m.vc.gamma2 for m in fits],
                            [m.vc.sigma2 for m in fits], truth)
    if stochastic is None:
        stochastic = fits[0].kernel.stochastic
    if not stochastic:
        report["bias2_gamma2"] = float("nan")
    return report


# --------------------------------------------------------------------------
# prediction error
# --------------------------------------------------------------------------

# (train, test, seed) -> predictions for the stacked test rows
FitPredict = Callable[[LongitudinalDataset, LongitudinalDataset, int], np.ndarray]


def em_predictor(spec: MethodSpec) -> FitPredict:
    def fit_predict(train, test, seed):
        model = fit(train, dataclasses.replace(spec, seed=seed))
        return predict_dataset(model, test)

    return fit_predict


def rf_predictor(n_trees: int = 100, mtry: int | None = None, min_node_size: int = 5) -> FitPredict:
    """Breiman forest on the pooled rows, ignoring the longitudinal structure."""

    def fit_predict(train, test, seed):
        forest = fit_forest(train.X, train.y, n_trees=n_trees, mtry=mtry,
                            min_node_size=min_node_size, seed=seed)
        return forest.predict(test.X)

    return fit_predict


def _child_seeds(seed, k: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(k)]


def split_errors(dataset: LongitudinalDataset, predictor: FitPredict | MethodSpec,
                 n_splits: int = 20, holdout: int = 2, seed: int = 0) -> np.ndarray:
    """Test MSE of each random split (``holdout`` rows per individual)."""
    if isinstance(predictor, MethodSpec):
        predictor = em_predictor(predictor)
    out = np.empty(n_splits)
    for k, s in enumerate(_child_seeds(seed, n_splits)):
        train, test = split_train_test(dataset, holdout, s)
        r = test.y - predictor(train, test, s)
        out[k] = np.mean(r * r)
    return out


def prediction_error(dataset: LongitudinalDataset, predictor: FitPredict | MethodSpec,
                     n_splits: int = 20, holdout: int = 2, seed: int = 0) -> float:
    """(1 / (holdout n M')) sum over splits and held-out rows of squared errors."""
    return float(np.mean(split_errors(dataset, predictor, n_splits, holdout, seed)))


# --------------------------------------------------------------------------
# stability of importance rankings
# --------------------------------------------------------------------------


def stability_score(V: Sequence, V2: Sequence, eta: int, top_k: int | None = None) -> float:
    """Share of positions i whose V[i] appears in V2 within ranks i-eta..i+eta."""
    V, V2 = list(V), list(V2)
    if top_k is not None:
        V, V2 = V[:top_k], V2[:top_k]
        if len(V) != len(V2):
            raise ValueError("rankings are shorter than top_k")
    elif len(V) != len(V2) or sorted(map(repr, V)) != sorted(map(repr, V2)) or len(set(V)) != len(V):
        raise ValueError("rankings must be permutations of the same variables")
    p = len(V)
    if p == 0:
        raise ValueError("empty rankings")
    eta = int(eta)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    hits = 0
    for i, v in enumerate(V):
        lo, hi = max(0, i - eta), min(p - 1, i + eta)
        if v in V2[lo:hi + 1]:
            hits += 1
    return hits / p


def stability_sweep(dataset: LongitudinalDataset, spec: MethodSpec, mtry_values: Sequence[int],
                    etas: Sequence[int], n_runs: int = 31, top_k: int = 50,
                    seed: int = 0) -> list[tuple[int, int, float]]:
    """Mean stability score over consecutive run pairs, per (eta, mtry)."""
    rows = []
    for mtry in mtry_values:
        s = dataclasses.replace(spec, learner_params=dataclasses.replace(spec.learner_params, mtry=int(mtry)))
        rankings = []
        for k, run_seed in enumerate(_child_seeds([seed, int(mtry)], n_runs)):
            model = fit(dataset, dataclasses.replace(s, seed=run_seed))
            vi = model_importance(model, dataset, run_seed)
            rankings.append(importance_ranking(vi).tolist())
        k_top = min(top_k, dataset.p)
        for eta in etas:
            scores = [stability_score(rankings[r], rankings[r + 1], eta, top_k=k_top)
                      for r in range(n_runs - 1)]
            rows.append((int(eta), int(mtry), float(np.mean(scores))))
    return rows


# --------------------------------------------------------------------------
# replicate drivers
# --------------------------------------------------------------------------


def method_spec(name: str, config: SimulationConfig, seed: int = 0, **params) -> MethodSpec:
    """Spec for a benchmark method; stochastic variants use the Brownian kernel."""
    from .kernels import KernelSpec

    kernel = KernelSpec("brownian") if name.startswith("s") else None
    return MethodSpec.from_name(name, kernel=kernel, seed=seed, **params)


def bias_benchmark(config: SimulationConfig, methods: Sequence[str], replicates: int,
                   design: EvaluationDesign | None = None, callback=None,
                   **params) -> dict[str, dict]:
    """Fit every method on ``replicates`` simulated datasets; squared biases per method.

    Replicates share the covariate design; replicate m draws outcomes with
    ``config.seed + m``. ``callback(method, replicate, model)``
    sees every fitted model.
    """
    design = evaluation_design(config) if design is None else design
    fits: dict[str, list[FittedModel]] = {m: [] for m in methods}
    for m in range(replicates):
        sim = simulate(dataclasses.replace(config, seed=config.seed + m))
        for name in methods:
            model = fit(sim.dataset, method_spec(name, config, seed=config.seed + m, **params))
            fits[name].append(model)
            if callback is not None:
                callback(name, m, model)
    return {name: squared_bias_report(fits[name], design, config.truth, config.stochastic)
            for name in methods}


def error_benchmark(config: SimulationConfig, methods: Sequence[str], datasets: int,
                    n_splits: int, rf_trees: int = 100, **params) -> dict[str, np.ndarray]:
    """Per-dataset mean test MSE (shape ``(datasets,)``) for each method.

    Dataset d uses design and outcome seeds offset by d. The name ``rf``
    selects a Breiman forest on pooled rows.
    """
    out = {m: np.empty(datasets) for m in methods}
    for d in range(datasets):
        sim = simulate(dataclasses.replace(config, seed=config.seed + d,
                                           design_seed=config.design_seed + d))
        for name in methods:
            if name == "rf":
                mtry = params.get("mtry")
                pred = rf_predictor(rf_trees, mtry, params.get("min_node_size", 5))
            else:
                pred = em_predictor(method_spec(name, config, **params))
            out[name][d] = prediction_error(sim.dataset, pred, n_splits, 2, seed=config.seed + d)
    return out
