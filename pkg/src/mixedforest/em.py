"""EM-style fitting of semi-parametric (stochastic) mixed-effects models.

The mean function is a CART tree or a random forest, optionally with its
leaves refit by generalized least squares against V_i (the "REEM" variants).
Each iteration:

1. fits the learner on ``Y - Z b_hat - omega_hat`` and computes f_hat,
2. predicts b_hat and omega_hat (BLUPs) under the current variances,
3. updates B, gamma2 and sigma2 by conditional expectations,

and stops when the marginal log-likelihood settles.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import linalg

from . import cart
from .cart import RegressionTree
from .data import (LongitudinalDataset, MarginalCovariance, VarianceComponents,
                   marginal_covariance, marginal_covariances)
from .forest import Forest, default_mtry, fit_forest, variable_importance
from .kernels import KernelError, KernelSpec

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8

# name -> (learner, refit, stochastic)
METHODS = {
    "mert": ("tree", "plain", False),
    "reemtree": ("tree", "reem", False),
    "merf": ("forest", "plain", False),
    "reemforest": ("forest", "reem", False),
    "smert": ("tree", "plain", True),
    "sreemtree": ("tree", "reem", True),
    "smerf": ("forest", "plain", True),
    "sreemforest": ("forest", "reem", True),
}


@dataclass(frozen=True)
class LearnerParams:
    n_trees: int = 100
    mtry: int | None = None  # None: all variables for trees, ceil(3p/4) for forests
    min_node_size: int = 5
    bootstrap_unit: str = "observation"
    fitted: str = "inbag"  # plain forests only: "inbag" or "oob" fitted values
    threads: int = 1


@dataclass(frozen=True)
class EMParams:
    max_iter: int = 50
    rel_tol: float = 1e-3
    sigma2_update: str = "conditional"  # or "printed"
    frozen: VarianceComponents | None = None  # keep variances fixed (diagnostics)


@dataclass(frozen=True)
class MethodSpec:
    learner: str = "forest"
    refit: str = "plain"
    kernel: KernelSpec = KernelSpec()
    learner_params: LearnerParams = LearnerParams()
    em_params: EMParams = EMParams()
    seed: int | None = 0

    def __post_init__(self):
        if self.learner not in ("tree", "forest"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.refit not in ("plain", "reem"):
            raise ValueError(f"unknown refit {self.refit!r}")
        if self.em_params.sigma2_update not in ("conditional", "printed"):
            raise ValueError("sigma2_update must be 'conditional' or 'printed'")
        if self.learner_params.fitted not in ("inbag", "oob"):
            raise ValueError("fitted must be 'inbag' or 'oob'")

    @property
    def stochastic(self) -> bool:
        return self.kernel.stochastic

    @property
    def name(self) -> str:
        base = {("tree", "plain"): "mert", ("tree", "reem"): "reemtree",
                ("forest", "plain"): "merf", ("forest", "reem"): "reemforest"}[(self.learner, self.refit)]
        return ("s" + base) if self.stochastic else base

    @classmethod
    def from_name(cls, name: str, kernel: KernelSpec | None = None, seed: int | None = 0,
                  **params) -> "MethodSpec":
        """Build a spec from a method name; ``params`` may hold any
        LearnerParams or EMParams field."""
        try:
            learner, refit, stochastic = METHODS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown method {name!r}; expected one of {sorted(METHODS)}") from None
        if stochastic:
            kernel = kernel if kernel is not None and kernel.stochastic else KernelSpec("brownian")
        else:
            kernel = KernelSpec("none")
        lp_names = {f.name for f in dataclasses.fields(LearnerParams)}
        em_names = {f.name for f in dataclasses.fields(EMParams)}
        unknown = set(params) - lp_names - em_names
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        lp = LearnerParams(**{k: v for k, v in params.items() if k in lp_names})
        em = EMParams(**{k: v for k, v in params.items() if k in em_names})
        return cls(learner, refit, kernel, lp, em, seed)

    def to_dict(self) -> dict:
        em = dataclasses.asdict(self.em_params)
        em["frozen"] = None if self.em_params.frozen is None else self.em_params.frozen.to_dict()
        lp = dataclasses.asdict(self.learner_params)
        del lp["threads"]  # never changes results
        return {"method": self.name, "learner": self.learner, "refit": self.refit,
                "kernel": str(self.kernel), "learner_params": lp,
                "em_params": em, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        from .kernels import parse_kernel

        em = dict(d["em_params"])
        if em.get("frozen") is not None:
            em["frozen"] = VarianceComponents.from_dict(em["frozen"])
        return cls(d["learner"], d["refit"], parse_kernel(d["kernel"]),
                   LearnerParams(**d["learner_params"]), EMParams(**em), d["seed"])


MeanModel = Union[RegressionTree, Forest]


@dataclass(eq=False)
class IterationState:
    """Snapshot handed to ``fit``'s callback after every iteration."""

    iteration: int
    f_hat: np.ndarray
    b_hat: np.ndarray
    omega_hat: list[np.ndarray]
    vc_used: VarianceComponents
    covs: list[MarginalCovariance]
    vc_new: VarianceComponents
    loglik: float


@dataclass(eq=False)
class FittedModel:
    method: str
    spec: MethodSpec
    mean_model: MeanModel
    ids: tuple[str, ...]
    times: list[np.ndarray]
    b_hat: np.ndarray
    omega_hat: list[np.ndarray]
    vc: VarianceComponents
    kernel: KernelSpec
    loglik_trace: np.ndarray
    vc_trace: list[VarianceComponents]
    iterations: int
    converged: bool
    f_hat: np.ndarray
    alpha_hat: float | None = None
    seed_entropy: int | None = None
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {i: k for k, i in enumerate(self.ids)}

    @property
    def p(self) -> int:
        return self.mean_model.p

    @property
    def q(self) -> int:
        return self.b_hat.shape[1]

    def predict_mean(self, X) -> np.ndarray:
        return self.mean_model.predict(X)


def iteration_seed(seed, iteration: int) -> np.random.SeedSequence:
    """Seed of the learner fitted at ``iteration`` (0-based)."""
    entropy = seed.entropy if isinstance(seed, np.random.SeedSequence) else seed
    return np.random.SeedSequence(entropy, spawn_key=(int(iteration),))


def _fit_mean(dataset: LongitudinalDataset, target: np.ndarray, spec: MethodSpec,
              covs: list[MarginalCovariance], seed) -> tuple[MeanModel, np.ndarray]:
    lp = spec.learner_params
    X = dataset.X
    if spec.learner == "tree":
        tree = cart.fit_tree(X, target, mtry=lp.mtry, min_node_size=lp.min_node_size,
                             seed=seed, bootstrap=False)
        if spec.refit == "reem":
            tree = tree.with_leaf_values(cart.gls_refit_leaves(tree, dataset, covs))
        return tree, tree.predict(X)
    mtry = default_mtry(dataset.p) if lp.mtry is None else lp.mtry
    forest = fit_forest(X, target, n_trees=lp.n_trees, mtry=mtry, min_node_size=lp.min_node_size,
                        seed=seed, groups=dataset.groups, bootstrap_unit=lp.bootstrap_unit,
                        threads=lp.threads)
    if spec.refit == "reem":
        packed = forest.packed()
        packed["value"] = forest.value.copy()
        cart.refit_packed(packed, cart.gls_system(dataset, covs))
        forest = forest.with_values(packed["value"])
        return forest, forest.predict(X)
    if lp.fitted == "oob":
        from .forest import oob_predictions

        f_hat, cnt = oob_predictions(forest, X)
        missing = cnt == 0
        if missing.any():
            f_hat[missing] = forest.predict(X[missing])
        return forest, f_hat
    return forest, forest.predict(X)


def blup(block, residual, vc: VarianceComponents, kernel: KernelSpec,
         cov: MarginalCovariance | None = None) -> tuple[np.ndarray, np.ndarray]:
    """b_i = B Z' V^-1 r and omega_i = gamma2 K V^-1 r."""
    if cov is None:
        cov = marginal_covariance(block, vc, kernel)
    w = cov.solve(np.asarray(residual, dtype=float))
    b = vc.B @ (block.Z.T @ w)
    if kernel.stochastic:
        omega = vc.gamma2 * (cov.K @ w)
    else:
        omega = np.zeros_like(w)
    return b, omega


def update_variances(dataset: LongitudinalDataset, f_hat, b_hat, omega_hat,
                     vc_prev: VarianceComponents, kernel: KernelSpec,
                     covs: list[MarginalCovariance] | None = None,
                     sigma2_update: str = "conditional") -> VarianceComponents:
    """Conditional-expectation updates of B, gamma2 and sigma2.

    Every right-hand-side variance is taken at ``vc_prev``. gamma2 is floored
    at 0 and sigma2 at SIGMA2_FLOOR.
    """
    if covs is None:
        covs = marginal_covariances(dataset, vc_prev, kernel)
    fs = dataset.blocks_of(np.asarray(f_hat, dtype=float))
    b_hat = np.asarray(b_hat, dtype=float).reshape(dataset.n, dataset.q)
    B, g2, s2 = vc_prev.B, vc_prev.gamma2, vc_prev.sigma2
    B_sum = np.zeros_like(B)
    g_sum = 0.0
    s_sum = 0.0
    for blk, cov, f, b, om in zip(dataset.individuals, covs, fs, b_hat, omega_hat):
        ni = blk.n_obs
        B_sum += np.outer(b, b) + B - B @ blk.Z.T @ cov.solve(blk.Z @ B)
        Vinv = cov.inverse
        if kernel.stochastic:
            try:
                kf = linalg.cho_factor(cov.K, lower=True)
            except linalg.LinAlgError as exc:
                raise KernelError(f"kernel matrix of individual {blk.id!r} is singular") from exc
            g_sum += om @ linalg.cho_solve(kf, om) + g2 * (ni - g2 * np.sum(Vinv * cov.K))
        eps = blk.y - f - blk.Z @ b - om
        if sigma2_update == "conditional":
            s_sum += eps @ eps + s2 * (ni - s2 * np.trace(Vinv))
        else:
            s_sum += eps @ eps + s2 * np.trace(Vinv)
    B_new = B_sum / dataset.n
    B_new = 0.5 * (B_new + B_new.T)
    w, U = np.linalg.eigh(B_new)
    if w.min() < 0:
        B_new = (U * np.clip(w, 0, None)) @ U.T
        B_new = 0.5 * (B_new + B_new.T)
    gamma2 = max(g_sum / dataset.N, 0.0) if kernel.stochastic else 0.0
    sigma2 = max(s_sum / dataset.N, SIGMA2_FLOOR)
    return VarianceComponents(B_new, gamma2, sigma2)


def log_likelihood(dataset: LongitudinalDataset, f_hat, vc: VarianceComponents,
                   kernel: KernelSpec, covs: list[MarginalCovariance] | None = None) -> float:
    """Marginal Gaussian log-likelihood of Y given the mean f_hat."""
    if covs is None:
        covs = marginal_covariances(dataset, vc, kernel)
    total = 0.0
    for blk, cov, f in zip(dataset.individuals, covs, dataset.blocks_of(np.asarray(f_hat, dtype=float))):
        r = blk.y - f
        total += -0.5 * (blk.n_obs * np.log(2 * np.pi) + cov.logdet + r @ cov.solve(r))
    return float(total)


def fit(dataset: LongitudinalDataset, spec: MethodSpec,
        callback: Callable[[IterationState], None] | None = None) -> FittedModel:
    kernel = spec.kernel
    if kernel.needs_positive_times and np.any(dataset.times <= 0):
        raise KernelError(f"{kernel.family} kernel needs all observation times > 0")
    em = spec.em_params
    entropy = np.random.SeedSequence(spec.seed).entropy
    n, q = dataset.n, dataset.q
    if em.frozen is not None:
        vc = em.frozen
    else:
        vc = VarianceComponents(np.eye(q), 1.0 if kernel.stochastic else 0.0, 1.0)
    if not kernel.stochastic and vc.gamma2 != 0:
        vc = VarianceComponents(vc.B, 0.0, vc.sigma2)
    b_hat = np.zeros((n, q))
    omega = [np.zeros(b.n_obs) for b in dataset.individuals]
    covs = marginal_covariances(dataset, vc, kernel)
    trace, vc_trace = [], []
    converged = False
    mean_model, f_hat = None, None
    for r in range(em.max_iter):
        shift = np.concatenate([blk.Z @ b + om for blk, b, om in zip(dataset.individuals, b_hat, omega)])
        mean_model, f_hat = _fit_mean(dataset, dataset.y - shift, spec, covs,
                                      iteration_seed(entropy, r))
        resid = dataset.blocks_of(dataset.y - f_hat)
        pairs = [blup(blk, ri, vc, kernel, cov) for blk, ri, cov in zip(dataset.individuals, resid, covs)]
        b_new = np.array([pb for pb, _ in pairs]).reshape(n, q)
        omega_new = [po for _, po in pairs]
        if em.frozen is None:
            vc_new = update_variances(dataset, f_hat, b_new, omega_new, vc, kernel, covs,
                                      em.sigma2_update)
            covs_new = marginal_covariances(dataset, vc_new, kernel)
        else:
            vc_new, covs_new = vc, covs
        ll = log_likelihood(dataset, f_hat, vc_new, kernel, covs_new)
        if callback is not None:
            callback(IterationState(r, f_hat, b_new, omega_new, vc, covs, vc_new, ll))
        trace.append(ll)
        vc_trace.append(vc_new)
        b_hat, omega, vc, covs = b_new, omega_new, vc_new, covs_new
        if r > 0 and abs(ll - trace[-2]) / (abs(trace[-2]) + 1.0) < em.rel_tol:
            converged = True
            break
    if not converged:
        log.info("%s: no convergence within %d iterations", spec.name, em.max_iter)
    return FittedModel(
        method=spec.name, spec=spec, mean_model=mean_model, ids=dataset.ids,
        times=[b.times for b in dataset.individuals], b_hat=b_hat, omega_hat=omega, vc=vc,
        kernel=kernel, loglik_trace=np.array(trace), vc_trace=vc_trace, iterations=len(trace),
        converged=converged, f_hat=f_hat, alpha_hat=kernel.parameter, seed_entropy=entropy)


def fit_variances(dataset: LongitudinalDataset, f_hat, kernel: KernelSpec = KernelSpec(),
                  max_iter: int = 50, rel_tol: float = 1e-3,
                  callback: Callable[[IterationState], None] | None = None,
                  ) -> tuple[VarianceComponents, np.ndarray, bool]:
    """EM on the variance components alone, with the mean held at ``f_hat``.

    Returns the final components, the log-likelihood trace and a
    convergence flag (same stopping rule as ``fit``).
    """
    f_hat = np.asarray(f_hat, dtype=float)
    if kernel.needs_positive_times and np.any(dataset.times <= 0):
        raise KernelError(f"{kernel.family} kernel needs all observation times > 0")
    vc = VarianceComponents(np.eye(dataset.q), 1.0 if kernel.stochastic else 0.0, 1.0)
    covs = marginal_covariances(dataset, vc, kernel)
    resid = dataset.blocks_of(dataset.y - f_hat)
    trace = []
    for r in range(max_iter):
        pairs = [blup(blk, ri, vc, kernel, cov) for blk, ri, cov in zip(dataset.individuals, resid, covs)]
        b_new = np.array([pb for pb, _ in pairs]).reshape(dataset.n, dataset.q)
        omega_new = [po for _, po in pairs]
        vc_new = update_variances(dataset, f_hat, b_new, omega_new, vc, kernel, covs)
        covs_new = marginal_covariances(dataset, vc_new, kernel)
        ll = log_likelihood(dataset, f_hat, vc_new, kernel, covs_new)
        if callback is not None:
            callback(IterationState(r, f_hat, b_new, omega_new, vc, covs, vc_new, ll))
        trace.append(ll)
        vc, covs = vc_new, covs_new
        if r > 0 and abs(ll - trace[-2]) / (abs(trace[-2]) + 1.0) < rel_tol:
            return vc, np.array(trace), True
    return vc, np.array(trace), False


def select_alpha(dataset: LongitudinalDataset, spec: MethodSpec, grid) -> tuple[float, FittedModel]:
    """Grid search of the kernel parameter by final log-likelihood.

    Ties go to the smallest value.
    """
    grid = sorted(float(a) for a in grid)
    if not grid:
        raise ValueError("empty parameter grid")
    if spec.kernel.parameter is None:
        raise KernelError(f"kernel {spec.kernel.family!r} has no tunable parameter")
    best = None
    for a in grid:
        model = fit(dataset, dataclasses.replace(spec, kernel=spec.kernel.with_parameter(a)))
        if best is None or model.loglik_trace[-1] > best[1].loglik_trace[-1]:
            best = (a, model)
    best[1].alpha_hat = best[0]
    return best


def debiased_response(model: FittedModel, dataset: LongitudinalDataset) -> np.ndarray:
    """Y - Z b_hat - omega_hat on the training rows."""
    return np.concatenate([blk.y - blk.Z @ b - om for blk, b, om in
                           zip(dataset.individuals, model.b_hat, model.omega_hat)])


def model_importance(model: FittedModel, dataset: LongitudinalDataset, rng=None) -> np.ndarray:
    """Permutation importance of the fitted forest on the de-biased response."""
    if not isinstance(model.mean_model, Forest):
        raise TypeError("variable importance needs a forest-based method")
    return variable_importance(model.mean_model, dataset.X, debiased_response(model, dataset), rng)
