"""Acceptance criteria, each run at its stated size and tolerance.

Every test prints a single ``CRITERION k: PASS|FAIL ...`` line (repeated in
the terminal summary) before asserting. Slow criteria also check their
runtime budget.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

import mixedforest.simulation as simmod
from conftest import ACCEPTANCE, random_dataset, random_vc
from oracles import dense_gls, dense_loglik
from mixedforest.cart import fit_tree, gls_refit_leaves
from mixedforest.cli import main
from mixedforest.data import VarianceComponents, marginal_covariance, marginal_covariances, split_train_test
from mixedforest.em import METHODS, MethodSpec, blup, fit, fit_variances, iteration_seed, log_likelihood, model_importance
from mixedforest.forest import default_mtry, fit_forest, importance_ranking
from mixedforest.kernels import KernelSpec, kernel_matrix
from mixedforest.prediction import predict_dataset
from mixedforest.simulation import (SimulationConfig, evaluation_design, method_spec, simulate,
                                    squared_bias_report, stability_score)

KERNEL_GRID = [KernelSpec("none"), KernelSpec("brownian"), KernelSpec("fractional_brownian", h=0.3),
               KernelSpec("ornstein_uhlenbeck", alpha=1.5)]

# variance components of every model fitted by an acceptance run
AUDIT = {"models": 0, "iterations": 0, "violations": []}


def _audit(model, label):
    AUDIT["models"] += 1
    for r, vc in enumerate(model.vc_trace):
        AUDIT["iterations"] += 1
        ok = (np.array_equal(vc.B, vc.B.T) and np.linalg.eigvalsh(vc.B).min() >= -1e-8
              and vc.gamma2 >= 0 and vc.sigma2 > 0)
        if not ok:
            AUDIT["violations"].append(f"{label} iteration {r}")


@pytest.fixture
def audited(monkeypatch):
    """Route the benchmark helpers' fits through the variance audit."""
    orig = simmod.fit

    def wrapped(dataset, spec, callback=None):
        model = orig(dataset, spec, callback)
        _audit(model, spec.name)
        return model

    monkeypatch.setattr(simmod, "fit", wrapped)
    return wrapped


def report(k, ok, detail, capsys=None):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[k] = line
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


# --------------------------------------------------------------------------


def test_criterion_01_degenerate_equivalence(capsys):
    start = time.perf_counter()
    s = simulate(SimulationConfig.low("stochastic", seed=1))
    ds = s.dataset
    frozen = VarianceComponents(np.zeros((2, 2)), 0.0, 1.0)
    design_X = evaluation_design(s.config).X
    failures = []
    for name in ("merf", "smerf"):
        for seed in (0, 1, 2):
            model = fit(ds, MethodSpec.from_name(name, seed=seed, max_iter=1, frozen=frozen))
            _audit(model, name)
            ref = fit_forest(ds.X, ds.y, n_trees=100, mtry=default_mtry(ds.p),
                             seed=iteration_seed(seed, 0))
            same = (np.array_equal(model.predict_mean(ds.X), ref.predict(ds.X))
                    and np.array_equal(model.predict_mean(design_X), ref.predict(design_X))
                    and np.all(model.b_hat == 0) and all(np.all(o == 0) for o in model.omega_hat))
            if not same:
                failures.append(f"{name}/seed {seed}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 10
    report(1, ok, f"bit-identical in {6 - len(failures)}/6 fits, {elapsed:.1f} s (budget 10 s)", capsys)
    assert ok


def test_criterion_02_gls_oracle(capsys):
    rng = np.random.default_rng(2)
    worst, done = 0.0, 0
    while done < 200:
        kernel = KERNEL_GRID[done % len(KERNEL_GRID)]
        ds = random_dataset(rng, n=int(rng.integers(2, 5)), n_max=3, p=2, q=2)
        tree = fit_tree(ds.X, ds.y, min_node_size=max(1, math.ceil(ds.N / 3)),
                        seed=int(rng.integers(1 << 30)))
        assert tree.n_leaves <= 3
        vc = random_vc(rng, 2, kernel.stochastic)
        mu = gls_refit_leaves(tree, ds, marginal_covariances(ds, vc, kernel))
        worst = max(worst, float(np.max(np.abs(mu - dense_gls(tree, ds, vc, kernel)))))
        done += 1
    ok = worst <= 1e-10
    report(2, ok, f"200 instances, max abs deviation {worst:.2e} (tolerance 1e-10)", capsys)
    assert ok


def test_criterion_03_blup_identity(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(500):
        kernel = KERNEL_GRID[k % len(KERNEL_GRID)]
        blk = random_dataset(rng, n=1, n_max=6, q=2).individuals[0]
        vc = random_vc(rng, 2, kernel.stochastic)
        r = rng.normal(size=blk.n_obs) * 3
        cov = marginal_covariance(blk, vc, kernel)
        b, om = blup(blk, r, vc, kernel, cov)
        worst = max(worst, float(np.max(np.abs(blk.Z @ b + om + vc.sigma2 * cov.solve(r) - r))))

    s = simulate(SimulationConfig.low("stochastic", seed=3))
    ds = s.dataset
    em_worst, iters = 0.0, 0

    def check(state):
        nonlocal em_worst, iters
        iters += 1
        resid = ds.blocks_of(ds.y - state.f_hat)
        for blk, ri, b, om, cov in zip(ds.individuals, resid, state.b_hat, state.omega_hat, state.covs):
            lhs = blk.Z @ b + om + state.vc_used.sigma2 * cov.solve(ri)
            em_worst = max(em_worst, float(np.max(np.abs(lhs - ri))))

    for name in sorted(METHODS):
        model = fit(ds, method_spec(name, s.config, seed=3), check)
        _audit(model, name)
    ok = worst <= 1e-10 and em_worst <= 1e-10
    report(3, ok, f"500 random instances max {worst:.2e}; {iters} EM iterations over 8 methods "
                  f"max {em_worst:.2e} (tolerance 1e-10)", capsys)
    assert ok


def test_criterion_04_kernel_validity(capsys):
    rng = np.random.default_rng(4)
    specs = ([KernelSpec("brownian")]
             + [KernelSpec("fractional_brownian", h=h) for h in (0.25, 0.5, 0.75, 1.0)]
             + [KernelSpec("ornstein_uhlenbeck", alpha=a) for a in (0.5, 1.0, 4.0)])
    worst, same = np.inf, True
    for _ in range(100):
        n = int(rng.integers(1, 30))
        t = np.sort(rng.uniform(0.01, 20.0, size=n))
        for spec in specs:
            worst = min(worst, float(np.linalg.eigvalsh(kernel_matrix(spec, t)).min()))
        same &= np.array_equal(kernel_matrix(KernelSpec("fractional_brownian", h=0.5), t),
                               kernel_matrix(KernelSpec("brownian"), t))
    ok = worst >= -1e-8 and same
    report(4, ok, f"100 grids x 8 kernels, smallest eigenvalue {worst:.2e} (bound -1e-8); "
                  f"fbm(h=0.5) identical to bm: {same}", capsys)
    assert ok


def test_criterion_05_likelihood_oracle(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(100):
        kernel = KERNEL_GRID[k % len(KERNEL_GRID)]
        ds = random_dataset(rng, n=int(rng.integers(1, 5)), n_max=5)
        vc = random_vc(rng, 2, kernel.stochastic)
        f = rng.normal(size=ds.N)
        worst = max(worst, abs(log_likelihood(ds, f, vc, kernel) - dense_loglik(ds, f, vc, kernel)))
    ok = worst <= 1e-9
    report(5, ok, f"100 instances, max abs deviation {worst:.2e} (tolerance 1e-9)", capsys)
    assert ok


def test_criterion_06_low_dim_bias_ordering(capsys, audited):
    start = time.perf_counter()
    cfg = SimulationConfig.low("non_stochastic", seed=0)
    res = simmod.bias_benchmark(cfg, ["mert", "merf", "reemforest"], 20, n_trees=100, mtry=6)
    elapsed = time.perf_counter() - start
    b = {m: res[m]["bias2_f"] for m in res}
    order = b["reemforest"] < b["merf"] < b["mert"]
    ratio = b["reemforest"] / b["mert"]
    ok = order and ratio <= 0.6 and elapsed < 600
    report(6, ok, f"bias2(f): REEMforest {b['reemforest']:.3f}, MERF {b['merf']:.3f}, "
                  f"MERT {b['mert']:.3f}; ordering {order}; ratio {ratio:.2f} (need <= 0.6); "
                  f"{elapsed:.0f} s (budget 600 s)", capsys)
    assert ok


def test_criterion_07_error_ordering(capsys, audited):
    start = time.perf_counter()
    cfg = SimulationConfig.low("stochastic", seed=0)
    err = simmod.error_benchmark(cfg, ["smerf", "sreemforest", "rf"], datasets=20, n_splits=20,
                                 rf_trees=100, n_trees=100, mtry=6)
    elapsed = time.perf_counter() - start
    wins = {m: int(np.sum(err[m] < err["rf"])) for m in ("smerf", "sreemforest")}
    ok = min(wins.values()) >= 16 and elapsed < 900
    means = ", ".join(f"{m} {err[m].mean():.3f}" for m in err)
    report(7, ok, f"datasets below RF: SMERF {wins['smerf']}/20, SREEMforest {wins['sreemforest']}/20 "
                  f"(need >= 16); mean MSE {means}; {elapsed:.0f} s (budget 900 s)", capsys)
    assert ok


def test_criterion_08_high_dim_ordering(capsys):
    start = time.perf_counter()
    lines, ok = [], True
    for scheme, prefix in (("non_stochastic", ""), ("stochastic", "s")):
        cfg = SimulationConfig.high(scheme, seed=0)
        design = evaluation_design(cfg)
        names = [prefix + m for m in ("mert", "reemtree", "merf", "reemforest")]
        fits = {m: [] for m in names}
        mse = {m: [] for m in names}
        for r in range(10):
            data = simulate(dataclasses.replace(cfg, seed=cfg.seed + r)).dataset
            train, test = split_train_test(data, 2, r)
            for m in names:
                model = fit(train, method_spec(m, cfg, seed=r))
                _audit(model, m)
                fits[m].append(model)
                mse[m].append(float(np.mean((test.y - predict_dataset(model, test)) ** 2)))
        bias = {m: squared_bias_report(fits[m], design, cfg.truth, cfg.stochastic)["bias2_f"] for m in names}
        err = {m: float(np.mean(mse[m])) for m in names}
        trees, forests = names[:2], names[2:]
        bias_ok = max(bias[m] for m in forests) < min(bias[m] for m in trees)
        err_ok = max(err[m] for m in forests) < min(err[m] for m in trees)
        ok &= bias_ok and err_ok
        lines.append(f"{scheme}: bias2(f) " + ", ".join(f"{m} {bias[m]:.3f}" for m in names)
                     + "; test MSE " + ", ".join(f"{m} {err[m]:.3f}" for m in names))
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1800
    report(8, ok, "; ".join(lines) + f"; {elapsed:.0f} s (budget 1800 s)", capsys)
    assert ok


def _convergence_counts(name, scheme):
    counts = {}
    for mtry in (6, 1):
        conv = 0
        for r in range(20):
            s = simulate(SimulationConfig.low(scheme, seed=r))
            model = fit(s.dataset, method_spec(name, s.config, seed=r, mtry=mtry))
            _audit(model, name)
            conv += model.converged
        counts[mtry] = conv
    return counts


def test_criterion_09_convergence_vs_mtry(capsys):
    # MERF on non-stochastic data decides; SMERF counts are reported alongside
    merf = _convergence_counts("merf", "non_stochastic")
    smerf = _convergence_counts("smerf", "stochastic")
    ok = merf[6] >= 18 and (20 - merf[1]) > (20 - merf[6])
    report(9, ok, f"MERF converged in {merf[6]}/20 runs with mtry=p (need >= 18) and {merf[1]}/20 "
                  f"with mtry=1 (need strictly fewer); SMERF on stochastic data: {smerf[6]}/20 and "
                  f"{smerf[1]}/20", capsys)
    assert ok


def test_criterion_10_variance_sanity(capsys):
    # every method once more, so the check stands alone when run in isolation
    s = simulate(SimulationConfig.low("stochastic", seed=10))
    for name in sorted(METHODS):
        _audit(fit(s.dataset, method_spec(name, s.config, seed=10)), name)
    sane = not AUDIT["violations"]

    big = simulate(SimulationConfig.low("non_stochastic", seed=0, n=170))
    vc, trace, converged = fit_variances(big.dataset, np.concatenate(big.f), KernelSpec(),
                                         max_iter=5000, rel_tol=1e-10)
    dist = float(np.linalg.norm(vc.B - big.config.truth.B))
    ok = sane and dist <= 0.5
    report(10, ok, f"{AUDIT['iterations']} iterations over {AUDIT['models']} fits, "
                   f"violations {len(AUDIT['violations'])}; oracle-mean B recovery at n=170: "
                   f"Frobenius distance {dist:.3f} (need <= 0.5) after {len(trace)} iterations, "
                   f"converged {converged}", capsys)
    assert ok


def test_criterion_11_stability(capsys, tmp_path):
    examples = [
        stability_score("abc", "abc", 0) == 1.0,
        stability_score("abc", "bac", 0) == 1 / 3,
        stability_score("abc", "bac", 1) == 1.0,
        stability_score("abcdef", "fedcba", 5) == 1.0,
    ]
    rng = np.random.default_rng(11)
    monotone = True
    for _ in range(100):
        p = int(rng.integers(1, 60))
        V, V2 = rng.permutation(p).tolist(), rng.permutation(p).tolist()
        scores = [stability_score(V, V2, eta) for eta in range(p + 1)]
        monotone &= scores == sorted(scores) and all(stability_score(V, V, e) == 1.0 for e in range(3))
    out = tmp_path / "stability.csv"
    argv = ["stability", "--dim", "high", "--p", "200", "--group-size", "27", "--method", "reemforest",
            "--mtry-values", "20,150", "--etas", "0,5,10", "--runs", "4", "--top-k", "50",
            "--trees", "50", "--max-iter", "10", "--seed", "11", "--out", str(out)]
    code = main(argv)
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")] if code == 0 else []
    table_ok = code == 0 and body[0] == "eta,mtry,mean_score" and len(body) == 7
    ok = all(examples) and monotone and table_ok
    report(11, ok, f"examples {sum(examples)}/4 exact; monotone over 100 pairs {monotone}; "
                   f"sweep table rows {len(body) - 1 if body else 0} (expect 6): "
                   + " ".join(body[1:]), capsys)
    assert ok


def test_criterion_12_importance_groups(capsys):
    cfg = SimulationConfig.high("non_stochastic", seed=12)
    s = simulate(cfg)
    model = fit(s.dataset, method_spec("reemforest", cfg, seed=12))
    _audit(model, "reemforest")
    vi = model_importance(model, s.dataset, 12)
    top = importance_ranking(vi)[:30]
    share = float(np.mean(np.isin(cfg.group_labels()[top], [1, 2, 3])))
    ok = share >= 0.7
    report(12, ok, f"{share:.0%} of the top-30 variables in groups 1-3 (need >= 70%); "
                   f"REEMforest converged {model.converged} after {model.iterations} iterations", capsys)
    assert ok
