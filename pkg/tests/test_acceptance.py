"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers
before asserting, so ``pytest tests/test_acceptance.py`` doubles as a
reproduction report. The shared small-scale fits are computed once per module.
"""
import os
import time

import numpy as np
import pytest

from bjmd.advi import (
    Layout,
    VariationalParams,
    elbo_gradient_estimate,
    fit_advi,
    inverse_stick_breaking,
    stick_breaking,
    to_constrained,
    to_unconstrained,
)
from bjmd.core import Hyperparams, MultiViewData, SolverConfig
from bjmd.datagen import SynthSpec, gen_dataset
from bjmd.evaluation import select_features
from bjmd.experiment import evaluate_protocol, fit_once, restart_seeds, run_sweep
from bjmd.simplex_qp import ColumnProblem, IpIterate, barrier_objective, kkt_residual, solve_columns
from conftest import random_instance
from oracles import simplex_grid_min

WORKERS = max(1, min(8, os.cpu_count() or 1))

MAP_TARGET = np.array([99.67, 90.31, 77.85])
VI_TARGET = np.array([99.66, 90.87, 79.16])
TRUE_SIGMA = np.array([1.0, 2.5, 4.0])


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    return emit


@pytest.fixture(scope="module")
def small_scale():
    return gen_dataset(SynthSpec.small_scale())


@pytest.fixture(scope="module")
def map_protocol(small_scale):
    ds = small_scale
    hyper = Hyperparams.default(ds.spec.K)
    return evaluate_protocol(ds.data, ds.labels, hyper, "map", restarts=20, keep_best=5, workers=WORKERS)


@pytest.fixture(scope="module")
def vi_protocol(small_scale):
    ds = small_scale
    hyper = Hyperparams.default(ds.spec.K)
    return evaluate_protocol(ds.data, ds.labels, hyper, "advi", restarts=20, keep_best=5, workers=WORKERS)


def _fmt(a):
    return "(" + ", ".join(f"{v:.2f}" for v in a) + ")"


class TestSmallScale:
    def test_criterion_1_map_auc(self, map_protocol, report):
        aucs, _, seconds, _ = map_protocol
        aucs = 100 * aucs
        ok = bool(np.all(np.abs(aucs - MAP_TARGET) <= 5.0))
        report(1, ok, f"MAP AUC {_fmt(aucs)} vs {_fmt(MAP_TARGET)} +/-5, 20 restarts in {seconds:.1f}s")
        assert ok

    def test_criterion_1_vi_auc(self, vi_protocol, report):
        aucs, _, seconds, _ = vi_protocol
        aucs = 100 * aucs
        ok = bool(np.all(np.abs(aucs - VI_TARGET) <= 5.0))
        report(1, ok, f"VI AUC {_fmt(aucs)} vs {_fmt(VI_TARGET)} +/-5, 20 restarts in {seconds:.1f}s")
        assert ok

    @pytest.mark.parametrize("engine", ["map", "advi"])
    def test_criterion_2_noise_recovery(self, engine, map_protocol, vi_protocol, report):
        _, sig, _, _ = map_protocol if engine == "map" else vi_protocol
        rel = np.abs(sig - TRUE_SIGMA) / TRUE_SIGMA
        ok = bool(np.all(rel < 0.10))
        report(2, ok, f"{engine} sigma {_fmt(sig)} vs {_fmt(TRUE_SIGMA)}, max rel err {rel.max():.3f} < 0.10")
        assert ok

    def test_vi_elbo_settles_before_h(self, small_scale, capsys):
        """Informational: the ELBO window mean stabilises well before the H-based stop fires."""
        ds = small_scale
        cfg = SolverConfig.advi_defaults()
        fit = fit_advi(ds.data, Hyperparams.default(ds.spec.K), cfg, seed=restart_seeds(0, 1)[0])
        trace = np.asarray(fit.report.objective_trace, dtype=float)
        w = cfg.check_interval
        means = np.array([np.nanmean(trace[i:i + w]) for i in range(0, trace.size - w + 1, w)])
        rel = np.abs(np.diff(means)) / np.abs(means[1:])
        settled = int(np.argmax(rel < 1e-3) + 2) * w if np.any(rel < 1e-3) else None
        with capsys.disabled():
            print(f"\nINFO VI: ELBO window change < 0.1% from iteration {settled}; "
                  f"H-stability stop at iteration {fit.report.iterations}")
        assert settled is not None and settled <= fit.report.iterations


class TestSweep:
    def test_criterion_3_heterogeneity_trend(self, report):
        rows, failures = run_sweep(SynthSpec.small_scale(), engines=("map",), restarts=20, keep_best=5,
                                   workers=WORKERS)
        assert not failures

        def series(variant, source):
            pts = sorted((r["sigma3"], r["auc"]) for r in rows if r["variant"] == variant and r["source"] == source)
            return np.array([a for _, a in pts])

        spread = [np.ptp(series("bjmd", s)) for s in (1, 2)]
        cat1 = series("cat", 1)
        drop = cat1[0] - cat1[-1]
        ok = spread[0] < 5 and spread[1] < 5 and drop >= 5
        report(3, ok, f"BJMD S1/S2 AUC range {spread[0]:.2f}/{spread[1]:.2f} (< 5); "
                      f"cat S1 {cat1[0]:.2f} -> {cat1[-1]:.2f}, drop {drop:.2f} (>= 5)")
        assert ok


class TestMonotonicity:
    def test_criterion_4_map_traces(self, small_scale, report):
        ds = small_scale
        hyper = Hyperparams.default(ds.spec.K)
        cfg = SolverConfig()
        worst, bad = -np.inf, 0
        for seed in restart_seeds(2024, 50):
            trace = np.asarray(fit_once(ds.data, hyper, "map", cfg, seed).report.objective_trace)
            rise = np.max(np.diff(trace))
            worst = max(worst, rise)
            bad += rise > 1e-9
        ok = bad == 0
        report(4, ok, f"{50 - bad}/50 MAP fits non-increasing, largest step change {worst:.3e} (slack 1e-9)")
        assert ok

    def test_block_exact_variant_on_random_instances(self, capsys):
        """Informational companion: the block-exact W step is monotone on arbitrary small data too."""
        from bjmd.map_solver import fit_map

        worst = -np.inf
        for seed in range(50):
            data, hyper, _ = random_instance(seed, M=8, K=3, N=(12, 9))
            fit = fit_map(data, hyper, SolverConfig(w_regularizer="exact", rng_seed=seed, tol_outer=1e-6))
            worst = max(worst, np.max(np.diff(fit.report.objective_trace)))
        with capsys.disabled():
            print(f"\nINFO block-exact W step on 50 random instances: largest step change {worst:.3e}")
        assert worst <= 1e-9


class TestQpOracle:
    def test_criterion_5_grid_equivalence(self, report):
        rng = np.random.default_rng(20240)
        t0 = time.perf_counter()
        gaps, resids = [], []
        for i in range(200):
            K = 2 + i % 4
            W = rng.standard_normal((8, K))
            x = 2 * rng.standard_normal(8)
            s2 = rng.uniform(0.5, 3.0)
            p = ColumnProblem.from_column(W, x, s2, np.full(K, 1.1))
            sol = solve_columns(ColumnProblem(p.Q, p.b[None, :], p.alpha, p.scale))
            h = sol.H[0]
            gaps.append(barrier_objective(p, h) - simplex_grid_min(p.Q, p.b, p.alpha))
            resids.append(np.linalg.norm(kkt_residual(p, IpIterate(h, sol.mu[0], sol.s[0]))))
        seconds = time.perf_counter() - t0
        gaps, resids = np.array(gaps), np.array(resids)
        ok = bool(np.all(gaps <= 1e-4) and np.all(resids < 1e-6))
        report(5, ok, f"200 problems K in 2..5: max(obj - grid min) {gaps.max():.2e} (<= 1e-4), "
                      f"max KKT residual {resids.max():.2e} (< 1e-6), {seconds:.1f}s")
        assert ok


class TestViFidelity:
    def test_criterion_6_gradient_and_transforms(self, report):
        class Gaussian:
            def logp(self, xi, grad=True):
                x = np.asarray(xi)[..., 0]
                lp = -0.5 * (x - 3.0) ** 2 - 0.5 * np.log(2 * np.pi)
                return (lp, -(x - 3.0)[..., None]) if grad else lp

        S = 100_000
        m0, w0 = 1.0, 0.5

        def run(m, w):
            q = VariationalParams(np.array([m]), np.array([w]), None)
            return elbo_gradient_estimate(q, Gaussian(), S, np.random.default_rng(11))

        est = run(m0, w0)
        h = 1e-4
        fd = np.array([(run(m0 + h, w0).elbo - run(m0 - h, w0).elbo) / (2 * h),
                       (run(m0, w0 + h).elbo - run(m0, w0 - h).elbo) / (2 * h)])
        got = np.array([est.grad_mean[0], est.grad_log_std[0]])
        grad_rel = np.abs(got - fd) / np.abs(fd)

        rng = np.random.default_rng(12)
        H = rng.dirichlet(np.ones(5), size=2000)
        simplex_err = np.max(np.abs(stick_breaking(inverse_stick_breaking(H))[0] - H))
        worst_state = 0.0
        for seed in range(20):
            data, hyper, state = random_instance(seed, M=4, K=3, N=(5, 6))
            W, Hs, s2 = to_constrained(to_unconstrained(state), Layout(data.M, hyper.K, data.N))
            worst_state = max(worst_state, np.max(np.abs(W - state.W)), np.max(np.abs(s2 - state.sigma2)),
                              max(np.max(np.abs(a - b)) for a, b in zip(Hs, state.H)))
        ok = bool(np.all(grad_rel < 0.05) and simplex_err < 1e-10 and worst_state < 1e-10)
        report(6, ok, f"gradient rel err {_fmt(grad_rel)} (< 0.05); round-trip error simplex {simplex_err:.1e}, "
                      f"full state {worst_state:.1e} (< 1e-10)")
        assert ok


class TestSelection:
    def test_criterion_7_calibration(self, report):
        rng = np.random.default_rng(70)
        n_rows, alpha = 10_000, 0.05
        X = rng.normal(0.0, 1.5, (n_rows, 120))
        rep = select_features(MultiViewData([X]), [1.5 ** 2], alpha)
        rate = float(np.mean(rep.pvalues[0] < alpha))
        se = np.sqrt(alpha * (1 - alpha) / n_rows)

        planted = np.sort(rng.choice(500, 10, replace=False))
        hits = 0
        for _ in range(20):
            Y2 = rng.standard_normal((500, 120))
            Y2[planted] *= 10.0  # 100x variance
            hits += set(planted) <= set(select_features(MultiViewData([Y2]), [1.0], alpha).selected)
        ok = abs(rate - alpha) <= 3 * se and hits == 20
        report(7, ok, f"null rejection rate {rate:.4f} vs {alpha} +/- {3 * se:.4f}; "
                      f"planted rows selected in {hits}/20 replicates")
        assert ok


@pytest.mark.slow
class TestLargeScale:
    def test_criterion_8_large_scale(self, report):
        ds = gen_dataset(SynthSpec.large_scale())
        hyper = Hyperparams.default(ds.spec.K)
        t0 = time.perf_counter()
        bjmd, _, _, _ = evaluate_protocol(ds.data, ds.labels, hyper, "map", "bjmd", restarts=20, keep_best=5,
                                          workers=WORKERS)
        seconds = time.perf_counter() - t0
        cat, _, _, _ = evaluate_protocol(ds.data, ds.labels, hyper, "map", "cat", restarts=20, keep_best=5,
                                         workers=WORKERS)
        ok = seconds < 300 and bool(np.all(bjmd > cat))
        report(8, ok, f"BJMD AUC {_fmt(100 * bjmd)} vs cat {_fmt(100 * cat)}, BJMD 20 restarts in {seconds:.1f}s")
        assert ok
