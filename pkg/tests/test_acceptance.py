"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``);
every test prints a single PASS/FAIL line with the measured numbers.
"""

import sys
import time

import numpy as np
import pytest

from ddsmc.ctmc import kfe_evolve, simulate_paths
from ddsmc.diffusion import default_corruption
from ddsmc.evaluation import per_target_means, random_target, run_comparison
from ddsmc.guidance import (
    guided_rate,
    tempered_marginal_true,
    tempered_target,
    true_tempered_rate,
)
from ddsmc.oracles import tilted_chain_marginals, tilted_expectation
from ddsmc.smc import (
    ParticleEnsemble,
    SmcConfig,
    build_rates,
    log_weights_continuous,
    log_weights_discrete,
    multinomial_resample,
    partial_resample,
    run_smc,
    uniform_grid,
    weighted_expectation,
    weighted_standard_error,
)
from ddsmc.verify import run_suite

pytestmark = pytest.mark.acceptance


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def report(label, ok, detail, started, budget):
    seconds = time.perf_counter() - started
    within = seconds <= budget
    line = f"{'PASS' if ok and within else 'FAIL'}  {label}: {detail} [{seconds:.1f}s / {budget:.0f}s]"
    capture = getattr(report, "capsys", None)
    if capture is not None:
        with capture.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line
    assert within, line


@pytest.fixture(autouse=True)
def _expose_capsys(capsys):
    report.capsys = capsys
    yield
    report.capsys = None


def test_c1_smc_beats_guidance_2d():
    start = time.perf_counter()
    results = run_comparison(2, 10, alphas=(2.0, 4.0), num_targets=30, num_samples=50_000,
                             steps=100, seed=0)
    smc, guided = per_target_means(results, "smc"), per_target_means(results, "guided")
    wins = int((smc < guided).sum())
    ok = wins >= 27 and smc.mean() <= 0.05
    report("C1 ordering d=2 V=10", ok,
           f"SMC better on {wins}/30, KL smc {smc.mean():.4f}+-{smc.std():.4f}, "
           f"guided {guided.mean():.4f}+-{guided.std():.4f}", start, 1800)


def test_c2_smc_1d_large_vocab():
    start = time.perf_counter()
    results = run_comparison(1, 50, alphas=(2.0, 4.0), num_targets=30, num_samples=50_000,
                             steps=100, methods=("smc",), seed=0)
    kl = per_target_means(results, "smc")
    report("C2 d=1 V=50", kl.mean() <= 0.01,
           f"mean KL smc {kl.mean():.4f}+-{kl.std():.4f} (<= 0.01)", start, 300)


def test_c3_guidance_exact_at_alpha_one():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(20):
        V = int(rng.integers(2, 21))
        model = random_target(1, V, rng)
        corr = default_corruption(V)
        G = guided_rate(corr.generative_rate(model.p0), model, corr, 1.0)
        p = kfe_evolve(G, corr.marginal(model.p0, 1.0), 1.0, 0.0)
        worst = max(worst, tv(p[corr.space.clean_indices], tempered_target(model, 1.0)))
    report("C3 guided alpha=1 exact", worst <= 2e-3, f"max TV {worst:.2e} over 20 models (<= 2e-3)",
           start, 60)


def test_c4_true_tempered_round_trip_and_guidance_bias():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, biased = 0.0, 0
    for i in range(20):
        V = int(rng.integers(2, 6))
        model = random_target(2, V, rng)
        corr = default_corruption(V, 2)
        R = corr.generative_rate(model.p0)
        clean = corr.space.clean_indices
        for alpha in (1.0, 2.0, 4.0):
            T = true_tempered_rate(R, model, corr, alpha)
            p = kfe_evolve(T, tempered_marginal_true(model, corr, alpha, 1.0), 1.0, 0.0)
            worst = max(worst, tv(p[clean], tempered_target(model, alpha)))
        G = guided_rate(R, model, corr, 2.0)
        p = kfe_evolve(G, corr.marginal(model.p0, 1.0), 1.0, 0.0)
        biased += tv(p[clean], tempered_target(model, 2.0)) > 1e-3
    ok = worst <= 1e-4 and biased >= 18
    report("C4 true tempered round trip", ok,
           f"max TV {worst:.2e} (<= 1e-4); guided alpha=2 biased on {biased}/20 (>= 18)",
           start, 120)


def test_c5_importance_sampling_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    model = random_target(3, 4, rng)
    corr = default_corruption(4, 3)
    space = corr.space
    alpha, steps = 2.0, 20
    grid = uniform_grid(steps)
    times = (4, 8, 12, 16, 19)
    config = SmcConfig(100_000, tuple(grid), alpha=alpha, beta=1.0, resampler="none", seed=55)
    rates = build_rates(model, corr, "guided", alpha, 1.0)
    result = run_smc(config, model, corr, snapshots=times, rates=rates)
    g = tilted_chain_marginals(rates[0], rates[1], alpha, corr.marginal(model.p0, 1.0), grid)
    digits = space.digits
    tests = {
        "masked count": space.num_masked.astype(float),
        "first token": digits[:, 0].astype(float),
        "all clean": (space.num_masked == 0).astype(float),
        "tokens equal": (digits[:, 1] == digits[:, 2]).astype(float),
        "random": rng.standard_normal(space.total_states),
    }
    worst = 0.0
    for k in times:
        ens = result.snapshots[k]
        for phi in tests.values():
            est, se = weighted_expectation(ens, phi), weighted_standard_error(ens, phi)
            gap = abs(est - tilted_expectation(g[k], phi))
            worst = max(worst, gap / se if se > 0 else (0.0 if gap < 1e-12 else np.inf))
    report("C5 importance-sampling identity", worst <= 3,
           f"max |z| {worst:.2f} over 5 functions x 5 times (<= 3)", start, 300)


def test_c6_discrete_continuous_weights_agree():
    start = time.perf_counter()
    model = random_target(1, 10, np.random.default_rng(6))
    corr = default_corruption(10)
    alpha = 2.0
    R, Rc, Q = build_rates(model, corr, "guided", alpha, 1.5)
    fine = uniform_grid(400)
    paths = simulate_paths(Q, np.full(200, corr.space.total_states - 1), fine, 6)
    gaps = []
    for factor in (4, 2, 1):
        g, p = fine[::factor], paths[:, ::factor]
        gaps.append(float(np.mean(np.abs(log_weights_discrete(p, g, R, Rc, Q, alpha)
                                          - log_weights_continuous(p, g, R, Rc, Q, alpha)))))
    ratios = (gaps[0] / gaps[1], gaps[1] / gaps[2])
    report("C6 weight formula consistency", min(ratios) >= 1.5,
           f"gaps {gaps[0]:.2e}, {gaps[1]:.2e}, {gaps[2]:.2e}; ratios "
           f"{ratios[0]:.2f}, {ratios[1]:.2f} (>= 1.5)", start, 120)


def test_c7_resamplers_unbiased():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    K, reps = 50, 10_000
    ens = ParticleEnsemble(rng.integers(0, 20, K), rng.normal(scale=2.0, size=K))
    tests = [np.cos(np.arange(20.0)), (np.arange(20) < 5).astype(float), np.arange(20.0) ** 2]
    resamplers = {
        "multinomial": multinomial_resample,
        "partial": lambda e, u: partial_resample(e, K // 2, u),
    }
    worst = 0.0
    for resample in resamplers.values():
        vals = np.empty((reps, len(tests)))
        for r in range(reps):
            out = resample(ens, rng.random(K))
            w = out.weights()
            vals[r] = [np.sum(w * phi[out.states]) for phi in tests]
        for j, phi in enumerate(tests):
            exact = float(np.sum(ens.weights() * phi[ens.states]))
            z = abs(vals[:, j].mean() - exact) / (vals[:, j].std(ddof=1) / np.sqrt(reps))
            worst = max(worst, z)
    report("C7 resampler unbiasedness", worst <= 3,
           f"max |z| {worst:.2f} over 2 resamplers x 3 functions (<= 3)", start, 60)


def test_c8_structural_suite():
    start = time.perf_counter()
    results = run_suite()
    failed = [r.name for r in results if not r.ok]
    report("C8 structural suite", not failed,
           f"{len(results) - len(failed)}/{len(results)} properties green"
           + (f"; failed: {', '.join(failed)}" if failed else ""), start, 120)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
