"""Deterministic structural checks across the whole stack.

Each property is a zero-argument function returning ``(ok, detail)``. The
suite is small enough to run in well under a minute; ``run_suite`` is what
``ddsmc verify`` prints.
"""

from __future__ import annotations

import contextlib
import time
from typing import Callable, NamedTuple

import numpy as np

from . import ctmc
from .ctmc import RateMatrix, euler_kernel, kbe_evolve, kfe_evolve, validate_rate_matrix
from .diffusion import default_corruption
from .errors import NumericalError
from .evaluation import random_target
from .guidance import (
    guided_rate,
    tempered_marginal_true,
    tempered_target,
    true_tempered_rate,
    twist,
)
from .oracles import path_weight_brute_force
from .smc import (
    ParticleEnsemble,
    SmcConfig,
    build_rates,
    ess,
    log_weights_discrete,
    multinomial_resample,
    partial_resample,
    run_smc,
    uniform_grid,
)


class PropertyResult(NamedTuple):
    name: str
    ok: bool
    detail: str
    seconds: float


def _tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _instance(seed=0, num_dims=2, vocab_size=3):
    model = random_target(num_dims, vocab_size, np.random.SeedSequence([1234, seed]))
    return model, default_corruption(vocab_size, num_dims)


def _clean_part(p, corruption):
    return p[corruption.space.clean_indices]


def check_rate_validity():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    rates = {
        "forward": corr.forward_rate(),
        "generative": R,
        "guided(2)": guided_rate(R, model, corr, 2.0),
        "true(2)": true_tempered_rate(R, model, corr, 2.0),
    }
    for t in np.linspace(0.01, 0.99, 25):
        for name, M in rates.items():
            check = validate_rate_matrix(M, t, 1e-9)
            if not check:
                return False, f"{name} at t={t:.3f}: {check.message}"
    return True, "4 generators valid at 25 times"


def check_mass_conservation():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    p1 = corr.marginal(model.p0, 1.0)
    raw = kfe_evolve(R, p1, 1.0, 0.0, 400, normalize=False)
    err = abs(raw.sum() - 1.0)
    return err <= 1e-8, f"|sum p - 1| = {err:.2e} before renormalization"


def check_kbe_constant():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    u = kbe_evolve(R, np.ones(corr.space.total_states), 0.0, 0.8, 200)
    err = float(np.abs(u - 1.0).max())
    return err <= 1e-9, f"max |u - 1| = {err:.2e}"


def check_kfe_kbe_duality():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    h = np.random.default_rng(3).random(corr.space.total_states)
    p_start = corr.marginal(model.p0, 0.9)
    p_end = kfe_evolve(R, p_start, 0.9, 0.3, 400)
    u = kbe_evolve(R, h, 0.3, 0.9, 400)
    gap = abs(float(p_end @ h) - float(p_start @ u))
    return gap <= 1e-8, f"|<p_end, h> - <p_start, u>| = {gap:.2e}"


def check_masking_closed_form():
    model, corr = _instance()
    F = corr.forward_rate()
    p0 = corr.space.embed(model.p0)
    worst = 0.0
    for t in (0.2, 0.5, 0.9):
        worst = max(worst, _tv(kfe_evolve(F, p0, 0.0, t, 400), corr.marginal(model.p0, t)))
    return worst <= 1e-6, f"max TV(ODE, closed form) = {worst:.2e}"


def check_reverse_round_trip():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    p = kfe_evolve(R, corr.marginal(model.p0, 1.0), 1.0, 0.0, 400)
    err = _tv(_clean_part(p, corr), model.p0)
    return err <= 1e-5, f"TV(recovered, p0) = {err:.2e}"


def check_alpha_one_exactness():
    worst = 0.0
    for seed in range(3):
        model, corr = _instance(seed, 1, 8)
        R = corr.generative_rate(model.p0)
        G = guided_rate(R, model, corr, 1.0)
        p = kfe_evolve(G, corr.marginal(model.p0, 1.0), 1.0, 0.0, 400)
        worst = max(worst, _tv(_clean_part(p, corr), tempered_target(model, 1.0)))
    return worst <= 2e-3, f"max TV(guided alpha=1 endpoint, posterior) = {worst:.2e}"


def check_true_tempered_round_trip():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    worst = 0.0
    for alpha in (2.0, 4.0):
        T = true_tempered_rate(R, model, corr, alpha)
        p1 = tempered_marginal_true(model, corr, alpha, 1.0)
        p = kfe_evolve(T, p1, 1.0, 0.0, 400)
        worst = max(worst, _tv(_clean_part(p, corr), tempered_target(model, alpha)))
    return worst <= 1e-5, f"max TV(true tempered endpoint, target) = {worst:.2e}"


def check_tempered_routes():
    model, corr = _instance()
    worst = 0.0
    for alpha in (0.5, 2.0):
        for t in (0.1, 0.6):
            a = tempered_marginal_true(model, corr, alpha, t, "corrupt")
            b = tempered_marginal_true(model, corr, alpha, t, "proportional")
            worst = max(worst, float(np.abs(a - b).max()))
    return worst <= 1e-9, f"max |corrupt - proportional| = {worst:.2e}"


def check_twist_routes():
    model, corr = _instance()
    t = 0.6
    bayes = twist(model, corr, t, 2.0, "bayes")
    kbe = twist(model, corr, t, 2.0, "kbe", steps=400)
    live = corr.marginal(model.p0, t) > 0
    err = float(np.abs(bayes[live] - kbe[live]).max())
    return err <= 1e-6, f"max |Bayes - KBE| = {err:.2e}"


def euler_interval_error(R, p_start, t_from: float, t_to: float, dt: float,
                         steps: int = 400) -> float:
    """TV between chained Euler kernels over [t_to, t_from] and the exact KFE law."""
    n = int(round((t_from - t_to) / dt))
    p = np.asarray(p_start, dtype=float)
    for k in range(n):
        t = t_from - k * dt
        p = p @ euler_kernel(R, t, dt).matrix()
    return _tv(p, kfe_evolve(R, p_start, t_from, t_to, steps))


def check_euler_convergence():
    model, corr = _instance()
    R = corr.generative_rate(model.p0)
    start = corr.marginal(model.p0, 0.6)
    errors = [euler_interval_error(R, start, 0.6, 0.2, dt) for dt in (1e-2, 5e-3)]
    ratio = errors[0] / errors[1]
    return 1.5 <= ratio <= 2.5, f"TV over [0.2, 0.6]: {errors[0]:.2e} -> {errors[1]:.2e}, ratio {ratio:.2f}"


def check_euler_normalization():
    R = RateMatrix.constant(np.array([[-3.0, 3.0], [5.0, -5.0]]))
    kernel = euler_kernel(R, 0.0, 0.5)  # stay probabilities clamp at zero
    err = float(np.abs(kernel.probs.sum(axis=1) - 1).max())
    return err <= 1e-12 and (kernel.probs >= 0).all(), f"row-sum error {err:.1e}"


def check_weight_identity():
    model, corr = _instance(0, 1, 3)
    grid = uniform_grid(6)
    R, Rc, Q = build_rates(model, corr, "guided", 2.0, 0.5)
    paths = ctmc.simulate_paths(Q, np.full(20, corr.space.total_states - 1), grid, 11)
    fast = log_weights_discrete(paths, grid, R, Rc, Q, 2.0)
    slow = np.log([path_weight_brute_force(p, grid, R, Rc, Q, 2.0) for p in paths])
    err = float(np.abs(np.exp(fast - slow) - 1).max())
    return err <= 1e-10, f"max relative gap to brute-force product = {err:.1e}"


def check_trivial_weights():
    model, corr = _instance()
    grid = uniform_grid(20)
    R, Rc, _ = build_rates(model, corr, "unconditional", 1.0, 1.0)
    paths = ctmc.simulate_paths(R, np.full(30, corr.space.total_states - 1), grid, 5)
    w0 = log_weights_discrete(paths, grid, R, Rc, R, 0.0)
    paths_c = ctmc.simulate_paths(Rc, np.full(30, corr.space.total_states - 1), grid, 6)
    w1 = log_weights_discrete(paths_c, grid, R, Rc, Rc, 1.0)
    err = max(float(np.abs(w0).max()), float(np.abs(w1).max()))
    return err <= 1e-12, f"max |log w| for Q=R, alpha=0 and Q=R_zeta, alpha=1: {err:.1e}"


def check_ess_bounds():
    rng = np.random.default_rng(8)
    for _ in range(200):
        lw = rng.normal(scale=rng.uniform(0, 20), size=rng.integers(1, 50))
        value = ess(lw)
        if not 1 - 1e-9 <= value <= lw.size + 1e-9:
            return False, f"ESS {value} outside [1, {lw.size}]"
    equal = ess(np.full(7, -3.0))
    return abs(equal - 7) <= 1e-9, "ESS within [1, K] on 200 draws; equal weights give K"


def check_resampler_unbiased():
    rng = np.random.default_rng(21)
    K, reps = 40, 2000
    ens = ParticleEnsemble(rng.integers(0, 10, K), rng.normal(scale=1.5, size=K))
    phi = np.sin(np.arange(10.0))
    exact = float(np.sum(ens.weights() * phi[ens.states]))
    for name in ("multinomial", "partial"):
        values = np.empty(reps)
        for r in range(reps):
            u = rng.random(K)
            out = multinomial_resample(ens, u) if name == "multinomial" else partial_resample(ens, K // 2, u)
            values[r] = np.sum(out.weights() * phi[out.states])
        z = abs(values.mean() - exact) / (values.std(ddof=1) / np.sqrt(reps))
        if z > 3:
            return False, f"{name} off by {z:.2f} standard errors"
    return True, "both resamplers within 3 standard errors"


def check_thread_determinism():
    model, corr = _instance()
    outs = []
    for threads in (1, 3, 4):
        cfg = SmcConfig(3001, tuple(uniform_grid(30)), alpha=3.0, seed=99, threads=threads)
        ens = run_smc(cfg, model, corr).ensemble
        outs.append(ens.states.tobytes() + ens.log_weights.tobytes())
    same = all(o == outs[0] for o in outs)
    return same, "identical ensembles for 1, 3 and 4 threads" if same else "thread count changed output"


PROPERTIES: dict[str, Callable[[], tuple]] = {
    "rate-matrix-validity": check_rate_validity,
    "kfe-mass-conservation": check_mass_conservation,
    "kbe-constant-preserved": check_kbe_constant,
    "kfe-kbe-duality": check_kfe_kbe_duality,
    "masking-closed-form-vs-ode": check_masking_closed_form,
    "reverse-round-trip": check_reverse_round_trip,
    "guided-alpha-one-exact": check_alpha_one_exactness,
    "true-tempered-round-trip": check_true_tempered_round_trip,
    "tempered-marginal-two-routes": check_tempered_routes,
    "twist-bayes-vs-kbe": check_twist_routes,
    "euler-dt-convergence": check_euler_convergence,
    "euler-clamp-normalized": check_euler_normalization,
    "discrete-weight-brute-force": check_weight_identity,
    "trivial-weight-cancellation": check_trivial_weights,
    "ess-bounds": check_ess_bounds,
    "resampler-unbiasedness": check_resampler_unbiased,
    "thread-count-determinism": check_thread_determinism,
}


@contextlib.contextmanager
def injected_fault(name: str | None):
    """Deliberately break the library to prove the suite notices.

    ``"flow-sign"`` flips the sign of the Kolmogorov right-hand sides.
    """
    if name is None:
        yield
        return
    if name != "flow-sign":
        raise ValueError(f"unknown fault {name!r}")
    original = ctmc._flow_sign
    ctmc._flow_sign = lambda R: -original(R)
    try:
        yield
    finally:
        ctmc._flow_sign = original


def run_suite(names=None, fault: str | None = None) -> list[PropertyResult]:
    selected = list(PROPERTIES) if names is None else list(names)
    results = []
    with injected_fault(fault):
        for name in selected:
            start = time.perf_counter()
            try:
                ok, detail = PROPERTIES[name]()
            except (NumericalError, ValueError, FloatingPointError) as err:
                ok, detail = False, f"{type(err).__name__}: {err}"
            results.append(PropertyResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
