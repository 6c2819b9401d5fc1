"""Empirical distributions, forward KL and the repeated-trial comparison protocol."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .ctmc import StateSpace
from .diffusion import Corruption, default_corruption
from .guidance import ConditionalModel, guided_rate, tempered_target, true_tempered_rate
from .smc import SmcConfig, run_smc, sample_independent, uniform_grid

METHODS = ("smc", "guided", "true-tempered")


def default_epsilon(num_states: int) -> float:
    """Default total pseudocount per state: 0.1 / S."""
    return 0.1 / num_states


def empirical_distribution(states, space: StateSpace, epsilon: float | None = None,
                           weights=None) -> np.ndarray:
    """Smoothed histogram over ``space``.

    Unweighted: (count_x + eps) / (N + eps S). Weighted ensembles use
    N * normalized weight as the count, so both cases share one scale.
    Samples outside ``space`` (e.g. still-masked states) are an error.
    """
    states = np.asarray(states, dtype=np.int64).ravel()
    if states.size == 0:
        raise ValueError("need at least one sample")
    S = space.total_states
    if states.min() < 0 or states.max() >= S:
        raise ValueError("sample outside the state space")
    eps = default_epsilon(S) if epsilon is None else float(epsilon)
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    n = states.size
    if weights is None:
        mass = np.bincount(states, minlength=S).astype(float)
    else:
        w = np.asarray(weights, dtype=float)
        mass = np.bincount(states, weights=n * w / w.sum(), minlength=S)
    return (mass + eps) / (n + eps * S)


def to_clean(states, corruption: Corruption) -> np.ndarray:
    """Map full-space states to mask-free indices; -1 where a mask remains."""
    return corruption.space.clean_lookup[np.asarray(states, dtype=np.int64)]


def kl_divergence(pi, sigma) -> float:
    """sum pi ln(pi / sigma) with 0 ln 0 = 0."""
    pi = np.asarray(pi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if pi.shape != sigma.shape:
        raise ValueError("distributions must share a support")
    live = pi > 0
    if (sigma[live] <= 0).any():
        raise ValueError("sigma vanishes where pi has mass; use a positive epsilon")
    return float(max(np.sum(pi[live] * np.log(pi[live] / sigma[live])), 0.0))


def random_target(num_dims: int, vocab_size: int, rng, spread: float = 1.0,
                  likelihood_range=(1e-3, 1.0)) -> ConditionalModel:
    """p0 = softmax of i.i.d. N(0, spread^2); likelihood log-uniform on the range."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    rng = np.random.default_rng(rng)
    size = vocab_size**num_dims
    logits = spread * rng.standard_normal(size)
    p0 = np.exp(logits - logits.max())
    p0 /= p0.sum()
    lo, hi = likelihood_range
    if not 0 < lo <= hi:
        raise ValueError("likelihood range must satisfy 0 < lo <= hi")
    lik = np.exp(rng.uniform(np.log(lo), np.log(hi), size))
    return ConditionalModel(p0, lik, vocab_size, num_dims)


@dataclass(frozen=True)
class TrialResult:
    target_id: int
    method: str
    alpha: float
    kl: float
    sample_count: int
    steps: int
    seed: int
    dimension: int = 1
    vocab_size: int = 2

    def as_dict(self) -> dict:
        return asdict(self)


def method_samples(method: str, model: ConditionalModel, corruption: Corruption, alpha: float,
                   num_samples: int, steps: int, seed: int, beta: float = 1.0,
                   resampler: str = "multinomial", threads: int = 1):
    """(full-space states, weights or None) produced by one sampling method.

    ``beta`` is the guidance temperature of the SMC proposal; the guided
    baseline always runs at the target temperature ``alpha``.
    """
    grid = uniform_grid(steps)
    if method == "smc":
        config = SmcConfig(num_samples, tuple(grid), alpha=alpha, beta=beta, proposal="guided",
                           resampler=resampler, seed=seed, threads=threads)
        ens = run_smc(config, model, corruption).ensemble
        return ens.states, ens.weights()
    R = corruption.generative_rate(model.p0)
    if method == "guided":
        rate = guided_rate(R, model, corruption, alpha)
    elif method == "true-tempered":
        rate = true_tempered_rate(R, model, corruption, alpha)
    else:
        raise ValueError(f"unknown method {method!r}")
    p_start = corruption.marginal(model.p0, grid[0])
    if method == "true-tempered":
        p_start = corruption.marginal(tempered_target(model, alpha), grid[0])
    return sample_independent(rate, corruption, p_start, num_samples, grid, seed), None


def evaluate_method(method: str, model: ConditionalModel, corruption: Corruption, alpha: float,
                    num_samples: int, steps: int, seed: int, epsilon: float | None = None,
                    **kwargs) -> float:
    """Forward KL from the tempered target to the method's empirical law on V^d."""
    states, weights = method_samples(method, model, corruption, alpha, num_samples, steps,
                                     seed, **kwargs)
    clean = to_clean(states, corruption)
    keep = clean >= 0
    if not keep.all():
        # Tokens still masked at t=0 are rare (only from a clamped last step);
        # they are dropped rather than mapped to an arbitrary token.
        clean = clean[keep]
        weights = None if weights is None else weights[keep]
    sigma = empirical_distribution(clean, corruption.clean_space, epsilon, weights)
    return kl_divergence(tempered_target(model, alpha), sigma)


def run_comparison(num_dims: int, vocab_size: int, alphas: Sequence[float] = (2.0, 4.0),
                   num_targets: int = 30, num_samples: int = 50_000, steps: int = 100,
                   methods: Sequence[str] = ("smc", "guided"), seed: int = 0,
                   epsilon: float | None = None, spread: float = 1.0,
                   likelihood_range=(1e-3, 1.0), beta: float = 1.0,
                   resampler: str = "multinomial", threads: int = 1) -> list[TrialResult]:
    """Random targets x temperatures x methods; one TrialResult per run.

    Target i is drawn from seed sequence (seed, i); the sampler seed of each
    run is recorded so any single trial can be replayed.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    corruption = default_corruption(vocab_size, num_dims)
    results = []
    for i in range(num_targets):
        model = random_target(num_dims, vocab_size, np.random.SeedSequence([seed, i]),
                              spread, likelihood_range)
        for j, alpha in enumerate(alphas):
            trial_seed = int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])
            for method in methods:
                extra = {}
                if method == "smc":
                    extra = {"beta": beta, "resampler": resampler, "threads": threads}
                kl = evaluate_method(method, model, corruption, alpha, num_samples, steps,
                                     trial_seed, epsilon, **extra)
                results.append(TrialResult(i, method, float(alpha), kl, num_samples, steps,
                                           trial_seed, num_dims, vocab_size))
    return results


def per_target_means(results: Sequence[TrialResult], method: str) -> np.ndarray:
    """Mean KL over temperatures for every target, ordered by target id."""
    ids = sorted({r.target_id for r in results})
    return np.array([np.mean([r.kl for r in results if r.target_id == i and r.method == method])
                     for i in ids])


def summarize(results: Sequence[TrialResult]) -> dict:
    """{method: (mean, std)} over all trials."""
    out = {}
    for method in dict.fromkeys(r.method for r in results):
        kls = np.array([r.kl for r in results if r.method == method])
        out[method] = (float(kls.mean()), float(kls.std()))
    return out
