"""Sequential Monte Carlo for tempered targets of discrete diffusions.

Particles follow an Euler-discretized proposal chain from t=1 to t=0 and
carry log importance weights

    log w += log p(y|x) - log q(y|x) + alpha [log p(y|x, zeta) - log p(y|x)]

where p, p(.|zeta) and q are the Euler kernels of the unconditional rate, the
alpha=1 guided rate and the proposal rate. Resampling is triggered when the
effective sample size drops to the configured threshold.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import rng as rngmod
from .ctmc import REVERSE, EulerKernel, PathRecord, RateMatrix, check_grid, euler_kernel
from .diffusion import Corruption
from .errors import AbsoluteContinuityError
from .guidance import ConditionalModel, guided_rate, true_tempered_rate

PROPOSALS = ("unconditional", "guided", "true-tempered")
RESAMPLERS = ("multinomial", "partial", "none")


def uniform_grid(steps: int) -> np.ndarray:
    """Decreasing grid 1 = t_0 > ... > t_steps = 0 with ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError("need at least one step")
    return np.linspace(1.0, 0.0, steps + 1)


def logsumexp(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        raise ValueError("all particles carry zero weight")
    w = np.exp(lw - m)
    return w / w.sum()


class Particle(NamedTuple):
    state: int
    log_weight: float


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray
    log_weights: np.ndarray
    time_index: int = 0
    ess_trace: tuple = ()
    resample_events: tuple = ()

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        lw = np.asarray(self.log_weights, dtype=float)
        if states.ndim != 1 or states.size < 1 or lw.shape != states.shape:
            raise ValueError("need K >= 1 states with one log-weight each")
        if np.isnan(lw).any() or (lw == np.inf).any():
            raise ValueError("log-weights must be finite or -inf")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_weights", lw)

    @property
    def size(self) -> int:
        return self.states.size

    @property
    def particles(self) -> list[Particle]:
        return [Particle(int(s), float(w)) for s, w in zip(self.states, self.log_weights)]

    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)

    def replace(self, **changes) -> "ParticleEnsemble":
        return dataclasses.replace(self, **changes)


def ess(ensemble_or_log_weights) -> float:
    """(sum w)^2 / sum w^2, evaluated in log space."""
    lw = getattr(ensemble_or_log_weights, "log_weights", ensemble_or_log_weights)
    w = normalized_weights(lw)
    return float(1.0 / np.sum(w * w))


def weighted_expectation(ensemble: ParticleEnsemble, phi) -> float:
    """Self-normalized importance estimate of E[phi]."""
    values = _evaluate(phi, ensemble.states)
    return float(np.sum(ensemble.weights() * values))


def weighted_standard_error(ensemble: ParticleEnsemble, phi) -> float:
    """Delta-method standard error of :func:`weighted_expectation`."""
    w = ensemble.weights()
    values = _evaluate(phi, ensemble.states)
    mean = np.sum(w * values)
    return float(np.sqrt(np.sum(w**2 * (values - mean) ** 2)))


def _evaluate(phi, states):
    if callable(phi):
        return np.asarray([phi(int(s)) for s in states], dtype=float)
    return np.asarray(phi, dtype=float)[states]


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _categorical(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, weights.size - 1)


def _draws(rng, n):
    if isinstance(rng, np.ndarray):
        return rng[:n]
    return rng.random(n)


def multinomial_resample(ensemble: ParticleEnsemble, rng) -> ParticleEnsemble:
    """K i.i.d. draws from the normalized weights; weights reset to their mean.

    ``rng`` is a numpy Generator or a pre-drawn array of K uniforms.
    """
    K = ensemble.size
    w = ensemble.weights()
    parents = _categorical(w, _draws(rng, K))
    level = logsumexp(ensemble.log_weights) - np.log(K)
    event = {"kind": "multinomial", "replaced": K}
    return ensemble.replace(
        states=ensemble.states[parents],
        log_weights=np.full(K, level),
        resample_events=ensemble.resample_events + (event,),
    )


def partial_selection(log_weights: np.ndarray, M: int) -> np.ndarray:
    """Indices of the floor(M/2) heaviest and ceil(M/2) lightest particles."""
    K = len(log_weights)
    if not 0 <= M <= K:
        raise ValueError("partial resample size must lie in [0, K]")
    order = np.argsort(log_weights, kind="stable")
    high = order[K - M // 2 :] if M // 2 else order[:0]
    low = order[: M - M // 2]
    return np.sort(np.concatenate([low, high]))


def partial_resample(ensemble: ParticleEnsemble, M: int, rng) -> ParticleEnsemble:
    """Resample only the selected extreme-weight particles.

    Replacements are drawn from the categorical over the selected set, with
    probabilities proportional to their weights, and every replaced particle
    receives the mean selected weight; untouched particles are kept as is.
    This leaves weighted expectations unbiased.
    """
    if M == 0:
        return ensemble
    chosen = partial_selection(ensemble.log_weights, M)
    lw_sel = ensemble.log_weights[chosen]
    w_sel = normalized_weights(lw_sel)
    parents = chosen[_categorical(w_sel, _draws(rng, M))]
    states = ensemble.states.copy()
    lw = ensemble.log_weights.copy()
    states[chosen] = ensemble.states[parents]
    lw[chosen] = logsumexp(lw_sel) - np.log(M)
    event = {"kind": "partial", "replaced": int(M)}
    return ensemble.replace(
        states=states, log_weights=lw, resample_events=ensemble.resample_events + (event,)
    )


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def log_increment(logp, logq, logpc, alpha: float) -> np.ndarray:
    """log p - log q + alpha (log p_zeta - log p), with -inf for excluded moves."""
    logp, logq, logpc = (np.asarray(a, dtype=float) for a in (logp, logq, logpc))
    if np.isneginf(logq).any():
        raise AbsoluteContinuityError("proposal assigns zero probability to a realized transition")
    with np.errstate(invalid="ignore"):
        inc = logp - logq
        if alpha != 0:
            inc = inc + alpha * (logpc - logp)
    dead = np.isneginf(logp) | (np.isneginf(logpc) & (alpha != 0))
    return np.where(dead, -np.inf, inc)


def weight_update_discrete(lw: float, x_s: int, x_t: int, s: float, t: float,
                           R: RateMatrix, R_cond: RateMatrix, Q: RateMatrix,
                           alpha: float) -> float:
    """One discretized weight update for the move x_s (time s) -> x_t (time t < s)."""
    if not s > t:
        raise ValueError("reverse time requires s > t")
    dt = s - t
    kernels = [euler_kernel(M, s, dt) for M in (R, Q, R_cond)]
    logp, logq, logpc = (k.log_prob(np.array([x_s]), np.array([x_t]))[0] for k in kernels)
    try:
        inc = log_increment(logp, logq, logpc, alpha)
    except AbsoluteContinuityError as err:
        raise AbsoluteContinuityError(str(err), transition=(x_s, x_t, s, t)) from None
    return float(lw + inc)


def log_weights_discrete(paths: np.ndarray, grid, R, R_cond, Q, alpha) -> np.ndarray:
    """Accumulated discretized log-weights for (n, len(grid)) state paths."""
    grid = check_grid(grid, REVERSE)
    paths = np.atleast_2d(paths)
    total = np.zeros(paths.shape[0])
    for k in range(grid.size - 1):
        dt = grid[k] - grid[k + 1]
        x, y = paths[:, k], paths[:, k + 1]
        kp, kq, kc = (euler_kernel(M, grid[k], dt) for M in (R, Q, R_cond))
        total = total + log_increment(kp.log_prob(x, y), kq.log_prob(x, y), kc.log_prob(x, y), alpha)
    return total


def _jump_log_rates(M: RateMatrix, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum over changed dimensions of log M_t(x, x with that dimension set as in y)."""
    with np.errstate(divide="ignore"):
        if M.factorized:
            space = M.space
            T = M.table(t)
            xd, yd = space.digits[x], space.digits[y]
            changed = xd != yd
            dims = np.arange(space.num_dims)
            logs = np.log(T[x[:, None], dims, yd])
            return np.where(changed, logs, 0.0).sum(axis=1)
        return np.log(M.offdiag(t)[x, y])


def log_weights_continuous(paths: np.ndarray, grid, R, R_cond, Q, alpha) -> np.ndarray:
    """Path-space log-weights: jump log-ratios plus left-Riemann compensators.

    Each step contributes dt [Q(x) - R(x) + alpha (R(x) - R_zeta(x))], and each
    jump log R/Q + alpha log(R_zeta/R), all rates read at the step's left end.
    """
    grid = check_grid(grid, REVERSE)
    paths = np.atleast_2d(paths)
    total = np.zeros(paths.shape[0])
    for k in range(grid.size - 1):
        t, dt = grid[k], grid[k] - grid[k + 1]
        x, y = paths[:, k], paths[:, k + 1]
        ex_r, ex_q, ex_c = (M.exit_rates(t)[x] for M in (R, Q, R_cond))
        inc = dt * (ex_q - ex_r + alpha * (ex_r - ex_c))
        moved = x != y
        if moved.any():
            xm, ym = x[moved], y[moved]
            lr, lq, lc = (_jump_log_rates(M, t, xm, ym) for M in (R, Q, R_cond))
            if np.isneginf(lr).any() or np.isneginf(lq).any():
                raise AbsoluteContinuityError(f"jump with zero rate at t={t}")
            inc[moved] += log_increment(lr, lq, lc, alpha)
        total = total + inc
    return total


def weight_increment_continuous(segment: PathRecord, R, R_cond, Q, alpha) -> float:
    """Continuous-time log-weight increment accumulated along one path segment."""
    return float(
        log_weights_continuous(segment.states[None, :], segment.grid, R, R_cond, Q, alpha)[0]
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmcConfig:
    num_particles: int
    grid: tuple = field(default_factory=lambda: tuple(uniform_grid(100)))
    alpha: float = 1.0
    beta: float = 1.0
    proposal: str = "guided"
    ess_threshold: float | None = None
    resampler: str = "multinomial"
    partial_size: int | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        K = self.num_particles
        if K < 1:
            raise ValueError("num_particles must be positive")
        object.__setattr__(self, "grid", tuple(float(t) for t in check_grid(self.grid, REVERSE)))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("temperatures must be non-negative")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")
        if self.resampler not in RESAMPLERS:
            raise ValueError(f"resampler must be one of {RESAMPLERS}")
        if self.ess_threshold is None:
            object.__setattr__(self, "ess_threshold", 0.5 * K)
        if not 1.0 <= self.ess_threshold <= K:
            raise ValueError("ess_threshold must lie in [1, K]")
        if self.partial_size is None:
            object.__setattr__(self, "partial_size", K // 2)
        if not 0 <= self.partial_size <= K:
            raise ValueError("partial_size must lie in [0, K]")
        if self.threads < 1:
            raise ValueError("threads must be positive")

    @property
    def proposal_temperature(self) -> float:
        return self.beta


@dataclass(frozen=True)
class SmcResult:
    ensemble: ParticleEnsemble
    snapshots: dict

    @property
    def ess_trace(self):
        return self.ensemble.ess_trace

    @property
    def resample_events(self):
        return self.ensemble.resample_events


def build_rates(model: ConditionalModel, corruption: Corruption, proposal: str,
                alpha: float, beta: float):
    """(unconditional R, alpha=1 guided R_zeta, proposal Q) for one target."""
    R = corruption.generative_rate(model.p0)
    R_cond = guided_rate(R, model, corruption, 1.0)
    if proposal == "unconditional":
        Q = R
    elif proposal == "guided":
        Q = R_cond if beta == 1.0 else guided_rate(R, model, corruption, beta)
    elif proposal == "true-tempered":
        Q = true_tempered_rate(R, model, corruption, alpha)
    else:
        raise ValueError(f"unknown proposal {proposal!r}")
    return R, R_cond, Q


def sample_initial(p: np.ndarray, n: int, seed: int) -> np.ndarray:
    u = rngmod.uniforms(seed, 0, rngmod.INIT, n)
    return _categorical(np.asarray(p, dtype=float), u)


def _propagate(kq: EulerKernel, kp: EulerKernel, kc: EulerKernel, alpha, states, u, lw, threads):
    def work(sl):
        x = states[sl]
        y = kq.sample(x, u[sl] if kq.factorized else u[sl, 0])
        inc = log_increment(kp.log_prob(x, y), kq.log_prob(x, y), kc.log_prob(x, y), alpha)
        return y, lw[sl] + inc

    n = states.size
    if threads <= 1 or n < 2 * threads:
        return work(slice(0, n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, slices))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def run_smc(config: SmcConfig, model: ConditionalModel, corruption: Corruption,
            snapshots: Sequence[int] = (), rates=None) -> SmcResult:
    """Evolve K weighted particles from t=1 to t=0.

    Per grid step: propagate with the proposal's Euler kernel, update weights,
    record the ESS and resample when ESS <= threshold (never after the final
    step, so the returned ensemble is weighted). ``snapshots`` lists grid
    indices at which to keep a copy of the (pre-resampling) ensemble.
    """
    grid = np.asarray(config.grid)
    K, alpha, seed = config.num_particles, config.alpha, config.seed
    R, R_cond, Q = rates or build_rates(
        model, corruption, config.proposal, alpha, config.proposal_temperature
    )
    space = corruption.space
    width = space.num_dims if Q.factorized else 1

    p_start = corruption.marginal(model.p0, grid[0])
    states = sample_initial(p_start, K, seed)
    lw = np.zeros(K)
    trace, events = [], []
    kept = {}
    if 0 in snapshots:
        kept[0] = ParticleEnsemble(states.copy(), lw.copy(), 0)

    steps = grid.size - 1
    for l in range(steps):
        t, dt = grid[l], grid[l] - grid[l + 1]
        kq = euler_kernel(Q, t, dt)
        kp = kq if Q is R else euler_kernel(R, t, dt)
        kc = kq if Q is R_cond else euler_kernel(R_cond, t, dt)
        u = rngmod.uniforms(seed, l, rngmod.PROPAGATE, (K, width))
        try:
            states, lw = _propagate(kq, kp, kc, alpha, states, u, lw, config.threads)
        except AbsoluteContinuityError as err:
            raise AbsoluteContinuityError(f"step {l}: {err}", step=l) from None
        value = ess(lw)
        trace.append(value)
        if l + 1 in snapshots:
            kept[l + 1] = ParticleEnsemble(states.copy(), lw.copy(), l + 1, tuple(trace))
        if l + 1 < steps and config.resampler != "none" and value <= config.ess_threshold:
            draws = rngmod.uniforms(seed, l, rngmod.RESAMPLE, K)
            current = ParticleEnsemble(states, lw, l + 1)
            if config.resampler == "multinomial":
                current = multinomial_resample(current, draws)
            else:
                current = partial_resample(current, config.partial_size, draws)
            states, lw = current.states, current.log_weights
            events.append({"step": l + 1, "time": float(grid[l + 1]), "ess": value,
                           "kind": config.resampler})

    final = ParticleEnsemble(states, lw, steps, tuple(trace), tuple(events))
    return SmcResult(final, kept)


def sample_independent(rate: RateMatrix, corruption: Corruption, p_start: np.ndarray,
                       n: int, grid, seed: int) -> np.ndarray:
    """Final states of ``n`` independent Euler chains (no weights)."""
    grid = check_grid(grid, REVERSE)
    states = sample_initial(p_start, n, seed)
    width = corruption.space.num_dims if rate.factorized else 1
    for l in range(grid.size - 1):
        kernel = euler_kernel(rate, grid[l], grid[l] - grid[l + 1])
        u = rngmod.uniforms(seed, l, rngmod.PROPAGATE, (n, width))
        states = kernel.sample(states, u if rate.factorized else u[:, 0])
    return states
