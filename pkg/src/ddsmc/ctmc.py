"""Finite-state continuous-time Markov chains.

Time convention: corruption runs forward, t: 0 -> 1; generation runs in
reverse, t: 1 -> 0. A ``RateMatrix`` carries a ``direction`` tag and every
integrator or sampler checks that it is moved the way it flows.

States of a ``StateSpace`` are tuples of ``num_dims`` tokens in
``0..vocab_size-1`` (plus the mask token ``vocab_size`` when the space has
one), flattened row-major: the first dimension is the most significant digit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import NumericalError

FORWARD = "forward"
REVERSE = "reverse"

# Largest joint state space for which distributions and vectors are dense.
DENSE_STATE_CAP = 10**6
# Largest state space for which an S x S generator is materialized.
DENSE_MATRIX_CAP = 4096
# Distance kept from a singular endpoint by the log-time integrator.
SINGULAR_OFFSET = 1e-12


@dataclass(frozen=True)
class StateSpace:
    vocab_size: int
    num_dims: int = 1
    has_mask: bool = False

    def __post_init__(self):
        if self.vocab_size < 1 or self.num_dims < 1:
            raise ValueError("vocab_size and num_dims must be positive")
        if self.total_states > DENSE_STATE_CAP:
            raise ValueError(
                f"{self.total_states} states exceeds the dense cap of {DENSE_STATE_CAP}"
            )

    @property
    def base(self) -> int:
        """Number of values one dimension can take."""
        return self.vocab_size + int(self.has_mask)

    @property
    def mask_token(self) -> int | None:
        return self.vocab_size if self.has_mask else None

    @property
    def total_states(self) -> int:
        return self.base**self.num_dims

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.base,) * self.num_dims

    def encode(self, tokens) -> int | np.ndarray:
        """Row-major index of a token tuple, or of an (n, d) array of tuples."""
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.shape[-1] != self.num_dims:
            raise ValueError(f"expected {self.num_dims} tokens, got shape {arr.shape}")
        if (arr < 0).any() or (arr >= self.base).any():
            raise ValueError("token out of range")
        index = arr @ self.place_values
        return int(index) if index.ndim == 0 else index

    def decode(self, index) -> tuple[int, ...] | np.ndarray:
        """Inverse of :meth:`encode`; scalar index gives a tuple."""
        if np.ndim(index) == 0:
            return tuple(int(v) for v in self.digits[int(index)])
        return self.digits[np.asarray(index)]

    @cached_property
    def place_values(self) -> np.ndarray:
        return self.base ** np.arange(self.num_dims - 1, -1, -1, dtype=np.int64)

    @cached_property
    def digits(self) -> np.ndarray:
        """(S, d) token array of every state."""
        idx = np.arange(self.total_states, dtype=np.int64)
        return (idx[:, None] // self.place_values[None, :]) % self.base

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(S, d, B) index of the state obtained by setting dimension i to v."""
        S, d, B = self.total_states, self.num_dims, self.base
        own = self.digits * self.place_values  # contribution of each digit
        idx = np.arange(S, dtype=np.int64)[:, None, None] - own[:, :, None]
        return idx + np.arange(B)[None, None, :] * self.place_values[None, :, None]

    @cached_property
    def self_mask(self) -> np.ndarray:
        """(S, d, B) boolean, True where v equals the state's own token."""
        return self.digits[:, :, None] == np.arange(self.base)[None, None, :]

    @cached_property
    def num_masked(self) -> np.ndarray:
        """Number of masked dimensions per state (zeros without a mask)."""
        if not self.has_mask:
            return np.zeros(self.total_states, dtype=np.int64)
        return (self.digits == self.vocab_size).sum(axis=1)

    def clean(self) -> "StateSpace":
        return StateSpace(self.vocab_size, self.num_dims, False)

    @cached_property
    def clean_indices(self) -> np.ndarray:
        """Full-space index of each mask-free state, in clean row-major order."""
        clean = self.clean()
        return self.encode(clean.digits)

    @cached_property
    def clean_lookup(self) -> np.ndarray:
        """Full index -> clean index, -1 for states containing a mask."""
        out = -np.ones(self.total_states, dtype=np.int64)
        out[self.clean_indices] = np.arange(self.clean_indices.size)
        return out

    def embed(self, clean_vector) -> np.ndarray:
        """Lift a vector over mask-free states to the full space (zeros elsewhere)."""
        v = np.asarray(clean_vector, dtype=float)
        out = np.zeros(self.total_states)
        out[self.clean_indices] = v
        return out


@dataclass(frozen=True)
class RateMatrix:
    """Time-dependent generator.

    ``evaluate(t)`` returns the full S x S generator for dense support, or an
    (S, d, B) table of off-diagonal single-dimension rates for factorized
    support (entry [x, i, v] is the rate of moving x to x with dim i set to v).
    For factorized support the diagonal is implied by mass conservation.
    """

    space: StateSpace
    evaluate: Callable[[float], np.ndarray]
    direction: str = FORWARD
    factorized: bool = False
    singular_at: tuple[float, ...] = ()

    def __post_init__(self):
        if self.direction not in (FORWARD, REVERSE):
            raise ValueError(f"unknown direction {self.direction!r}")

    @classmethod
    def constant(cls, generator, space=None, direction=FORWARD) -> "RateMatrix":
        G = np.array(generator, dtype=float)
        if space is None:
            space = StateSpace(G.shape[0])
        return cls(space, lambda t: G, direction)

    @classmethod
    def zero(cls, space: StateSpace, direction=FORWARD) -> "RateMatrix":
        table = np.zeros((space.total_states, space.num_dims, space.base))
        return cls(space, lambda t: table, direction, factorized=True)

    @classmethod
    def from_offdiag(cls, space, offdiag_fn, direction=FORWARD, singular_at=()):
        """Dense generator whose diagonal is rebuilt from off-diagonal rates."""

        def evaluate(t):
            M = np.array(offdiag_fn(t), dtype=float)
            np.fill_diagonal(M, 0.0)
            M[np.diag_indices_from(M)] = -M.sum(axis=1)
            return M

        return cls(space, evaluate, direction, False, tuple(singular_at))

    def table(self, t: float) -> np.ndarray:
        if not self.factorized:
            raise TypeError("table() needs factorized support")
        T = np.array(self.evaluate(t), dtype=float)
        T[self.space.self_mask] = 0.0
        return T

    def offdiag(self, t: float) -> np.ndarray:
        """Off-diagonal part in native layout (table or matrix, zero diagonal)."""
        if self.factorized:
            return self.table(t)
        M = np.array(self.evaluate(t), dtype=float)
        np.fill_diagonal(M, 0.0)
        return M

    def matrix(self, t: float) -> np.ndarray:
        """Dense S x S generator."""
        if not self.factorized:
            return np.array(self.evaluate(t), dtype=float)
        S = self.space.total_states
        if S > DENSE_MATRIX_CAP:
            raise ValueError(f"refusing to materialize a {S} x {S} generator")
        T = self.table(t)
        M = np.zeros((S, S))
        rows = np.broadcast_to(np.arange(S)[:, None, None], T.shape)
        np.add.at(M, (rows.ravel(), self.space.neighbors.ravel()), T.ravel())
        np.fill_diagonal(M, 0.0)
        M[np.diag_indices(S)] = -M.sum(axis=1)
        return M

    def exit_rates(self, t: float) -> np.ndarray:
        """R_t(x) = sum of off-diagonal rates out of each state."""
        if self.factorized:
            return self.table(t).sum(axis=(1, 2))
        return self.offdiag(t).sum(axis=1)

    def rate(self, t: float, x: int, y: int) -> float:
        return float(self.row(t, x)[y])

    def row(self, t: float, x: int) -> np.ndarray:
        if not self.factorized:
            return np.array(self.evaluate(t), dtype=float)[x]
        T = self.table(t)
        out = np.zeros(self.space.total_states)
        np.add.at(out, self.space.neighbors[x].ravel(), T[x].ravel())
        out[x] = -T[x].sum()
        return out

    def apply_forward(self, t: float, p: np.ndarray) -> np.ndarray:
        """R_t^T p (the Kolmogorov forward right-hand side)."""
        if not self.factorized:
            return self.matrix(t).T @ p
        T = self.table(t)
        flow = p[:, None, None] * T
        inflow = np.bincount(
            self.space.neighbors.ravel(), weights=flow.ravel(), minlength=p.size
        )
        return inflow - p * T.sum(axis=(1, 2))

    def apply_backward(self, t: float, u: np.ndarray) -> np.ndarray:
        """R_t u (the Kolmogorov backward right-hand side)."""
        if not self.factorized:
            return self.matrix(t) @ u
        T = self.table(t)
        return (T * (u[self.space.neighbors] - u[:, None, None])).sum(axis=(1, 2))


class RateCheck(NamedTuple):
    ok: bool
    row: int | None = None
    value: float | None = None
    message: str = ""

    def __bool__(self):
        return self.ok


def validate_rate_matrix(R: RateMatrix, t: float, tol: float = 1e-9) -> RateCheck:
    """Check non-negative off-diagonals and zero row sums at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    S = R.space.total_states
    if R.factorized:
        T = R.table(t)
        if not np.isfinite(T).all():
            bad = int(np.argwhere(~np.isfinite(T))[0][0])
            return RateCheck(False, bad, float("nan"), "non-finite rate")
        if (T < -tol).any():
            x, i, v = np.argwhere(T < -tol)[0]
            return RateCheck(False, int(x), float(T[x, i, v]), "negative off-diagonal rate")
        return RateCheck(True)
    G = R.matrix(t)
    if not np.isfinite(G).all():
        bad = int(np.argwhere(~np.isfinite(G))[0][0])
        return RateCheck(False, bad, float("nan"), "non-finite rate")
    off = G - np.diag(np.diag(G))
    if (off < -tol).any():
        x, y = np.argwhere(off < -tol)[0]
        return RateCheck(False, int(x), float(G[x, y]), "negative off-diagonal rate")
    sums = G.sum(axis=1)
    bad = np.abs(sums) > tol * S
    if bad.any():
        x = int(np.argmax(bad))
        return RateCheck(False, x, float(sums[x]), f"row {x} sums to {sums[x]:.3g}")
    return RateCheck(True)


# ---------------------------------------------------------------------------
# Kolmogorov equations
# ---------------------------------------------------------------------------


def _singular_endpoint(t_from, t_to, singular_at):
    for c in singular_at:
        if math.isclose(t_from, c, abs_tol=1e-15) or math.isclose(t_to, c, abs_tol=1e-15):
            return c
    return None


def _rk4(rhs, y0, t_from, t_to, steps, singular_at):
    """Classical RK4 on a uniform grid.

    If an endpoint is a declared singularity c of the generator (masking
    reversal rates grow like 1/|t - c|), the grid is uniform in
    s = ln|t - c| instead and the integration stops SINGULAR_OFFSET short of c.
    """
    c = _singular_endpoint(t_from, t_to, singular_at)
    if c is None:
        f = rhs
        a, b = t_from, t_to
    else:
        far = t_to if math.isclose(t_from, c, abs_tol=1e-15) else t_from
        sgn = 1.0 if far > c else -1.0

        def to_s(t):
            gap = abs(t - c)
            return math.log(max(gap, SINGULAR_OFFSET))

        def f(s, y):
            e = math.exp(s)
            return sgn * e * rhs(c + sgn * e, y)

        a, b = to_s(t_from), to_s(t_to)
    h = (b - a) / steps
    y = np.array(y0, dtype=float)
    for k in range(steps):
        s = a + k * h
        k1 = f(s, y)
        k2 = f(s + h / 2, y + h / 2 * k1)
        k3 = f(s + h / 2, y + h / 2 * k2)
        k4 = f(s + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y).all():
            raise NumericalError(f"non-finite value after integration step {k}")
    return y


def _flow_sign(R: RateMatrix) -> float:
    return 1.0 if R.direction == FORWARD else -1.0


def kfe_evolve(R: RateMatrix, p_init, t_from: float, t_to: float, steps: int = 1000,
               normalize: bool = True):
    """Marginal at ``t_to`` from the forward equation, started at ``t_from``.

    With ``normalize=False`` the raw integrator output is returned (after the
    drift checks), which exposes the mass error of the scheme itself.
    """
    p0 = np.asarray(p_init, dtype=float)
    if p0.shape != (R.space.total_states,):
        raise ValueError("distribution does not match the state space")
    if t_to == t_from:
        return p0.copy()
    if (t_to > t_from) != (R.direction == FORWARD):
        raise ValueError(f"{R.direction} rate cannot move from t={t_from} to t={t_to}")
    sign = _flow_sign(R)
    p = _rk4(lambda t, y: sign * R.apply_forward(t, y), p0, t_from, t_to, steps, R.singular_at)
    drift = abs(p.sum() - p0.sum())
    if drift > 1e-6:
        raise NumericalError(f"normalization drift {drift:.3g} exceeds 1e-6")
    if (p < -1e-9).any():
        raise NumericalError(f"negative mass {p.min():.3g} after integration")
    if not normalize:
        return p
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def kbe_evolve(R: RateMatrix, u_terminal, t_from: float, t_to: float, steps: int = 1000):
    """u_{t_to}(x) = E[u_terminal(X_end) | X_{t_to} = x], integrated against the flow.

    ``t_from`` is the time at which the chain ends (where ``u_terminal`` is
    known): later than ``t_to`` for forward chains, earlier for reverse ones.
    """
    u0 = np.asarray(u_terminal, dtype=float)
    if u0.shape != (R.space.total_states,):
        raise ValueError("vector does not match the state space")
    if t_to == t_from:
        return u0.copy()
    if (t_to < t_from) != (R.direction == FORWARD):
        raise ValueError(f"backward equation of a {R.direction} chain cannot go {t_from} -> {t_to}")
    sign = _flow_sign(R)
    return _rk4(lambda t, y: -sign * R.apply_backward(t, y), u0, t_from, t_to, steps, R.singular_at)


# ---------------------------------------------------------------------------
# Euler sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EulerKernel:
    """One Euler step of a generator, tabulated for every source state.

    ``probs`` is (S, S) for dense support or (S, d, B) per-dimension kernels
    for factorized support; the joint kernel of the latter is the product
    over dimensions.
    """

    space: StateSpace
    probs: np.ndarray
    factorized: bool

    @cached_property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs, axis=-1)

    @cached_property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def sample(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Next states by inverse CDF; ``u`` is (n, d) factorized or (n,) dense."""
        cdf = self.cdf[states]
        if self.factorized:
            target = u * cdf[..., -1]
            tokens = (cdf <= target[..., None]).sum(axis=-1)
            np.minimum(tokens, self.space.base - 1, out=tokens)
            return tokens @ self.space.place_values
        u = np.reshape(u, len(states))
        target = u * cdf[:, -1]
        nxt = (cdf <= target[:, None]).sum(axis=-1)
        return np.minimum(nxt, self.space.total_states - 1)

    def log_prob(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        if not self.factorized:
            return self.log_probs[x, y]
        dims = np.arange(self.space.num_dims)
        yd = self.space.digits[y]
        return self.log_probs[x[..., None], dims, yd].sum(axis=-1)

    def prob(self, x, y) -> np.ndarray:
        return np.exp(self.log_prob(x, y))

    def joint_row(self, x: int) -> np.ndarray:
        if not self.factorized:
            return self.probs[x].copy()
        out = self.probs[x, 0]
        for i in range(1, self.space.num_dims):
            out = np.multiply.outer(out, self.probs[x, i]).ravel()
        return out

    def matrix(self) -> np.ndarray:
        """Joint S x S transition matrix."""
        if not self.factorized:
            return self.probs.copy()
        S = self.space.total_states
        if S > DENSE_MATRIX_CAP:
            raise ValueError(f"refusing to materialize a {S} x {S} kernel")
        out = self.probs[:, 0, :]
        for i in range(1, self.space.num_dims):
            out = (out[:, :, None] * self.probs[:, i, None, :]).reshape(S, -1)
        return out


def euler_kernel(R: RateMatrix, t: float, dt: float) -> EulerKernel:
    """Tabulate p(y | x) proportional to delta(x, y) + R_t(x, y) dt.

    A negative stay probability is clamped to zero before renormalizing;
    factorized generators are discretized independently per dimension.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    off = R.offdiag(t)
    if not np.isfinite(off).all():
        raise NumericalError(f"non-finite rate at t={t}")
    if (off < 0).any():
        raise ValueError(f"negative off-diagonal rate at t={t}")
    probs = off * dt
    stay = np.clip(1.0 - probs.sum(axis=-1), 0.0, None)
    if R.factorized:
        probs[R.space.self_mask] = stay.ravel()
    else:
        probs[np.diag_indices_from(probs)] = stay
    probs /= probs.sum(axis=-1, keepdims=True)
    return EulerKernel(R.space, probs, R.factorized)


def euler_transition_probs(R: RateMatrix, x: int, t: float, dt: float) -> np.ndarray:
    """Distribution of the next state after one Euler step from ``x``."""
    return euler_kernel(R, t, dt).joint_row(int(x))


def _draw_width(R: RateMatrix) -> int:
    return R.space.num_dims if R.factorized else 1


def euler_step(R: RateMatrix, x: int, t: float, dt: float, rng: np.random.Generator) -> int:
    """Sample one Euler transition from ``x``; deterministic given ``rng`` state."""
    kernel = euler_kernel(R, t, dt)
    u = rng.random((1, _draw_width(R)))
    return int(kernel.sample(np.array([int(x)]), u if R.factorized else u[:, 0])[0])


@dataclass(frozen=True)
class PathRecord:
    """Piecewise-constant path sampled on a time grid."""

    grid: np.ndarray
    states: np.ndarray
    jumps: list = field(init=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        states = np.asarray(self.states, dtype=np.int64)
        if grid.shape != states.shape:
            raise ValueError("grid and states must have the same length")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "states", states)
        changed = np.flatnonzero(states[1:] != states[:-1])
        object.__setattr__(
            self, "jumps", [(int(k), int(states[k]), int(states[k + 1])) for k in changed]
        )

    def segment(self, start: int, stop: int) -> "PathRecord":
        """Sub-path on grid points start..stop inclusive."""
        return PathRecord(self.grid[start : stop + 1], self.states[start : stop + 1])

    def coarsen(self, factor: int) -> "PathRecord":
        """Keep every ``factor``-th grid point (the path seen by a coarser grid)."""
        if (len(self.grid) - 1) % factor:
            raise ValueError("grid length is not compatible with the coarsening factor")
        return PathRecord(self.grid[::factor], self.states[::factor])


def check_grid(grid, direction: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("grid must be a non-empty 1-d sequence")
    steps = np.diff(grid)
    if grid.size > 1:
        if direction == REVERSE and not (steps < 0).all():
            raise ValueError("a reverse-time chain needs a strictly decreasing grid")
        if direction == FORWARD and not (steps > 0).all():
            raise ValueError("a forward-time chain needs a strictly increasing grid")
    return grid


def simulate_path(R: RateMatrix, x_init: int, grid: Sequence[float], rng) -> PathRecord:
    """Chain Euler steps along ``grid``; rates are read at the left end of each step."""
    grid = check_grid(grid, R.direction)
    states = [int(x_init)]
    for k in range(grid.size - 1):
        dt = abs(grid[k + 1] - grid[k])
        states.append(euler_step(R, states[-1], grid[k], dt, rng))
    return PathRecord(grid, np.array(states))


def simulate_paths(R: RateMatrix, x_init: np.ndarray, grid, seed: int) -> np.ndarray:
    """Vectorized Euler paths for many walkers; returns (n, len(grid)) states."""
    from . import rng as rngmod

    grid = check_grid(grid, R.direction)
    x = np.asarray(x_init, dtype=np.int64).copy()
    out = np.empty((x.size, grid.size), dtype=np.int64)
    out[:, 0] = x
    width = _draw_width(R)
    for k in range(grid.size - 1):
        kernel = euler_kernel(R, grid[k], abs(grid[k + 1] - grid[k]))
        u = rngmod.uniforms(seed, k, rngmod.PROPAGATE, (x.size, width))
        x = kernel.sample(x, u if R.factorized else u[:, 0])
        out[:, k + 1] = x
    return out


# ---------------------------------------------------------------------------
# Time reversal
# ---------------------------------------------------------------------------


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num / den with 0 wherever den or num is zero (unreachable states)."""
    out = np.zeros(np.broadcast(num, den).shape)
    ok = (den > 0) & (num > 0)
    np.divide(num, den, out=out, where=ok)
    return out


def reverse_rate(R_fwd: RateMatrix, marginals, singular_at=()) -> RateMatrix:
    """Generator of the time reversal: R~_t(x, y) = R_fwd(y, x) p_t(y) / p_t(x).

    Rates out of a zero-mass state, and rates into one, are zero.
    """
    space = R_fwd.space
    direction = REVERSE if R_fwd.direction == FORWARD else FORWARD

    def checked(t):
        p = np.asarray(marginals(t), dtype=float)
        if p.shape != (space.total_states,) or not np.isfinite(p).all() or (p < 0).any():
            raise NumericalError(f"invalid marginal at t={t}")
        return p

    if R_fwd.factorized:
        nb = space.neighbors
        dims = np.arange(space.num_dims)[None, :, None]
        own = space.digits[:, :, None]

        def evaluate(t):
            F = R_fwd.table(t)
            p = checked(t)
            back = F[nb, dims, own]  # forward rate from the neighbour back to x
            return back * _ratio(p[nb], p[:, None, None])

        return RateMatrix(space, evaluate, direction, True, tuple(singular_at))

    def offdiag(t):
        F = R_fwd.offdiag(t)
        p = checked(t)
        return F.T * _ratio(p[None, :], p[:, None])

    return RateMatrix.from_offdiag(space, offdiag, direction, singular_at)
