"""Discrete diffusion corruption processes with closed-form marginals.

Data live on the mask-free space V^d; a ``Corruption`` lifts them to the
full space (with a mask token for masking diffusion) and corrupts every
dimension independently. All exact quantities (marginals, posterior
expectations, the unconditional reverse generator) are computed from the
per-dimension transition kernel, without ODEs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .ctmc import FORWARD, RateMatrix, StateSpace, reverse_rate

MASK = "mask"
UNIFORM = "uniform"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise sigma(t) and its derivative on [0, 1]."""

    sigma: Callable[[float], float]
    sigma_prime: Callable[[float], float]
    name: str = "custom"

    @property
    def terminal_residual(self) -> float:
        return math.exp(-self.sigma(1.0))

    def check(self, max_residual: float = 1e-3, points: int = 1000) -> None:
        if abs(self.sigma(0.0)) > 1e-12:
            raise ValueError("schedule must start at sigma(0) = 0")
        values = np.array([self.sigma(t) for t in np.linspace(0.0, 1.0, points)])
        if (np.diff(values) < -1e-12).any():
            raise ValueError("schedule must be non-decreasing")
        if self.terminal_residual > max_residual * (1 + 1e-9):
            raise ValueError(
                f"terminal residual {self.terminal_residual:.3g} exceeds {max_residual}"
            )


def log_linear_schedule(eps: float = 1e-3) -> NoiseSchedule:
    """sigma(t) = -ln(1 - (1 - eps) t): survival probability falls linearly to eps."""
    slope = 1.0 - eps
    return NoiseSchedule(
        sigma=lambda t: -math.log1p(-slope * t),
        sigma_prime=lambda t: slope / (1.0 - slope * t),
        name=f"loglinear(eps={eps:g})",
    )


def linear_schedule(sigma_max: float = 8.0) -> NoiseSchedule:
    return NoiseSchedule(
        sigma=lambda t: sigma_max * t,
        sigma_prime=lambda t: sigma_max,
        name=f"linear(sigma_max={sigma_max:g})",
    )


@dataclass(frozen=True)
class Corruption:
    """Independent per-dimension corruption of V^d.

    ``kind="mask"`` sends each token to the absorbing mask at rate sigma'(t);
    ``kind="uniform"`` resamples it uniformly over V at total rate sigma'(t).
    """

    vocab_size: int
    num_dims: int
    schedule: NoiseSchedule
    kind: str = MASK

    def __post_init__(self):
        if self.kind not in (MASK, UNIFORM):
            raise ValueError(f"unknown corruption kind {self.kind!r}")

    @cached_property
    def space(self) -> StateSpace:
        return StateSpace(self.vocab_size, self.num_dims, has_mask=self.kind == MASK)

    @cached_property
    def clean_space(self) -> StateSpace:
        return self.space.clean()

    def survival(self, t: float) -> float:
        return math.exp(-self.schedule.sigma(t))

    def kernel(self, t: float) -> np.ndarray:
        """(V, B) per-dimension p_{t|0}(x_t | x_0)."""
        V, B = self.vocab_size, self.space.base
        a = self.survival(t)
        K = np.zeros((V, B))
        if self.kind == MASK:
            K[np.arange(V), np.arange(V)] = a
            K[:, V] = 1.0 - a
        else:
            K[:] = (1.0 - a) / V
            K[np.arange(V), np.arange(V)] += a
        return K

    def _push(self, clean_values: np.ndarray, t: float) -> np.ndarray:
        """Apply the per-dimension kernel along every axis of a V^d tensor."""
        K = self.kernel(t)
        arr = np.asarray(clean_values, dtype=float).reshape((self.vocab_size,) * self.num_dims)
        for axis in range(self.num_dims):
            arr = np.moveaxis(np.tensordot(arr, K, axes=([axis], [0])), -1, axis)
        return arr.ravel()

    def marginal(self, p0, t: float) -> np.ndarray:
        """Exact p_t over the full space for clean data distribution ``p0``."""
        return self._push(p0, t)

    def posterior_mean(self, p0, h, t: float) -> np.ndarray:
        """E[h(X_0) | X_t = x] for every full-space x; NaN where p_t(x) = 0."""
        num = self._push(np.asarray(p0) * np.asarray(h), t)
        den = self._push(p0, t)
        out = np.full(den.shape, np.nan)
        np.divide(num, den, out=out, where=den > 0)
        return out

    def forward_rate(self) -> RateMatrix:
        space = self.space
        V, sched = self.vocab_size, self.schedule
        if self.kind == MASK:
            unmasked = (space.digits != V)[:, :, None]
            target = np.zeros((1, 1, space.base), dtype=bool)
            target[..., V] = True
            pattern = (unmasked & target).astype(float)
        else:
            pattern = (~space.self_mask).astype(float) / V
        return RateMatrix(
            space, lambda t: pattern * sched.sigma_prime(t), FORWARD, factorized=True
        )

    def generative_rate(self, p0) -> RateMatrix:
        """Exact reverse-time generator of the corruption started from ``p0``."""
        p0 = np.asarray(p0, dtype=float)
        singular = (0.0,) if self.kind == MASK else ()
        return reverse_rate(self.forward_rate(), lambda t: self.marginal(p0, t), singular)


def default_corruption(vocab_size: int, num_dims: int = 1, kind: str = MASK) -> Corruption:
    return Corruption(vocab_size, num_dims, log_linear_schedule(), kind)


def mask_transition(x0, t: float, sched: NoiseSchedule, space: StateSpace) -> np.ndarray:
    """p^mask_{t|0}(. | x0) over the full (masked) space."""
    if not space.has_mask:
        raise ValueError("mask_transition needs a space with a mask token")
    tokens = np.atleast_1d(np.asarray(x0, dtype=np.int64))
    if tokens.shape != (space.num_dims,):
        raise ValueError("x0 must give one token per dimension")
    if (tokens == space.mask_token).any():
        raise ValueError("x0 must not contain the mask token")
    corr = Corruption(space.vocab_size, space.num_dims, sched, MASK)
    point = np.zeros(space.vocab_size**space.num_dims)
    point[space.clean().encode(tokens)] = 1.0
    return corr.marginal(point, t)


def masking_forward_rate(sched: NoiseSchedule, space: StateSpace) -> RateMatrix:
    if not space.has_mask:
        raise ValueError("masking needs a space with a mask token")
    return Corruption(space.vocab_size, space.num_dims, sched, MASK).forward_rate()


def forward_marginal(p0, t: float, sched: NoiseSchedule, space: StateSpace, kind=MASK):
    return Corruption(space.vocab_size, space.num_dims, sched, kind).marginal(p0, t)


def generative_reverse_rate(p0, sched: NoiseSchedule, space: StateSpace, kind=MASK):
    return Corruption(space.vocab_size, space.num_dims, sched, kind).generative_rate(p0)
