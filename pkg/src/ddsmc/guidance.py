"""Exact conditioning: likelihood twists, guided and true tempered generators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctmc import RateMatrix, kbe_evolve
from .diffusion import Corruption
from .errors import NumericalError


@dataclass(frozen=True)
class ConditionalModel:
    """Explicit data distribution and likelihood p(zeta | x) over V^d."""

    p0: np.ndarray
    likelihood: np.ndarray
    vocab_size: int
    num_dims: int = 1

    def __post_init__(self):
        p0 = np.asarray(self.p0, dtype=float)
        lik = np.asarray(self.likelihood, dtype=float)
        size = self.vocab_size**self.num_dims
        if p0.shape != (size,) or lik.shape != (size,):
            raise ValueError(f"p0 and likelihood must have {size} entries")
        if (p0 < 0).any() or abs(p0.sum() - 1.0) > 1e-9:
            raise ValueError("p0 must be a probability vector")
        if (lik < 0).any() or not np.isfinite(lik).all() or not (lik > 0).any():
            raise ValueError("likelihood needs finite non-negative entries, one positive")
        if not (p0 * lik > 0).any():
            raise ValueError("likelihood vanishes on the support of p0")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "likelihood", lik)

    def normalizer(self, alpha: float) -> float:
        """Z_alpha = sum_x p0(x) likelihood(x)^alpha."""
        return float(np.sum(self.p0 * self.likelihood**alpha))

    def tempered(self, alpha: float) -> np.ndarray:
        return tempered_target(self, alpha)


def tempered_target(model: ConditionalModel, alpha: float) -> np.ndarray:
    """p0(x) likelihood(x)^alpha / Z_alpha over V^d."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    w = model.p0 * model.likelihood**alpha
    total = w.sum()
    if not total > 0:
        raise ValueError("tempered target has no mass")
    return w / total


def twist(model: ConditionalModel, corruption: Corruption, t: float, alpha: float = 1.0,
          method: str = "bayes", steps: int = 1000) -> np.ndarray:
    """E[likelihood(X_0)^alpha | X_t = x] for every full-space state.

    ``method="bayes"`` uses the closed-form posterior of the corruption;
    ``method="kbe"`` integrates the backward equation of the exact reverse
    chain from t=0. Unreachable states give NaN (bayes) or an arbitrary value.
    """
    h = model.likelihood**alpha
    if method == "bayes":
        return corruption.posterior_mean(model.p0, h, t)
    if method == "kbe":
        R = corruption.generative_rate(model.p0)
        return kbe_evolve(R, corruption.space.embed(h), 0.0, t, steps)
    raise ValueError(f"unknown method {method!r}")


def conditional_likelihood(model: ConditionalModel, corruption: Corruption, x_t, t: float) -> float:
    """p_t(zeta | x_t) = E[p(zeta | X_0) | X_t = x_t]."""
    index = corruption.space.encode(x_t) if np.ndim(x_t) else int(x_t)
    value = twist(model, corruption, t)[index]
    if np.isnan(value):
        raise ValueError(f"state {x_t} is unreachable at t={t}")
    return float(value)


def _twisted(R: RateMatrix, weights_at, power: float) -> RateMatrix:
    """Off-diagonals scaled by (c_t(y) / c_t(x))^power, c_t = weights_at(t)."""
    space = R.space

    def ratios(t, off):
        c = np.asarray(weights_at(t), dtype=float)
        exits = off.sum(axis=(1, 2)) if R.factorized else off.sum(axis=1)
        bad = (~(c > 0)) & (exits > 0)
        if bad.any():
            x = int(np.argmax(bad))
            raise NumericalError(
                f"zero likelihood at state {space.decode(x)} with outflow at t={t}"
            )
        safe = np.where(c > 0, c, 1.0)
        target = np.nan_to_num(c, nan=0.0)
        if R.factorized:
            num = target[space.neighbors]
            den = safe[:, None, None]
        else:
            num = target[None, :]
            den = safe[:, None]
        scale = (num / den) ** power
        return np.where(off > 0, off * scale, 0.0)

    if R.factorized:
        return RateMatrix(space, lambda t: ratios(t, R.table(t)), R.direction, True, R.singular_at)
    return RateMatrix.from_offdiag(
        space, lambda t: ratios(t, R.offdiag(t)), R.direction, R.singular_at
    )


def guided_rate(R: RateMatrix, model: ConditionalModel, corruption: Corruption,
                alpha: float) -> RateMatrix:
    """R^alpha(x, y) = R(x, y) [p_t(zeta|y) / p_t(zeta|x)]^alpha."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return _twisted(R, lambda t: twist(model, corruption, t, 1.0), alpha)


def true_tempered_rate(R: RateMatrix, model: ConditionalModel, corruption: Corruption,
                       alpha: float) -> RateMatrix:
    """Generator of the exact reversal started at the tempered target."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return _twisted(R, lambda t: twist(model, corruption, t, alpha), 1.0)


def tempered_marginal_true(model: ConditionalModel, corruption: Corruption, alpha: float,
                           t: float, route: str = "corrupt") -> np.ndarray:
    """Marginal at time t of the corruption started from the tempered target.

    ``route="corrupt"`` pushes the tempered target through the corruption;
    ``route="proportional"`` normalizes p_t(x) E[likelihood^alpha | X_t = x].
    """
    if route == "corrupt":
        return corruption.marginal(tempered_target(model, alpha), t)
    if route == "proportional":
        p_t = corruption.marginal(model.p0, t)
        c = np.nan_to_num(twist(model, corruption, t, alpha), nan=0.0)
        w = p_t * c
        return w / w.sum()
    raise ValueError(f"unknown route {route!r}")
