"""Exact enumeration over small discretized chains, used as test oracles."""

from __future__ import annotations

import numpy as np

from .ctmc import REVERSE, RateMatrix, check_grid, euler_kernel


def _geometric_kernel(P: np.ndarray, Pc: np.ndarray, alpha: float) -> np.ndarray:
    """Entrywise P^(1-alpha) Pc^alpha with zero wherever either factor is zero."""
    out = np.zeros_like(P)
    live = (P > 0) & (Pc > 0)
    if alpha == 0:
        live = P > 0
        out[live] = P[live]
        return out
    out[live] = np.exp((1 - alpha) * np.log(P[live]) + alpha * np.log(Pc[live]))
    return out


def tilted_chain_marginals(R: RateMatrix, R_cond: RateMatrix, alpha: float, p_start,
                           grid) -> list[np.ndarray]:
    """Unnormalized weighted laws g_k of the discretized tilted chain.

    g_0 = p_start and g_{k+1}(y) = sum_x g_k(x) p(y|x)^(1-alpha) p_zeta(y|x)^alpha,
    with p and p_zeta the Euler kernels of R and R_cond. Any proposal with the
    right support gives the same self-normalized weighted laws, so these are
    the exact targets of the weighted particle ensemble at every grid point.
    """
    grid = check_grid(grid, REVERSE)
    g = np.asarray(p_start, dtype=float)
    out = [g]
    for k in range(grid.size - 1):
        t, dt = grid[k], grid[k] - grid[k + 1]
        P = euler_kernel(R, t, dt).matrix()
        Pc = euler_kernel(R_cond, t, dt).matrix()
        g = g @ _geometric_kernel(P, Pc, alpha)
        out.append(g)
    return out


def tilted_expectation(g: np.ndarray, h) -> float:
    g = np.asarray(g, dtype=float)
    return float(np.dot(g, np.asarray(h, dtype=float)) / g.sum())


def path_weight_brute_force(path, grid, R, R_cond, Q, alpha) -> float:
    """prod_k p^(1-alpha) p_zeta^alpha / q along one path, entry by entry.

    Reads single entries of the dense Euler matrices, independently of the
    vectorized log-weight code.
    """
    grid = check_grid(grid, REVERSE)
    w = 1.0
    for k in range(grid.size - 1):
        t, dt = grid[k], grid[k] - grid[k + 1]
        x, y = int(path[k]), int(path[k + 1])
        p = euler_kernel(R, t, dt).matrix()[x, y]
        pc = euler_kernel(R_cond, t, dt).matrix()[x, y]
        q = euler_kernel(Q, t, dt).matrix()[x, y]
        if p == 0 or (alpha != 0 and pc == 0):
            return 0.0
        w *= p ** (1 - alpha) * pc**alpha / q
    return w
