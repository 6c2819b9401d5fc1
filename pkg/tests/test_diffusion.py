import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddsmc.ctmc import StateSpace, kfe_evolve, simulate_paths, validate_rate_matrix
from ddsmc.diffusion import (
    Corruption,
    NoiseSchedule,
    default_corruption,
    forward_marginal,
    generative_reverse_rate,
    linear_schedule,
    log_linear_schedule,
    mask_transition,
    masking_forward_rate,
)

from conftest import make_instance, tv

LN2 = linear_schedule(math.log(2))  # sigma(1) = ln 2


def test_default_schedule_residual():
    sched = log_linear_schedule()
    sched.check()
    assert sched.terminal_residual == pytest.approx(1e-3, rel=1e-12)
    assert sched.sigma(0.0) == 0.0


def test_schedule_check_rejects_bad_schedules():
    with pytest.raises(ValueError):
        linear_schedule(2.0).check()  # residual e^-2 too large
    with pytest.raises(ValueError):
        NoiseSchedule(lambda t: 1.0 + 10 * t, lambda t: 10.0).check()
    with pytest.raises(ValueError):
        NoiseSchedule(lambda t: 10 * math.sin(6 * t), lambda t: 0.0).check()


def test_mask_transition_examples():
    space = StateSpace(4, 1, has_mask=True)
    assert np.array_equal(mask_transition([2], 0.0, LN2, space), np.eye(5)[2])
    p = mask_transition([2], 1.0, LN2, space)
    assert np.allclose(p[[2, 4]], 0.5) and p.sum() == pytest.approx(1.0)
    space2 = StateSpace(3, 2, has_mask=True)
    p2 = mask_transition([1, 0], 1.0, LN2, space2)
    support = [space2.encode(s) for s in [(1, 0), (1, 3), (3, 0), (3, 3)]]
    assert np.allclose(p2[support], 0.25)
    assert p2.sum() == pytest.approx(1.0)


def test_mask_transition_rejects_mask_input():
    space = StateSpace(3, 1, has_mask=True)
    with pytest.raises(ValueError):
        mask_transition([3], 0.5, LN2, space)


def test_forward_rate_matches_closed_form():
    rng = np.random.default_rng(1)
    sched = log_linear_schedule()
    space = StateSpace(3, 2, has_mask=True)
    F = masking_forward_rate(sched, space)
    for _ in range(20):
        x0 = rng.integers(0, 3, 2)
        t = rng.uniform(0.05, 0.95)
        start = np.zeros(space.total_states)
        start[space.encode(x0)] = 1.0
        p = kfe_evolve(F, start, 0.0, t, 400)
        assert np.abs(p - mask_transition(x0, t, sched, space)).max() <= 1e-6


def test_forward_rate_structure():
    space = StateSpace(3, 2, has_mask=True)
    F = masking_forward_rate(log_linear_schedule(), space)
    masked = space.encode((3, 3))
    assert np.all(F.offdiag(0.4)[masked] == 0)
    for t in np.random.default_rng(0).uniform(0, 1, 100):
        assert validate_rate_matrix(F, t)


def test_forward_marginal_endpoints():
    model, corr = make_instance(2, 3)
    p = forward_marginal(model.p0, 0.0, corr.schedule, corr.space)
    assert np.allclose(p[corr.space.clean_indices], model.p0, atol=1e-15)
    p1 = corr.marginal(model.p0, 1.0)
    assert p1[-1] >= (1 - 1e-3) ** 2 - 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_one_dim_unmasked_mass_is_survival(seed, t):
    model, corr = make_instance(1, 5, seed)
    p = corr.marginal(model.p0, t)
    assert abs(p[:5].sum() - math.exp(-corr.schedule.sigma(t))) <= 1e-12


def test_forward_marginal_matches_ode():
    model, corr = make_instance(2, 3, seed=3)
    p = kfe_evolve(corr.forward_rate(), corr.space.embed(model.p0), 0.0, 0.6)
    assert np.abs(p - corr.marginal(model.p0, 0.6)).max() <= 1e-6


def test_generative_round_trip():
    model, corr = make_instance(2, 3, seed=5)
    R = generative_reverse_rate(model.p0, corr.schedule, corr.space)
    p = kfe_evolve(R, corr.marginal(model.p0, 1.0), 1.0, 0.0)
    assert tv(p[corr.space.clean_indices], model.p0) <= 1e-5


def test_generative_rate_only_unmasks():
    model, corr = make_instance(2, 3, seed=6)
    off = corr.generative_rate(model.p0).offdiag(0.5)
    clean = corr.space.num_masked == 0
    assert np.all(off[clean] == 0)
    assert np.all(off[~clean].sum(axis=(1, 2)) > 0)


def test_symmetric_unmask_rates():
    corr = default_corruption(2)
    R = corr.generative_rate(np.array([0.5, 0.5]))
    for t in np.linspace(0.05, 1.0, 10):
        row = R.row(t, 2)
        assert row[0] == pytest.approx(row[1], rel=1e-14)


def test_generative_samples_match_data():
    model, corr = make_instance(1, 10, seed=7)
    R = corr.generative_rate(model.p0)
    n = 100_000
    start = np.random.default_rng(0).choice(corr.space.total_states, n,
                                            p=corr.marginal(model.p0, 1.0))
    final = simulate_paths(R, start, np.linspace(1, 0, 201), seed=11)[:, -1]
    freq = np.bincount(final, minlength=11)[:10] / n
    assert tv(freq, model.p0) <= 0.02


def test_uniform_corruption_round_trip():
    corr = Corruption(4, 1, linear_schedule(8.0), kind="uniform")
    p0 = np.array([0.6, 0.2, 0.15, 0.05])
    p1 = corr.marginal(p0, 1.0)
    assert np.allclose(p1, 0.25, atol=1e-3)
    p = kfe_evolve(corr.generative_rate(p0), p1, 1.0, 0.0, 2000)
    assert tv(p, p0) <= 1e-6
