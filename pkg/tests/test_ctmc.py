import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddsmc.ctmc import (
    FORWARD,
    REVERSE,
    PathRecord,
    RateMatrix,
    StateSpace,
    euler_kernel,
    euler_step,
    euler_transition_probs,
    kbe_evolve,
    kfe_evolve,
    reverse_rate,
    simulate_path,
    simulate_paths,
    validate_rate_matrix,
)
from ddsmc.diffusion import default_corruption, mask_transition
from ddsmc.errors import NumericalError
from ddsmc.guidance import guided_rate, true_tempered_rate
from ddsmc.verify import euler_interval_error

from conftest import make_instance, tv

SYM = np.array([[-1.0, 1.0], [1.0, -1.0]])


# --- state space -----------------------------------------------------------


@given(st.integers(2, 6), st.integers(1, 4), st.booleans(), st.data())
def test_encode_decode_bijection(V, d, mask, data):
    space = StateSpace(V, d, mask)
    assert space.total_states == (V + mask) ** d
    idx = data.draw(st.integers(0, space.total_states - 1))
    tokens = space.decode(idx)
    assert len(tokens) == d
    assert space.encode(tokens) == idx


def test_encoding_is_row_major():
    space = StateSpace(3, 2, has_mask=True)
    assert space.encode((0, 1)) == 1
    assert space.encode((1, 0)) == 4
    assert space.decode(15) == (3, 3)


# --- validation ------------------------------------------------------------


def test_validate_symmetric_generator():
    assert validate_rate_matrix(RateMatrix.constant(SYM), 0.3, 1e-12)


def test_validate_reports_broken_row_sum():
    check = validate_rate_matrix(RateMatrix.constant(np.array([[0.0, 1.0], [0.0, 0.0]])), 0.0)
    assert not check
    assert check.row == 0


def test_validate_masking_forward_rate():
    corr = default_corruption(4, 2)
    assert validate_rate_matrix(corr.forward_rate(), 0.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 50), st.floats(0.005, 0.995))
def test_generated_rates_are_valid(seed, t):
    model, corr = make_instance(2, 3, seed)
    R = corr.generative_rate(model.p0)
    for M in (corr.forward_rate(), R, guided_rate(R, model, corr, 2.5),
              true_tempered_rate(R, model, corr, 3.0)):
        assert validate_rate_matrix(M, t, 1e-9)


def test_factorized_rates_change_one_dimension():
    model, corr = make_instance(2, 3)
    M = corr.generative_rate(model.p0).matrix(0.4)
    digits = corr.space.digits
    differ = (digits[:, None, :] != digits[None, :, :]).sum(-1)
    assert np.all(M[differ >= 2] == 0)


# --- Kolmogorov equations --------------------------------------------------


def test_kfe_zero_generator_is_identity():
    p = np.array([0.2, 0.3, 0.5])
    R = RateMatrix.zero(StateSpace(3))
    assert np.allclose(kfe_evolve(R, p, 0.0, 0.9), p, atol=0)


def test_kfe_symmetric_chain_mixes():
    p = kfe_evolve(RateMatrix.constant(SYM), np.array([1.0, 0.0]), 0.0, 10.0, 2000)
    assert np.abs(p - 0.5).max() <= 1e-4


def test_kfe_masking_matches_closed_form():
    corr = default_corruption(3)
    rng = np.random.default_rng(0)
    p0 = rng.dirichlet(np.ones(3))
    p = kfe_evolve(corr.forward_rate(), corr.space.embed(p0), 0.0, 0.7)
    closed = sum(p0[x] * mask_transition([x], 0.7, corr.schedule, corr.space) for x in range(3))
    assert np.abs(p - closed).max() <= 1e-6


def test_kfe_rejects_wrong_direction():
    corr = default_corruption(3)
    with pytest.raises(ValueError):
        kfe_evolve(corr.forward_rate(), corr.space.embed(np.ones(3) / 3), 0.5, 0.2)


def test_kfe_conserves_mass_before_renormalization(small_2d):
    model, corr = small_2d
    R = corr.generative_rate(model.p0)
    raw = kfe_evolve(R, corr.marginal(model.p0, 1.0), 1.0, 0.0, 300, normalize=False)
    assert abs(raw.sum() - 1) <= 1e-8


def test_kbe_constant_and_zero_generator(small_2d):
    model, corr = small_2d
    R = corr.generative_rate(model.p0)
    S = corr.space.total_states
    assert np.abs(kbe_evolve(R, np.full(S, 2.5), 0.0, 0.7) - 2.5).max() <= 1e-9
    u = np.arange(3.0)
    assert np.array_equal(kbe_evolve(RateMatrix.zero(StateSpace(3)), u, 0.8, 0.1), u)


def test_kbe_matches_bayes_enumeration():
    model, corr = make_instance(1, 3, seed=4)
    R = corr.generative_rate(model.p0)
    t = 0.55
    u = kbe_evolve(R, corr.space.embed(model.likelihood), 0.0, t)
    # Bayes: p(x0 | x_t) from the mask kernel, enumerated directly
    a = corr.survival(t)
    for x in range(corr.space.total_states):
        post = np.array([model.p0[x0] * (a if x == x0 else (1 - a) if x == 3 else 0.0)
                         for x0 in range(3)])
        assert abs(u[x] - post @ model.likelihood / post.sum()) <= 1e-6


# --- Euler -----------------------------------------------------------------


def test_euler_zero_generator_stays():
    R = RateMatrix.zero(StateSpace(4))
    assert np.array_equal(euler_transition_probs(R, 2, 0.5, 0.1), np.eye(4)[2])
    rng = np.random.default_rng(0)
    assert all(euler_step(R, 2, 0.5, 0.1, rng) == 2 for _ in range(20))


def test_euler_two_state_formula():
    R = RateMatrix.constant(2 * SYM)
    assert np.allclose(euler_transition_probs(R, 0, 0.0, 0.1), [0.8, 0.2], atol=1e-15)


def test_euler_clamps_and_normalizes():
    R = RateMatrix.constant(np.array([[-30.0, 10.0, 20.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]]))
    p = euler_transition_probs(R, 0, 0.0, 0.1)
    assert abs(p.sum() - 1) <= 1e-12
    assert p[0] == 0 and np.allclose(p[1:], [1 / 3, 2 / 3])


def test_euler_rejects_negative_rates():
    bad = RateMatrix.constant(np.array([[1.0, -1.0], [1.0, -1.0]]))
    with pytest.raises(ValueError):
        euler_kernel(bad, 0.0, 0.1)


def test_euler_step_is_reproducible():
    R = RateMatrix.constant(2 * SYM)

    def run():
        rng = np.random.default_rng(42)
        x, seq = 0, []
        for _ in range(50):
            x = euler_step(R, x, 0.0, 0.1, rng)
            seq.append(x)
        return seq

    assert run() == run()


def test_euler_sampling_frequencies():
    model, corr = make_instance(2, 3, seed=1)
    R = corr.generative_rate(model.p0)
    x = corr.space.total_states - 1
    kernel = euler_kernel(R, 0.5, 0.1)
    p = kernel.joint_row(x)
    n = 100_000
    draws = kernel.sample(np.full(n, x), np.random.default_rng(3).random((n, 2)))
    freq = np.bincount(draws, minlength=p.size) / n
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_euler_global_error_is_first_order(small_2d):
    # halving dt over a fixed interval halves the distance to the exact law
    model, corr = small_2d
    R = corr.generative_rate(model.p0)
    start = corr.marginal(model.p0, 0.7)
    errs = [euler_interval_error(R, start, 0.7, 0.3, dt) for dt in (1e-2, 5e-3, 2.5e-3)]
    for a, b in zip(errs, errs[1:]):
        assert 1.5 <= a / b <= 2.5


def test_euler_one_step_error_is_second_order(small_2d):
    model, corr = small_2d
    R = corr.generative_rate(model.p0)
    x = corr.space.total_states - 1
    point = np.eye(corr.space.total_states)[x]
    errs = [tv(euler_transition_probs(R, x, 0.5, dt), kfe_evolve(R, point, 0.5, 0.5 - dt, 200))
            for dt in (1e-2, 5e-3)]
    assert 3.0 <= errs[0] / errs[1] <= 5.0


# --- paths -----------------------------------------------------------------


def test_single_point_path():
    path = simulate_path(RateMatrix.constant(SYM), 1, [0.3], np.random.default_rng(0))
    assert path.states.tolist() == [1] and path.jumps == []


def test_constant_path_under_zero_generator():
    R = RateMatrix.zero(StateSpace(3), REVERSE)
    path = simulate_path(R, 2, np.linspace(1, 0, 11), np.random.default_rng(0))
    assert np.all(path.states == 2) and path.jumps == []


def test_path_jumps_listed():
    path = PathRecord(np.linspace(1, 0, 5), np.array([3, 3, 1, 1, 2]))
    assert path.jumps == [(1, 3, 1), (3, 1, 2)]
    assert path.coarsen(2).states.tolist() == [3, 1, 2]


def test_reverse_masking_paths_unmask():
    model, corr = make_instance(1, 10, seed=2)
    R = corr.generative_rate(model.p0)
    final = simulate_paths(R, np.full(10_000, 10), np.linspace(1, 0, 101), seed=5)[:, -1]
    assert np.mean(final != 10) >= 0.999


def test_grid_must_match_direction():
    with pytest.raises(ValueError):
        simulate_path(RateMatrix.constant(SYM, direction=FORWARD), 0, [0.5, 0.2],
                      np.random.default_rng(0))


# --- time reversal ---------------------------------------------------------


def test_reversal_of_stationary_chain():
    space = StateSpace(2)
    R = RateMatrix.constant(SYM, space)
    Rt = reverse_rate(R, lambda t: np.array([0.5, 0.5]))
    assert Rt.direction == REVERSE
    assert np.allclose(Rt.matrix(0.3), SYM)


def test_reversal_zero_mass_without_inflow():
    space = StateSpace(3)
    F = RateMatrix.constant(np.array([[-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]]), space)
    Rt = reverse_rate(F, lambda t: np.array([0.5, 0.5, 0.0]))
    M = Rt.matrix(0.2)
    assert np.all(M[2] == 0) and np.all(M[:, 2] == 0)


def test_reversal_rejects_bad_marginal():
    F = RateMatrix.constant(SYM, StateSpace(2))
    with pytest.raises(NumericalError):
        reverse_rate(F, lambda t: np.array([np.nan, 1.0])).matrix(0.1)


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_round_trip_recovers_data(V, seed):
    model, corr = make_instance(1, V, seed)
    p1 = corr.marginal(model.p0, 1.0)
    p = kfe_evolve(corr.generative_rate(model.p0), p1, 1.0, 0.0)
    assert tv(p[corr.space.clean_indices], model.p0) <= 1e-5


def test_round_trip_two_dims():
    model, corr = make_instance(2, 4, seed=9)
    p = kfe_evolve(corr.generative_rate(model.p0), corr.marginal(model.p0, 1.0), 1.0, 0.0)
    assert tv(p[corr.space.clean_indices], model.p0) <= 1e-5
