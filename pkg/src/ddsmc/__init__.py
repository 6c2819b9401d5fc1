"""Tempered sampling for discrete diffusions with sequential Monte Carlo."""

from .ctmc import (
    EulerKernel,
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
    validate_rate_matrix,
)
from .diffusion import (
    Corruption,
    NoiseSchedule,
    default_corruption,
    forward_marginal,
    generative_reverse_rate,
    log_linear_schedule,
    mask_transition,
    masking_forward_rate,
)
from .errors import AbsoluteContinuityError, NumericalError
from .evaluation import empirical_distribution, kl_divergence, random_target, run_comparison
from .guidance import (
    ConditionalModel,
    conditional_likelihood,
    guided_rate,
    tempered_marginal_true,
    tempered_target,
    true_tempered_rate,
)
from .smc import (
    ParticleEnsemble,
    SmcConfig,
    ess,
    multinomial_resample,
    partial_resample,
    run_smc,
    weight_increment_continuous,
    weight_update_discrete,
    weighted_expectation,
)

__version__ = "0.1.0"
