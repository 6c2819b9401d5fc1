import numpy as np
import pytest

from ddsmc.diffusion import default_corruption
from ddsmc.evaluation import random_target


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def make_instance(num_dims, vocab_size, seed=0, **kw):
    model = random_target(num_dims, vocab_size, np.random.SeedSequence([2024, seed]), **kw)
    return model, default_corruption(vocab_size, num_dims)


@pytest.fixture
def small_2d():
    return make_instance(2, 3)


@pytest.fixture
def small_1d():
    return make_instance(1, 4)
