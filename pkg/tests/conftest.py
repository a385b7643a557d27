import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bjmd.core import Hyperparams, ModelState, MultiViewData  # noqa: E402
from bjmd.map_solver import update_z  # noqa: E402


def random_instance(seed, M=3, K=2, N=(4, 5), alpha0=1.1, lam=1.0):
    """Small random data set with a valid state (H interior, Z at its optimum)."""
    rng = np.random.default_rng(seed)
    X = [rng.standard_normal((M, n)) for n in N]
    W = rng.standard_normal((M, K))
    H = [rng.dirichlet(np.ones(K), size=n).T for n in N]
    sigma2 = rng.uniform(0.5, 2.0, size=len(N))
    hyper = Hyperparams.default(K, lam=lam, alpha0=alpha0)
    state = ModelState(W, update_z(W, lam, 1e-10), H, sigma2)
    return MultiViewData(X), hyper, state


@pytest.fixture
def tiny():
    return random_instance(0)


def scalar_instance(x=0.0, w=0.0, z=1.0, s2=1.0, alpha0=1.0, lam=1.0):
    data = MultiViewData([np.array([[x]])])
    hyper = Hyperparams(lam=lam, alpha0=np.array([alpha0]), a0=1.0, b0=1.0)
    state = ModelState(np.array([[w]]), np.array([[z]]), [np.array([[1.0]])], np.array([s2]))
    return data, hyper, state
