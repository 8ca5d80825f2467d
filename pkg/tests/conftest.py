import numpy as np
import pytest

from intou_gql import PsiParameterization, RngStream, Scenario, ThetaParams, make_dataset, simulate_dataset

TRUE_THETA = ThetaParams([2.0, -1.0, 0.5], [3.01], 1.3, 0.16, 0.25)


def random_blocks(rng, n_ind, p_beta=3, p_b=1, n_range=(2, 6), t_scale=3.0):
    blocks = []
    for _ in range(n_ind):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        times = np.sort(rng.uniform(0.1, t_scale, n)) + np.arange(n) * 1e-3
        x = rng.normal(size=(n, p_beta))
        x[:, 0] = 1.0
        z = np.ones((n, p_b)) if p_b == 1 else np.column_stack([np.ones(n), times] + [rng.normal(size=n) for _ in range(p_b - 2)])
        y = rng.normal(size=n) * 2.0
        blocks.append((times, x, z, y))
    return blocks


def random_theta(rng, p_beta=3, psi=PsiParameterization.SCALAR, p_b=1):
    beta = rng.normal(size=p_beta)
    if psi is PsiParameterization.SCALAR:
        gamma = [rng.uniform(0.2, 3.0)]
    elif psi is PsiParameterization.DIAGONAL_LOG:
        gamma = rng.normal(scale=0.5, size=p_b)
    else:
        gamma = rng.normal(scale=0.4, size=p_b * (p_b + 1) // 2)
    return ThetaParams(beta, gamma, rng.uniform(0.3, 3.0), rng.uniform(0.1, 2.0), rng.uniform(0.1, 1.0), psi)


@pytest.fixture
def small_dataset():
    return make_dataset(random_blocks(np.random.default_rng(0), 10))


@pytest.fixture(scope="session")
def scenario_dataset():
    return simulate_dataset(RngStream(5), Scenario(n_individuals=120))
