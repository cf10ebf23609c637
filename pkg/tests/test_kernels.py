import numpy as np
import pytest

from overlasso import kernels
from overlasso.model import ProblemInstance, generate_instance, make_contiguous_groups, random_group_collection
from overlasso.norm import overlap_norm
from overlasso.solver import SolverConfig, fit, lambda_max

pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")


def test_backend_names():
    assert kernels.BACKEND in ("cython", "python")
    assert kernels.get_backend("python").__name__.endswith("_kernels_py")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("overlap", [1, 3, 6])
def test_fit_agrees(overlap):
    G = make_contiguous_groups(48, 8, overlap)
    inst = generate_instance(48, 30, G, 2, 0.05, seed=overlap)
    cfg = SolverConfig(lam=0.05 * lambda_max(inst, G), tolerance=1e-10)
    a = fit(inst, G, cfg, backend="cython")
    b = fit(inst, G, cfg, backend="python")
    assert a.converged and b.converged
    assert a.iterations == b.iterations
    assert np.max(np.abs(a.beta_hat - b.beta_hat)) < 1e-10
    assert np.allclose(a.history, b.history, rtol=1e-12, atol=0)


def test_norm_agrees():
    rng = np.random.default_rng(0)
    for _ in range(20):
        G = random_group_collection(8, 5, rng)
        beta = rng.standard_normal(8)
        a = overlap_norm(beta, G, backend="cython")
        b = overlap_norm(beta, G, backend="python")
        assert a.iterations == b.iterations
        assert abs(a.value - b.value) < 1e-10


def test_frozen_block_agrees(rng):
    X = rng.standard_normal((20, 6))
    inst = ProblemInstance(X, rng.standard_normal(20))
    G = make_contiguous_groups(6, 2, 1)
    w = np.array([1.0, np.inf, 0.5])
    a = fit(inst, G, SolverConfig(lam=0.05, weights=w), backend="cython")
    b = fit(inst, G, SolverConfig(lam=0.05, weights=w), backend="python")
    assert not np.any(a.beta_hat[2:4]) and not np.any(b.beta_hat[2:4])
    assert np.max(np.abs(a.beta_hat - b.beta_hat)) < 1e-10
