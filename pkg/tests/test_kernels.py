import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from spotkit import _kernels
from spotkit._kernels import _pykernels

BACKENDS = [pytest.param(_pykernels, id="python")]
if _kernels.compiled_backend is not None:
    BACKENDS.append(pytest.param(_kernels.compiled_backend, id="compiled"))


def test_backend_selected():
    assert _kernels.BACKEND in ("compiled", "python")


@pytest.mark.parametrize("mod", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_assignment_is_optimal(mod, k, seed):
    cost = np.random.default_rng(seed).random((k, k))
    cols = mod.solve_assignment(cost)
    assert sorted(cols.tolist()) == list(range(k))
    r, c = linear_sum_assignment(cost)
    assert abs(cost[np.arange(k), cols].sum() - cost[r, c].sum()) < 1e-12


@pytest.mark.parametrize("mod", BACKENDS)
def test_assignment_empty(mod):
    assert mod.solve_assignment(np.zeros((0, 0))).shape == (0,)


@pytest.mark.parametrize("mod", BACKENDS)
def test_contingency_matches_loop(mod):
    rng = np.random.default_rng(1)
    a, b = rng.integers(0, 3, 200), rng.integers(0, 5, 200)
    ref = np.zeros((3, 5), dtype=np.int64)
    for x, y in zip(a, b):
        ref[x, y] += 1
    np.testing.assert_array_equal(mod.contingency(a, b, 3, 5), ref)


@pytest.mark.parametrize("mod", BACKENDS)
def test_majority_vote_tie_to_smallest(mod):
    labels = np.ones((4, 4), dtype=np.int64)
    labels[2:] = 3
    assert mod.majority_vote(labels, 4).tolist() == [1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backends_agree(seed):
    if _kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(seed)
    c = _kernels.compiled_backend
    cost = rng.random((5, 5))
    np.testing.assert_array_equal(c.solve_assignment(cost), _pykernels.solve_assignment(cost))
    labels = rng.integers(0, 5, (8, 8))
    np.testing.assert_array_equal(c.majority_vote(labels, 4), _pykernels.majority_vote(labels, 4))
    a, b = rng.integers(0, 4, 64), rng.integers(0, 6, 64)
    np.testing.assert_array_equal(c.contingency(a, b, 4, 6), _pykernels.contingency(a, b, 4, 6))
