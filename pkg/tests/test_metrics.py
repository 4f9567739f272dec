import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from flowvar.coupling import CouplingBatch, Pairing
from flowvar.errors import DomainError
from flowvar.fields import build_memorizing_field
from flowvar.gauss import random_gmm, sample_gmm
from flowvar.metrics import (MetricReport, entropic_ot, eval_quadrant, mmd_gaussian, sinkhorn,
                             sinkhorn_divergence, write_results)
from flowvar.io import read_rows
from flowvar.rng import make_rng

from oracles import entropic_plan_oracle


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n,m", [(4, 4), (3, 5), (5, 2)])
def test_sinkhorn_matches_brute_force_entropic_optimum(seed, n, m):
    rng = np.random.default_rng(seed)
    X, Y = rng.random((n, 2)), rng.random((m, 2))
    P_ref, cost_ref = entropic_plan_oracle(X, Y, 0.01)
    # near-tied assignments can mix slowly; the value is still accurate at the cap
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = sinkhorn(X, Y, 0.01, return_plan=True)
    assert res.marginal_error < 1e-3
    assert abs(res.value - cost_ref) < 1e-4
    assert np.abs(res.plan - P_ref).max() < 1e-3


def test_sinkhorn_singletons():
    a, b = np.array([[1.0, 2.0]]), np.array([[-1.0, 0.5]])
    assert sinkhorn(a, a).value == 0.0
    assert sinkhorn(a, b).value == pytest.approx(4.0 + 2.25, abs=1e-15)
    assert sinkhorn_divergence(a, b).value == pytest.approx(6.25, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_small_epsilon_approaches_the_assignment_optimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    X, Y = rng.random((n, 2)), rng.random((n, 2))
    C = cdist(X, Y, "sqeuclidean")
    r, c = linear_sum_assignment(C)
    lp = C[r, c].mean()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        val = sinkhorn(X, Y, 1e-3, max_iters=20_000).value
    assert val >= lp - 1e-9
    assert val - lp < 1e-3


@given(st.integers(2, 30), st.integers(0, 2**31))
def test_self_cost_bound(n, seed):
    X = np.random.default_rng(seed).normal(size=(n, 2))
    eps = 0.05
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert sinkhorn(X, X, eps, max_iters=5000).value <= eps * np.log(n) + 1e-6


def test_sinkhorn_flags_non_convergence():
    rng = make_rng(0)
    X, Y = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    with pytest.warns(RuntimeWarning):
        res = sinkhorn(X, Y, 1e-4, max_iters=5)
    assert not res.converged and res.iterations == 5
    with pytest.raises(DomainError):
        sinkhorn(X, Y, 0.0)


@pytest.mark.filterwarnings("ignore:sinkhorn divergence")
def test_divergence_vanishes_on_identical_sets_and_orders_by_distance():
    rng = make_rng(1)
    X = rng.normal(size=(60, 3))
    assert abs(sinkhorn_divergence(X, X, 0.01).value) < 1e-9
    near = sinkhorn_divergence(X, X + 0.01, 0.01).value
    far = sinkhorn_divergence(X, X + 0.1, 0.01).value
    assert 0 < near < far
    # translation by c: divergence equals |c|^2 for any epsilon
    assert far == pytest.approx(3 * 0.01, rel=1e-3)
    dual = entropic_ot(X, X + 0.1, 0.01).value
    assert dual >= far


def test_symmetric_self_transport_matches_alternating_solver():
    X = make_rng(3).normal(size=(25, 2))
    sym = entropic_ot(X, None, 0.1)
    alt = entropic_ot(X, X, 0.1, tol=1e-11, max_iters=100000)
    assert sym.converged and sym.iterations < alt.iterations
    assert sym.value == pytest.approx(alt.value, abs=1e-6)


def test_entropic_dual_equals_primal_plus_kl():
    rng = make_rng(2)
    X, Y = rng.normal(size=(30, 2)), rng.normal(size=(20, 2)) + 1.0
    eps = 0.1
    res = sinkhorn(X, Y, eps, tol=1e-12, max_iters=20000, return_plan=True)
    P = res.plan
    kl = np.sum(P * np.log(P * P.size))
    assert entropic_ot(X, Y, eps, tol=1e-12, max_iters=20000).value == pytest.approx(res.value + eps * kl, rel=1e-9)


def test_mmd_two_point_closed_form():
    a, h = 1.3, 0.7
    X = np.zeros((2, 1))
    Y = np.full((2, 1), a)
    assert mmd_gaussian(X, Y, h) == pytest.approx(2 - 2 * np.exp(-a * a / (2 * h * h)), abs=1e-10)


def test_mmd_identical_and_null_samples():
    rng = make_rng(2)
    X = rng.normal(size=(300, 2))
    assert mmd_gaussian(X, X) <= 1e-12
    Z = rng.normal(size=(4000, 2))
    assert abs(mmd_gaussian(Z[::2], Z[1::2])) < 0.005


@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 2**31))
def test_mmd_is_symmetric(n, m, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2)) + 0.5
    assert mmd_gaussian(X, Y) == mmd_gaussian(Y, X)


def test_mmd_domain_errors():
    with pytest.raises(DomainError):
        mmd_gaussian(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(DomainError):
        mmd_gaussian(np.zeros((3, 2)), np.zeros((5, 2)), bandwidth=-1.0)


def test_quadrants_for_a_perfect_memorizer(tmp_path):
    rng = make_rng(3)
    gmm = random_gmm(2, 3, rng)
    x0 = rng.normal(size=(80, 2))
    x1 = sample_gmm(gmm, 80, rng)
    steps = 20
    mem = build_memorizing_field(x0, x1, np.arange(steps) / steps)
    train = CouplingBatch(x0, x1, Pairing.random())
    reps = eval_quadrant(mem, train, rng.normal(size=(40, 2)), gmm, 80, seed=5, steps=steps, t_offset=0.0,
                         epsilon=0.01)
    assert set(reps) == {"Gen", "Mem", "True", "Data"}
    assert reps["Mem"].sinkhorn <= 1e-6 and reps["Mem"].mmd <= 1e-6
    assert reps["Data"].logprob == pytest.approx(reps["Mem"].logprob, abs=1e-9)
    path = write_results(tmp_path / "r.csv", reps, "m", 0.0, 2)
    rows = read_rows(path)
    assert len(rows) == 12 and list(rows[0]) == ["model", "sigma", "dim", "quadrant", "metric", "value", "n",
                                                 "seed"]
    with pytest.raises(DomainError):
        MetricReport("Other", 0, 0, 0, 1, 0)


def test_true_quadrant_mmd_fluctuates_around_zero():
    gmm = random_gmm(2, 2, make_rng(4))
    vals = []
    for s in range(8):
        X = sample_gmm(gmm, 200, make_rng(100 + s))
        Y = sample_gmm(gmm, 200, make_rng(200 + s))
        vals.append(mmd_gaussian(X, Y))
    assert abs(np.mean(vals)) < 3 * np.std(vals) / np.sqrt(8) + 1e-3
    assert max(abs(v) for v in vals) < 0.05
