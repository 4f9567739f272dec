"""Sample-based distribution distances and the four-way evaluation (Gen / Mem / True / Data)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .coupling import CouplingBatch
from .errors import DomainError
from .gauss import GmmSpec, gmm_log_prob, sample_gmm
from .rng import child_rng

QUADRANTS = ("Gen", "Mem", "True", "Data")
METRICS = ("logprob", "mmd", "sinkhorn")
RESULTS_HEADER = ("model", "sigma", "dim", "quadrant", "metric", "value", "n", "seed")
DEFAULT_EPSILON = 1e-3


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise distance of the pooled sample."""
    Z = np.vstack([X, Y])
    h = float(np.median(pdist(Z)))
    return h if h > 0 else 1.0


def mmd_gaussian(X: np.ndarray, Y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased estimate of squared MMD with kernel ``exp(-|a-b|^2 / (2 h^2))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise DomainError("MMD needs at least two points in each sample")
    if X.shape[1] != Y.shape[1]:
        raise DomainError("samples differ in dimension")
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DomainError("bandwidth must be positive")
    g = -0.5 / (h * h)
    kxx = np.exp(g * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(g * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(g * cdist(X, Y, "sqeuclidean"))
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    # correctly rounded sum is order-free, so mmd(X, Y) == mmd(Y, X) bitwise
    sxy = math.fsum(kxy.ravel()) / (n * m)
    return float(sxx + syy - 2.0 * sxy)


@dataclass
class SinkhornResult:
    value: float
    iterations: int
    converged: bool
    marginal_error: float
    plan: np.ndarray | None = None

    def __float__(self):
        return self.value


def _lse_rows(M: np.ndarray, buf: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of ``M`` using ``buf`` as scratch space."""
    mx = M.max(axis=1)
    np.subtract(M, mx[:, None], out=buf)
    np.exp(buf, out=buf)
    return mx + np.log(buf.sum(axis=1))


def _potentials(C: np.ndarray, epsilon: float, max_iters: int, tol: float, scaling: float | None,
                symmetric: bool = False):
    """Log-domain Sinkhorn potentials ``(f, g, iterations, row-marginal L1 error)`` for uniform weights.

    ``symmetric`` (``C`` the cost of a point set with itself) keeps a single
    potential and averages it with its Sinkhorn image, which converges far
    faster than alternating updates on this problem.
    """
    n, m = C.shape
    log_a, log_b = -np.log(n), -np.log(m)
    schedule = []
    if scaling is not None:
        if not 0.0 < scaling < 1.0:
            raise DomainError("scaling must lie in (0, 1)")
        e = float(C.max())
        while e > epsilon:
            schedule.append(e)
            e *= scaling
    Ct = np.ascontiguousarray(C.T)
    buf = np.empty_like(C)
    buf_t = np.empty_like(Ct)
    work = np.empty_like(C)
    work_t = np.empty_like(Ct)
    f = np.zeros(n)
    g = np.zeros(m)

    def row_lse(pot, e):            # log sum_j exp((g_j - C_ij) / e)
        np.subtract(pot[None, :], C, out=work)
        np.divide(work, e, out=work)
        return _lse_rows(work, buf)

    def col_lse(pot, e):            # log sum_i exp((f_i - C_ij) / e)
        np.subtract(pot[None, :], Ct, out=work_t)
        np.divide(work_t, e, out=work_t)
        return _lse_rows(work_t, buf_t)

    it = 0
    if symmetric:
        for e in schedule[: max(max_iters - 1, 0)]:
            f = 0.5 * (f + e * (log_a - row_lse(f, e)))
            it += 1
        err = np.inf
        while True:
            lse = row_lse(f, epsilon)
            if it > 0:
                err = float(np.abs(np.exp(f / epsilon + lse) - 1.0 / n).sum())
                if err < tol or it >= max_iters:
                    break
            f = 0.5 * (f + epsilon * (log_a - lse))
            it += 1
        return f, f, it, err
    for e in schedule[: max(max_iters - 1, 0)]:
        f = e * (log_a - row_lse(g, e))
        g = e * (log_b - col_lse(f, e))
        it += 1
    err = np.inf
    while True:
        lse = row_lse(g, epsilon)
        if it > 0:
            # row marginal of the current plan comes for free before the f-update
            err = float(np.abs(np.exp(f / epsilon + lse) - 1.0 / n).sum())
            if err < tol or it >= max_iters:
                break
        f = epsilon * (log_a - lse)
        g = epsilon * (log_b - col_lse(f, epsilon))
        it += 1
    return f, g, it, err


def _prepare(X, Y, epsilon):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if len(X) < 1 or len(Y) < 1:
        raise DomainError("sinkhorn needs non-empty samples")
    if X.shape[1] != Y.shape[1]:
        raise DomainError("samples differ in dimension")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    return cdist(X, Y, "sqeuclidean")


def sinkhorn(X: np.ndarray, Y: np.ndarray, epsilon: float = DEFAULT_EPSILON, max_iters: int = 1000,
             tol: float = 1e-6, return_plan: bool = False, scaling: float | None = 0.5) -> SinkhornResult:
    """Transport cost ``<P, C>`` of the entropic plan between uniform empirical measures.

    ``C`` is the squared Euclidean cost, ``epsilon`` is on the raw cost scale.
    Iterations run on log-potentials. The regulariser is annealed
    geometrically (factor ``scaling``) from the cost diameter down to
    ``epsilon`` with one update per stage, then held at ``epsilon`` until the
    L1 violation of the row marginal drops below ``tol``. Annealing stages
    count towards ``max_iters``; ``scaling=None`` disables them.
    """
    C = _prepare(X, Y, epsilon)
    n, m = C.shape
    if n == 1 or m == 1:
        P = np.full((n, m), 1.0 / (n * m))
        return SinkhornResult(float(np.sum(P * C)), 0, True, 0.0, P if return_plan else None)
    f, g, it, err = _potentials(C, epsilon, max_iters, tol, scaling)
    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    converged = err < tol
    if not converged:
        warnings.warn(f"sinkhorn did not converge in {it} iterations (marginal error {err:.3g})",
                      RuntimeWarning, stacklevel=2)
    return SinkhornResult(float(np.sum(P * C)), it, converged, err, P if return_plan else None)


def entropic_ot(X: np.ndarray, Y: np.ndarray | None = None, epsilon: float = DEFAULT_EPSILON, max_iters: int = 1000,
                tol: float = 1e-6, scaling: float | None = 0.5) -> SinkhornResult:
    """Regularised objective ``<P, C> + eps KL(P | a b^T)`` at the optimum, read off the dual ``<a, f> + <b, g>``.

    ``Y=None`` solves the self-transport problem of ``X`` with the symmetric update.
    """
    symmetric = Y is None
    C = _prepare(X, X if symmetric else Y, epsilon)
    n, m = C.shape
    if n == 1 or m == 1:
        return SinkhornResult(float(C.mean()), 0, True, 0.0)
    f, g, it, err = _potentials(C, epsilon, max_iters, tol, scaling, symmetric)
    # potentials carry the log-weights; undo that shift to get the dual value
    return SinkhornResult(float(f.mean() + g.mean() + epsilon * np.log(n * m)), it, err < tol, err)


def sinkhorn_divergence(X: np.ndarray, Y: np.ndarray, epsilon: float = DEFAULT_EPSILON, max_iters: int = 1000,
                        tol: float = 1e-6, scaling: float | None = 0.5) -> SinkhornResult:
    """Debiased ``OT_eps(X, Y) - (OT_eps(X, X) + OT_eps(Y, Y)) / 2``; zero when the point sets coincide."""
    parts = [entropic_ot(A, B, epsilon, max_iters, tol, scaling) for A, B in ((X, Y), (X, None), (Y, None))]
    value = parts[0].value - 0.5 * (parts[1].value + parts[2].value)
    converged = all(p.converged for p in parts)
    err = max(p.marginal_error for p in parts)
    if not converged:
        warnings.warn(f"sinkhorn divergence: a solve stopped at the iteration cap (marginal error {err:.3g})",
                      RuntimeWarning, stacklevel=2)
    return SinkhornResult(max(value, 0.0), max(p.iterations for p in parts), converged, err)


def mean_log_prob(gmm: GmmSpec, X: np.ndarray) -> float:
    """Negative mean log-density, reported as a positive number."""
    return float(-np.mean(gmm_log_prob(gmm, X)))


@dataclass
class MetricReport:
    quadrant: str
    logprob: float
    mmd: float
    sinkhorn: float
    n: int
    seed: int
    mmd_raw: float = float("nan")
    bandwidth: float = float("nan")
    sinkhorn_converged: bool = True

    def __post_init__(self):
        if self.quadrant not in QUADRANTS:
            raise DomainError(f"quadrant must be one of {QUADRANTS}")

    def rows(self, model: str, sigma: float, dim: int):
        for metric in METRICS:
            yield [model, sigma, dim, self.quadrant, metric, getattr(self, metric), self.n, self.seed]


def metric_report(quadrant: str, X: np.ndarray, Y: np.ndarray, gmm: GmmSpec, seed: int,
                  epsilon: float = DEFAULT_EPSILON, max_iters: int = 1000) -> MetricReport:
    """``logprob`` scores ``X`` under ``gmm``; ``mmd`` and ``sinkhorn`` compare ``X`` with ``Y``.

    The ``sinkhorn`` entry is the debiased divergence, so identical point sets
    score zero regardless of ``epsilon``.
    """
    h = median_bandwidth(X, Y)
    raw = mmd_gaussian(X, Y, h)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sk = sinkhorn_divergence(X, Y, epsilon, max_iters)
    return MetricReport(quadrant, mean_log_prob(gmm, X), max(raw, 0.0), sk.value, len(X), seed,
                        mmd_raw=raw, bandwidth=h, sinkhorn_converged=sk.converged)


def eval_quadrant(field_fn, train: CouplingBatch, heldout_x0: np.ndarray, gmm: GmmSpec, n: int, seed: int,
                  steps: int = 100, t_offset: float | None = None, epsilon: float = DEFAULT_EPSILON,
                  max_iters: int = 1000) -> dict[str, MetricReport]:
    """Gen / Mem / True / Data reports.

    Gen: integrated held-out sources against fresh target draws. Mem: integrated
    training sources against their paired training targets. True: two
    independent target draws. Data: training targets against fresh target draws.
    At most ``n`` rows enter each comparison.
    """
    from .flow import integrate_endpoints

    if heldout_x0.shape[1] != gmm.dim or train.dim != gmm.dim:
        raise DomainError("dimensions of data and target mixture differ")
    k_tr = min(n, len(train))
    k_ho = min(n, len(heldout_x0))
    gen = integrate_endpoints(field_fn, heldout_x0[:k_ho], steps, t_offset)
    mem = integrate_endpoints(field_fn, train.x0[:k_tr], steps, t_offset)
    true_a = sample_gmm(gmm, n, child_rng(seed, 101))
    true_b = sample_gmm(gmm, n, child_rng(seed, 102))
    true_c = sample_gmm(gmm, n, child_rng(seed, 103))
    return {
        "Gen": metric_report("Gen", gen, true_a[:k_ho], gmm, seed, epsilon, max_iters),
        "Mem": metric_report("Mem", mem, train.x1[:k_tr], gmm, seed, epsilon, max_iters),
        "True": metric_report("True", true_b, true_c, gmm, seed, epsilon, max_iters),
        "Data": metric_report("Data", train.x1[:k_tr], true_a[:k_tr], gmm, seed, epsilon, max_iters),
    }


def write_results(path, reports: dict[str, MetricReport], model: str, sigma: float, dim: int, append: bool = True):
    from .io import append_rows, write_rows

    rows = [r for q in QUADRANTS if q in reports for r in reports[q].rows(model, sigma, dim)]
    fn = append_rows if append else write_rows
    return fn(path, RESULTS_HEADER, rows)
