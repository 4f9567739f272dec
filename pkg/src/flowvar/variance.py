"""Monte-Carlo CFM loss, gradient-variance estimation and the Gaussian closed forms.

Gradient variance is the variance, across independent size-``S`` batches at a
fixed time ``t``, of the batch-mean loss gradient. Two scalar reductions are
reported:

``ones``
    variance of a scalar contraction of the gradient: ``1^T g`` for the
    ``theta`` block, ``tr(G)`` for the ``Theta`` block (the contraction that
    appears when the loss is differentiated along ``x0^T (...)``), and the sum
    of entries for flat MLP gradients.
``trace``
    trace of the empirical gradient covariance.

Analytic values are per-sample (``N = 1``); divide by the batch size to compare
with a raw empirical estimate, or use :meth:`VarianceReport.per_sample`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingBatch, InterpolantSpec, PairingFactory, interpolate
from .errors import DegeneracyError, DomainError, ShapeError
from .fields import ClosedFormField, MlpField
from .gauss import GaussianSpec, RotationSpec, rotation_matrix
from .rng import child_rng, draw_seed

REDUCTIONS = ("ones", "trace")
DEFAULT_GRID = tuple(np.round(np.linspace(0.05, 0.95, 19), 10))


@dataclass
class LossSample:
    loss: float
    grad_theta: np.ndarray | None = None
    grad_Theta: np.ndarray | None = None
    grad_params: list[np.ndarray] | None = None

    def block(self, param: str) -> np.ndarray:
        if param == "theta":
            return self.grad_theta
        if param == "Theta":
            return self.grad_Theta
        if param == "all":
            if self.grad_params is not None:
                return np.concatenate([g.ravel() for g in self.grad_params])
            return np.concatenate([self.grad_Theta.ravel(), self.grad_theta])
        raise DomainError(f"unknown parameter block {param!r}")


def _draw_times(t, n, rng):
    if t is None:
        return rng.random(n)
    if callable(t):
        return np.asarray(t(n, rng), dtype=float)
    return t


def mc_loss(field_obj, batch: CouplingBatch, t=None, interp: InterpolantSpec = InterpolantSpec(),
            rng: np.random.Generator | None = None) -> LossSample:
    """Batch-mean ``||(x1 - x0) - v(x_t, t)||^2`` with exact gradients.

    ``t`` may be a scalar, one time per row, a callable ``(n, rng) -> times``,
    or ``None`` for ``Uniform(0, 1)`` per row.
    """
    tt = _draw_times(t, len(batch), rng)
    xt = interpolate(batch, tt, interp, rng)
    target = batch.displacement
    if isinstance(field_obj, ClosedFormField):
        loss, gth, gTh = field_obj.loss_and_grad(xt, tt, target)
        return LossSample(loss, grad_theta=gth, grad_Theta=gTh)
    if isinstance(field_obj, MlpField):
        loss, grads = field_obj.loss_and_grad(xt, tt, target)
        return LossSample(loss, grad_params=grads)
    v = field_obj(xt, tt)
    r = target - v
    return LossSample(float(np.sum(r * r) / len(batch)))


def _contract(g: np.ndarray, param: str) -> float:
    if param == "Theta":
        return float(np.trace(g))
    return float(np.sum(g))


def bootstrap_ci(samples, level: float = 0.95, resamples: int = 100,
                 rng: np.random.Generator | None = None, statistic=None) -> tuple[float, float]:
    """Percentile bootstrap interval of a variance statistic.

    ``samples`` is ``(B,)`` or ``(B, p)``; the default statistic is the unbiased
    variance (summed over columns for 2-D input, i.e. the covariance trace).
    """
    x = np.asarray(samples, dtype=float)
    if x.shape[0] < 2:
        raise DomainError("bootstrap needs at least 2 samples")
    if statistic is None:
        statistic = _variance_stat
    if rng is None:
        rng = np.random.default_rng(0)
    B = x.shape[0]
    idx = rng.integers(0, B, size=(resamples, B))
    stats = np.array([statistic(x[i]) for i in idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _variance_stat(x: np.ndarray) -> float:
    v = np.var(x, axis=0, ddof=1)
    return float(np.sum(v))


@dataclass
class VarianceReport:
    times: np.ndarray
    variance: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    reduction: str
    S: int
    B: int
    case: str = ""
    param: str = "theta"
    draws: np.ndarray | None = field(default=None, repr=False)

    def per_sample(self) -> np.ndarray:
        """Variance rescaled to a single-sample batch (multiply by ``S``)."""
        return self.variance * self.S

    def rows(self):
        for t, v, lo, hi in zip(self.times, self.variance, self.ci_lo, self.ci_hi):
            yield [float(t), float(v), float(lo), float(hi), self.reduction, self.S, self.B, self.case]

    CSV_HEADER = ("t", "variance", "ci_lo", "ci_hi", "reduction", "S", "B", "case")

    def to_csv(self, path):
        from .io import write_rows

        return write_rows(path, self.CSV_HEADER, self.rows())


def gradient_draws(field_obj, factory: PairingFactory, interp: InterpolantSpec, t: float,
                   S: int, B: int, base_seed: int, t_index: int = 0, param: str = "theta") -> np.ndarray:
    """``(B, p)`` matrix of batch gradients for one time; draw ``b`` uses stream ``(t_index, b)``."""
    out = []
    for b in range(B):
        rng = child_rng(base_seed, t_index, b)
        batch = factory(S, rng)
        out.append(mc_loss(field_obj, batch, t, interp, rng).block(param).ravel())
    return np.array(out)


def grad_variance_empirical(field_obj, factory: PairingFactory, interp: InterpolantSpec = InterpolantSpec(),
                            t_grid=DEFAULT_GRID, S: int = 128, B: int = 100,
                            rng: np.random.Generator | None = None, param: str = "theta",
                            case: str = "", resamples: int = 100, level: float = 0.95,
                            seed: int | None = None) -> dict[str, VarianceReport]:
    """Empirical gradient variance over a time grid, for both reductions.

    The same ``seed`` (or a seed drawn from ``rng``) makes two fields see the
    identical batches, so their curves can be compared draw-by-draw.
    """
    if S < 2 or B < 2:
        raise DomainError("need S >= 2 and B >= 2")
    if seed is None:
        seed = draw_seed(rng if rng is not None else np.random.default_rng())
    ts = np.asarray(t_grid, dtype=float)
    ones_draws = np.empty((len(ts), B))
    results = {r: ([], [], []) for r in REDUCTIONS}
    boot_rng = child_rng(seed, 1 << 30)
    for i, t in enumerate(ts):
        G = gradient_draws(field_obj, factory, interp, float(t), S, B, seed, i, param)
        shape = (-1,) if param != "Theta" else (field_obj.dim, field_obj.dim)
        c = np.array([_contract(g.reshape(shape), param) for g in G])
        ones_draws[i] = c
        for red, data in (("ones", c), ("trace", G)):
            est = _variance_stat(data)
            lo, hi = bootstrap_ci(data, level, resamples, boot_rng)
            results[red][0].append(est)
            results[red][1].append(min(lo, est))
            results[red][2].append(max(hi, est))
    reports = {}
    for red, (est, lo, hi) in results.items():
        reports[red] = VarianceReport(ts.copy(), np.array(est), np.array(lo), np.array(hi), red, S, B, case, param,
                                      draws=ones_draws if red == "ones" else None)
    return reports


# --------------------------------------------------------------------------- closed forms

CASES = ("ot-at-ot", "rot-at-ot-theta", "rot-at-ot-Theta", "rot-at-rot", "random-at-ot")


def _gaussian_moments(Theta, S_root, t, pairing_matrix=None):
    """Residual and field-input as linear maps of a standard normal vector ``w``.

    Field ``(Theta, mu)``; deterministic pairing ``x1 = A x0 + mu`` (``w = x0``) or,
    with ``pairing_matrix=None``, independent ``x1 = mu + S z`` (``w = (x0, z)``).
    Returns ``(C, K, Bm)`` with residual ``r = K w`` and ``y = x_t - t mu = Bm w``.
    """
    d = Theta.shape[0]
    I = np.eye(d)
    A_sys = I + t * Theta
    if np.linalg.svd(A_sys, compute_uv=False)[-1] < 1e-10:
        raise DegeneracyError(f"I + t*Theta is singular at t={t:.6g}", t=t)
    C = np.linalg.inv(A_sys)
    if pairing_matrix is not None:
        A = pairing_matrix
        Bm = (1.0 - t) * I + t * A
        K = (A - I) - Theta @ C @ Bm
    else:
        Bm = np.hstack([(1.0 - t) * I, t * S_root])
        K = np.hstack([-(I + (1.0 - t) * Theta @ C), C @ S_root])
    return C, K, Bm


def gaussian_grad_variance(Theta: np.ndarray, target: GaussianSpec, t: float,
                           pairing_matrix: np.ndarray | None = None, param: str = "theta",
                           reduction: str = "ones", N: int = 1) -> float:
    """Exact gradient variance of a closed-form field with ``theta = mu`` on a Gaussian pairing.

    Source ``N(0, I)``, noiseless interpolant. ``pairing_matrix`` ``A`` gives the
    deterministic pairing ``x1 = A x0 + mu``; ``None`` means independent target
    draws. Uses Isserlis' theorem for the fourth moments of the ``Theta`` block.
    """
    C, K, Bm = _gaussian_moments(np.asarray(Theta, float), target.sqrt_cov(), t, pairing_matrix)
    d = Theta.shape[0]
    ones = np.ones(d)
    P = C.T @ K            # theta-gradient per sample is -2 P w
    Q = C @ Bm             # C y = Q w
    if param == "theta":
        if reduction == "ones":
            a = P.T @ ones
            val = 4.0 * a @ a
        else:
            val = 4.0 * np.sum(P * P)
    elif param == "Theta":
        if reduction == "ones":
            H = P.T @ Q    # tr(G) = -2 w^T H w
            Hs = 0.5 * (H + H.T)
            val = 8.0 * np.sum(Hs * Hs)
        else:
            val = 4.0 * (np.sum(P * P) * np.sum(Q * Q) + np.sum((P @ Q.T) ** 2))
    else:
        raise DomainError(f"unknown parameter block {param!r}")
    return float(val) / N


def analytic_variance(case: str, target: GaussianSpec, t: float, rot: RotationSpec | None = None,
                      N: int = 1, reduction: str = "ones") -> float:
    """Closed-form gradient variance for the named (pairing, field) case."""
    if case not in CASES:
        raise DomainError(f"unknown case {case!r}; expected one of {CASES}")
    d = target.dim
    S_root = target.sqrt_cov()
    I = np.eye(d)
    theta_ot = S_root - I
    if case == "ot-at-ot":
        return gaussian_grad_variance(theta_ot, target, t, S_root, "theta", reduction, N)
    if case == "random-at-ot":
        return gaussian_grad_variance(theta_ot, target, t, None, "theta", reduction, N)
    if rot is None:
        raise DomainError(f"case {case!r} needs a rotation")
    if rot.dim != d:
        raise ShapeError("rotation dimension does not match the target")
    A = S_root @ rotation_matrix(rot)
    if case == "rot-at-ot-theta":
        return gaussian_grad_variance(theta_ot, target, t, A, "theta", reduction, N)
    if case == "rot-at-ot-Theta":
        return gaussian_grad_variance(theta_ot, target, t, A, "Theta", reduction, N)
    # rot-at-rot: field and pairing share the rotation
    return gaussian_grad_variance(A - I, target, t, A, "theta", reduction, N)


def paired_bootstrap(draws_a: np.ndarray, draws_b: np.ndarray, resamples: int = 100,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Grid-mean variance of two ``(T, B)`` draw sets under shared bootstrap resamples.

    Both fields must have been evaluated on the same batches (same seed), so
    resampling the draw index keeps the pairing intact.
    """
    a = np.asarray(draws_a, dtype=float)
    b = np.asarray(draws_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("draw sets must share a (T, B) shape")
    if rng is None:
        rng = np.random.default_rng(0)
    B = a.shape[1]
    idx = rng.integers(0, B, size=(resamples, B))
    va = np.array([np.var(a[:, i], axis=1, ddof=1).mean() for i in idx])
    vb = np.array([np.var(b[:, i], axis=1, ddof=1).mean() for i in idx])
    return va, vb


def paired_test(draws_a: np.ndarray, draws_b: np.ndarray, resamples: int = 100,
                rng: np.random.Generator | None = None) -> dict:
    """Paired t-test on bootstrap grid-mean variances; ``diff`` is ``mean(a - b)``."""
    from scipy.stats import ttest_rel

    va, vb = paired_bootstrap(draws_a, draws_b, resamples, rng)
    res = ttest_rel(va, vb)
    return {"mean_a": float(va.mean()), "mean_b": float(vb.mean()), "diff": float(np.mean(va - vb)),
            "statistic": float(res.statistic), "pvalue": float(res.pvalue)}
