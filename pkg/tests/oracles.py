"""Brute-force references shared by the unit and acceptance tests."""
import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.special import logsumexp


def entropic_plan_oracle(X, Y, eps):
    """Entropic plan by L-BFGS on the smooth semi-dual (independent of Sinkhorn's fixed-point iteration).

    For fixed ``g`` the optimal ``f`` is a soft-min over columns, so the
    objective is concave in ``g`` alone and evaluated with log-sum-exp.
    """
    C = cdist(X, Y, "sqeuclidean")
    n, m = C.shape
    log_a, log_b = np.full(n, -np.log(n)), np.full(m, -np.log(m))

    def plan(g):
        f = -eps * logsumexp(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
        return f, np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps)

    def neg_semi_dual(g):
        f, P = plan(g)
        return -(np.exp(log_a) @ f + np.exp(log_b) @ g), -(np.exp(log_b) - P.sum(0))

    res = minimize(neg_semi_dual, np.zeros(m), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-14, "ftol": 1e-16, "maxiter": 50000})
    _, P = plan(res.x)
    assert np.abs(P.sum(0) - 1 / m).max() < 1e-7 and np.abs(P.sum(1) - 1 / n).max() < 1e-12, "oracle failed"
    return P, float(np.sum(P * C))


def central_differences(fn, eps=1e-6):
    """Gradient of scalar ``fn`` by central differences over every entry of its argument."""
    def grad(x):
        g = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            g[i] = (fn(xp) - fn(xm)) / (2 * eps)
        return g
    return grad


def mlp_fd_relative_error(field, x, t, target):
    """Largest relative gap between backprop and finite-difference parameter gradients of the mean loss."""
    _, grads = field.loss_and_grad(x, t, target)

    def loss(vec):
        g = field.copy()
        g.set_flat(vec)
        r = target - g(x, t)
        return np.sum(r * r) / len(x)

    fd = central_differences(loss)(field.flat())
    an = np.concatenate([g.ravel() for g in grads])
    return float((np.abs(an - fd) / np.maximum(np.abs(fd), 1e-3)).max())
