"""Vector fields v(x, t).

Every field is a callable ``field(x, t)`` taking an ``(n, d)`` batch (or a
single d-vector) and a scalar time or one time per row, and returning
displacement velocities of the same shape as ``x``.

* :class:`ClosedFormField` -- ``theta + Theta (I + t Theta)^{-1} (x - t theta)``,
  the linear-rational family that contains the Gaussian OT field and its
  rotated variants.
* :class:`MlpField` -- 3-layer SELU perceptron on ``[x, t]`` with hand-written
  backprop.
* :class:`MemorizingField` -- nearest-key lookup over stored ``(x_t, t)``
  tuples; reproduces a finite training coupling with zero loss.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import AmbiguityError, DegeneracyError, DomainError, NumericError, ShapeError, SingularityError
from .gauss import GaussianSpec, RotationSpec, rotation_matrix

SINGULAR_TOL = 1e-10
FORMAT_VERSION = 1

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError(f"expected a d-vector or an (n, d) batch, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------- closed form


@dataclass
class ClosedFormField:
    Theta: np.ndarray
    theta: np.ndarray
    kind: str = field(default="closed_form", init=False)

    def __post_init__(self):
        self.Theta = np.atleast_2d(np.asarray(self.Theta, dtype=float))
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        d = self.theta.size
        if self.Theta.shape != (d, d):
            raise ShapeError(f"Theta {self.Theta.shape} does not match theta ({d},)")

    @property
    def dim(self) -> int:
        return self.theta.size

    def copy(self) -> "ClosedFormField":
        return ClosedFormField(self.Theta.copy(), self.theta.copy())

    @property
    def params(self) -> list[np.ndarray]:
        return [self.Theta, self.theta]

    def system(self, t) -> np.ndarray:
        """``I + t Theta``; stacked ``(n, d, d)`` when ``t`` is an array."""
        t = np.asarray(t, dtype=float)
        return np.eye(self.dim) + t[..., None, None] * self.Theta

    def _checked_system(self, t) -> np.ndarray:
        A = self.system(t)
        smin = np.linalg.svd(A, compute_uv=False)[..., -1]
        bad = smin < SINGULAR_TOL
        if np.any(bad):
            tb = float(np.asarray(t, dtype=float).reshape(-1)[np.argmax(np.reshape(bad, -1))])
            raise SingularityError(f"I + t*Theta is singular at t={tb:.6g}", t=tb)
        return A

    def singular_times(self) -> np.ndarray:
        """Times in (0, 1] where ``I + t Theta`` loses rank (``-1/t`` is a real eigenvalue)."""
        lam = np.linalg.eigvals(self.Theta)
        real = lam[np.abs(lam.imag) <= 1e-9].real
        real = real[real <= -1.0 + 1e-12]
        return np.sort(np.unique(np.round(-1.0 / real, 12)))

    def _solve(self, A, rhs, transpose=False):
        # rhs is (n, d); A is (d, d) or (n, d, d)
        if A.ndim == 2:
            M = A.T if transpose else A
            return np.linalg.solve(M, rhs.T).T
        M = np.swapaxes(A, -1, -2) if transpose else A
        return np.linalg.solve(M, rhs[..., None])[..., 0]

    def __call__(self, x, t):
        x, single = _as_batch(x)
        A = self._checked_system(t)
        tc = np.asarray(t, dtype=float)
        tc = tc[:, None] if tc.ndim == 1 else tc
        z = self._solve(A, x - tc * self.theta)
        v = self.theta + z @ self.Theta.T
        return v[0] if single else v

    def loss_and_grad(self, xt: np.ndarray, t, target: np.ndarray):
        """Mean squared residual ``||target - v(xt, t)||^2`` and its exact gradients.

        Returns ``(loss, grad_theta, grad_Theta)``. With ``C = (I + t Theta)^{-1}``,
        ``y = xt - t theta`` and residual ``r``, the per-row gradients are
        ``-2 C^T r`` and ``-2 (C^T r)(C y)^T``.
        """
        xt, _ = _as_batch(xt)
        A = self._checked_system(t)
        tc = np.asarray(t, dtype=float)
        tc = tc[:, None] if tc.ndim == 1 else tc
        cy = self._solve(A, xt - tc * self.theta)
        r = target - (self.theta + cy @ self.Theta.T)
        ctr = self._solve(A, r, transpose=True)
        S = xt.shape[0]
        loss = float(np.sum(r * r) / S)
        g_theta = -2.0 * ctr.sum(axis=0) / S
        g_Theta = -2.0 * ctr.T @ cy / S
        return loss, g_theta, g_Theta


def cf_optimal_params(target: GaussianSpec) -> ClosedFormField:
    """OT field from N(0, I) to ``target``: ``Theta = M^{1/2} - I``, ``theta = mu``."""
    return ClosedFormField(target.sqrt_cov() - np.eye(target.dim), target.mean.copy())


def cf_rot_params(target: GaussianSpec, rot: RotationSpec) -> ClosedFormField:
    """Pair-optimal field for the rotated pairing ``M^{1/2} R x0 + mu``."""
    f = ClosedFormField(target.sqrt_cov() @ rotation_matrix(rot) - np.eye(target.dim), target.mean.copy())
    bad = f.singular_times()
    if bad.size:
        raise DegeneracyError(
            f"rotated field is singular at t={bad[0]:.6g} (interpolants of this pairing all meet there)",
            t=float(bad[0]),
        )
    return f


# --------------------------------------------------------------------------- MLP


def selu(z):
    return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def selu_grad(z):
    return SELU_LAMBDA * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


@dataclass
class MlpField:
    """``[x, t] -> Linear -> SELU -> Linear -> SELU -> Linear``.

    ``params`` is ``[W1, b1, W2, b2, W3, b3]`` with ``W`` stored as
    ``(fan_in, fan_out)``.
    """

    params: list[np.ndarray]
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        self.params = [np.asarray(p, dtype=float) for p in self.params]
        if len(self.params) != 6:
            raise ShapeError("an MLP field has exactly three weight/bias pairs")
        W1, _, _, _, W3, _ = self.params
        if W1.shape[0] != W3.shape[1] + 1:
            raise ShapeError("input width must be output width + 1 (the time input)")

    @property
    def dim(self) -> int:
        return self.params[4].shape[1]

    @property
    def width(self) -> int:
        return self.params[0].shape[1]

    def copy(self) -> "MlpField":
        return MlpField([p.copy() for p in self.params])

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params:
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    def _inputs(self, x, t):
        x, single = _as_batch(x)
        t = np.asarray(t, dtype=float)
        tcol = np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (x.shape[0], 1))
        inp = np.concatenate([x, tcol], axis=1)
        if not np.all(np.isfinite(inp)):
            raise NumericError("non-finite input to MLP field")
        return inp, single

    def forward(self, x, t):
        inp, single = self._inputs(x, t)
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = inp @ W1 + b1
        h1 = selu(z1)
        z2 = h1 @ W2 + b2
        h2 = selu(z2)
        out = h2 @ W3 + b3
        return out, (inp, z1, h1, z2, h2, single)

    def __call__(self, x, t):
        out, cache = self.forward(x, t)
        if not np.all(np.isfinite(out)):
            raise NumericError("MLP field produced non-finite output")
        return out[0] if cache[-1] else out

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of ``sum(upstream * output)``: ``(param_grads, grad_x)``."""
        inp, z1, h1, z2, h2, _ = cache
        g = np.atleast_2d(upstream)
        W1, _, W2, _, W3, _ = self.params
        gW3 = h2.T @ g
        gb3 = g.sum(axis=0)
        gz2 = (g @ W3.T) * selu_grad(z2)
        gW2 = h1.T @ gz2
        gb2 = gz2.sum(axis=0)
        gz1 = (gz2 @ W2.T) * selu_grad(z1)
        gW1 = inp.T @ gz1
        gb1 = gz1.sum(axis=0)
        gx = gz1 @ W1[:-1].T
        return [gW1, gb1, gW2, gb2, gW3, gb3], gx

    def mlp_backward(self, x, t, upstream):
        _, cache = self.forward(x, t)
        grads, gx = self.backward(cache, upstream)
        return grads, (gx[0] if cache[-1] else gx)

    def loss_and_grad(self, xt, t, target):
        """Mean squared residual and the flat parameter gradient."""
        out, cache = self.forward(xt, t)
        r = target - out
        S = out.shape[0]
        loss = float(np.sum(r * r) / S)
        grads, _ = self.backward(cache, -2.0 * r / S)
        return loss, grads


def init_mlp(dim: int, rng: np.random.Generator, width: int = 64) -> MlpField:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    sizes = [dim + 1, width, width, dim]
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        params.append(rng.uniform(-lim, lim, fan_out))
    return MlpField(params)


# --------------------------------------------------------------------------- memorizing lookup


@dataclass
class MemorizingField:
    """Lookup field over stored ``(x_t, t) -> x1 - x0`` tuples.

    Queries return the displacement of the nearest stored key in the joint
    ``(x, t)`` Euclidean metric; exactly on a key this is that key's stored
    displacement. Off the keys the nearest-key value is a fallback and carries
    no guarantee.
    """

    keys: np.ndarray
    times: np.ndarray
    displacements: np.ndarray
    tol: float = 1e-9
    kind: str = field(default="memorizing", init=False)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=float)
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.displacements = np.asarray(self.displacements, dtype=float)
        self._tree = cKDTree(np.column_stack([self.keys, self.times]))

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def lookup(self, x, t):
        x, single = _as_batch(x)
        tcol = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
        dist, idx = self._tree.query(np.column_stack([x, tcol]))
        return (idx[0], dist[0]) if single else (idx, dist)

    def __call__(self, x, t):
        x_arr = np.asarray(x, dtype=float)
        idx, _ = self.lookup(x_arr, t)
        return self.displacements[idx]


def build_memorizing_field(z0: np.ndarray, z1: np.ndarray, times, tol: float = 1e-9) -> MemorizingField:
    """Store every ``(z_t^{(i,j)}, t^{(i,j)})`` key of a doubly indexed dataset.

    ``times`` is either an ``(n, m)`` array of per-pair times or an ``(m,)`` grid
    shared by all pairs. Raises :class:`AmbiguityError` if two keys closer than
    ``tol`` carry different displacements.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    if z0.shape != z1.shape:
        raise ShapeError("z0 and z1 must have the same shape")
    n = z0.shape[0]
    times = np.asarray(times, dtype=float)
    if times.ndim == 1:
        times = np.broadcast_to(times, (n, times.size))
    if times.shape[0] != n:
        raise ShapeError(f"times must have one row per pair, got {times.shape}")
    if np.any(times < 0) or np.any(times > 1):
        raise DomainError("stored times must lie in [0, 1]")
    m = times.shape[1]
    t = times.reshape(-1)
    a = np.repeat(z0, m, axis=0)
    b = np.repeat(z1, m, axis=0)
    tc = t[:, None]
    keys = (1.0 - tc) * a + tc * b
    disp = b - a
    fieldobj = MemorizingField(keys, t, disp, tol)
    pairs = fieldobj._tree.query_pairs(tol, output_type="ndarray")
    if len(pairs):
        clash = np.any(disp[pairs[:, 0]] != disp[pairs[:, 1]], axis=1)
        if np.any(clash):
            i, j = pairs[np.argmax(clash)]
            raise AmbiguityError(
                f"stored keys {i} and {j} lie within {tol} at t={t[i]:.6g} but carry different displacements"
            )
    return fieldobj


def doubly_indexed_residuals(field_fn, z0, z1, times) -> np.ndarray:
    """Residuals ``(z1 - z0) - v(z_t, t)`` over all ``(i, j)`` tuples, shape ``(n*m, d)``."""
    z0 = np.atleast_2d(z0)
    z1 = np.atleast_2d(z1)
    times = np.asarray(times, dtype=float)
    if times.ndim == 1:
        times = np.broadcast_to(times, (z0.shape[0], times.size))
    m = times.shape[1]
    t = times.reshape(-1)
    a = np.repeat(z0, m, axis=0)
    b = np.repeat(z1, m, axis=0)
    tc = t[:, None]
    keys = (1.0 - tc) * a + tc * b
    return (b - a) - field_fn(keys, t)


# --------------------------------------------------------------------------- serialization


def field_to_dict(f) -> dict:
    if isinstance(f, ClosedFormField):
        return {"format": "flowvar.field", "version": FORMAT_VERSION, "kind": f.kind, "dim": f.dim,
                "Theta": {"shape": list(f.Theta.shape), "data": f.Theta.ravel().tolist()},
                "theta": f.theta.tolist()}
    if isinstance(f, MlpField):
        layers = []
        for W, b in zip(f.params[0::2], f.params[1::2]):
            layers.append({"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()})
        return {"format": "flowvar.field", "version": FORMAT_VERSION, "kind": f.kind, "dim": f.dim,
                "activation": "selu", "layers": layers}
    if isinstance(f, MemorizingField):
        return {"format": "flowvar.field", "version": FORMAT_VERSION, "kind": f.kind, "dim": f.dim,
                "tol": f.tol, "keys": f.keys.tolist(), "times": f.times.tolist(),
                "displacements": f.displacements.tolist()}
    raise TypeError(f"cannot serialize {type(f).__name__}")


def field_from_dict(d: dict):
    if d.get("format") != "flowvar.field":
        raise DomainError("not a flowvar field document")
    if d.get("version") != FORMAT_VERSION:
        raise DomainError(f"unsupported field format version {d.get('version')}")
    kind = d["kind"]
    if kind == "closed_form":
        Th = np.array(d["Theta"]["data"]).reshape(d["Theta"]["shape"])
        return ClosedFormField(Th, np.array(d["theta"]))
    if kind == "mlp":
        params = []
        for layer in d["layers"]:
            params.append(np.array(layer["weight"]).reshape(layer["shape"]))
            params.append(np.array(layer["bias"]))
        return MlpField(params)
    if kind == "memorizing":
        return MemorizingField(np.array(d["keys"]), np.array(d["times"]), np.array(d["displacements"]), d["tol"])
    raise DomainError(f"unknown field kind {kind!r}")


def save_field(f, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(field_to_dict(f)))
    return path


def load_field(path):
    return field_from_dict(json.loads(Path(path).read_text()))
