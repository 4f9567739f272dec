"""Gaussian and Gaussian-mixture primitives: PD square roots, rotations, sampling, densities."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, ShapeError

SYM_TOL = 1e-10
PD_TOL = 1e-12


def _check_symmetric(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0.0, atol=SYM_TOL):
        raise ShapeError(f"{name} is not symmetric within {SYM_TOL}")
    return M


def sqrt_pd(M: np.ndarray) -> np.ndarray:
    """Principal (symmetric) square root of a symmetric positive-definite matrix."""
    M = _check_symmetric(M)
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() <= PD_TOL:
        raise DomainError(f"matrix is not positive definite (smallest eigenvalue {w.min():.3e})")
    S = (U * np.sqrt(w)) @ U.T
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _check_symmetric(self.cov, "cov")
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"mean {mean.shape} and cov {cov.shape} disagree")
        if np.linalg.eigvalsh(cov).min() <= PD_TOL:
            raise DomainError("cov is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, dim: int) -> "GaussianSpec":
        return cls(np.zeros(dim), np.eye(dim))

    @classmethod
    def isotropic(cls, mean, scale: float) -> "GaussianSpec":
        """N(mean, scale**2 I); ``scale`` is the square root of the covariance."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, scale**2 * np.eye(mean.size))

    def sqrt_cov(self) -> np.ndarray:
        return sqrt_pd(self.cov)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected last dimension {self.dim}, got {x.shape}")
        L = np.linalg.cholesky(self.cov)
        z = np.linalg.solve(L, (x - self.mean).reshape(-1, self.dim).T).T
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out = -0.5 * (np.sum(z * z, axis=1) + logdet + self.dim * np.log(2 * np.pi))
        return out.reshape(x.shape[:-1])

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        return cls(np.array(d["mean"]), np.array(d["cov"]))


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray
    components: tuple[GaussianSpec, ...]

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        comps = tuple(self.components)
        if len(comps) == 0 or w.shape != (len(comps),):
            raise ShapeError("need one weight per component")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-10:
            raise DomainError(f"weights must lie in [0, 1] and sum to 1, got {w}")
        if len({c.dim for c in comps}) != 1:
            raise ShapeError("all components must share one dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        return cls(np.array(d["weights"]), tuple(GaussianSpec.from_dict(c) for c in d["components"]))


@dataclass(frozen=True)
class RotationSpec:
    angle_degrees: float
    dim: int = 2
    plane: tuple[int, int] = field(default=(0, 1))

    def __post_init__(self):
        i, j = self.plane
        if i == j or not (0 <= i < self.dim and 0 <= j < self.dim):
            raise DomainError(f"invalid rotation plane {self.plane} for dimension {self.dim}")
        object.__setattr__(self, "plane", (int(i), int(j)))

    def to_dict(self) -> dict:
        return {"angle_degrees": self.angle_degrees, "dim": self.dim, "plane": list(self.plane)}

    @classmethod
    def from_dict(cls, d: dict) -> "RotationSpec":
        return cls(float(d["angle_degrees"]), int(d["dim"]), tuple(d.get("plane", (0, 1))))


def rotation_matrix(spec: RotationSpec) -> np.ndarray:
    """Counterclockwise Givens rotation in ``spec.plane``, identity elsewhere."""
    i, j = spec.plane
    # exact values at multiples of 90 degrees keep R^T R = I bitwise there
    quarter = spec.angle_degrees / 90.0
    if float(quarter).is_integer():
        c, s = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    else:
        a = np.deg2rad(spec.angle_degrees)
        c, s = np.cos(a), np.sin(a)
    R = np.eye(spec.dim)
    R[i, i], R[i, j] = c, -s
    R[j, i], R[j, j] = s, c
    return R


def sample_gaussian(spec: GaussianSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    z = rng.standard_normal((n, spec.dim))
    return spec.mean + z @ spec.sqrt_cov().T


def sample_gmm(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(spec.components) == 1:
        return sample_gaussian(spec.components[0], n, rng)
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    labels = rng.choice(len(spec.components), size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.dim))
    means = np.stack([c.mean for c in spec.components])
    roots = np.stack([c.sqrt_cov() for c in spec.components])
    return means[labels] + np.einsum("nij,nj->ni", roots[labels], z)


def gmm_log_prob(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    """log sum_i w_i N(x; mu_i, Sigma_i); ``x`` may be a d-vector or an (n, d) batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ShapeError(f"expected last dimension {spec.dim}, got {x.shape}")
    with np.errstate(divide="ignore"):
        logw = np.log(spec.weights)
    terms = np.stack([lw + c.log_prob(x) for lw, c in zip(logw, spec.components)])
    return logsumexp(terms, axis=0)


def random_gmm(dim: int, n_components: int, rng: np.random.Generator,
               mean_scale: float = 3.0, cov_range: tuple[float, float] = (0.05, 0.5)) -> GmmSpec:
    """Mixture with random means, random SPD covariances and Dirichlet(1) weights."""
    comps = []
    for _ in range(n_components):
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = rng.uniform(*cov_range, size=dim)
        cov = (Q * eig) @ Q.T
        comps.append(GaussianSpec(mean_scale * rng.standard_normal(dim), 0.5 * (cov + cov.T)))
    w = rng.dirichlet(np.ones(n_components))
    return GmmSpec(w / w.sum(), tuple(comps))
