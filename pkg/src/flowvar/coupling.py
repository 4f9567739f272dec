"""Pairing schemes between source and target samples, and the linear interpolant."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError
from .gauss import GaussianSpec, RotationSpec, rotation_matrix, sample_gaussian
from .rng import draw_seed, make_rng

KINDS = ("ot", "rot", "random", "shuffled", "generated")
DETERMINISTIC_KINDS = ("ot", "rot", "generated")


@dataclass(frozen=True)
class Pairing:
    """Which coupling rule produced a batch.

    ``rotation`` is required for ``rot``; ``provenance`` carries bookkeeping such
    as the shuffle seed or the field that generated the targets.
    """

    kind: str
    rotation: RotationSpec | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown pairing kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "rot" and self.rotation is None:
            raise DomainError("rot pairing needs a RotationSpec")
        if self.kind == "generated" and not self.provenance:
            raise DomainError("generated pairing needs provenance")

    @classmethod
    def ot(cls) -> "Pairing":
        return cls("ot")

    @classmethod
    def rot(cls, angle_degrees: float, dim: int = 2, plane=(0, 1)) -> "Pairing":
        return cls("rot", RotationSpec(angle_degrees, dim, tuple(plane)))

    @classmethod
    def random(cls) -> "Pairing":
        return cls("random")

    @classmethod
    def shuffled(cls) -> "Pairing":
        return cls("shuffled")

    @classmethod
    def generated(cls, **provenance) -> "Pairing":
        return cls("generated", provenance=provenance)

    @property
    def label(self) -> str:
        if self.kind == "rot":
            return f"rot{self.rotation.angle_degrees:g}"
        return self.kind

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rotation": self.rotation.to_dict() if self.rotation else None,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pairing":
        rot = RotationSpec.from_dict(d["rotation"]) if d.get("rotation") else None
        return cls(d["kind"], rot, dict(d.get("provenance") or {}))


@dataclass
class CouplingBatch:
    x0: np.ndarray
    x1: np.ndarray
    pairing: Pairing

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=float))
        if self.x0.shape != self.x1.shape:
            raise ShapeError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def displacement(self) -> np.ndarray:
        return self.x1 - self.x0

    def subset(self, idx) -> "CouplingBatch":
        return CouplingBatch(self.x0[idx], self.x1[idx], self.pairing)

    def save(self, directory, meta: dict | None = None) -> Path:
        """Write ``x0.csv``, ``x1.csv`` and a ``coupling.json`` sidecar."""
        from .io import write_matrix_csv

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(directory / "x0.csv", self.x0)
        write_matrix_csv(directory / "x1.csv", self.x1)
        sidecar = {"pairing": self.pairing.to_dict(), "n": len(self), "dim": self.dim, **(meta or {})}
        (directory / "coupling.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CouplingBatch":
        from .io import read_matrix_csv

        directory = Path(directory)
        sidecar = json.loads((directory / "coupling.json").read_text())
        return cls(read_matrix_csv(directory / "x0.csv"), read_matrix_csv(directory / "x1.csv"),
                   Pairing.from_dict(sidecar["pairing"]))


@dataclass(frozen=True)
class InterpolantSpec:
    """x_t = (1-t) x0 + t x1 + sigma*sqrt(t(1-t)) Z."""

    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be >= 0, got {self.sigma}")

    def noise_scale(self, t):
        t = np.asarray(t, dtype=float)
        return self.sigma * np.sqrt(np.clip(t * (1.0 - t), 0.0, None))


def make_pairing(pairing: Pairing, source: GaussianSpec, target: GaussianSpec, n: int,
                 rng: np.random.Generator) -> CouplingBatch:
    """Draw ``n`` source points and pair them with targets per ``pairing``.

    The ``ot``/``rot`` maps ``S x0 + mu`` and ``S R x0 + mu`` (``S`` the
    principal root of the target covariance) are pushforwards onto the target
    when the source is standard normal.
    """
    if source.dim != target.dim:
        raise ShapeError(f"source dim {source.dim} != target dim {target.dim}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    x0 = sample_gaussian(source, n, rng)
    S = target.sqrt_cov()
    if pairing.kind == "ot":
        x1 = x0 @ S.T + target.mean
    elif pairing.kind == "rot":
        if pairing.rotation.dim != target.dim:
            raise ShapeError("rotation dimension does not match the target")
        A = S @ rotation_matrix(pairing.rotation)
        x1 = x0 @ A.T + target.mean
    elif pairing.kind == "random":
        x1 = sample_gaussian(target, n, rng)
    elif pairing.kind == "shuffled":
        seed = pairing.provenance.get("shuffle_seed")
        if seed is None:
            seed = draw_seed(rng)
        perm = make_rng(seed).permutation(n)
        x1 = (x0 @ S.T + target.mean)[perm]
        pairing = Pairing("shuffled", provenance={"shuffle_seed": seed})
    else:
        raise DomainError("generated couplings come from integrating a field, not from make_pairing")
    return CouplingBatch(x0, x1, pairing)


PairingFactory = Callable[[int, np.random.Generator], CouplingBatch]


def pairing_factory(pairing: Pairing, source: GaussianSpec, target: GaussianSpec) -> PairingFactory:
    def factory(n: int, rng: np.random.Generator) -> CouplingBatch:
        return make_pairing(pairing, source, target, n, rng)

    factory.pairing = pairing
    return factory


def interpolate(batch: CouplingBatch, t, spec: InterpolantSpec = InterpolantSpec(),
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Rowwise interpolant; ``t`` is a scalar or one time per row."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or np.any(np.isnan(t_arr)):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    tc = t_arr[:, None] if t_arr.ndim == 1 else t_arr
    xt = (1.0 - tc) * batch.x0 + tc * batch.x1
    if spec.sigma > 0:
        if rng is None:
            raise DomainError("a generator is required when sigma > 0")
        z = rng.standard_normal(xt.shape)
        xt = xt + spec.noise_scale(tc) * z
    return xt
