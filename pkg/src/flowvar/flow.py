"""Euler integration, ReFlow iteration, straightness and memorization scores."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .coupling import CouplingBatch, Pairing
from .errors import DivergenceError, DomainError

FieldFn = Callable[[np.ndarray, float], np.ndarray]
Trainer = Callable[[CouplingBatch], FieldFn]


@dataclass
class Trajectory:
    """State times run 0 -> 1 (1 -> 0 backward); ``eval_times`` are where v was sampled."""

    times: np.ndarray
    states: np.ndarray          # (len(times), n, d), or (2, n, d) when not recorded
    eval_times: np.ndarray

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path):
        from .io import write_rows

        n, d = self.states.shape[1:]
        rows = ([i, float(t), *self.states[k, i].tolist()]
                for i in range(n) for k, t in enumerate(self.times))
        return write_rows(path, ["row", "t", *[f"x{j}" for j in range(d)]], rows)


def default_offset(steps: int) -> float:
    return 0.5 / steps


def euler_integrate(field_fn: FieldFn, x0: np.ndarray, steps: int = 100, direction: str = "forward",
                    t_offset: float | None = None, record: bool = True) -> Trajectory:
    """Left-endpoint Euler with ``steps`` uniform steps.

    Step ``k`` samples the field at ``t_offset + k/steps`` (mirrored when
    integrating backward). The default offset ``1/(2*steps)`` keeps ``t = 1/2``
    off the evaluation grid; pass ``t_offset=0`` to sample at the state times,
    which makes the integration exact for fields that are constant along their
    own straight trajectories.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if t_offset is None:
        t_offset = default_offset(steps)
    h = 1.0 / steps
    if not 0.0 <= t_offset < h:
        raise DomainError(f"t_offset must lie in [0, 1/steps), got {t_offset}")
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    k = np.arange(steps)
    if direction == "forward":
        eval_times = t_offset + k * h
        state_times = np.arange(steps + 1) * h
        sign = 1.0
    else:
        eval_times = 1.0 - t_offset - k * h
        state_times = 1.0 - np.arange(steps + 1) * h
        sign = -1.0
    states = [x.copy()] if record else None
    for i, t in enumerate(eval_times):
        x = x + sign * h * field_fn(x, float(t))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state after Euler step {i}", step=i)
        if record:
            states.append(x.copy())
    if record:
        st = np.stack(states)
        times = state_times
    else:
        st = np.stack([np.atleast_2d(np.asarray(x0, dtype=float)), x])
        times = state_times[[0, -1]]
    return Trajectory(times, st, eval_times)


def integrate_endpoints(field_fn: FieldFn, x0: np.ndarray, steps: int = 100, t_offset: float | None = None,
                        chunk: int = 4096) -> np.ndarray:
    x0 = np.atleast_2d(x0)
    out = [euler_integrate(field_fn, x0[i:i + chunk], steps, t_offset=t_offset, record=False).endpoint
           for i in range(0, x0.shape[0], chunk)]
    return np.concatenate(out) if out else x0.copy()


# --------------------------------------------------------------------------- ReFlow


def field_fingerprint(field_obj) -> str:
    from .fields import field_to_dict

    try:
        doc = json.dumps(field_to_dict(field_obj), sort_keys=True)
    except TypeError:
        return type(field_obj).__name__
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class ReflowState:
    iteration: int
    coupling: CouplingBatch
    provenance: dict = field(default_factory=dict)
    field: object | None = None


def reflow_step(state: ReflowState, trainer: Trainer, steps: int = 100,
                t_offset: float | None = None) -> ReflowState:
    """Train on the current coupling, push every x0 through the field, return the new coupling."""
    fitted = trainer(state.coupling)
    x0 = state.coupling.x0
    x1 = integrate_endpoints(fitted, x0, steps, t_offset)
    prov = {"iteration": state.iteration + 1, "field": getattr(fitted, "kind", type(fitted).__name__),
            "field_sha": field_fingerprint(fitted), "steps": steps,
            "t_offset": default_offset(steps) if t_offset is None else t_offset}
    batch = CouplingBatch(x0, x1, Pairing.generated(**prov))
    return ReflowState(state.iteration + 1, batch, prov, fitted)


def coupling_drift(a: CouplingBatch, b: CouplingBatch) -> float:
    """Mean row-wise L2 distance between the targets of two couplings on the same x0."""
    return float(np.mean(np.linalg.norm(a.x1 - b.x1, axis=1)))


# --------------------------------------------------------------------------- straightness


def path_deviation(batch: CouplingBatch, field_fn: FieldFn, steps: int = 100) -> float:
    """Mean over rows of ``max_t ||trajectory(t) - chord(t)||`` (chord from x0 to the paired x1)."""
    traj = euler_integrate(field_fn, batch.x0, steps, t_offset=0.0)
    t = traj.times[:, None, None]
    chord = (1.0 - t) * batch.x0[None] + t * batch.x1[None]
    dev = np.linalg.norm(traj.states - chord, axis=2).max(axis=0)
    return float(dev.mean())


def conditional_variance(batch: CouplingBatch, t_grid, k: int = 16) -> float:
    """kNN estimate of ``E[Var(x1 - x0 | x_t, t)]`` averaged over the grid.

    Each (row, t) point is binned with its ``k`` nearest neighbours in the
    joint ``(x_t, t)`` space; the within-bin variance of the displacement
    (summed over coordinates) is averaged over all points.
    """
    n = len(batch)
    if n < k:
        raise DomainError(f"conditional variance needs at least {k} rows, got {n}")
    ts = np.asarray(t_grid, dtype=float)
    u = batch.displacement
    pts = np.concatenate([np.column_stack([(1 - t) * batch.x0 + t * batch.x1, np.full(n, t)]) for t in ts])
    disp = np.tile(u, (len(ts), 1))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = disp[idx]                              # (N, k, d)
    return float(np.mean(np.sum(np.var(nb, axis=1, ddof=1), axis=1)))


def straightness(batch: CouplingBatch, field_fn: FieldFn, t_grid=None, steps: int = 100,
                 k: int = 16) -> tuple[float, float]:
    """``(path_deviation, conditional_var)``; the latter is NaN (with a warning) below ``k`` rows."""
    from .variance import DEFAULT_GRID

    if len(batch) == 0:
        raise DomainError("empty batch")
    dev = path_deviation(batch, field_fn, steps)
    try:
        cv = conditional_variance(batch, DEFAULT_GRID if t_grid is None else t_grid, k)
    except DomainError as exc:
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
        cv = float("nan")
    return dev, cv


def memorization_score(field_fn: FieldFn, batch: CouplingBatch, steps: int = 100,
                       t_offset: float | None = None, eps: float = 0.1) -> tuple[float, float]:
    """Integrate every training x0; return (mean L2 to its paired x1, fraction within ``eps``)."""
    x1_hat = integrate_endpoints(field_fn, batch.x0, steps, t_offset)
    err = np.linalg.norm(x1_hat - batch.x1, axis=1)
    return float(err.mean()), float(np.mean(err < eps))
