"""Stochastic optimisation of vector fields on the CFM objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .coupling import CouplingBatch, InterpolantSpec, interpolate
from .errors import ConfigError, DivergenceError, DomainError
from .fields import ClosedFormField, MlpField
from .rng import make_rng

OPTIMIZERS = ("adam", "sgd")
TIME_MODES = ("uniform", "grid")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_steps: int = 50_000
    sigma: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    log_every: int = 1000
    time_mode: str = "uniform"
    grid_m: int = 8                 # fixed times per pair in "grid" mode
    plateau_patience: int = 0       # log intervals without improvement; 0 disables
    plateau_min_delta: float = 0.0

    def __post_init__(self):
        if not self.lr >= 0.0:
            # lr = 0 is allowed so a run can be used as a frozen-parameter probe
            raise ConfigError("learning rate must be non-negative", field="lr")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1", field="batch_size")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", field="max_steps")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0", field="sigma")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}", field="optimizer")
        if self.time_mode not in TIME_MODES:
            raise ConfigError(f"time_mode must be one of {TIME_MODES}", field="time_mode")
        if self.grid_m < 1:
            raise ConfigError("grid_m must be >= 1", field="grid_m")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null", field="grad_clip")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1", field="log_every")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}", field=sorted(extra)[0])
        return cls(**d)


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    grad_var: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def record(self, step, loss, gnorm, gvar=float("nan")):
        if self.steps and step <= self.steps[-1]:
            raise DomainError("trace steps must increase")
        self.steps.append(int(step))
        self.loss.append(float(loss))
        self.grad_norm.append(float(gnorm))
        self.grad_var.append(float(gvar))

    @property
    def final_loss(self) -> float:
        return self.loss[-1] if self.loss else float("nan")

    def to_csv(self, path):
        from .io import write_rows

        return write_rows(path, ["step", "loss", "grad_norm", "grad_var"],
                          zip(self.steps, self.loss, self.grad_norm, self.grad_var))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise DomainError("params and grads differ in length")
    b1, b2 = config.beta1, config.beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


def sgd_step(params, grads, config: TrainConfig):
    for p, g in zip(params, grads):
        p -= config.lr * g
    return params


def _grads(field_obj, xt, t, target):
    if isinstance(field_obj, ClosedFormField):
        loss, g_theta, g_Theta = field_obj.loss_and_grad(xt, t, target)
        return loss, [g_Theta, g_theta]
    if isinstance(field_obj, MlpField):
        return field_obj.loss_and_grad(xt, t, target)
    raise DomainError(f"cannot train a {type(field_obj).__name__}")


def _clip(grads, limit):
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if limit is not None and norm > limit:
        grads = [g * (limit / norm) for g in grads]
    return grads, norm


def train_field(field_obj, data, config: TrainConfig = TrainConfig()):
    """Minimise the Monte-Carlo CFM loss; returns ``(trained copy, TrainTrace)``.

    ``data`` is either a fixed :class:`CouplingBatch` (minibatches drawn with
    replacement) or a factory ``(n, rng) -> CouplingBatch`` giving fresh pairs
    each step. In ``grid`` time mode each pair of a fixed batch owns
    ``grid_m`` times drawn once up front.
    """
    model = field_obj.copy()
    params = model.params
    rng = make_rng(config.seed)
    interp = InterpolantSpec(config.sigma)
    fixed = isinstance(data, CouplingBatch)
    if fixed and len(data) == 0:
        raise DomainError("empty training batch")
    if fixed and data.dim != model.dim:
        raise DomainError(f"batch dimension {data.dim} != field dimension {model.dim}")
    if config.time_mode == "grid":
        if not fixed:
            raise ConfigError("grid time mode needs a fixed batch", field="time_mode")
        time_grid = rng.random((len(data), config.grid_m))
    adam = AdamState.zeros_like(params) if config.optimizer == "adam" else None
    trace = TrainTrace()
    bs = config.batch_size
    window_loss, window_c = [], []
    best, stale = np.inf, 0
    for step in range(1, config.max_steps + 1):
        if fixed:
            idx = rng.integers(0, len(data), bs)
            batch = CouplingBatch(data.x0[idx], data.x1[idx], data.pairing)
            if config.time_mode == "grid":
                t = time_grid[idx, rng.integers(0, config.grid_m, bs)]
            else:
                t = rng.random(bs)
        else:
            batch = data(bs, rng)
            t = rng.random(bs)
        xt = interpolate(batch, t, interp, rng if config.sigma > 0 else None)
        with np.errstate(over="ignore", invalid="ignore"):   # blow-ups are caught just below
            loss, grads = _grads(model, xt, t, batch.displacement)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            trace.record(step, loss, float("nan"))
            raise DivergenceError(f"non-finite loss at step {step}", step=step, trace=trace)
        with np.errstate(over="ignore"):
            grads, gnorm = _clip(grads, config.grad_clip)
        window_loss.append(loss)
        window_c.append(float(sum(np.sum(g) for g in grads)))
        if adam is not None:
            adam_step(params, grads, adam, config)
        else:
            sgd_step(params, grads, config)
        if step % config.log_every == 0 or step == config.max_steps:
            # gradient-variance probe: spread of the summed minibatch gradient over the window
            gvar = float(np.var(window_c, ddof=1)) if len(window_c) > 1 else float("nan")
            trace.record(step, float(np.mean(window_loss)), gnorm, gvar)
            window_loss, window_c = [], []
            if config.plateau_patience:
                if trace.loss[-1] < best - config.plateau_min_delta:
                    best, stale = trace.loss[-1], 0
                else:
                    stale += 1
                    if stale >= config.plateau_patience:
                        trace.stopped_early = True
                        break
    return model, trace


def final_loss(field_obj, batch: CouplingBatch, sigma: float = 0.0, n_times: int = 64, seed: int = 0) -> float:
    """Training loss of ``field_obj`` on every pair of ``batch`` at ``n_times`` uniform draws."""
    rng = make_rng(seed)
    n = len(batch)
    rep = CouplingBatch(np.tile(batch.x0, (n_times, 1)), np.tile(batch.x1, (n_times, 1)), batch.pairing)
    t = rng.random(n * n_times)
    xt = interpolate(rep, t, InterpolantSpec(sigma), rng if sigma > 0 else None)
    r = rep.displacement - field_obj(xt, t)
    return float(np.mean(np.sum(r * r, axis=1)))


# --------------------------------------------------------------------------- ReFlow trainers


def fit_closed_form(batch: CouplingBatch) -> ClosedFormField:
    """Least-squares affine fit ``x1 ~ A x0 + b``, returned as ``Theta = A - I``, ``theta = b``.

    When the coupling is exactly affine the fitted field has zero loss and
    carries every ``x0`` to its partner along a straight line.
    """
    n, d = batch.x0.shape
    if n < d + 1:
        raise DomainError(f"need at least {d + 1} pairs to fit an affine map in {d} dimensions")
    X = np.hstack([batch.x0, np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(X, batch.x1, rcond=None)
    A = coef[:d].T
    return ClosedFormField(A - np.eye(d), coef[d])


def closed_form_trainer() -> Callable[[CouplingBatch], ClosedFormField]:
    return fit_closed_form


def mlp_trainer(config: TrainConfig, width: int = 64) -> Callable[[CouplingBatch], MlpField]:
    """Trainer handle: fresh MLP (seeded from ``config.seed``) trained on the given coupling."""
    from .fields import init_mlp
    from .rng import child_rng

    def trainer(batch: CouplingBatch) -> MlpField:
        init = init_mlp(batch.dim, child_rng(config.seed, 0), width)
        model, _ = train_field(init, batch, config)
        return model

    return trainer


def train_test_split(batch: CouplingBatch, frac: float = 0.8, seed: int = 0) -> tuple[CouplingBatch, CouplingBatch]:
    if not 0.0 < frac < 1.0:
        raise DomainError("split fraction must lie in (0, 1)")
    perm = make_rng(seed).permutation(len(batch))
    k = int(round(frac * len(batch)))
    return batch.subset(perm[:k]), batch.subset(perm[k:])


__all__ = ["TrainConfig", "TrainTrace", "AdamState", "adam_step", "train_field", "fit_closed_form",
           "closed_form_trainer", "mlp_trainer", "train_test_split", "final_loss"]
