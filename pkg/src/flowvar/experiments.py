"""Experiment runners behind the CLI subcommands.

Each runner takes a resolved config dict and an output directory, writes its
CSV files there and returns a small summary dict.
"""
from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .coupling import CouplingBatch, InterpolantSpec, Pairing, make_pairing, pairing_factory
from .errors import ConfigError, DegeneracyError
from .fields import cf_optimal_params, cf_rot_params, init_mlp, save_field
from .flow import (ReflowState, coupling_drift, euler_integrate, field_fingerprint, integrate_endpoints,
                   memorization_score, reflow_step, straightness)
from .gauss import GaussianSpec, RotationSpec, random_gmm, sample_gaussian, sample_gmm
from .io import read_matrix_csv, write_rows
from .metrics import QUADRANTS, RESULTS_HEADER, eval_quadrant, mean_log_prob, mmd_gaussian, sinkhorn
from .rng import child_rng
from .trainer import TrainConfig, fit_closed_form, final_loss, mlp_trainer, train_field, train_test_split
from .variance import DEFAULT_GRID, VarianceReport, analytic_variance, grad_variance_empirical

TRAIN_DEFAULTS = TrainConfig().to_dict()

DEFAULTS: dict[str, dict] = {
    "gradvar": {
        "dim": 2, "mean": 5.0, "scale": 2.0, "sigma": 0.0, "sigmas": None,
        "pairings": ["ot", "rot:120", "rot:180", "random"], "fields": ["ot"],
        "t_grid": list(DEFAULT_GRID), "S": 128, "B": 100, "param": "theta", "resamples": 100,
    },
    "rot180": {
        "dim": 2, "n": 1024, "mean": 5.0, "sigma": 0.0, "sigmas": [0.0, 0.05], "steps": 100,
        "t_offset": None, "eps": 0.1, "export_rows": 64, "train": {},
    },
    "reflow": {
        "dim": 2, "n": 1024, "mean": 5.0, "scale": 1.0, "sigma": 0.0, "sigmas": None, "pairing": "ot",
        "trainer": "closed_form", "iterations": 3, "steps": 100, "t_offset": 0.0, "train": {},
    },
    "mixture": {
        "dim": 3, "n": 160, "split": 0.8, "components": 8, "sigmas": [0.0, 0.05], "seeds": 10,
        "coupling": "reflow", "base_steps": 30000, "eval_n": 500, "steps": 100, "t_offset": None,
        "epsilon": 1.0, "sinkhorn_iters": 2000, "sigma": None, "train": {},
    },
    "metrics": {
        "x": None, "y": None, "gmm": None, "epsilon": 1e-3, "sinkhorn_iters": 1000, "bandwidth": None,
        "dim": None, "sigma": None,
    },
}


# --------------------------------------------------------------------------- config helpers


def parse_pairing(label: str, dim: int) -> Pairing:
    if label in ("ot", "random", "shuffled"):
        return getattr(Pairing, label)()
    if label.startswith("rot:"):
        try:
            angle = float(label[4:])
        except ValueError:
            raise ConfigError(f"bad rotation label {label!r}", field="pairings") from None
        return Pairing.rot(angle, dim)
    raise ConfigError(f"unknown pairing {label!r}", field="pairings")


def _target(cfg) -> GaussianSpec:
    d = int(cfg["dim"])
    return GaussianSpec(np.full(d, float(cfg["mean"])), float(cfg.get("scale", 1.0)) ** 2 * np.eye(d))


def _train_config(cfg, sigma: float, seed: int) -> TrainConfig:
    raw = dict(TRAIN_DEFAULTS)
    raw.update(cfg.get("train") or {})
    raw["sigma"] = float(sigma)
    raw["seed"] = int(seed)
    return TrainConfig.from_dict(raw)


def _sigmas(cfg) -> list[float]:
    if cfg.get("sigmas") is not None:
        return [float(s) for s in cfg["sigmas"]]
    return [float(cfg.get("sigma") or 0.0)]


def _require_positive(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None or cfg[k] < 1:
            raise ConfigError(f"{k} must be a positive integer, got {cfg.get(k)!r}", field=k)


# --------------------------------------------------------------------------- gradvar


def _field_for(label: str, target: GaussianSpec):
    if label == "ot":
        return cf_optimal_params(target)
    if label.startswith("rot:"):
        return cf_rot_params(target, RotationSpec(float(label[4:]), target.dim))
    raise ConfigError(f"unknown field {label!r}", field="fields")


def _analytic_case(pairing: str, fld: str) -> tuple[str, RotationSpec | None] | None:
    if fld == "ot":
        if pairing == "ot":
            return "ot-at-ot", None
        if pairing == "random":
            return "random-at-ot", None
        if pairing.startswith("rot:"):
            return "rot-at-ot-theta", float(pairing[4:])
    elif fld.startswith("rot:") and pairing == fld:
        return "rot-at-rot", float(pairing[4:])
    return None


def run_gradvar(cfg: dict, out: Path, seed: int, threads: int = 1) -> dict:
    _require_positive(cfg, "dim", "S", "B")
    if cfg["param"] not in ("theta", "Theta", "all"):
        raise ConfigError("param must be theta, Theta or all", field="param")
    target = _target(cfg)
    src = GaussianSpec.standard(target.dim)
    rows, overlay, summary = [], [], {}
    for si, sigma in enumerate(_sigmas(cfg)):
        for pi, plabel in enumerate(cfg["pairings"]):
            pairing = parse_pairing(plabel, target.dim)
            factory = pairing_factory(pairing, src, target)
            for fi, flabel in enumerate(cfg["fields"]):
                try:
                    fld = _field_for(flabel, target)
                except DegeneracyError as exc:
                    raise ConfigError(f"field {flabel!r} is singular on [0, 1]: {exc}", field="fields") from exc
                case = f"{plabel}@{flabel},sigma={sigma:g}"
                # one base seed per pairing so every field sees the same batches
                base = int(child_rng(seed, si, pi).integers(2**63))
                reps = grad_variance_empirical(fld, factory, InterpolantSpec(sigma), cfg["t_grid"], cfg["S"],
                                               cfg["B"], param=cfg["param"], case=case,
                                               resamples=cfg["resamples"], seed=base)
                for red in ("ones", "trace"):
                    rows.extend(reps[red].rows())
                summary[case] = float(reps["ones"].variance.mean())
                ac = _analytic_case(plabel, flabel)
                if ac is None or sigma != 0.0 or cfg["param"] != "theta":
                    continue
                name, angle = ac
                rot = RotationSpec(angle, target.dim) if angle is not None else None
                for red in ("ones", "trace"):
                    emp = reps[red].per_sample()
                    for t, e in zip(reps[red].times, emp):
                        a = analytic_variance(name, target, float(t), rot, 1, red)
                        overlay.append([float(t), case, name, red, a, float(e)])
    write_rows(out / "gradvar.csv", VarianceReport.CSV_HEADER, rows)
    write_rows(out / "analytic.csv", ["t", "case", "analytic_case", "reduction", "analytic_per_sample",
                                      "empirical_per_sample"], overlay)
    return {"mean_ones_variance": summary}


# --------------------------------------------------------------------------- rot180


def _rot180_batch(cfg, seed):
    d = int(cfg["dim"])
    target = GaussianSpec(np.full(d, float(cfg["mean"])), np.eye(d))
    return make_pairing(Pairing.rot(180.0, d), GaussianSpec.standard(d), target, int(cfg["n"]), child_rng(seed, 0))


def run_rot180(cfg: dict, out: Path, seed: int, threads: int = 1) -> dict:
    _require_positive(cfg, "n", "dim", "steps")
    batch = _rot180_batch(cfg, seed)
    batch.save(out / "coupling")
    rows, summary = [], {}
    k = min(int(cfg["export_rows"]), len(batch))
    for sigma in _sigmas(cfg):
        tc = _train_config(cfg, sigma, seed)
        model, trace = train_field(init_mlp(batch.dim, child_rng(seed, 1)), batch, tc)
        tag = f"sigma{sigma:g}"
        trace.to_csv(out / f"trace_{tag}.csv")
        save_field(model, out / f"field_{tag}.json")
        mean_l2, hit = memorization_score(model, batch, cfg["steps"], cfg["t_offset"], cfg["eps"])
        loss = final_loss(model, batch, sigma, seed=seed)
        euler_integrate(model, batch.x0[:k], cfg["steps"], t_offset=cfg["t_offset"]).to_csv(
            out / f"trajectories_{tag}.csv")
        rows.append([sigma, mean_l2, hit, cfg["eps"], cfg["steps"], loss])
        summary[tag] = {"mean_l2": mean_l2, "hit_rate": hit, "final_loss": loss}
    write_rows(out / "memorization.csv", ["sigma", "mean_l2", "hit_rate", "eps", "steps", "final_loss"], rows)
    return summary


# --------------------------------------------------------------------------- reflow


def run_reflow(cfg: dict, out: Path, seed: int, threads: int = 1) -> dict:
    _require_positive(cfg, "n", "dim", "iterations", "steps")
    target = _target(cfg)
    pairing = parse_pairing(cfg["pairing"], target.dim)
    init = make_pairing(pairing, GaussianSpec.standard(target.dim), target, int(cfg["n"]), child_rng(seed, 0))
    rows, summary = [], {}
    for sigma in _sigmas(cfg):
        if cfg["trainer"] == "closed_form":
            if sigma != 0.0:
                raise ConfigError("the closed-form trainer is noiseless; use trainer=mlp with sigma > 0",
                                  field="trainer")
            trainer = fit_closed_form
        elif cfg["trainer"] == "mlp":
            trainer = mlp_trainer(_train_config(cfg, sigma, seed))
        else:
            raise ConfigError("trainer must be closed_form or mlp", field="trainer")
        state = ReflowState(0, init)
        drifts = []
        for _ in range(int(cfg["iterations"])):
            prev = state.coupling
            state = reflow_step(state, trainer, cfg["steps"], cfg["t_offset"])
            dev, cvar = straightness(state.coupling, state.field, steps=cfg["steps"])
            step_drift = coupling_drift(prev, state.coupling)
            drifts.append(step_drift)
            rows.append([sigma, state.iteration, dev, cvar, step_drift, coupling_drift(init, state.coupling),
                         state.provenance["field_sha"]])
        summary[f"sigma{sigma:g}"] = {"max_drift": max(drifts), "final_drift": coupling_drift(init, state.coupling)}
    write_rows(out / "reflow.csv", ["sigma", "iteration", "path_deviation", "conditional_var", "drift_step",
                                    "drift_initial", "field_sha"], rows)
    return summary


# --------------------------------------------------------------------------- mixture


def mixture_pairs(cfg: dict, gmm, seed: int) -> CouplingBatch:
    """Finite deterministic training set.

    ``reflow``: a base field trained on fresh independent (source, target)
    draws pushes sampled sources to their targets, as in one ReFlow round.
    ``random``: sources frozen against independent target draws.
    """
    d, n = gmm.dim, int(cfg["n"])
    x0 = sample_gaussian(GaussianSpec.standard(d), n, child_rng(seed, 1))
    if cfg["coupling"] == "random":
        return CouplingBatch(x0, sample_gmm(gmm, n, child_rng(seed, 2)), Pairing.random())

    def fresh(k, rng):
        return CouplingBatch(rng.standard_normal((k, d)), sample_gmm(gmm, k, rng), Pairing.random())

    base_cfg = TrainConfig.from_dict(_train_config(cfg, 0.0, seed).to_dict() | {"max_steps": int(cfg["base_steps"])})
    base, _ = train_field(init_mlp(d, child_rng(seed, 4)), fresh, base_cfg)
    x1 = integrate_endpoints(base, x0, int(cfg["steps"]), cfg["t_offset"])
    return CouplingBatch(x0, x1, Pairing.generated(source="base", field_sha=field_fingerprint(base),
                                                   steps=int(cfg["steps"])))


def mixture_seed(cfg: dict, seed: int) -> list[list]:
    """All result rows for one seed (both noise levels)."""
    d = int(cfg["dim"])
    gmm = random_gmm(d, int(cfg["components"]), child_rng(seed, 0))
    train, test = train_test_split(mixture_pairs(cfg, gmm, seed), float(cfg["split"]), seed)
    rows = []
    for sigma in [float(s) for s in cfg["sigmas"]]:
        model, _ = train_field(init_mlp(d, child_rng(seed, 3)), train, _train_config(cfg, sigma, seed))
        reports = eval_quadrant(model, train, test.x0, gmm, int(cfg["eval_n"]), seed, cfg["steps"],
                                cfg["t_offset"], cfg["epsilon"], cfg["sinkhorn_iters"])
        label = f"CFM(sigma={sigma:g})"
        for q in QUADRANTS:
            rows.extend(reports[q].rows(label, sigma, d))
    return rows


def _mixture_job(args):
    cfg, seed = args
    return mixture_seed(cfg, seed)


def run_mixture(cfg: dict, out: Path, seed: int, threads: int = 1) -> dict:
    _require_positive(cfg, "dim", "n", "seeds", "eval_n", "components")
    if not 0.0 < float(cfg["split"]) < 1.0:
        raise ConfigError("split must lie in (0, 1)", field="split")
    if cfg["coupling"] not in ("reflow", "random"):
        raise ConfigError("coupling must be 'reflow' or 'random'", field="coupling")
    if int(cfg["base_steps"]) < 1:
        raise ConfigError("base_steps must be positive", field="base_steps")
    seeds = [seed + i for i in range(int(cfg["seeds"]))]
    jobs = [(copy.deepcopy(cfg), s) for s in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_mixture_job, jobs))
    else:
        parts = [_mixture_job(j) for j in jobs]
    rows = [r for part in parts for r in part]   # merged in seed order
    write_rows(out / "results.csv", RESULTS_HEADER, rows)
    return {"rows": len(rows), "seeds": seeds}


# --------------------------------------------------------------------------- metrics


def run_metrics(cfg: dict, out: Path, seed: int, threads: int = 1) -> dict:
    if not cfg.get("x") or not cfg.get("y"):
        raise ConfigError("metrics needs x and y point files", field="x" if not cfg.get("x") else "y")
    X = read_matrix_csv(cfg["x"])
    Y = read_matrix_csv(cfg["y"])
    rows = [["mmd", mmd_gaussian(X, Y, cfg["bandwidth"])]]
    sk = sinkhorn(X, Y, cfg["epsilon"], cfg["sinkhorn_iters"])
    rows.append(["sinkhorn", sk.value])
    if cfg.get("gmm"):
        import json

        from .gauss import GmmSpec

        gmm = GmmSpec.from_dict(json.loads(Path(cfg["gmm"]).read_text()))
        rows.append(["logprob", mean_log_prob(gmm, X)])
    write_rows(out / "metrics.csv", ["metric", "value"], rows)
    return {r[0]: r[1] for r in rows} | {"sinkhorn_converged": sk.converged}


RUNNERS = {"gradvar": run_gradvar, "rot180": run_rot180, "reflow": run_reflow,
           "mixture": run_mixture, "metrics": run_metrics}

__all__ = ["DEFAULTS", "RUNNERS", "parse_pairing", "mixture_pairs", "mixture_seed"]
