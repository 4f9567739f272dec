"""Small-but-complete argument sets for each subcommand."""
import json

import numpy as np

from flowvar.gauss import GaussianSpec, GmmSpec, sample_gaussian
from flowvar.io import write_matrix_csv
from flowvar.rng import make_rng

SMALL = {
    "gradvar": ["--set", "S=16", "--set", "B=8", "--set", "resamples=5", "--set", "t_grid=[0.1,0.5,0.9]"],
    "rot180": ["--set", "n=64", "--set", 'train={"max_steps":200,"log_every":50}', "--set", "export_rows=8"],
    "reflow": ["--set", "n=128", "--set", "iterations=2"],
    "mixture": ["--set", "n=40", "--set", "base_steps=100", "--set", 'train={"max_steps":100,"log_every":50}',
                "--set", "seeds=1", "--set", "eval_n=20", "--set", "sinkhorn_iters=50"],
}


def point_files(folder):
    """Two point clouds and a mixture, written under ``folder``; returns the three paths."""
    folder.mkdir(parents=True, exist_ok=True)
    X = sample_gaussian(GaussianSpec.standard(2), 30, make_rng(1))
    Y = sample_gaussian(GaussianSpec(np.ones(2), np.eye(2)), 25, make_rng(2))
    gmm = GmmSpec(np.array([0.5, 0.5]), (GaussianSpec.standard(2), GaussianSpec(np.ones(2), np.eye(2))))
    gpath = folder / "gmm.json"
    gpath.write_text(json.dumps(gmm.to_dict()))
    return str(write_matrix_csv(folder / "x.csv", X)), str(write_matrix_csv(folder / "y.csv", Y)), str(gpath)


def metrics_args(x, y, g):
    return ["--set", f"x={json.dumps(x)}", "--set", f"y={json.dumps(y)}", "--set", f"gmm={json.dumps(g)}",
            "--set", "epsilon=0.1"]


def small_run_args(folder):
    """Arguments for every subcommand, including ``metrics`` on freshly written point files."""
    return {**SMALL, "metrics": metrics_args(*point_files(folder / "points"))}
