"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting, so criteria that fail still report what was measured.
"""
import copy
import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from flowvar import cli
from flowvar.coupling import InterpolantSpec, Pairing, make_pairing, pairing_factory
from flowvar.experiments import DEFAULTS, _rot180_batch, run_mixture, run_reflow, run_rot180
from flowvar.fields import build_memorizing_field, cf_optimal_params, cf_rot_params, doubly_indexed_residuals, \
    init_mlp, load_field
from flowvar.flow import memorization_score
from flowvar.gauss import GaussianSpec, RotationSpec
from flowvar.io import read_rows
from flowvar.metrics import mmd_gaussian, sinkhorn
from flowvar.rng import child_rng, make_rng
from flowvar.variance import DEFAULT_GRID, analytic_variance, grad_variance_empirical, mc_loss, paired_test

from cli_configs import small_run_args
from oracles import entropic_plan_oracle, mlp_fd_relative_error

SRC2 = GaussianSpec.standard(2)


def _scaled_identity(d):
    return GaussianSpec(np.full(d, 5.0), 4.0 * np.eye(d))       # M^{1/2} = 2I


def _ones_profile(field, pairing, target, S, B, sigma=0.0, seed=0):
    fac = pairing_factory(pairing, GaussianSpec.standard(target.dim), target)
    rep = grad_variance_empirical(field, fac, InterpolantSpec(sigma), DEFAULT_GRID, S, B, seed=seed,
                                  param="theta", resamples=10)
    return rep["ones"]


def test_1_zero_variance_at_the_optimum(acceptance):
    start = time.perf_counter()
    target = _scaled_identity(2)
    field = cf_optimal_params(target)
    batch = make_pairing(Pairing.ot(), SRC2, target, 256, make_rng(0))
    worst_loss = max(mc_loss(field, batch, float(t)).loss for t in DEFAULT_GRID)
    fac = pairing_factory(Pairing.ot(), SRC2, target)
    reps = grad_variance_empirical(field, fac, InterpolantSpec(0.0), DEFAULT_GRID, S=32, B=10, seed=0,
                                   param="all", resamples=5)
    worst_var = max(float(r.variance.max()) for r in reps.values())
    elapsed = time.perf_counter() - start
    ok = worst_loss < 1e-12 and worst_var < 1e-16 and len(DEFAULT_GRID) == 19 and elapsed < 1.0
    acceptance(1, ok, f"max loss {worst_loss:.1e} (<1e-12), max grad variance {worst_var:.1e} (<1e-16) "
                      f"over {len(DEFAULT_GRID)} times, {elapsed:.2f}s (<1s)")
    assert ok


def test_2_random_pairing_profile_shape(acceptance):
    start = time.perf_counter()
    g = lambda t: (t**2 + 1) / (1 + t) ** 4       # noqa: E731 - profile under test
    worst, alt_worst = {}, {}
    for d in (2, 10):
        target = _scaled_identity(d)
        rep = _ones_profile(cf_optimal_params(target), Pairing.random(), target, S=512, B=200, seed=d)
        v = rep.per_sample()
        ts = rep.times
        r = v / g(ts)
        c = 0.5 * (r.min() + r.max())          # minimax fit of the constant
        worst[d] = float(np.abs(r / c - 1).max())
        r_alt = v / (1 + ts) ** -4.0           # shape implied by the closed form computed here
        c_alt = 0.5 * (r_alt.min() + r_alt.max())
        alt_worst[d] = float(np.abs(r_alt / c_alt - 1).max())
    elapsed = time.perf_counter() - start
    ok = all(w < 0.15 for w in worst.values()) and elapsed < 30
    acceptance(2, ok, "c(t^2+1)/(1+t)^4 max rel err " + ", ".join(f"d={d}: {w:.1%}" for d, w in worst.items())
               + " (<15%); for reference c/(1+t)^4 gives " + ", ".join(f"{w:.1%}" for w in alt_worst.values())
               + f"; {elapsed:.1f}s")
    assert ok


def test_3_no_peak_at_the_crossing(acceptance):
    start = time.perf_counter()
    target = _scaled_identity(2)
    rep = _ones_profile(cf_optimal_params(target), Pairing.rot(180), target, S=128, B=100, seed=3)
    ts, v = rep.times, rep.variance
    half = int(np.argmin(np.abs(ts - 0.5)))
    inner = (ts >= 0.1 - 1e-12) & (ts <= 0.9 + 1e-12)
    rho = float(spearmanr(ts[inner], v[inner]).statistic)
    not_peak = int(np.argmax(v)) != half
    elapsed = time.perf_counter() - start
    ok = not_peak and rho > 0.95 and elapsed < 30
    acceptance(3, ok, f"t=0.5 is grid max: {not not_peak}; Spearman rho on [0.1,0.9] {rho:+.3f} (>0.95); "
                      f"measured/closed form at t=0.1 {v[1] * rep.S / analytic_variance('rot-at-ot-theta', target, ts[1], RotationSpec(180)):.2f}; "
                      f"{elapsed:.1f}s")
    assert ok


def test_4_noise_reorders_variance(acceptance):
    start = time.perf_counter()
    target = GaussianSpec.isotropic([5.0, 5.0], 1.0)
    rot = RotationSpec(30)
    f_ot, f_rot = cf_optimal_params(target), cf_rot_params(target, rot)
    res = {}
    for sigma in (0.0, 4.0):
        a = _ones_profile(f_ot, Pairing.rot(30), target, S=128, B=100, sigma=sigma, seed=11)
        b = _ones_profile(f_rot, Pairing.rot(30), target, S=128, B=100, sigma=sigma, seed=11)
        res[sigma] = (a, b)
    ot0, rot0 = (float(r.variance.mean()) for r in res[0.0])
    test = paired_test(res[4.0][0].draws, res[4.0][1].draws, resamples=100, rng=child_rng(4, 0))
    elapsed = time.perf_counter() - start
    ok = rot0 <= ot0 and test["diff"] < 0 and test["pvalue"] < 0.01 and elapsed < 120
    acceptance(4, ok, f"sigma=0: 30deg {rot0:.2e} <= OT {ot0:.2e}; sigma=4: OT {test['mean_a']:.3e} < "
                      f"30deg {test['mean_b']:.3e}, paired t p={test['pvalue']:.1e} (<0.01); {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_5_rot180_memorization(acceptance, tmp_path):
    start = time.perf_counter()
    cfg = copy.deepcopy(DEFAULTS["rot180"])
    summary = run_rot180(cfg, tmp_path, 0)
    z, s = summary["sigma0"], summary["sigma0.05"]
    elapsed = time.perf_counter() - start
    # same trained field integrated from t=0, for the record
    batch = _rot180_batch(cfg, 0)
    _, hit_exact = memorization_score(load_field(tmp_path / "field_sigma0.json"), batch, 100, t_offset=0.0)
    ok = (z["hit_rate"] >= 0.95 and s["hit_rate"] < z["hit_rate"] and s["mean_l2"] >= 3 * z["mean_l2"]
          and elapsed < 600)
    acceptance(5, ok, f"sigma=0 hit {z['hit_rate']:.1%} (>=95%), L2 {z['mean_l2']:.3f}, loss {z['final_loss']:.1e}; "
                      f"sigma=0.05 hit {s['hit_rate']:.1%}, L2 {s['mean_l2']:.3f} (ratio {s['mean_l2'] / z['mean_l2']:.2f}, "
                      f">=3); sigma=0 hit with offset 0: {hit_exact:.1%}; {elapsed:.0f}s")
    assert ok


def test_6_reflow_is_idempotent_from_ot(acceptance, tmp_path):
    start = time.perf_counter()
    cfg = copy.deepcopy(DEFAULTS["reflow"])
    assert cfg["pairing"] == "ot" and cfg["trainer"] == "closed_form" and cfg["iterations"] == 3
    summary = run_reflow(cfg, tmp_path, 0)["sigma0"]
    elapsed = time.perf_counter() - start
    ok = summary["max_drift"] < 1e-6 and summary["final_drift"] < 1e-6 and elapsed < 60
    acceptance(6, ok, f"3 iterations: largest drift {summary['max_drift']:.1e}, drift from start "
                      f"{summary['final_drift']:.1e} (<1e-6); {elapsed:.1f}s")
    assert ok


def test_7_memorizing_field_zero_loss(acceptance):
    start = time.perf_counter()
    rng = make_rng(7)
    n, m = 10_000, 32
    z0, z1 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) + 5.0
    times = rng.random((n, m))
    field = build_memorizing_field(z0, z1, times)
    res = doubly_indexed_residuals(field, z0, z1, times)
    elapsed = time.perf_counter() - start
    nonzero = int(np.count_nonzero(res))
    ok = nonzero == 0 and elapsed < 5
    acceptance(7, ok, f"n={n}, m={m}: {nonzero} nonzero residual entries (0 required); {elapsed:.2f}s (<5s)")
    assert ok


@pytest.mark.slow
def test_8_mixture_table_orderings(acceptance, tmp_path):
    start = time.perf_counter()
    cfg = copy.deepcopy(DEFAULTS["mixture"])
    assert cfg["dim"] == 3 and cfg["seeds"] == 10
    run_mixture(cfg, tmp_path, 0)
    elapsed = time.perf_counter() - start
    val = {}
    for r in read_rows(tmp_path / "results.csv"):
        val[(int(r["seed"]), float(r["sigma"]), r["quadrant"], r["metric"])] = float(r["value"])
    seeds = sorted({k[0] for k in val})
    a_hits = b_hits = 0
    ratios = []
    for s in seeds:
        m0, m5 = val[(s, 0.0, "Mem", "sinkhorn")], val[(s, 0.05, "Mem", "sinkhorn")]
        ratios.append(m5 / m0 if m0 > 0 else np.inf)
        a_hits += m0 < m5 / 10
        true_lp = val[(s, 0.0, "True", "logprob")]
        b_hits += abs(val[(s, 0.05, "Gen", "logprob")] - true_lp) < abs(val[(s, 0.0, "Gen", "logprob")] - true_lp)
    ok = a_hits >= 8 and b_hits >= 8 and elapsed < 1800
    acceptance(8, ok, f"(a) Mem-Sinkhorn sigma=0 below a tenth of sigma=0.05 in {a_hits}/10 seeds (>=8), "
                      f"median ratio {np.median(ratios):.2f}; (b) sigma=0.05 Gen-LogProb closer to True in "
                      f"{b_hits}/10 (>=8); {elapsed:.0f}s")
    assert ok


def test_9_metric_oracles(acceptance):
    start = time.perf_counter()
    sk_err = 0.0
    for seed in range(5):
        rng = make_rng(seed)
        for n, m in ((2, 2), (3, 4), (4, 4), (5, 5), (5, 2)):
            X, Y = rng.random((n, 2)), rng.random((m, 2))
            _, ref = entropic_plan_oracle(X, Y, 0.01)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sk_err = max(sk_err, abs(sinkhorn(X, Y, 0.01).value - ref))
    a, h = 1.3, 0.7
    mmd_err = abs(mmd_gaussian(np.zeros((2, 1)), np.full((2, 1), a), h) - (2 - 2 * np.exp(-a * a / (2 * h * h))))
    rng = make_rng(9)
    field = init_mlp(2, rng, width=16)
    fd_err = mlp_fd_relative_error(field, rng.normal(size=(6, 2)), rng.random(6), rng.normal(size=(6, 2)))
    elapsed = time.perf_counter() - start
    ok = sk_err < 1e-4 and mmd_err < 1e-10 and fd_err < 1e-4 and elapsed < 10
    acceptance(9, ok, f"Sinkhorn vs brute force {sk_err:.1e} (<1e-4), MMD two-point {mmd_err:.1e} (<1e-10), "
                      f"MLP gradient rel err {fd_err:.1e} (<1e-4); {elapsed:.1f}s")
    assert ok


def _csv_bytes(run_dir: Path):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*.csv"))}


def test_10_manifest_reruns_are_bitwise(acceptance, tmp_path, capsys):
    argv_by_cmd = small_run_args(tmp_path)
    same = {}
    for cmd, argv in argv_by_cmd.items():
        assert cli.main([cmd, "--out", str(tmp_path / "runs"), "--seed", "5"] + argv) == 0
        first = Path(json.loads(capsys.readouterr().out)["run_dir"])
        assert cli.main([cmd, "--config", str(first / "manifest.json"), "--out", str(tmp_path / "runs")]) == 0
        second = Path(json.loads(capsys.readouterr().out)["run_dir"])
        a, b = _csv_bytes(first), _csv_bytes(second)
        same[cmd] = bool(a) and a == b
    ok = all(same.values())
    acceptance(10, ok, "bitwise rerun from manifest: " + ", ".join(f"{c} {'yes' if v else 'NO'}"
                                                                   for c, v in same.items()))
    assert ok
