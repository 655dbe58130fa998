"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines
interleaved with the test names; they are printed either way).
"""
import time

import numpy as np
import pytest

from mobility_ot.cone import ParticleConfig, sample_from_quantile
from mobility_ot.config import parse_config
from mobility_ot.ftl import Traffic, ftl_vs_entropy
from mobility_ot.geodesic import (ParticlePath, SolverOptions, action_comparison_pair,
                                  check_constant_speed, distance_lower_bound,
                                  distance_lower_bound_check, solve_geodesic, transcribed_action)
from mobility_ot.jko import Potential, jko_convergence_study, jko_run
from mobility_ot.measures import Gaussian, PiecewiseConstant, Uniform, compactification_error_check, wasserstein_p
from mobility_ot.mobility import ActionDensity, Linear, Logistic
from mobility_ot.studies import run_gamma_study

LIN = ActionDensity(2.0, Linear(1.0))
LOG = ActionDensity(2.0, Logistic(1.0))


def verdict(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def random_config(rng, n, lo=0.05, hi=2.0, M=1.0):
    gaps = (1.0 + rng.uniform(lo, hi, n)) / (n * M)
    return ParticleConfig(rng.uniform(-1, 1) + np.concatenate([[0.0], np.cumsum(gaps)]), M)


def test_criterion_01_linear_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs, sandwich = [], []
    for N in (4, 16, 64):
        a = random_config(rng, N)
        c = rng.uniform(-1.5, 1.5)
        b = a.shifted(c)
        d = solve_geodesic(a, b, LIN).distance
        errs.append(abs(d - abs(c)) / abs(c))
        sandwich.append(abs(distance_lower_bound(a, b, LIN) - abs(c)) / abs(c))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 1e-6 and max(sandwich) <= 1e-6 and dt < 5
    verdict(capsys, 1, ok, f"max rel err {max(errs):.2e}, lower bound gap {max(sandwich):.2e}, {dt:.1f}s")


def test_criterion_02_constant_speed(capsys):
    # midpoint quadrature: the left rule freezes the density over each interval,
    # which leaves an O(1/K) ripple in the per-interval action
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    N, K = 16, 32
    opts = SolverOptions(K=K, quadrature="midpoint", strict=False)
    converged, worst, failures = 0, 0.0, 0
    for _ in range(20):
        a = random_config(rng, N, 1.0, 3.0)
        b = random_config(rng, N, 1.0, 3.0)
        r = solve_geodesic(a, b, LOG, opts=opts)
        if not r.solver_report.converged:
            continue
        converged += 1
        prof = r.action_profile
        worst = max(worst, float(np.max(np.abs(prof - prof.mean())) / prof.mean()))
        failures += not check_constant_speed(r, 1e-3)
    dt = time.perf_counter() - t0
    ok = failures == 0 and converged >= 15 and dt < 120
    verdict(capsys, 2, ok, f"{converged}/20 converged, {failures} failures, "
                           f"max relative deviation {worst:.2e}, {dt:.1f}s")


def test_criterion_03_lower_bound(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    opts = SolverOptions(K=16, strict=False)
    fails = 0
    for k in range(100):
        dens = LIN if k % 2 == 0 else LOG
        n = int(rng.integers(2, 9))
        a, b = random_config(rng, n), random_config(rng, n)
        fails += not distance_lower_bound_check(a, b, dens, opts=opts, tol=1e-8)
    dt = time.perf_counter() - t0
    verdict(capsys, 3, fails == 0 and dt < 60, f"{100 - fails}/100 pairs pass, {dt:.1f}s")


def test_criterion_04_action_comparison(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = -np.inf
    fails = 0
    for k in range(100):
        dens = ActionDensity(rng.uniform(1.2, 3.0), Linear(1.0) if k % 2 else Logistic(1.0))
        cfg = random_config(rng, int(rng.integers(1, 20)))
        v = rng.normal(size=cfg.x.size)
        lhs, rhs = action_comparison_pair(cfg, v, dens)
        fails += not lhs <= rhs
        worst = max(worst, lhs / rhs)
    dt = time.perf_counter() - t0
    verdict(capsys, 4, fails == 0 and dt < 10,
            f"{100 - fails}/100 hold, max ratio {worst:.4f}, {dt:.2f}s")


def test_criterion_05_gamma_trend(capsys):
    t0 = time.perf_counter()
    cfg = parse_config({"kind": "gamma", "mobility": {"kind": "logistic", "M": 1.0}, "p": 2,
                        "mu0": {"kind": "uniform", "a": 0, "b": 2},
                        "mu1": {"kind": "uniform", "a": 1, "b": 3},
                        "N_list": [8, 16, 32, 64], "solver": {"K": 32}})
    rep = run_gamma_study(cfg)
    d = [r["distance"] for r in rep.records]
    gaps = [r["gap_to_prev"] for r in rep.records[1:]]
    dt = time.perf_counter() - t0
    ok = (len(d) == 4 and all(b < a for a, b in zip(gaps, gaps[1:]))
          and 1.0 <= d[-1] <= np.sqrt(2) and dt < 300)
    verdict(capsys, 5, ok, f"d^N = {[round(x, 6) for x in d]}, gaps {[f'{g:.2e}' for g in gaps]}, {dt:.1f}s")


def test_criterion_06_gradient(capsys):
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(10):
        N, K = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        a, b = random_config(rng, N, 0.5, 2.0), random_config(rng, N, 0.5, 2.0)
        X = ParticlePath.straight(a, b, K).states.copy()
        X[1:-1] += 0.02 * rng.normal(size=X[1:-1].shape) / N
        mob, p = (Logistic(1.0), rng.uniform(1.5, 3.0)) if k % 2 else (Linear(1.0), 2.0)
        _, _, g = transcribed_action(X, p, mob, grad=True)
        h = 1e-6 * max(1.0, float(np.max(np.abs(X))))
        fd = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            E = np.zeros_like(X)
            E[idx] = h
            fd[idx] = (transcribed_action(X + E, p, mob)[0] - transcribed_action(X - E, p, mob)[0]) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - g)) / np.max(np.abs(g))))
    verdict(capsys, 6, worst < 1e-5, f"max relative error {worst:.2e}")


def test_criterion_07_jko_linear_drift(capsys):
    t0 = time.perf_counter()
    # Uniform(0,4) keeps every gap four times the minimum, so the cone is inactive
    init = sample_from_quantile(Uniform(0, 4), 16, 1.0, "exact")
    traj = jko_run(init, Potential.linear(), 0.1, 5, LIN)
    err = max(float(np.max(np.abs(c.x - (init.x - 0.1 * n)))) for n, c in enumerate(traj.configs))
    dt = time.perf_counter() - t0
    ok = traj.error is None and len(traj.steps) == 6 and err <= 1e-6 and traj.descent_holds() and dt < 60
    verdict(capsys, 7, ok, f"max deviation {err:.2e}, descent {traj.descent_holds()}, {dt:.1f}s")


def test_criterion_08_jko_quadratic(capsys):
    init = ParticleConfig(np.linspace(5, 9, 17), 1.0)
    tau = 0.1
    traj = jko_run(init, Potential.quadratic(), tau, 4, LIN)
    err = max(float(np.max(np.abs(b.x - a.x / (1 + tau))))
              for a, b in zip(traj.configs, traj.configs[1:]))
    ok = traj.error is None and err <= 1e-6
    verdict(capsys, 8, ok, f"max deviation from prev/(1+tau) {err:.2e}")


def test_criterion_09_jko_cross_n(capsys):
    t0 = time.perf_counter()
    rep = jko_convergence_study(Uniform(0, 2), Potential.linear(), 0.1, 3, [8, 16, 32, 64], 1.5, LOG,
                                endpoints="exact")
    table = rep.wq_table()
    dt = time.perf_counter() - t0
    rows = "; ".join(f"n={n}: " + ", ".join(f"{w:.3e}" for _, w in v) for n, v in sorted(table.items()))
    verdict(capsys, 9, rep.verdict and dt < 600, f"W_1.5 to N=64 by N: {rows}; {dt:.1f}s")


def test_criterion_10_ftl_entropy(capsys):
    t0 = time.perf_counter()
    errs = [ftl_vs_entropy((1.0, 0.0), Traffic(1.0), N, 0.5) for N in (16, 32, 64)]
    dt = time.perf_counter() - t0
    ok = errs[0] > errs[1] > errs[2] and errs[2] < 0.05 and dt < 120
    verdict(capsys, 10, ok, f"L1 errors {[f'{e:.4f}' for e in errs]}, {dt:.1f}s")


def _random_measure(rng):
    if rng.random() < 0.5:
        k = int(rng.integers(1, 8))
        breaks = np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 2.0, k))]) + rng.uniform(-3, 3)
        h = rng.uniform(0.1, 2.0, k)
        return PiecewiseConstant(breaks, h / np.sum(h * np.diff(breaks)))
    return Gaussian(rng.normal(), rng.uniform(0.2, 3.0))


def test_criterion_11_measure_utilities(capsys):
    rng = np.random.default_rng(11)
    fails = 0
    for _ in range(50):
        mu = _random_measure(rng)
        eps = rng.uniform(0.01, 0.4)
        for p, q in ((2.0, 2.0), (2.0, 1.0)):
            fails += not compactification_error_check(mu, eps, p, q)
    worst = 0.0
    for _ in range(50):
        mu = _random_measure(rng)
        z = rng.uniform(1e-3, 1 - 1e-3, 50)
        worst = max(worst, float(np.max(np.abs(mu.cdf(mu.quantile(z)) - z))))
        c = rng.uniform(-3, 3)
        for p in (1.0, 2.0):
            worst = max(worst, abs(wasserstein_p(mu, mu.shift(c), p) - abs(c)))
    ok = fails == 0 and worst <= 1e-10
    verdict(capsys, 11, ok, f"{100 - fails}/100 compactification checks, round-trip error {worst:.1e}")
