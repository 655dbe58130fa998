"""Embedded invariant suite run by ``mobility-ot selftest``.

Each check is small enough to finish in well under a second; the whole
suite is a smoke test of an installation, not a substitute for the tests.
"""
from __future__ import annotations

import numpy as np

from .cone import ParticleConfig, RhoStarRule, embed_empirical, reconstruct_density
from .geodesic import (ParticlePath, SolverOptions, action_comparison_pair, discrete_action,
                       distance_lower_bound_check, solve_geodesic, transcribed_action)
from .jko import Potential, jko_run
from .measures import Empirical, Gaussian, Uniform, wasserstein_p
from .mobility import ActionDensity, Linear, Logistic


def _random_cfg(rng, n, M):
    gaps = (1.0 + rng.uniform(0.05, 2.0, n)) / (n * M)
    return ParticleConfig(rng.uniform(-1, 1) + np.concatenate([[0.0], np.cumsum(gaps)]), M)


def check_translation(rng):
    a = _random_cfg(rng, 8, 1.0)
    c = rng.uniform(-1, 1)
    d = solve_geodesic(a, a.shifted(c), ActionDensity(2.0, Linear(1.0))).distance
    return abs(d - abs(c)) <= 1e-6 * abs(c)


def check_action_example(rng):
    cfg = ParticleConfig([0.0, 1.0, 2.0], 1.0)
    val = discrete_action(cfg, [1.0, 1.0, 2.0], ActionDensity(2.0, Linear(1.0)))
    return abs(val - 2.0) <= 1e-14


def check_action_comparison(rng):
    for mob in (Linear(1.0), Logistic(1.0)):
        dens = ActionDensity(2.0, mob)
        for _ in range(10):
            cfg = _random_cfg(rng, int(rng.integers(2, 12)), 1.0)
            lhs, rhs = action_comparison_pair(cfg, rng.normal(size=cfg.x.size), dens)
            if not lhs <= rhs * (1 + 1e-12):
                return False
    return True


def check_gradient(rng):
    a = _random_cfg(rng, 6, 1.0)
    b = _random_cfg(rng, 6, 1.0)
    X = ParticlePath.straight(a, b, 4).states.copy()
    X[1:-1] += 1e-3 * rng.normal(size=X[1:-1].shape)
    mob = Logistic(1.0)
    _, _, g = transcribed_action(X, 2.0, mob, grad=True)
    h = 1e-6
    i, j = 2, 3
    E = np.zeros_like(X)
    E[i, j] = h
    fd = (transcribed_action(X + E, 2.0, mob)[0] - transcribed_action(X - E, 2.0, mob)[0]) / (2 * h)
    return abs(fd - g[i, j]) <= 1e-5 * max(1.0, abs(g[i, j]))


def check_lower_bound(rng):
    dens = ActionDensity(2.0, Logistic(1.0))
    opts = SolverOptions(K=8, strict=False)
    a, b = _random_cfg(rng, 5, 1.0), _random_cfg(rng, 5, 1.0)
    return distance_lower_bound_check(a, b, dens, opts=opts)


def check_jko_drift(rng):
    init = ParticleConfig(np.linspace(0.0, 4.0, 9), 1.0)
    tau = 0.1
    traj = jko_run(init, Potential.linear(1.0), tau, 2, ActionDensity(2.0, Linear(1.0)),
                   opts=SolverOptions(K=8))
    return all(np.max(np.abs(c.x - (init.x - n * tau))) <= 1e-6 for n, c in enumerate(traj.configs))


def check_ftl_constant_state(rng):
    from .ftl import ftl_vs_entropy, Traffic

    return ftl_vs_entropy((0.5, 0.5), Traffic(1.0), 16, 0.25, RhoStarRule.LOOK_BACK) <= 1e-10


def check_wasserstein_shift(rng):
    mu = Gaussian(0.0, 1.0)
    c = rng.uniform(-2, 2)
    return abs(wasserstein_p(mu, mu.shift(c), 2.0) - abs(c)) <= 1e-10


def check_quantile_roundtrip(rng):
    mu = Uniform(-1.0, 3.0)
    z = rng.uniform(0.01, 0.99, 20)
    return np.max(np.abs(mu.cdf(mu.quantile(z)) - z)) <= 1e-10


def check_embedding(rng):
    cfg = _random_cfg(rng, 7, 1.0)
    R = reconstruct_density(cfg, RhoStarRule.LOOK_BACK)
    emp = embed_empirical(cfg)
    return isinstance(emp, Empirical) and np.all(R > 0) and np.isclose(np.sum(1 / R[:-1]) / 7, np.ptp(cfg.x))


CHECKS = [
    ("translation exactness", check_translation),
    ("discrete action example", check_action_example),
    ("action comparison", check_action_comparison),
    ("action gradient", check_gradient),
    ("distance lower bound", check_lower_bound),
    ("JKO linear drift", check_jko_drift),
    ("FTL constant state", check_ftl_constant_state),
    ("Wasserstein shift", check_wasserstein_shift),
    ("quantile round trip", check_quantile_roundtrip),
    ("density reconstruction", check_embedding),
]


def run_selftest(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for name, fn in CHECKS:
        try:
            passed = bool(fn(rng))
            detail = ""
        except Exception as exc:  # report and continue with the remaining checks
            passed, detail = False, f" ({type(exc).__name__}: {exc})"
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}{detail}")
    return ok
