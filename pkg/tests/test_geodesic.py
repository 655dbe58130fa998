import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from mobility_ot.cone import ParticleConfig, RhoStarRule, embed_empirical, embed_piecewise, sample_from_quantile
from mobility_ot.errors import ConeViolation, ConfigError, NonConvergence
from mobility_ot.geodesic import (QUADRATURES, ParticlePath, SolverOptions, action_comparison_check,
                                  action_comparison_pair, check_constant_speed,
                                  continuous_action_of_cell_field, discrete_action,
                                  discrete_action_via_phi, distance_lower_bound,
                                  distance_lower_bound_check, embedded_distance, path_action,
                                  solve_geodesic, straight_line_distance, transcribed_action,
                                  transcribed_hessian)
from mobility_ot.measures import Gaussian, Uniform
from mobility_ot.mobility import ActionDensity, Linear, Logistic, TableMobility

from conftest import configs, random_config

LIN = ActionDensity(2.0, Linear(1.0))
LOG = ActionDensity(2.0, Logistic(1.0))


def naive_action(X, M=1.0):
    """Left-node transcribed action for logistic m, p = 2, leader density 0, one loop per term."""
    K, n1 = X.shape[0] - 1, X.shape[1]
    n = n1 - 1
    total = 0.0
    for k in range(K):
        for i in range(n1):
            v = (X[k + 1, i] - X[k, i]) * K
            R = 1.0 / (n * (X[k, i + 1] - X[k, i])) if i < n else 0.0
            total += v * v / (1.0 - R / M) / n1 / K
    return total


def test_discrete_action_examples():
    cfg = ParticleConfig([0.0, 2.0], 1.0)
    # R_0 = R_1 = 1/2, theta = 1/2: (1 + 1) / (2 * 1/2)
    assert discrete_action(cfg, [1.0, 1.0], LOG, RhoStarRule.LOOK_BACK) == pytest.approx(2.0, rel=1e-15)
    # R_0 = R_1 = 1/4, theta = 3/4: (1 + 1) / (2 * 3/4)
    cfg4 = ParticleConfig([0.0, 4.0], 1.0)
    assert discrete_action(cfg4, [1.0, 1.0], LOG, RhoStarRule.LOOK_BACK) == pytest.approx(4 / 3, rel=1e-15)
    assert discrete_action(cfg, [0.0, 0.0], LOG) == 0.0
    cfg = ParticleConfig([0.0, 1.0, 2.5, 3.0], 1.0)
    for p in (1.5, 2.0, 3.0):
        assert discrete_action(cfg, np.full(4, -0.7), ActionDensity(p, Linear(1.0))) == pytest.approx(0.7 ** p)


@settings(max_examples=60)
@given(configs(min_extra=1e-3), st.lists(st.floats(-3, 3), min_size=13, max_size=13),
       st.floats(1.2, 3.5), st.sampled_from(list(RhoStarRule)))
def test_discrete_action_two_forms(cfg, v, p, rule):
    v = np.asarray(v[: cfg.x.size])
    dens = ActionDensity(p, Logistic(1.0))
    a = discrete_action(cfg, v, dens, rule)
    b = discrete_action_via_phi(cfg, v, dens, rule)
    assert a == pytest.approx(b, rel=1e-10) or (np.isinf(a) and np.isinf(b))


def test_transcribed_action_matches_naive_loop(rng):
    a = random_config(rng, 5)
    b = random_config(rng, 5)
    X = ParticlePath.straight(a, b, 6).states
    assert transcribed_action(X, 2.0, Logistic(1.0))[0] == pytest.approx(naive_action(X), rel=1e-13)


def test_path_action_examples(rng):
    a = random_config(rng, 6)
    const = ParticlePath(np.repeat(a.x[None], 5, axis=0), 1.0)
    assert path_action(const, LOG) == 0.0
    b = random_config(rng, 6)
    target = np.mean((b.x - a.x) ** 2)
    for K in (1, 4, 32):
        assert path_action(ParticlePath.straight(a, b, K), LIN) == pytest.approx(target, rel=1e-13)


def test_left_quadrature_is_first_order():
    a = sample_from_quantile(Uniform(0, 2), 8, 1.0, "exact")
    b = ParticleConfig(a.x * 1.3 + 1.0, 1.0)
    vals = {K: path_action(ParticlePath.straight(a, b, K), LOG) for K in (8, 16, 32, 64, 4096)}
    errs = [abs(vals[K] - vals[4096]) for K in (8, 16, 32, 64)]
    ratios = [e2 / e1 for e1, e2 in zip(errs, errs[1:])]
    assert all(0.4 < r < 0.6 for r in ratios)


def _hessian_fd(X, p, mob, rule, quad, h=1e-6):
    cols = []
    for j in range(X.size):
        d = np.zeros(X.size)
        d[j] = h
        gp = transcribed_action(X + d.reshape(X.shape), p, mob, rule, quad, grad=True)[2].ravel()
        gm = transcribed_action(X - d.reshape(X.shape), p, mob, rule, quad, grad=True)[2].ravel()
        cols.append((gp - gm) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("quad", QUADRATURES)
@pytest.mark.parametrize("rule", list(RhoStarRule))
def test_hessian_against_finite_differences(quad, rule):
    rng = np.random.default_rng(0)
    tab = TableMobility([0, 0.3, 0.7, 1.0], [0, 0.28, 0.5, 0.55])
    for mob in (Logistic(1.0), tab):
        for p in (2.0, 3.0):
            N, K = 4, 3
            X = np.cumsum(0.3 + rng.random((K + 1, N + 1)) * 0.3, axis=1) + rng.random((K + 1, 1))
            H = transcribed_hessian(X, p, mob, rule, quad).toarray()
            assert np.allclose(H, H.T, atol=1e-12 * np.max(np.abs(H)))
            err = np.max(np.abs(H - _hessian_fd(X, p, mob, rule, quad))) / np.max(np.abs(H))
            assert err < 1e-6


def test_translation_is_exact_and_constant_speed():
    a = ParticleConfig(np.linspace(0, 1.5, 9), 1.0)
    r = solve_geodesic(a, a.shifted(-0.7), LIN)
    assert r.distance == pytest.approx(0.7, rel=1e-12)
    assert check_constant_speed(r, 1e-8)
    assert distance_lower_bound(a, a.shifted(-0.7), LIN) == pytest.approx(0.7, rel=1e-12)


def test_identical_endpoints():
    a = ParticleConfig([0, 1.0, 2.0], 1.0)
    r = solve_geodesic(a, a, LOG)
    assert r.distance == 0.0
    assert np.all(r.path.states == a.x)
    assert distance_lower_bound_check(a, a, LOG, result=r)


@pytest.mark.parametrize("N,K", [(3, 6), (4, 8)])
def test_logistic_distance_matches_slsqp(N, K):
    # independent oracle: SLSQP on the loop transcription with explicit gap constraints
    a = np.linspace(0, 2, N + 1)
    b = a + 1
    t = np.linspace(0, 1, K + 1)[:, None]
    X0 = (1 - t) * a + t * b

    def f(z):
        X = X0.copy()
        X[1:-1] = z.reshape(K - 1, N + 1)
        return naive_action(X)

    cons = {"type": "ineq", "fun": lambda z: (np.diff(z.reshape(K - 1, N + 1), axis=1) * N - 1).ravel()}
    ref = minimize(f, X0[1:-1].ravel(), method="SLSQP", constraints=[cons],
                   options={"ftol": 1e-15, "maxiter": 2000})
    assert ref.success
    r = solve_geodesic(ParticleConfig(a, 1.0), ParticleConfig(b, 1.0), LOG, opts=SolverOptions(K=K))
    assert r.distance == pytest.approx(np.sqrt(ref.fun), rel=1e-9)


def test_logistic_example_bounds_and_baseline():
    a = sample_from_quantile(Uniform(0, 2), 8, 1.0, "exact")
    b = a.shifted(1.0)
    r = solve_geodesic(a, b, LOG)
    assert r.solver_report.converged
    assert 1.0 <= r.distance ** 2 <= 2.0
    assert r.distance ** 2 <= straight_line_distance(a, b, LOG) ** 2
    assert r.distance == pytest.approx(1.3410657951135432, rel=1e-9)
    # the lbfgs inner solver reaches the same point
    r2 = solve_geodesic(a, b, LOG, opts=SolverOptions(method="lbfgs", strict=False))
    assert r2.distance == pytest.approx(r.distance, rel=1e-7)


def test_continuation_stage_distances_increase():
    a = sample_from_quantile(Uniform(0, 2), 8, 1.0, "exact")
    r = solve_geodesic(a, a.shifted(1.0), LOG)
    rep = r.solver_report
    assert rep.lambda_schedule[-1] == 1.0 == rep.final_lambda
    assert all(y >= x - 1e-12 for x, y in zip(rep.stage_distances, rep.stage_distances[1:]))


def test_unconverged_run_is_flagged():
    rng = np.random.default_rng(3)
    a, b = random_config(rng, 8), random_config(rng, 8)
    opts = SolverOptions(max_inner=1, max_outer=1, exact_final=False, strict=False)
    r = solve_geodesic(a, b, LOG, opts=opts)
    assert not r.solver_report.converged
    assert not check_constant_speed(r, 1e-3)
    with pytest.raises(NonConvergence) as err:
        solve_geodesic(a, b, LOG, opts=SolverOptions(max_inner=1, max_outer=1, exact_final=False))
    assert err.value.result is not None


def test_endpoints_must_share_cone():
    with pytest.raises(ConeViolation):
        solve_geodesic(ParticleConfig([0, 1.0], 1.0), ParticleConfig([0, 1.0, 2.0], 1.0), LIN)


def test_embedded_distance_examples():
    a = ParticleConfig(np.linspace(0, 1.5, 5), 1.0)
    assert embedded_distance(embed_empirical(a), embed_empirical(a), LIN) == 0.0
    assert embedded_distance(Gaussian(0, 1), embed_empirical(a), LIN) == np.inf
    assert embedded_distance(embed_piecewise(a), embed_empirical(a), LIN) == np.inf
    d = embedded_distance(embed_piecewise(a), embed_piecewise(a.shifted(0.3)), LIN)
    assert d == pytest.approx(0.3, rel=1e-12)


def test_action_comparison_examples():
    cfg = ParticleConfig([0, 1.0, 1.7, 3.0], 1.0)
    assert action_comparison_pair(cfg, np.zeros(4), LOG) == (0.0, 0.0)
    lhs, rhs = action_comparison_pair(cfg, np.full(4, 0.6), LIN)
    # continuous side misses exactly the leader's term
    assert lhs == pytest.approx(rhs * cfg.n / (cfg.n + 1), rel=1e-13)


@settings(max_examples=80)
@given(configs(), st.lists(st.floats(-3, 3), min_size=13, max_size=13),
       st.sampled_from([Linear(1.0), Logistic(1.0)]), st.floats(1.2, 3.0))
def test_action_comparison_property(cfg, v, mob, p):
    v = np.asarray(v[: cfg.x.size])
    dens = ActionDensity(p, mob)
    lhs, rhs = action_comparison_pair(cfg, v, dens)
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


def test_action_comparison_along_solved_path():
    a = sample_from_quantile(Uniform(0, 2), 6, 1.0, "exact")
    r = solve_geodesic(a, a.shifted(0.8), LOG, opts=SolverOptions(K=8))
    assert action_comparison_check(r.path, LOG)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_lower_bound_property(seed):
    rng = np.random.default_rng(seed)
    a, b = random_config(rng, 5), random_config(rng, 5)
    for dens in (LIN, LOG):
        assert distance_lower_bound_check(a, b, dens, opts=SolverOptions(K=8, strict=False))


def test_solver_options_from_dict():
    opts = SolverOptions.from_dict({"K": 16, "tol": 1e-8, "lambda_schedule": [2, 1.1]})
    assert opts.K == 16 and opts.lambda_schedule == (2.0, 1.1)
    with pytest.raises(ConfigError) as err:
        SolverOptions.from_dict({"Kay": 3})
    assert err.value.field == "solver.Kay"
    with pytest.raises(ConfigError):
        SolverOptions.from_dict({"quadrature": "simpson"})
