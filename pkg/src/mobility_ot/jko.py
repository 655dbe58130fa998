"""Minimizing movements (JKO) for potential energies on the particle cone.

One step minimises F_N(y) + d^N(prev, y)^2 / (2 tau) over y in the cone.
The default formulation transcribes the path and its free endpoint as one
decision vector, so no inner geodesic solve has to be differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _optim
from .cone import ParticleConfig, RhoStarRule, check_cone, embed_empirical, sample_from_quantile
from .errors import ConeViolation, ConfigError, DomainError, NonConvergence
from .geodesic import (SolverOptions, SolverReport, lambda_stages, push_interior, solve_geodesic,
                       solve_path_problem, transcribed_action)
from .measures import Measure1D, wasserstein_p
from .mobility import ActionDensity

GROWTH_PROBE = np.linspace(-100.0, 100.0, 20001)


@dataclass(frozen=True)
class GrowthCertificate:
    """Constants with [f(x)]_- <= C |x|^s + D for all x, s < 2."""

    C: float = 0.0
    D: float = 0.0
    s: float = 0.0

    def __post_init__(self):
        if self.C < 0 or self.D < 0:
            raise DomainError("growth constants must be nonnegative")
        if not 0 <= self.s < 2:
            raise DomainError(f"growth exponent must lie in [0, 2), got {self.s}")

    def bound(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        return self.C * x ** self.s + self.D


class EnergyFunctional:
    """F_N on configurations: the potential energy of the empirical image."""

    name = "abstract"
    certificate: GrowthCertificate = GrowthCertificate()

    def pointwise(self, x):
        raise NotImplementedError

    def value(self, x) -> float:
        x = _positions(x)
        return float(np.mean(self.pointwise(x)))

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x) -> np.ndarray:
        """Diagonal of the Hessian (the energy is separable)."""
        raise NotImplementedError

    def __call__(self, x):
        x = _positions(x)
        return self.value(x), self.grad(x)


def _positions(x):
    return x.x if isinstance(x, ParticleConfig) else np.asarray(x, dtype=float)


class Zero(EnergyFunctional):
    name = "zero"

    def pointwise(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def grad(self, x):
        return np.zeros_like(_positions(x))

    def hess(self, x):
        return np.zeros_like(_positions(x))

    def to_spec(self):
        return {"kind": "zero"}


class Potential(EnergyFunctional):
    """F_N(x) = 1/(N+1) sum_i f(x_i) with a checked growth certificate.

    ``validate=False`` skips the probe-grid check of the certificate, e.g.
    to build negative controls.
    """

    def __init__(self, f, df, d2f, certificate: GrowthCertificate, name="custom",
                 validate: bool = True, spec=None):
        self.f, self.df, self.d2f = f, df, d2f
        self.certificate = certificate
        self.name = name
        self._spec = spec
        if validate:
            neg = np.maximum(-np.asarray(f(GROWTH_PROBE), dtype=float), 0.0)
            slack = certificate.bound(GROWTH_PROBE) - neg
            if np.any(slack < -1e-12 * np.maximum(1.0, neg)):
                x_bad = GROWTH_PROBE[np.argmin(slack)]
                raise DomainError(f"growth certificate fails at x={x_bad:g}")

    def pointwise(self, x):
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float)

    def grad(self, x):
        x = _positions(x)
        return np.asarray(self.df(x), dtype=float) / x.size

    def hess(self, x):
        x = _positions(x)
        return np.asarray(self.d2f(x), dtype=float) / x.size

    def to_spec(self):
        return self._spec

    @classmethod
    def linear(cls, slope: float = 1.0) -> "Potential":
        """f(x) = slope * x, certificate C = |slope|, D = 0, s = 1."""
        return cls(lambda x: slope * x, lambda x: np.full_like(x, slope), np.zeros_like,
                   GrowthCertificate(abs(slope), 0.0, 1.0), "linear",
                   spec={"kind": "potential", "f": "linear"})

    @classmethod
    def quadratic(cls, center: float = 0.0) -> "Potential":
        """f(x) = (x - center)^2 / 2, which is nonnegative."""
        return cls(lambda x: 0.5 * (x - center) ** 2, lambda x: x - center, np.ones_like,
                   GrowthCertificate(0.0, 0.0, 0.0), "quadratic",
                   spec={"kind": "potential", "f": "quadratic"})

    @classmethod
    def table(cls, x, f, certificate: GrowthCertificate | None = None) -> "Potential":
        """Piecewise-linear f through (x_k, f_k), constant outside the table.

        Without a certificate, the bounded default C = 0, D = max(0, -min f) is used.
        """
        xs = np.asarray(x, dtype=float)
        fs = np.asarray(f, dtype=float)
        if xs.ndim != 1 or xs.shape != fs.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
            raise DomainError("table needs strictly increasing x and matching f")
        slopes = np.append(np.append(0.0, np.diff(fs) / np.diff(xs)), 0.0)
        if certificate is None:
            certificate = GrowthCertificate(0.0, max(0.0, -float(fs.min())), 0.0)
        return cls(lambda y: np.interp(y, xs, fs),
                   lambda y: slopes[np.searchsorted(xs, y, side="right")],
                   np.zeros_like, certificate, "table",
                   spec={"kind": "potential", "f": {"table": {"x": xs.tolist(), "f": fs.tolist()}}})


def energy_from_spec(spec: dict) -> EnergyFunctional:
    if not isinstance(spec, dict):
        raise ConfigError("F", "expected an object")
    kind = spec.get("kind", "potential")
    if kind == "zero":
        return Zero()
    if kind != "potential":
        raise ConfigError("F.kind", f"unknown energy kind {kind!r}")
    f = spec.get("f")
    cert = None
    if any(k in spec for k in ("C", "D", "s")):
        try:
            cert = GrowthCertificate(float(spec.get("C", 0.0)), float(spec.get("D", 0.0)),
                                     float(spec.get("s", 0.0)))
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError("F.C", str(exc)) from exc
    try:
        if f == "linear":
            F = Potential.linear()
        elif f == "quadratic":
            F = Potential.quadratic()
        elif isinstance(f, dict) and "table" in f:
            t = f["table"]
            return Potential.table(t["x"], t["f"], cert)
        else:
            raise ConfigError("F.f", f"unknown potential {f!r}")
        if cert is not None:
            F = Potential(F.f, F.df, F.d2f, cert, F.name, spec=F.to_spec())
        return F
    except DomainError as exc:
        raise ConfigError("F", str(exc)) from exc
    except (KeyError, TypeError) as exc:
        raise ConfigError("F.f.table", str(exc)) from exc


# ---------------------------------------------------------------------------
# one step


@dataclass
class JkoStepRecord:
    cfg: ParticleConfig
    energy: float
    cost: float
    J: float
    report: SolverReport | None = None
    used_previous: bool = False


class _Endpoint:
    def __init__(self, F):
        self.F = F

    def __call__(self, y):
        return self.F(y)

    def hess(self, y):
        return self.F.hess(y)


def _step_gscale(F, prev, tau):
    g = np.max(np.abs(F.grad(prev.x)))
    if g > 0:
        return float(g)
    span = max(float(np.ptp(prev.x)), 1.0)
    return span / (tau * prev.x.size)


def _joint_step(prev, F, tau, density, rule, opts):
    K, n, M = opts.K, prev.n, prev.max_density
    report = SolverReport()
    X0 = np.repeat(prev.x[None, :], K + 1, axis=0)
    free = slice(1, K + 1)
    X0 = push_interior(X0, free, M)
    gscale = _step_gscale(F, prev, tau)
    X, mob = solve_path_problem(X0, M, density, rule, opts, free, gscale, report,
                                endpoint_energy=_Endpoint(F), action_weight=1.0 / (2 * tau))
    cost = transcribed_action(X, 2.0, mob, rule, opts.quadrature)[0]
    return X[-1], cost, report


def _nested_step(prev, F, tau, density, rule, opts):
    """Outer L-BFGS over y; the inner geodesic gives d^2 and, by the envelope
    theorem, its endpoint gradient."""
    n, M = prev.n, prev.max_density
    inner = SolverOptions(**{**opts.__dict__, "strict": False})
    report = SolverReport()
    cache = {}

    def fun(y):
        try:
            b = ParticleConfig(y, M)
        except ConeViolation:
            return np.inf, None
        r = solve_geodesic(prev, b, density, rule, inner)
        report.iterations += r.solver_report.iterations
        X = r.path.states
        mob = density.mobility
        if r.solver_report.final_lambda != 1.0:
            from .mobility import dilate
            mob = dilate(mob, r.solver_report.final_lambda)
        A, _, gA = transcribed_action(X, 2.0, mob, rule, opts.quadrature, grad=True)
        cache[y.tobytes()] = A
        fe, ge = F(y)
        return fe + A / (2 * tau), ge + gA[-1] / (2 * tau)

    def max_step(y, d):
        gap = np.diff(y) - 1.0 / (n * M)
        dgap = np.diff(d)
        shrink = dgap < 0
        return float(np.min(gap[shrink] / -dgap[shrink])) if np.any(shrink) else np.inf

    y0 = push_interior(prev.x[None, :], slice(0, 1), M)[0]
    gscale = _step_gscale(F, prev, tau)
    res = _optim.lbfgs(fun, y0, max(opts.tol, 1e-8) * gscale, max_iter=200, memory=opts.memory,
                       max_step=max_step)
    report.converged = res.converged
    report.kkt_residual = float(np.max(np.abs(res.grad))) / gscale
    report.message = res.message
    report.lambda_schedule = lambda_stages(density.mobility, opts)
    cost = cache.get(res.x.tobytes())
    if cost is None:
        cost = 2 * tau * (fun(res.x)[0] - F.value(res.x))
    return res.x, cost, report


def _jko_solve(prev: ParticleConfig, F: EnergyFunctional, tau: float, density: ActionDensity,
               rule, opts: SolverOptions, method: str) -> JkoStepRecord:
    if not tau > 0:
        raise DomainError("tau must be positive")
    if density.p != 2:
        raise DomainError("the JKO step is defined for p = 2 only")
    check_cone(prev.x, prev.max_density)
    e_prev = F.value(prev.x)
    if isinstance(F, Zero):
        return JkoStepRecord(prev, e_prev, 0.0, e_prev, SolverReport(converged=True, kkt_residual=0.0),
                             used_previous=True)
    if method == "joint":
        y, cost, report = _joint_step(prev, F, tau, density, rule, opts)
    elif method == "nested":
        y, cost, report = _nested_step(prev, F, tau, density, rule, opts)
    else:
        raise DomainError(f"unknown JKO formulation {method!r}")
    cfg = ParticleConfig(y, prev.max_density)
    e = F.value(y)
    J = e + cost / (2 * tau)
    if not np.isfinite(J) or J > e_prev:
        # prev is a competitor with zero distance
        return JkoStepRecord(prev, e_prev, 0.0, e_prev, report, used_previous=True)
    return JkoStepRecord(cfg, e, cost, J, report)


def jko_step(prev: ParticleConfig, F: EnergyFunctional, tau: float, density: ActionDensity,
             rule=RhoStarRule.CONST_ARGMAX_THETA, opts: SolverOptions | None = None,
             method: str = "joint") -> ParticleConfig:
    """One minimizing-movement step from ``prev``; ``method`` is "joint" or "nested"."""
    opts = opts or SolverOptions()
    rec = _jko_solve(prev, F, tau, density, rule, opts, method)
    if opts.strict and rec.report is not None and not rec.report.converged:
        raise NonConvergence(f"JKO step did not converge ({rec.report.message})", rec.cfg)
    return rec.cfg


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class JkoTrajectory:
    tau: float
    steps: list
    meta: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def configs(self):
        return [s.cfg for s in self.steps]

    def descent_holds(self, rtol: float = 1e-10) -> bool:
        """F_N(y_n) + d_n^2 / (2 tau) <= F_N(y_{n-1}) at every step."""
        for a, b in zip(self.steps, self.steps[1:]):
            if not b.J <= a.energy + rtol * max(1.0, abs(a.energy)):
                return False
        return True


def jko_run(init: ParticleConfig, F: EnergyFunctional, tau: float, n_steps: int,
            density: ActionDensity, rule=RhoStarRule.CONST_ARGMAX_THETA,
            opts: SolverOptions | None = None, method: str = "joint") -> JkoTrajectory:
    opts = opts or SolverOptions()
    e0 = F.value(init.x)
    steps = [JkoStepRecord(init, e0, 0.0, e0)]
    meta = {"mobility": density.mobility.to_spec(), "p": density.p, "rule": RhoStarRule(rule).value,
            "solver": {k: v for k, v in opts.__dict__.items()}, "method": method}
    traj = JkoTrajectory(tau, steps, meta)
    for _ in range(n_steps):
        rec = _jko_solve(steps[-1].cfg, F, tau, density, rule, opts, method)
        if opts.strict and rec.report is not None and not rec.report.converged:
            traj.error = f"step {len(steps)}: {rec.report.message}"
            break
        steps.append(rec)
    return traj


def second_moment(cfg: ParticleConfig) -> float:
    return float(np.mean(cfg.x ** 2))


def second_moment_bound(prev: JkoStepRecord, tau: float, theta0: float,
                        cert: GrowthCertificate) -> float:
    """Upper bound on E|y|^2 for the next iterate, from coercivity of the step.

    Combines d^2 >= W_2^2 / theta0, W_2^2 >= E_y|x|^2 / 2 - E_prev|x|^2, the
    growth certificate with Jensen, and Young's inequality with weight
    eps = a/2 where a = 1/(4 tau theta0).
    """
    a = 1.0 / (4 * tau * theta0)
    eps = a / 2
    c = a - eps
    C, D, s = cert.C, cert.D, cert.s
    if C == 0:
        extra = 0.0
    elif s == 0:
        extra = C
    else:
        m_star = (C * s / (2 * eps)) ** (2 / (2 - s))
        extra = eps * m_star * (2 - s) / s
    D_prime = D + extra
    return (prev.energy + second_moment(prev.cfg) / (2 * tau * theta0) + D_prime) / c


def second_moment_bound_check(traj: JkoTrajectory, F: EnergyFunctional | None = None,
                              theta0: float | None = None, rtol: float = 1e-10) -> bool:
    """Each iterate's second moment stays below the coercivity bound from its predecessor."""
    cert = F.certificate if F is not None else GrowthCertificate()
    if theta0 is None:
        from .mobility import mobility_from_spec
        theta0 = mobility_from_spec(traj.meta["mobility"]).theta0
    for prev, cur in zip(traj.steps, traj.steps[1:]):
        bound = second_moment_bound(prev, traj.tau, theta0, cert)
        if not second_moment(cur.cfg) <= bound * (1 + rtol):
            return False
    return True


@dataclass
class JkoStudyRecord:
    N: int
    n: int
    J: float
    F: float
    dist: float
    second_moment: float
    wq_to_ref: float


@dataclass
class JkoStudyReport:
    records: list
    trajectories: dict
    verdict: bool
    q: float
    notes: list = field(default_factory=list)

    def wq_table(self):
        """{n: [(N, W_q to reference), ...]} excluding the reference itself."""
        ref = max(self.trajectories)
        out = {}
        for r in self.records:
            if r.N != ref:
                out.setdefault(r.n, []).append((r.N, r.wq_to_ref))
        return out


def jko_convergence_study(mu0: Measure1D, F: EnergyFunctional, tau: float, n_steps: int,
                          N_list, q: float, density: ActionDensity,
                          rule=RhoStarRule.CONST_ARGMAX_THETA, opts: SolverOptions | None = None,
                          endpoints: str = "clip", band: float = 1e-9, mapper=map) -> JkoStudyReport:
    """Run JKO from quantile samples of mu0 for every N and compare with the largest N.

    Distances are exact W_q between empirical images at matching step index.
    The verdict asks W_q(traj_N[n], traj_ref[n]) to be nonincreasing in N
    (up to ``band``) for every n. ``mapper`` runs the per-N trajectories and
    must preserve order (e.g. ``Executor.map``).
    """
    if not q < 2:
        raise DomainError("q must be below 2")
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise DomainError("N_list must be strictly increasing")
    opts = opts or SolverOptions()

    def run(N):
        init = sample_from_quantile(mu0, N, density.mobility, endpoints=endpoints)
        return jko_run(init, F, tau, n_steps, density, rule, opts)

    trajs = dict(zip(N_list, mapper(run, N_list)))
    ref = N_list[-1]
    notes = [f"N={N}: {t.error}" for N, t in trajs.items() if t.error]
    records = []
    for N in N_list:
        for n, rec in enumerate(trajs[N].steps):
            ref_steps = trajs[ref].steps
            wq = (wasserstein_p(embed_empirical(rec.cfg), embed_empirical(ref_steps[n].cfg), q)
                  if n < len(ref_steps) else np.nan)
            records.append(JkoStudyRecord(N, n, rec.J, rec.energy, np.sqrt(rec.cost),
                                          second_moment(rec.cfg), wq))
    verdict = not notes
    table = {}
    for r in records:
        if r.N != ref:
            table.setdefault(r.n, []).append(r.wq_to_ref)
    for n, vals in table.items():
        if any(b > a + band for a, b in zip(vals, vals[1:])) or np.any(np.isnan(vals)):
            verdict = False
    return JkoStudyReport(records, trajs, verdict, q, notes)
