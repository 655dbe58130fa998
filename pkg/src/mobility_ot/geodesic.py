"""Discrete action on the particle cone and the geodesic problem it defines.

Paths are transcribed on a uniform time grid t_k = k/K. The state entering
each interval's action is the left node by default (``quadrature="left"``)
or the average of both nodes (``"midpoint"``). The optimizer works on the
interior nodes with a log-barrier on the gap constraints, so every iterate
stays strictly inside the cone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy import sparse

from . import _optim
from .cone import (ParticleConfig, RhoStarRule, check_cone, embed_empirical, interior_densities,
                   leader_density)
from .errors import ConeViolation, ConfigError, DomainError, NonConvergence
from .measures import Empirical, Measure1D, PiecewiseConstant, Uniform, wasserstein_p
from .mobility import ActionDensity, Mobility, dilate

QUADRATURES = ("left", "midpoint")
METHODS = ("newton", "lbfgs")


@dataclass(frozen=True)
class SolverOptions:
    K: int = 32
    max_outer: int = 8
    barrier0: float = 1e-2
    barrier_factor: float = 0.1
    tol: float = 1e-9
    lambda_floor: float = 1e-3
    lambda_schedule: tuple = (1.5, 1.2, 1.05)
    refine_tol: float = 1e-4
    max_inner: int = 20000
    memory: int = 30
    quadrature: str = "left"
    method: str = "newton"
    exact_final: bool = True
    strict: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be positive")
        if self.max_outer < 1:
            raise DomainError("max_outer must be positive")
        if not (self.barrier0 > 0 and 0 < self.barrier_factor < 1):
            raise DomainError("barrier weights must be positive and decreasing")
        if not self.lambda_floor > 0:
            raise DomainError("lambda_floor must be positive")
        if self.quadrature not in QUADRATURES:
            raise DomainError(f"quadrature must be one of {QUADRATURES}")
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}")

    @classmethod
    def from_dict(cls, spec: dict | None) -> "SolverOptions":
        spec = dict(spec or {})
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in spec.items():
            if key not in known:
                raise ConfigError(f"solver.{key}", "unknown solver option")
            if key == "lambda_schedule":
                value = tuple(float(v) for v in value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except (DomainError, TypeError) as exc:
            raise ConfigError("solver", str(exc)) from exc

    @property
    def final_barrier(self) -> float:
        return self.barrier0 * self.barrier_factor ** (self.max_outer - 1)


class ParticlePath:
    """Nodes x(t_0), ..., x(t_K) of a path in the cone on a uniform grid."""

    def __init__(self, states, max_density: float, validate: bool = True):
        states = np.array(states, dtype=float)
        if states.ndim != 2 or states.shape[0] < 2 or states.shape[1] < 2:
            raise DomainError("states must have shape (K+1, N+1) with K, N >= 1")
        states.setflags(write=False)
        self.states = states
        self.max_density = float(max_density)
        if validate:
            for row in states:
                check_cone(row, max_density)

    @property
    def K(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n(self) -> int:
        return self.states.shape[1] - 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.K + 1)

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.states, axis=0) * self.K

    def config(self, k: int) -> ParticleConfig:
        return ParticleConfig(self.states[k], self.max_density)

    def reversed(self) -> "ParticlePath":
        return ParticlePath(self.states[::-1], self.max_density, validate=False)

    @classmethod
    def straight(cls, a: ParticleConfig, b: ParticleConfig, K: int) -> "ParticlePath":
        t = np.linspace(0.0, 1.0, K + 1)[:, None]
        states = (1 - t) * a.x + t * b.x
        states[0], states[-1] = a.x, b.x
        return cls(states, a.max_density, validate=False)


@dataclass
class SolverReport:
    iterations: int = 0
    evaluations: int = 0
    kkt_residual: float = np.nan
    duality_gap: float = 0.0
    converged: bool = False
    message: str = ""
    lambda_schedule: list = field(default_factory=list)
    stage_distances: list = field(default_factory=list)
    final_lambda: float = 1.0
    used_straight_line: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class GeodesicResult:
    path: ParticlePath
    distance: float
    action_profile: np.ndarray
    solver_report: SolverReport
    p: float = 2.0

    @property
    def action(self) -> float:
        return self.distance ** self.p


# ---------------------------------------------------------------------------
# transcribed action


def _terms(X, p, mobility, rule, quadrature):
    K = X.shape[0] - 1
    dt = 1.0 / K
    V = np.diff(X, axis=0) / dt
    S = X[:-1] if quadrature == "left" else 0.5 * (X[:-1] + X[1:])
    G = np.diff(S, axis=1)
    R_int = interior_densities(S)
    R = np.concatenate([R_int, leader_density(rule, R_int, mobility)[:, None]], axis=1)
    theta = mobility.theta(R)
    absV = np.abs(V)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        T = np.where(absV == 0, 0.0, np.where(theta > 0, absV ** p * theta ** (1 - p), np.inf))
    return dict(K=K, dt=dt, V=V, S=S, G=G, R_int=R_int, R=R, theta=theta, absV=absV, T=T)


def transcribed_action(X, p, mobility, rule=RhoStarRule.CONST_ARGMAX_THETA,
                       quadrature="left", grad=False):
    """Sum over intervals of dt * Phi^N(state_k, v_k).

    Returns ``(action, profile)`` or ``(action, profile, dA/dX)`` where
    ``profile[k]`` is Phi^N on interval k and the gradient has the shape of X.
    """
    X = np.asarray(X, dtype=float)
    t = _terms(X, p, mobility, rule, quadrature)
    N1 = X.shape[1]
    profile = t["T"].sum(axis=1) / N1
    action = t["dt"] * float(profile.sum())
    if not grad:
        return action, profile
    if not np.isfinite(action):
        return action, profile, np.full_like(X, np.nan)
    dt, V, absV, theta, R, R_int = t["dt"], t["V"], t["absV"], t["theta"], t["R"], t["R_int"]
    n = N1 - 1
    c = dt / N1
    with np.errstate(divide="ignore", invalid="ignore"):
        dT_dV = np.where(absV == 0, 0.0, p * absV ** (p - 1) * np.sign(V) * theta ** (1 - p))
        dT_dth = np.where(absV == 0, 0.0, (1 - p) * absV ** p * theta ** (-p))
    gX = np.zeros_like(X)
    gV = c * dT_dV / dt
    gX[1:] += gV
    gX[:-1] -= gV
    gR = c * dT_dth * mobility.dtheta(R)
    gR_int = gR[:, :n].copy()
    if RhoStarRule(rule) is RhoStarRule.LOOK_BACK:
        gR_int[:, -1] += gR[:, n]
    gG = gR_int * (-n * R_int ** 2)
    gS = np.zeros_like(t["S"])
    gS[:, 1:] += gG
    gS[:, :-1] -= gG
    if quadrature == "left":
        gX[:-1] += gS
    else:
        gX[:-1] += 0.5 * gS
        gX[1:] += 0.5 * gS
    return action, profile, gX


def transcribed_hessian(X, p, mobility, rule=RhoStarRule.CONST_ARGMAX_THETA, quadrature="left"):
    """Sparse Hessian of the transcribed action w.r.t. the flattened node array.

    Each term dt/(N+1) |V|^p theta(R)^(1-p) depends on one velocity V and at
    most one gap G (through R = 1/(N G)), so the Hessian is J^T B J with B
    block diagonal in (V, G). Terms with theta = 0 only occur with V = 0 on
    fixed nodes and are dropped. For p < 2 the |V|^(p-2) factor is floored.
    """
    X = np.asarray(X, dtype=float)
    t = _terms(X, p, mobility, rule, quadrature)
    K1, N1 = X.shape
    K, n, dt = K1 - 1, N1 - 1, t["dt"]
    c = dt / N1
    absV, V, th, R = t["absV"], t["V"], t["theta"], t["R"]
    live = th > 0
    ths = np.where(live, th, 1.0)
    dth = mobility.dtheta(R)
    d2th = mobility.d2theta(R)
    h = ths ** (1 - p)
    h1 = (1 - p) * ths ** (-p) * dth
    h2 = (1 - p) * (-p * ths ** (-p - 1) * dth ** 2 + ths ** (-p) * d2th)
    R1 = -n * R ** 2
    R2 = 2 * n ** 2 * R ** 3
    if p < 2:
        floor = 1e-6 * max(float(np.max(absV)), 1e-300)
        vpow = np.maximum(absV, floor) ** (p - 2)
    else:
        vpow = absV ** (p - 2)
    hVV = c * p * (p - 1) * vpow * h
    hVG = c * p * absV ** (p - 1) * np.sign(V) * h1 * R1
    hGG = c * absV ** p * (h2 * R1 ** 2 + h1 * R2)
    lookback = RhoStarRule(rule) is RhoStarRule.LOOK_BACK
    if not lookback:
        hVG[:, n] = 0.0
        hGG[:, n] = 0.0
    hVV, hVG, hGG = (np.where(live, a, 0.0) for a in (hVV, hVG, hGG))

    kk, ii = np.meshgrid(np.arange(K), np.arange(N1), indexing="ij")
    kk, ii = kk.ravel(), ii.ravel()
    nt = kk.size
    flat = lambda k, i: k * N1 + i  # noqa: E731
    # rows 2t: velocity, rows 2t+1: gap
    rows = [2 * np.arange(nt)] * 2
    cols = [flat(kk + 1, ii), flat(kk, ii)]
    vals = [np.full(nt, 1 / dt), np.full(nt, -1 / dt)]
    gi = np.minimum(ii, n - 1)
    nodes = [(kk, 1.0)] if quadrature == "left" else [(kk, 0.5), (kk + 1, 0.5)]
    for kn, wgt in nodes:
        rows += [2 * np.arange(nt) + 1] * 2
        cols += [flat(kn, gi + 1), flat(kn, gi)]
        vals += [np.full(nt, wgt), np.full(nt, -wgt)]
    J = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * nt, K1 * N1))
    hVV, hVG, hGG = hVV.ravel(), hVG.ravel(), hGG.ravel()
    br = np.concatenate([2 * np.arange(nt), 2 * np.arange(nt), 2 * np.arange(nt) + 1, 2 * np.arange(nt) + 1])
    bc = np.concatenate([2 * np.arange(nt), 2 * np.arange(nt) + 1, 2 * np.arange(nt), 2 * np.arange(nt) + 1])
    B = sparse.csr_matrix((np.concatenate([hVV, hVG, hVG, hGG]), (br, bc)), shape=(2 * nt, 2 * nt))
    return (J.T @ B @ J).tocsr()


def discrete_action(cfg: ParticleConfig, v, density: ActionDensity,
                    rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA) -> float:
    """Phi^N(x, v) = 1/(N+1) sum_i |v_i|^p / theta(R_i)^(p-1)."""
    check_cone(cfg.x, cfg.max_density)
    v = np.asarray(v, dtype=float)
    if v.shape != cfg.x.shape:
        raise DomainError("velocity must have one entry per particle")
    R_int = interior_densities(cfg.x)
    R = np.append(R_int, leader_density(rule, R_int, density.mobility))
    theta = density.mobility.theta(R)
    absV = np.abs(v)
    p = density.p
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        T = np.where(absV == 0, 0.0, np.where(theta > 0, absV ** p * theta ** (1 - p), np.inf))
    return float(np.sum(T) / cfg.x.size)


def discrete_action_via_phi(cfg: ParticleConfig, v, density: ActionDensity,
                            rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA) -> float:
    """Same quantity written as 1/(N+1) sum_i R_i^(p-1) phi(R_i, v_i)."""
    check_cone(cfg.x, cfg.max_density)
    v = np.asarray(v, dtype=float)
    R_int = interior_densities(cfg.x)
    R = np.append(R_int, leader_density(rule, R_int, density.mobility))
    # cone membership allows R to exceed M by roundoff only
    R = np.minimum(R, density.mobility.max_density)
    vals = density.phi(R, v)
    # R = 0 leaves R^(p-1) phi in the theta form equal to |v|^p / theta(0)^(p-1)
    zero = R == 0
    with np.errstate(invalid="ignore"):
        terms = np.where(zero, np.abs(v) ** density.p / density.mobility.theta0 ** (density.p - 1),
                         R ** (density.p - 1) * vals)
    terms = np.where(zero & (v == 0), 0.0, terms)
    return float(np.sum(terms) / cfg.x.size)


def path_action(path: ParticlePath, density: ActionDensity,
                rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA, quadrature: str = "left") -> float:
    return transcribed_action(path.states, density.p, density.mobility, rule, quadrature)[0]


def action_profile(path: ParticlePath, density: ActionDensity,
                   rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA, quadrature: str = "left"):
    return transcribed_action(path.states, density.p, density.mobility, rule, quadrature)[1]


# ---------------------------------------------------------------------------
# barrier transcription shared with the JKO solver


class PathProblem:
    """Action (+ optional endpoint energy) + log-barrier over the free nodes.

    ``free`` is the slice of time nodes treated as unknowns; the remaining
    nodes are fixed boundary data.
    """

    def __init__(self, X_fixed, max_density, p, mobility, rule, quadrature, free,
                 action_weight=1.0, endpoint_energy=None, pinned=None):
        self.X = np.array(X_fixed, dtype=float)
        self.K = self.X.shape[0] - 1
        self.n = self.X.shape[1] - 1
        self.M = float(max_density)
        self.nm = self.n * self.M
        self.p = p
        self.mobility = mobility
        self.rule = rule
        self.quadrature = quadrature
        self.free = free
        self.action_weight = action_weight
        self.endpoint_energy = endpoint_energy
        self.barrier_w = 1.0 / (self.K * (self.n + 1))
        self.mu = 0.0
        shape = self.X[free].shape
        # pinned entries of the free block keep their value from X_fixed
        self.var = np.ones(shape, dtype=bool) if pinned is None else ~np.asarray(pinned, dtype=bool)

    def full(self, z):
        X = self.X.copy()
        Z = X[self.free]
        Z[self.var] = z
        X[self.free] = Z
        return X

    def pack(self, X):
        return np.array(X[self.free][self.var], dtype=float)

    def _slack(self, Z):
        return self.nm * np.diff(Z, axis=1) - 1.0

    def objective(self, X, with_barrier=True):
        """Value and gradient (w.r.t. all nodes) of the barrier-augmented objective."""
        Z = X[self.free]
        s = self._slack(Z)
        if with_barrier and self.mu > 0 and np.any(s <= 0):
            return np.inf, None
        A, _, gA = transcribed_action(X, self.p, self.mobility, self.rule, self.quadrature, grad=True)
        if not np.isfinite(A):
            return np.inf, None
        f = self.action_weight * A
        g = self.action_weight * gA
        if self.endpoint_energy is not None:
            fe, ge = self.endpoint_energy(X[-1])
            f += fe
            g[-1] += ge
        if with_barrier and self.mu > 0:
            f -= self.mu * self.barrier_w * float(np.sum(np.log(s)))
            gs = -self.mu * self.barrier_w * self.nm / s
            gZ = np.zeros_like(Z)
            gZ[:, 1:] += gs
            gZ[:, :-1] -= gs
            g[self.free] += gZ
        return f, g

    def fun(self, z):
        f, g = self.objective(self.full(z))
        if not np.isfinite(f):
            return np.inf, None
        return f, g[self.free][self.var]

    def max_step(self, z, d):
        Z = self.full(z)[self.free]
        D = np.zeros_like(Z)
        D[self.var] = d
        gap = np.diff(Z, axis=1) - 1.0 / self.nm
        dgap = np.diff(D, axis=1)
        shrinking = dgap < 0
        if not np.any(shrinking):
            return np.inf
        return float(np.min(gap[shrinking] / -dgap[shrinking]))

    def kkt(self, X):
        """First-order optimality of the constrained problem at X.

        Multipliers of the gap constraints are fitted by nonnegative least
        squares row by row, so the residual does not inherit the roundoff of
        barrier multipliers mu/s on nearly active gaps. A component only
        counts beyond 4 eps H_ii (|x_i| + span), the change of its gradient
        across one representable step; this matters where theta is nearly
        zero at a fixed node. Returns (max stationarity residual, duality gap
        sum multiplier * slack).
        """
        from scipy.optimize import nnls

        f, g = self.objective(X, with_barrier=False)
        if not np.isfinite(f):
            return np.inf, np.inf
        hd = self.action_weight * transcribed_hessian(X, self.p, self.mobility, self.rule,
                                                      self.quadrature).diagonal().reshape(X.shape)
        ehess = getattr(self.endpoint_energy, "hess", None)
        if ehess is not None:
            hd[-1] += np.asarray(ehess(X[-1]), dtype=float)
        span = float(np.ptp(X))
        allow = (4 * np.finfo(float).eps * np.abs(hd) * (np.abs(X) + span))[self.free]
        G = g[self.free]
        S = self._slack(X[self.free])
        N1 = self.n + 1
        Jt = np.zeros((N1, self.n))
        idx = np.arange(self.n)
        Jt[idx, idx] = -self.nm
        Jt[idx + 1, idx] = self.nm
        floor = np.finfo(float).eps * max(float(np.max(np.abs(G))), 1e-300)
        stat = comp = 0.0
        for r in range(G.shape[0]):
            v = self.var[r]
            if not v.any():
                continue
            # weighting keeps unresolvable error on its own component
            w = np.maximum(allow[r][v], floor)
            lam, _ = nnls(Jt[v] / w[:, None], G[r][v] / w)
            resid = np.abs(Jt[v] @ lam - G[r][v]) - allow[r][v]
            stat = max(stat, float(np.max(resid, initial=0.0)))
            comp += float(lam @ S[r])
        return stat, comp

    def hess(self, z):
        """Sparse Hessian of ``fun`` over the free, unpinned entries."""
        X = self.full(z)
        H = self.action_weight * transcribed_hessian(X, self.p, self.mobility, self.rule,
                                                     self.quadrature)
        N1 = self.n + 1
        extra_r, extra_c, extra_v = [], [], []
        ehess = getattr(self.endpoint_energy, "hess", None)
        if ehess is not None:
            idx = self.K * N1 + np.arange(N1)
            extra_r.append(idx)
            extra_c.append(idx)
            extra_v.append(np.asarray(ehess(X[-1]), dtype=float))
        rows = np.arange(self.K + 1)[self.free]
        if self.mu > 0:
            s = self._slack(X[self.free])
            hb = (self.mu * self.barrier_w * self.nm ** 2 / s ** 2).ravel()
            kk = np.repeat(rows, self.n)
            ii = np.tile(np.arange(self.n), rows.size)
            a, b = kk * N1 + ii, kk * N1 + ii + 1
            extra_r += [a, b, a, b]
            extra_c += [a, b, b, a]
            extra_v += [hb, hb, -hb, -hb]
        if extra_r:
            H = H + sparse.csr_matrix((np.concatenate(extra_v),
                                       (np.concatenate(extra_r), np.concatenate(extra_c))),
                                      shape=H.shape)
        sel = (rows[:, None] * N1 + np.arange(N1)[None, :])[self.var]
        return H[sel][:, sel]

    def precond(self, z):
        X = self.full(z)
        t = _terms(X, self.p, self.mobility, self.rule, self.quadrature)
        p = self.p
        speed = np.maximum(t["absV"], 1e-3 * max(float(np.max(t["absV"])), 1e-12))
        th = np.maximum(t["theta"], 1e-12)
        curv = self.action_weight * p * (p - 1) * speed ** (p - 2) * th ** (1 - p) / ((self.n + 1) * t["dt"])
        H = np.zeros_like(X)
        H[1:] += curv
        H[:-1] += curv
        if self.mu > 0:
            s = np.maximum(self._slack(X[self.free]), 1e-300)
            hb = self.mu * self.barrier_w * (self.nm / s) ** 2
            Hf = H[self.free]
            Hf[:, 1:] += hb
            Hf[:, :-1] += hb
            H[self.free] = Hf
        diag = H[self.free][self.var]
        return np.clip(diag, 1e-12 * max(float(np.max(diag)), 1e-300), 1e300)


def push_interior(X, rows, max_density, eta=1e-2, weights=None):
    """Dilate selected nodes about their means so every gap is strictly admissible."""
    X = np.array(X, dtype=float)
    n = X.shape[1] - 1
    nm = n * max_density
    idx = np.arange(X.shape[0])[rows]
    w = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=float)
    for k, wk in zip(idx, w):
        s = nm * np.diff(X[k]) - 1.0
        if np.min(s) < 1e-8:
            c = X[k].mean()
            X[k] = c + (1.0 + eta * wk) * (X[k] - c)
    return X


def lambda_stages(mobility: Mobility, opts: SolverOptions) -> list:
    """Dilation factors to solve with, ending at 1 + floor for degenerate mobilities."""
    if not mobility.degenerate_at_max:
        return [1.0]
    floor = 1.0 + opts.lambda_floor
    return [lam for lam in opts.lambda_schedule if lam > floor] + [floor]


def _stage_mobility(mobility, lam):
    return mobility if lam == 1.0 else dilate(mobility, lam)


def run_barrier(problem: PathProblem, z0, opts: SolverOptions, gscale: float, final: bool,
                levels=None):
    """Outer loop over decreasing barrier weights; returns (z, last inner result, totals)."""
    z = z0
    levels = range(opts.max_outer) if levels is None else levels
    levels = list(levels)
    iters = evals = 0
    res = None
    for j in levels:
        problem.mu = opts.barrier0 * opts.barrier_factor ** j
        last = final and j == levels[-1]
        gtol = (opts.tol if last else max(opts.tol, 1e-7)) * gscale
        if opts.method == "newton":
            res = _optim.newton(problem.fun, problem.hess, z, gtol, max_iter=opts.max_inner,
                                max_step=problem.max_step)
        else:
            res = _optim.lbfgs(problem.fun, z, gtol, max_iter=opts.max_inner, memory=opts.memory,
                               max_step=problem.max_step, precond=problem.precond)
        z = res.x
        iters += res.iterations
        evals += res.evaluations
    return z, res, iters, evals


def _gradient_scale(a, b, action0, n):
    span = max(float(np.max(np.abs(b - a))), 1e-300)
    return max(action0, 1e-300) / ((n + 1) * span)


def singular_pins(X, p, mobility, rule, quadrature, free_rows):
    """Entries of the first free node forced to stay put by a degenerate fixed start.

    With left-node quadrature the first interval is evaluated at the fixed
    node X[0]; wherever theta(R_i(X[0])) = 0 a finite action requires v_i = 0
    on that interval.
    """
    pins = np.zeros((free_rows, X.shape[1]), dtype=bool)
    if quadrature != "left":
        return pins
    R_int = interior_densities(X[0])
    R = np.append(R_int, leader_density(rule, R_int, mobility))
    pins[0] = mobility.theta(R) <= 0
    return pins


def solve_path_problem(X_init, max_density, density, rule, opts, free, gscale, report,
                       endpoint_energy=None, action_weight=1.0):
    """Continuation in the dilation factor, each stage a barrier solve.

    Returns the final node array and the mobility it was optimised for.
    Stage bookkeeping goes into ``report``.
    """
    p = density.p
    stages = lambda_stages(density.mobility, opts)
    z = None
    problem = res = None
    X_cur = X_init
    for j, lam in enumerate(stages):
        mob = _stage_mobility(density.mobility, lam)
        problem = PathProblem(X_cur, max_density, p, mob, rule, opts.quadrature, free,
                              action_weight, endpoint_energy)
        z = problem.pack(X_cur)
        polish_follows = lam != 1.0 and opts.exact_final
        final = j == len(stages) - 1 and not polish_follows
        levels = None if j == 0 else range(max(0, opts.max_outer - 3), opts.max_outer)
        z, res, it, ev = run_barrier(problem, z, opts, gscale, final, levels)
        X_cur = problem.full(z)
        report.iterations += it
        report.evaluations += ev
        report.lambda_schedule.append(lam)
        report.stage_distances.append(
            transcribed_action(X_cur, p, mob, rule, opts.quadrature)[0] ** (1.0 / p))

    if stages[-1] != 1.0 and opts.exact_final:
        mob = density.mobility
        n_free = X_cur[free].shape[0]
        pins = singular_pins(X_cur, p, mob, rule, opts.quadrature, n_free)
        X_try = X_cur.copy()
        row = X_try[free]
        row[0][pins[0]] = X_try[0][pins[0]]
        X_try[free] = row
        polish = PathProblem(X_try, max_density, p, mob, rule, opts.quadrature, free,
                             action_weight, endpoint_energy, pinned=pins)
        polish.mu = opts.final_barrier
        if np.isfinite(polish.objective(X_try)[0]):
            levels = range(max(0, opts.max_outer - 2), opts.max_outer)
            z, res_p, it, ev = run_barrier(polish, polish.pack(X_try), opts, gscale, True, levels)
            report.iterations += it
            report.evaluations += ev
            X_p = polish.full(z)
            A_p = transcribed_action(X_p, p, mob, rule, opts.quadrature)[0]
            if np.isfinite(A_p):
                problem, res, X_cur = polish, res_p, X_p
                report.lambda_schedule.append(1.0)
                report.stage_distances.append(A_p ** (1.0 / p))

    report.final_lambda = report.lambda_schedule[-1]
    problem.mu = opts.final_barrier
    stat, comp = problem.kkt(X_cur)
    report.kkt_residual = stat / gscale
    report.duality_gap = comp
    # an exact barrier solve at weight mu has duality gap mu * w * (#gaps)
    comp_target = 10 * opts.final_barrier * problem.barrier_w * problem.X[free].shape[0] * problem.n
    report.converged = bool(report.kkt_residual <= opts.tol and comp <= comp_target)
    report.message = res.message if res is not None else ""
    return X_cur, problem.mobility


def solve_geodesic(a: ParticleConfig, b: ParticleConfig, density: ActionDensity,
                   rule: RhoStarRule = RhoStarRule.CONST_ARGMAX_THETA,
                   opts: SolverOptions | None = None) -> GeodesicResult:
    """Locally optimal discrete geodesic between two configurations.

    The straight segment initialises the solve and is returned instead if
    the optimizer cannot beat it. When theta(M) = 0 the problem is first
    solved along dilated mobilities lam * m(rho/lam) with lam decreasing to
    1 + lambda_floor, then (``exact_final``) polished with the original
    mobility; ``solver_report.final_lambda`` says which one the distance uses.
    """
    opts = opts or SolverOptions()
    if a.n != b.n or a.max_density != b.max_density:
        raise ConeViolation("endpoints must lie in the same cone")
    check_cone(a.x, a.max_density)
    check_cone(b.x, b.max_density)
    p, K, n, M = density.p, opts.K, a.n, a.max_density
    straight = ParticlePath.straight(a, b, K)
    report = SolverReport()
    if np.array_equal(a.x, b.x) or K == 1:
        action, profile = transcribed_action(straight.states, p, density.mobility, rule, opts.quadrature)
        report.converged, report.kkt_residual = True, 0.0
        report.message = "identical endpoints" if K > 1 else "no interior nodes"
        report.lambda_schedule, report.used_straight_line = [1.0], True
        return GeodesicResult(straight, action ** (1.0 / p), profile, report, p)

    stages = lambda_stages(density.mobility, opts)
    first_mob = _stage_mobility(density.mobility, stages[0])
    action0 = transcribed_action(straight.states, p, first_mob, rule, opts.quadrature)[0]
    if not np.isfinite(action0):
        action0 = float(np.mean(np.abs(b.x - a.x) ** p)) / density.mobility.theta0 ** (p - 1)
    gscale = _gradient_scale(a.x, b.x, action0, n)

    free = slice(1, K)
    tgrid = np.linspace(0, 1, K + 1)[1:K]
    X0 = push_interior(straight.states, free, M, weights=4 * tgrid * (1 - tgrid))
    X, final_mob = solve_path_problem(X0, M, density, rule, opts, free, gscale, report)

    action, profile = transcribed_action(X, p, final_mob, rule, opts.quadrature)
    sl_action, sl_profile = transcribed_action(straight.states, p, final_mob, rule, opts.quadrature)
    if np.isfinite(sl_action) and sl_action <= action:
        X, action, profile = straight.states, sl_action, sl_profile
        report.used_straight_line = True
        report.converged = True
    path = ParticlePath(X, M)
    result = GeodesicResult(path, action ** (1.0 / p), profile, report, p)
    if opts.strict and not report.converged:
        raise NonConvergence(
            f"KKT residual {report.kkt_residual:.3e} above tol {opts.tol:.1e} ({report.message})",
            result)
    return result


def straight_line_distance(a: ParticleConfig, b: ParticleConfig, density: ActionDensity,
                           rule=RhoStarRule.CONST_ARGMAX_THETA, K: int = 32, quadrature="left") -> float:
    path = ParticlePath.straight(a, b, K)
    return path_action(path, density, rule, quadrature) ** (1.0 / density.p)


def check_constant_speed(result: GeodesicResult, tol: float) -> bool:
    prof = np.asarray(result.action_profile, dtype=float)
    mean = float(np.mean(prof))
    if mean == 0:
        return bool(np.all(prof == 0))
    return bool(np.max(np.abs(prof - mean)) / mean <= tol)


# ---------------------------------------------------------------------------
# comparisons with the continuous action and the classical distance


def continuous_action_of_cell_field(cfg: ParticleConfig, v, density: ActionDensity) -> float:
    """Action of (PC^N(x), j^N) with j^N = v_i R_i on [x_i, x_{i+1}), integrated per cell."""
    v = np.asarray(v, dtype=float)
    R = np.minimum(interior_densities(cfg.x), density.mobility.max_density)
    widths = np.diff(cfg.x)
    vals = density.phi(R, v[:-1] * R)
    with np.errstate(invalid="ignore"):
        cells = np.where(vals == 0, 0.0, widths * vals)
    return float(np.sum(cells))


def action_comparison_pair(cfg: ParticleConfig, v, density: ActionDensity,
                           rule=RhoStarRule.CONST_ARGMAX_THETA):
    """(continuous action, (N+1)/N * discrete action) for one tangent vector."""
    lhs = continuous_action_of_cell_field(cfg, v, density)
    rhs = (cfg.n + 1) / cfg.n * discrete_action(cfg, v, density, rule)
    return lhs, rhs


def action_comparison_check(path: ParticlePath, density: ActionDensity,
                            rule=RhoStarRule.CONST_ARGMAX_THETA, rtol: float = 1e-12) -> bool:
    """Continuous action never exceeds (N+1)/N times the discrete one, at every node."""
    V = path.velocities
    for k in range(path.K):
        cfg = ParticleConfig(path.states[k], path.max_density)
        lhs, rhs = action_comparison_pair(cfg, V[k], density, rule)
        if not lhs <= rhs * (1 + rtol) + 1e-300:
            return False
    return True


def distance_lower_bound(a: ParticleConfig, b: ParticleConfig, density: ActionDensity) -> float:
    """W_p(E(a), E(b)) / sup(theta)^((p-1)/p), a lower bound for d^N."""
    p = density.p
    wp = wasserstein_p(embed_empirical(a), embed_empirical(b), p)
    return wp / density.mobility.sup_theta ** ((p - 1) / p)


def distance_lower_bound_check(a: ParticleConfig, b: ParticleConfig, density: ActionDensity,
                               rule=RhoStarRule.CONST_ARGMAX_THETA, opts: SolverOptions | None = None,
                               tol: float = 1e-8, result: GeodesicResult | None = None) -> bool:
    if result is None:
        result = solve_geodesic(a, b, density, rule, opts)
    p = density.p
    return bool(result.distance ** p >= distance_lower_bound(a, b, density) ** p - tol)


# ---------------------------------------------------------------------------
# embedded pseudo-distances


def _decode(mu: Measure1D, max_density: float, rtol: float = 1e-10):
    """Preimage under E^N or PC^N, or None if mu is not in either image."""
    if isinstance(mu, Uniform):
        mu = PiecewiseConstant([mu.a, mu.b], [1.0 / (mu.b - mu.a)])
    if isinstance(mu, Empirical):
        if mu.size < 2:
            return None
        x = mu.values
        kind = "empirical"
    elif isinstance(mu, PiecewiseConstant):
        x = mu.breaks
        n = x.size - 1
        if not np.allclose(mu.cell_masses, 1.0 / n, rtol=rtol, atol=0):
            return None
        kind = "piecewise"
    else:
        return None
    try:
        return kind, ParticleConfig(x, max_density)
    except ConeViolation:
        return None


def embedded_distance(mu0: Measure1D, mu1: Measure1D, density: ActionDensity,
                      rule=RhoStarRule.CONST_ARGMAX_THETA, opts: SolverOptions | None = None) -> float:
    """d^N between preimages when both measures are images of the same embedding, else +inf."""
    M = density.mobility.max_density
    d0, d1 = _decode(mu0, M), _decode(mu1, M)
    if d0 is None or d1 is None or d0[0] != d1[0] or d0[1].n != d1[1].n:
        return np.inf
    return solve_geodesic(d0[1], d1[1], density, rule, opts).distance
