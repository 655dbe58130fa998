"""Follow-The-Leader particle scheme for scalar conservation laws.

Particle j moves with the Eulerian velocity v evaluated at its reconstructed
density R_j = 1/(N (x_{j+1} - x_j)); the last particle uses the leader rule.
An exact Riemann solver for the traffic flux serves as the reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cone import ARGMAX_DELTA, ARGMAX_GRID, ParticleConfig, RhoStarRule, _abs_power_integral
from .errors import ConeViolation, ConfigError, DomainError, StepFailure
from .measures import PiecewiseConstant


class VelocityLaw:
    kind = "abstract"
    max_density: float

    def v(self, rho):
        raise NotImplementedError

    def dv(self, rho):
        raise NotImplementedError

    def argmax(self) -> float:
        """Smallest grid maximiser of v on [0, (1-delta) M]."""
        rho = np.linspace(0.0, (1 - ARGMAX_DELTA) * self.max_density, ARGMAX_GRID)
        vals = self.v(rho)
        return float(rho[np.argmax(vals >= vals.max() - 1e-12)])

    def flux(self, rho):
        return np.asarray(rho, dtype=float) * self.v(rho)


@dataclass(frozen=True)
class Traffic(VelocityLaw):
    """v(rho) = 1 - rho/M, flux rho (1 - rho/M)."""

    max_density: float = 1.0
    kind = "traffic"

    def __post_init__(self):
        if not self.max_density > 0:
            raise DomainError("max density must be positive")

    def v(self, rho):
        return 1.0 - np.asarray(rho, dtype=float) / self.max_density

    def dv(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), -1.0 / self.max_density)


class CustomVelocity(VelocityLaw):
    """Tabulated velocity, linearly interpolated and held constant beyond the table."""

    kind = "custom"

    def __init__(self, rho, v):
        rho = np.asarray(rho, dtype=float)
        v = np.asarray(v, dtype=float)
        if rho.ndim != 1 or rho.shape != v.shape or rho.size < 2 or rho[0] != 0:
            raise DomainError("table must start at rho = 0 with matching v samples")
        if np.any(np.diff(rho) <= 0) or not np.all(np.isfinite(v)):
            raise DomainError("rho must increase strictly and v must be finite")
        self._rho, self._v = rho, v
        self._slopes = np.concatenate([np.diff(v) / np.diff(rho), [0.0]])
        self.max_density = float(rho[-1])

    def v(self, rho):
        return np.interp(np.asarray(rho, dtype=float), self._rho, self._v)

    def dv(self, rho):
        idx = np.clip(np.searchsorted(self._rho, rho, side="right") - 1, 0, self._slopes.size - 1)
        return self._slopes[idx]


def law_from_spec(spec: dict) -> VelocityLaw:
    if not isinstance(spec, dict):
        raise ConfigError("law", "expected an object")
    kind = spec.get("kind", "traffic")
    try:
        if kind == "traffic":
            return Traffic(float(spec.get("M", 1.0)))
        if kind == "custom":
            return CustomVelocity(spec["rho"], spec["v"])
    except KeyError as exc:
        raise ConfigError(f"law.{exc.args[0]}", "missing field") from exc
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError("law", str(exc)) from exc
    raise ConfigError("law.kind", f"unknown velocity law {kind!r}")


@dataclass(frozen=True)
class FtlState:
    t: float
    cfg: ParticleConfig


def _check_ordered(x):
    if not np.all(np.diff(x) > 0):
        raise ConeViolation("particles must be strictly ordered")


def _rhs(x, law, rule, leader_v):
    n = x.size - 1
    R = 1.0 / (n * np.diff(x))
    out = np.empty_like(x)
    out[:-1] = law.v(R)
    out[-1] = law.v(R[-1]) if rule is RhoStarRule.LOOK_BACK else leader_v
    return out


def ftl_rhs(state: FtlState, law: VelocityLaw, rule=RhoStarRule.CONST_ARGMAX_THETA) -> np.ndarray:
    """dx_j/dt = v(R_j); the leader moves at v(argmax v) or v(R_{N-1})."""
    x = state.cfg.x
    _check_ordered(x)
    rule = RhoStarRule(rule)
    return _rhs(x, law, rule, float(law.v(np.array([law.argmax()]))[0]))


def ftl_integrate(init: FtlState, law: VelocityLaw, rule=RhoStarRule.CONST_ARGMAX_THETA,
                  t_end: float = 1.0, dt: float = 1e-2) -> list:
    """Classical RK4; a step whose stages or result lose strict ordering is halved.

    After an accepted step the step size grows back towards ``dt``. The last
    step is shortened to land on ``t_end`` exactly.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    rule = RhoStarRule(rule)
    x = np.array(init.cfg.x, dtype=float)
    _check_ordered(x)
    M = init.cfg.max_density
    lead = float(law.v(np.array([law.argmax()]))[0])
    t = float(init.t)
    t_end = float(t_end)
    out = [FtlState(t, ParticleConfig(x, M, validate=False))]
    h = dt
    min_h = 1e-12 * max(abs(t_end), 1e-300)

    def f(y):
        if not np.all(np.diff(y) > 0):
            return None
        return _rhs(y, law, rule, lead)

    while t < t_end:
        step = min(h, t_end - t)
        while True:
            k1 = f(x)
            k2 = f(x + 0.5 * step * k1)
            k3 = f(x + 0.5 * step * k2) if k2 is not None else None
            k4 = f(x + step * k3) if k3 is not None else None
            if k4 is not None:
                x_new = x + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                if np.all(np.diff(x_new) > 0):
                    break
            step *= 0.5
            if step < min_h:
                raise StepFailure(f"step size underflow at t={t:.6g}")
        x = x_new
        t = t_end if t_end - (t + step) <= 1e-14 * max(1.0, abs(t_end)) else t + step
        out.append(FtlState(t, ParticleConfig(x.copy(), M, validate=False)))
        h = min(dt, 2 * step)
    return out


# ---------------------------------------------------------------------------
# exact Riemann solutions for the traffic flux


def riemann_solution(rho_L: float, rho_R: float, M: float = 1.0):
    """Entropy solution rho(x, t) of rho_t + (rho (1 - rho/M))_x = 0 with a jump at 0.

    Returns ``(rho, breakpoints)`` where ``rho(x, t)`` is vectorised and
    ``breakpoints(t)`` lists the positions where the solution is not affine.
    """
    for r in (rho_L, rho_R):
        if not 0 <= r <= M:
            raise DomainError("Riemann states must lie in [0, M]")
    fp = lambda r: 1.0 - 2.0 * r / M  # noqa: E731
    if rho_L > rho_R:
        sL, sR = fp(rho_L), fp(rho_R)

        def rho(x, t):
            x = np.asarray(x, dtype=float)
            if t <= 0:
                return np.where(x < 0, rho_L, rho_R)
            xi = x / t
            fan = 0.5 * M * (1.0 - xi)
            return np.where(xi <= sL, rho_L, np.where(xi >= sR, rho_R, fan))

        return rho, lambda t: [sL * t, sR * t]
    # shock (or constant state) with Rankine-Hugoniot speed
    s = 1.0 - (rho_L + rho_R) / M

    def rho(x, t):
        x = np.asarray(x, dtype=float)
        return np.where(x < s * t, rho_L, rho_R)

    return rho, lambda t: [s * t]


def riemann_window(rho_L: float, rho_R: float) -> float:
    """Half-width L of [-L, L] carrying unit mass of the Riemann data."""
    total = rho_L + rho_R
    if not total > 0:
        raise DomainError("Riemann data must have positive density somewhere")
    return 1.0 / total


def riemann_particles(rho_L: float, rho_R: float, N: int, M: float = 1.0) -> ParticleConfig:
    """X(j/N) of the unit-mass windowed Riemann data, endpoints included."""
    L = riemann_window(rho_L, rho_R)
    mu = PiecewiseConstant([-L, 0.0, L], [rho_L, rho_R])
    z = np.arange(N + 1) / N
    return ParticleConfig(mu.quantile(z), M)


def _l1_piecewise_vs_exact(x, R, rho, kinks, t, lo, hi):
    """Exact L^1 distance on [lo, hi] between PC (density R on [x_i, x_{i+1}], 0 outside)
    and an exact solution that is affine between ``kinks``."""
    pts = np.union1d(np.concatenate([x, kinks, [lo, hi]]), [])
    pts = pts[(pts >= lo) & (pts <= hi)]
    a, b = pts[:-1], pts[1:]
    mid = 0.5 * (a + b)
    k = np.searchsorted(x, mid, side="right") - 1
    inside = (k >= 0) & (k < R.size)
    h = np.where(inside, R[np.clip(k, 0, R.size - 1)], 0.0)
    # evaluate the exact solution just inside each piece so jumps sit on the edges
    w = b - a
    ea = rho(a + 1e-12 * w, t)
    eb = rho(b - 1e-12 * w, t)
    return float(np.sum(_abs_power_integral(h - ea, h - eb, w, 1.0)))


@dataclass
class FtlComparison:
    error: float
    window: tuple
    states: list


def ftl_vs_entropy(riemann, law: Traffic, N: int, t: float, rule=RhoStarRule.CONST_ARGMAX_THETA,
                   dt: float | None = None, detail: bool = False):
    """Windowed L^1 distance at time t between PC^N of the FTL flow and the entropy solution.

    Initial particles sample the Riemann data restricted to [-L, L] (unit
    mass); the comparison interval [-L + t, L - t] removes everything the
    window edges can influence, since all wave speeds lie in [-1, 1].
    """
    rho_L, rho_R = riemann
    M = law.max_density
    if not (0 <= rho_L <= M and 0 <= rho_R <= M):
        raise DomainError("Riemann states must lie in [0, M]")
    L = riemann_window(rho_L, rho_R)
    lo, hi = -L + t, L - t
    if not lo < hi:
        raise DomainError("time too large for the unit-mass window")
    cfg = riemann_particles(rho_L, rho_R, N, M)
    dt = 0.1 / N if dt is None else dt
    states = ftl_integrate(FtlState(0.0, cfg), law, rule, t, dt)
    x = states[-1].cfg.x
    R = 1.0 / (N * np.diff(x))
    rho, kinks = riemann_solution(rho_L, rho_R, M)
    err = _l1_piecewise_vs_exact(x, R, rho, np.asarray(kinks(t)), t, lo, hi)
    if detail:
        return FtlComparison(err, (lo, hi), states)
    return err


def entropy_profiles(riemann, law: Traffic, N: int, t: float, rule=RhoStarRule.CONST_ARGMAX_THETA,
                     points: int = 401, dt: float | None = None):
    """Columns (x, rho_exact, rho_ftl) on a uniform grid of the comparison window."""
    comp = ftl_vs_entropy(riemann, law, N, t, rule, dt, detail=True)
    lo, hi = comp.window
    xs = np.linspace(lo, hi, points)
    x = comp.states[-1].cfg.x
    R = 1.0 / (N * np.diff(x))
    k = np.searchsorted(x, xs, side="right") - 1
    inside = (k >= 0) & (k < R.size)
    ftl = np.where(inside, R[np.clip(k, 0, R.size - 1)], 0.0)
    rho, _ = riemann_solution(riemann[0], riemann[1], law.max_density)
    return xs, rho(xs, t), ftl
